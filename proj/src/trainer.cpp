#include "qallm/trainer.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <random>

#include "parallel.h"
#include "qallm/corpus_io.h"
#include "qallm/error.h"
#include "util.h"

namespace qallm {

namespace {

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
    detail::Fnv1a h;
    h.add_u64(seed);
    h.add_u64(a);
    h.add_u64(b);
    return h.value();
}

template <class V>
void set_key(const nlohmann::json& j, const char* key, V& out) {
    try {
        out = j.get<V>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(std::string("config key '") + key + "' has the wrong type");
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void TrainConfig::validate() const {
    if (!(lr_min >= 0.0) || !(lr_min <= lr_max)) throw ConfigError("need 0 <= lr_min <= lr_max");
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
    if (!(tau > 0.0)) throw ConfigError("tau must be positive");
    if (k_clusters < 1) throw ConfigError("k_clusters must be at least 1");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be non-negative");
    if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must be in [0, 1)");
    try {
        model_config().validate();
    } catch (const ShapeError& e) {
        throw ConfigError(e.what());
    }
}

ModelConfig TrainConfig::model_config() const {
    ModelConfig m;
    m.d_model = d_model;
    m.n_layers = n_layers;
    m.n_heads = n_heads;
    m.ffn_hidden = ffn_hidden;
    m.rank = rank;
    m.proj_dim = proj_dim;
    m.max_len = max_len;
    m.dropout = dropout;
    m.single_tower = flags.single_tower_ft;
    m.querier_tag = !flags.single_tower_ft;
    return m;
}

nlohmann::json to_json(const TrainConfig& c) {
    return {{"lr_max", c.lr_max},
            {"lr_min", c.lr_min},
            {"batch_size", c.batch_size},
            {"epochs", c.epochs},
            {"max_len", c.max_len},
            {"lambda", c.lambda},
            {"tau", c.tau},
            {"k_clusters", c.k_clusters},
            {"seed", c.seed},
            {"no_qcl", c.flags.no_qcl},
            {"no_ccl", c.flags.no_ccl},
            {"single_tower_ft", c.flags.single_tower_ft},
            {"freeze_general", c.flags.freeze_general},
            {"weight_decay", c.weight_decay},
            {"grad_clip", c.grad_clip},
            {"max_steps", c.max_steps},
            {"dropout", c.dropout},
            {"d_model", c.d_model},
            {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},
            {"ffn_hidden", c.ffn_hidden},
            {"rank", c.rank},
            {"proj_dim", c.proj_dim}};
}

TrainConfig merge_train_config(TrainConfig c, const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("training config must be a JSON object");
    for (const auto& [key, v] : j.items()) {
        const char* k = key.c_str();
        if (key == "lr_max") set_key(v, k, c.lr_max);
        else if (key == "lr_min") set_key(v, k, c.lr_min);
        else if (key == "batch_size") set_key(v, k, c.batch_size);
        else if (key == "epochs") set_key(v, k, c.epochs);
        else if (key == "max_len") set_key(v, k, c.max_len);
        else if (key == "lambda") set_key(v, k, c.lambda);
        else if (key == "tau") set_key(v, k, c.tau);
        else if (key == "k_clusters") set_key(v, k, c.k_clusters);
        else if (key == "seed") set_key(v, k, c.seed);
        else if (key == "no_qcl") set_key(v, k, c.flags.no_qcl);
        else if (key == "no_ccl") set_key(v, k, c.flags.no_ccl);
        else if (key == "single_tower_ft") set_key(v, k, c.flags.single_tower_ft);
        else if (key == "freeze_general") set_key(v, k, c.flags.freeze_general);
        else if (key == "weight_decay") set_key(v, k, c.weight_decay);
        else if (key == "grad_clip") set_key(v, k, c.grad_clip);
        else if (key == "max_steps") set_key(v, k, c.max_steps);
        else if (key == "dropout") set_key(v, k, c.dropout);
        else if (key == "d_model") set_key(v, k, c.d_model);
        else if (key == "n_layers") set_key(v, k, c.n_layers);
        else if (key == "n_heads") set_key(v, k, c.n_heads);
        else if (key == "ffn_hidden") set_key(v, k, c.ffn_hidden);
        else if (key == "rank") set_key(v, k, c.rank);
        else if (key == "proj_dim") set_key(v, k, c.proj_dim);
        else throw ConfigError("unknown training config key '" + key + "'");
    }
    c.validate();
    return c;
}

TrainConfig train_config_from_json(const nlohmann::json& j) { return merge_train_config({}, j); }

// ---------------------------------------------------------------------------
// Batching

std::vector<Batch> make_batches(const std::vector<int>& cluster_of, std::size_t batch_size,
                                std::uint64_t seed, bool no_ccl) {
    if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
    std::mt19937_64 rng(seed);
    std::map<int, std::vector<std::size_t>> groups;
    for (std::size_t i = 0; i < cluster_of.size(); ++i) groups[no_ccl ? 0 : cluster_of[i]].push_back(i);

    std::vector<Batch> batches;
    for (auto& [id, members] : groups) {
        std::shuffle(members.begin(), members.end(), rng);
        for (std::size_t s = 0; s < members.size(); s += batch_size) {
            auto e = std::min(members.size(), s + batch_size);
            batches.emplace_back(members.begin() + static_cast<std::ptrdiff_t>(s),
                                 members.begin() + static_cast<std::ptrdiff_t>(e));
        }
    }
    if (!no_ccl) std::shuffle(batches.begin(), batches.end(), rng);
    return batches;
}

double lr_at(std::size_t step, std::size_t total_steps, double lr_max, double lr_min) {
    if (total_steps == 0) return lr_max;
    double t = static_cast<double>(std::min(step, total_steps)) / static_cast<double>(total_steps);
    return lr_max + (lr_min - lr_max) * t;
}

// ---------------------------------------------------------------------------
// Per-dialogue loss

template <class T>
DialogueLoss<T> dialogue_loss(const ModelConfig& cfg, const Params<T>& p, const EncodedDialogue& e,
                              const QcInputs* qc, LossWeights w, const ForwardOptions& fwd,
                              Params<T>* grads, T scale) {
    ForwardOptions f = fwd;
    f.pool_mask = e.loss_mask;
    ForwardCache<T> cache;
    auto out = forward(cfg, p, e.tokens, f, grads ? &cache : nullptr);

    DialogueLoss<T> r;
    Mat<T> d_logits;
    r.lm = lm_loss(out.fused_logits, e.tokens, e.loss_mask, grads ? &d_logits : nullptr);
    ContrastiveResult<T> c;
    if (!cfg.single_tower) {
        r.z_v1 = project(p, 1, out.pooled_specific);
        r.z_v2 = project(p, 2, out.pooled_specific);
        if (qc != nullptr) {
            c = qc->multiview ? qc_loss_multiview(r.z_v1, r.z_v2, *qc->table, qc->querier_id,
                                                  qc->negatives, qc->tau)
                              : qc_loss(r.z_v1, *qc->table, qc->querier_id, qc->negatives, qc->tau, 1);
            r.qc = c.loss;
            r.m_effective = c.m_effective;
            r.has_qc = true;
        }
    }
    if (grads == nullptr) return r;

    d_logits *= scale * static_cast<T>(w.lm);
    if (!r.has_qc) {
        backward(cfg, p, cache, d_logits, static_cast<const RowVec<T>*>(nullptr), *grads);
        return r;
    }
    const T k = scale * static_cast<T>(w.qc);
    RowVec<T> d_pooled = RowVec<T>::Zero(out.pooled_specific.size());
    if (c.dz_v1.size() > 0) {
        RowVec<T> dz = c.dz_v1 * k;
        grads->proj_v1 += dz.transpose() * out.pooled_specific;
        d_pooled += dz * p.proj_v1;
    }
    if (c.dz_v2.size() > 0) {
        RowVec<T> dz = c.dz_v2 * k;
        grads->proj_v2 += dz.transpose() * out.pooled_specific;
        d_pooled += dz * p.proj_v2;
    }
    backward(cfg, p, cache, d_logits, &d_pooled, *grads);
    return r;
}

template DialogueLoss<float> dialogue_loss<float>(const ModelConfig&, const Params<float>&,
                                                  const EncodedDialogue&, const QcInputs*,
                                                  LossWeights, const ForwardOptions&,
                                                  Params<float>*, float);
template DialogueLoss<double> dialogue_loss<double>(const ModelConfig&, const Params<double>&,
                                                    const EncodedDialogue&, const QcInputs*,
                                                    LossWeights, const ForwardOptions&,
                                                    Params<double>*, double);

RowVec<float> dialogue_representation(const Model& m, const Dialogue& d) {
    if (m.config.single_tower) throw ConfigError("single-tower model has no specific tower");
    auto e = encode_dialogue(d, Tokenizer{}, m.config.encode_options());
    ForwardOptions f;
    f.pool_mask = e.loss_mask;
    return forward(m.config, m.params, e.tokens, f).pooled_specific;
}

// ---------------------------------------------------------------------------
// Optimiser

AdamW::AdamW(const ModelConfig& cfg, double beta1, double beta2, double eps)
    : m_(Params<float>::zeros(cfg)), v_(Params<float>::zeros(cfg)), b1_(beta1), b2_(beta2), eps_(eps) {}

void AdamW::step(Params<float>& p, const Params<float>& g, double lr, double weight_decay,
                 const std::function<bool(ParamGroup)>& skip) {
    ++t_;
    const float b1 = static_cast<float>(b1_), b2 = static_cast<float>(b2_);
    const float bc1 = static_cast<float>(1.0 - std::pow(b1_, static_cast<double>(t_)));
    const float bc2 = static_cast<float>(1.0 - std::pow(b2_, static_cast<double>(t_)));
    const float flr = static_cast<float>(lr), eps = static_cast<float>(eps_);
    auto pt = p.tensors();
    auto gt = g.tensors();
    auto mt = m_.tensors();
    auto vt = v_.tensors();
    for (std::size_t i = 0; i < pt.size(); ++i) {
        if (skip && skip(pt[i].group)) continue;
        auto& w = *pt[i].value;
        const auto& gr = *gt[i].value;
        auto& m = *mt[i].value;
        auto& v = *vt[i].value;
        // Gains, biases and other single-row tensors are not decayed.
        const float wd = w.rows() == 1 ? 0.0f : static_cast<float>(weight_decay);
        m.array() = b1 * m.array() + (1.0f - b1) * gr.array();
        v.array() = b2 * v.array() + (1.0f - b2) * gr.array().square();
        w.array() -= flr * ((m.array() / bc1) / ((v.array() / bc2).sqrt() + eps) + wd * w.array());
    }
}

double grad_norm(const Params<float>& g, const std::function<bool(ParamGroup)>& skip) {
    double s = 0.0;
    for (const auto& t : g.tensors()) {
        if (skip && skip(t.group)) continue;
        s += t.value->template cast<double>().squaredNorm();
    }
    return std::sqrt(s);
}

// ---------------------------------------------------------------------------
// Training loop

std::string TrainLog::steps_csv() const {
    std::string out = "step,lm,qc,total,mi_bound,lr\n";
    char buf[256];
    for (const auto& s : steps) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,%.9g\n", s.step, s.lm, s.qc, s.total,
                      s.mi_bound, s.lr);
        out += buf;
    }
    return out;
}

TrainResult train(const std::vector<Dialogue>& dialogues, const ClusterIndex* index,
                  const TrainConfig& config, const TrainOptions& options) {
    config.validate();
    const auto& flags = config.flags;
    const ModelConfig cfg = config.model_config();
    const bool use_qc = !flags.no_qcl && !flags.single_tower_ft;
    const bool cluster_restricted = !flags.no_ccl;

    TrainResult res;
    res.model.config = cfg;
    if (options.initial) {
        check_shapes(cfg, *options.initial);
        res.model.params = *options.initial;
    } else {
        res.model.params = Params<float>::init(cfg, config.seed);
    }
    auto& params = res.model.params;

    Tokenizer tk;
    const auto enc_opts = cfg.encode_options();
    std::vector<const Dialogue*> train_set;
    std::vector<EncodedDialogue> train_enc, test_enc;
    for (const auto& d : dialogues) {
        if (d.split == Split::test) {
            test_enc.push_back(encode_dialogue(d, tk, enc_opts));
        } else if (d.split == Split::train) {
            train_set.push_back(&d);
            train_enc.push_back(encode_dialogue(d, tk, enc_opts));
        }
    }
    if (train_set.empty()) throw ConfigError("corpus has no training dialogues");

    std::vector<int> cluster_of(train_set.size(), 0);
    std::map<int, std::set<std::string>> cluster_queriers;
    std::set<std::string> all_queriers;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
        const auto& d = *train_set[i];
        all_queriers.insert(d.querier_id);
        if (!cluster_restricted) continue;
        if (d.cluster_id) {
            cluster_of[i] = *d.cluster_id;
        } else if (index != nullptr && index->assignments.count(d.id)) {
            cluster_of[i] = index->assignments.at(d.id);
        } else {
            throw ConfigError("dialogue " + d.id + " has no cluster; run clustering or use no_ccl");
        }
        cluster_queriers[cluster_of[i]].insert(d.querier_id);
    }

    auto forward_z = [&](std::size_t i) {
        ForwardOptions f;
        auto r = dialogue_loss<float>(cfg, params, train_enc[i], nullptr, {}, f, nullptr);
        return std::make_pair(r.z_v1, r.z_v2);
    };
    auto to_vec = [](const RowVec<float>& v) {
        std::vector<double> out(static_cast<std::size_t>(v.size()));
        for (Eigen::Index k = 0; k < v.size(); ++k) out[static_cast<std::size_t>(k)] = v(k);
        return out;
    };

    if (use_qc) {
        std::vector<std::pair<RowVec<float>, RowVec<float>>> zs(train_set.size());
        detail::parallel_for(train_set.size(), options.workers,
                             [&](std::size_t i) { zs[i] = forward_z(i); });
        for (std::size_t i = 0; i < train_set.size(); ++i) {
            res.table.update(train_set[i]->querier_id, to_vec(zs[i].first), to_vec(zs[i].second));
        }
    }

    const std::size_t per_epoch = make_batches(cluster_of, config.batch_size, 0, !cluster_restricted).size();
    std::size_t total_steps = per_epoch * config.epochs;
    if (config.max_steps > 0) total_steps = std::min(total_steps, config.max_steps);

    std::function<bool(ParamGroup)> skip;
    if (flags.freeze_general) {
        skip = [](ParamGroup g) { return is_general(g); };
    } else if (cfg.single_tower) {
        skip = [](ParamGroup g) { return !is_general(g); };
    }

    AdamW opt(cfg);
    Params<float> grads = Params<float>::zeros(cfg);
    std::size_t step = 0;

    auto save_params = [&](const Params<float>& p) {
        if (!options.checkpoint_dir) return;
        TrainResult snapshot{Model{cfg, p}, res.table, res.log};
        save_training_run(snapshot, config, *options.checkpoint_dir);
    };

    for (std::size_t epoch = 0; epoch < config.epochs && step < total_steps; ++epoch) {
        auto batches = make_batches(cluster_of, config.batch_size, mix_seed(config.seed, epoch + 1),
                                    !cluster_restricted);
        for (const auto& batch : batches) {
            if (step >= total_steps) break;
            const std::size_t n = batch.size();
            const float scale = 1.0f / static_cast<float>(n);
            std::vector<Params<float>> item_grads(n);
            std::vector<DialogueLoss<float>> item_loss(n);
            detail::parallel_for(n, options.workers, [&](std::size_t b) {
                const std::size_t i = batch[b];
                const auto& d = *train_set[i];
                std::mt19937_64 rng(mix_seed(config.seed, step, b));
                ForwardOptions f;
                f.training = true;
                f.rng = &rng;
                QcInputs qc;
                bool with_qc = use_qc && res.table.contains(d.querier_id);
                if (with_qc) {
                    qc.table = &res.table;
                    qc.querier_id = d.querier_id;
                    qc.tau = config.tau;
                    const auto& pool = cluster_restricted ? cluster_queriers.at(cluster_of[i]) : all_queriers;
                    for (const auto& q : pool) {
                        if (q != d.querier_id && res.table.contains(q)) qc.negatives.insert(q);
                    }
                }
                item_grads[b] = Params<float>::zeros(cfg);
                item_loss[b] = dialogue_loss<float>(cfg, params, train_enc[i], with_qc ? &qc : nullptr,
                                                    {1.0, config.lambda}, f, &item_grads[b], scale);
            });

            grads.set_zero();
            StepRecord rec;
            rec.step = step;
            rec.lr = lr_at(step, total_steps, config.lr_max, config.lr_min);
            std::size_t m_min = 0;
            for (std::size_t b = 0; b < n; ++b) {
                auto gt = grads.tensors();
                auto it = item_grads[b].tensors();
                for (std::size_t t = 0; t < gt.size(); ++t) *gt[t].value += *it[t].value;
                rec.lm += item_loss[b].lm;
                rec.qc += item_loss[b].qc;
                if (item_loss[b].has_qc) {
                    m_min = m_min == 0 ? item_loss[b].m_effective
                                       : std::min(m_min, item_loss[b].m_effective);
                }
            }
            rec.lm /= static_cast<double>(n);
            rec.qc /= static_cast<double>(n);
            rec.m_effective = m_min == 0 ? 1 : m_min;
            rec.total = total_loss(rec.lm, rec.qc, config.lambda, rec.m_effective).total;
            rec.mi_bound = mi_lower_bound(rec.qc, rec.m_effective);

            if (!std::isfinite(rec.total)) {
                save_params(params);
                throw NonFiniteLoss("non-finite loss at step " + std::to_string(step));
            }

            double norm = grad_norm(grads, skip);
            if (!std::isfinite(norm)) {
                save_params(params);
                throw NonFiniteLoss("non-finite gradient at step " + std::to_string(step));
            }
            if (norm > config.grad_clip) {
                const float k = static_cast<float>(config.grad_clip / norm);
                for (auto& t : grads.tensors()) *t.value *= k;
            }
            opt.step(params, grads, rec.lr, config.weight_decay, skip);

            if (use_qc) {
                for (std::size_t b = 0; b < n; ++b) {
                    res.table.update(train_set[batch[b]]->querier_id, to_vec(item_loss[b].z_v1),
                                     to_vec(item_loss[b].z_v2));
                }
            }
            res.log.steps.push_back(rec);
            if (options.on_step) options.on_step(rec);
            ++step;
        }

        EpochRecord er;
        er.epoch = epoch;
        if (!test_enc.empty()) {
            std::vector<double> losses(test_enc.size());
            detail::parallel_for(test_enc.size(), options.workers, [&](std::size_t i) {
                ForwardOptions f;
                losses[i] = dialogue_loss<float>(cfg, params, test_enc[i], nullptr, {}, f, nullptr).lm;
            });
            double s = 0.0;
            for (double l : losses) s += l;
            er.heldout_lm = s / static_cast<double>(losses.size());
        }
        res.log.epochs.push_back(er);
        save_params(params);
    }
    return res;
}

void save_training_run(const TrainResult& r, const TrainConfig& config, const std::string& dir) {
    save_checkpoint(r.model, dir);
    namespace fs = std::filesystem;
    write_text_file(fs::path(dir) / "global_repr.json", r.table.to_json().dump(2) + "\n");
    write_text_file(fs::path(dir) / "config.json", to_json(config).dump(2) + "\n");
    write_text_file(fs::path(dir) / "train_log.csv", r.log.steps_csv());
}

}  // namespace qallm
