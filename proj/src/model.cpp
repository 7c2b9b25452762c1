#include "qallm/model.h"

#include <cmath>

#include "qallm/error.h"

namespace qallm {

namespace {

constexpr double kLnEps = 1e-5;

template <class T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void ModelConfig::validate() const {
    if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
        throw ShapeError("d_model must be a positive multiple of n_heads");
    }
    if (n_layers == 0) throw ShapeError("n_layers must be positive");
    if (rank == 0 || rank >= d_model) throw ShapeError("rank must lie in [1, d_model)");
    if (ffn_hidden == 0 || proj_dim == 0) throw ShapeError("ffn_hidden and proj_dim must be positive");
    if (vocab_size < static_cast<std::size_t>(tok::kVocabSize)) {
        throw ShapeError("vocab_size must cover the byte tokenizer");
    }
    if (max_len < 2) throw ShapeError("max_len must be at least 2");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ShapeError("dropout must lie in [0, 1)");
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"d_model", c.d_model},       {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},       {"ffn_hidden", c.ffn_hidden},
            {"rank", c.rank},             {"proj_dim", c.proj_dim},
            {"vocab_size", c.vocab_size}, {"max_len", c.max_len},
            {"dropout", c.dropout},       {"single_tower", c.single_tower},
            {"querier_tag", c.querier_tag}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    try {
        ModelConfig c;
        c.d_model = j.at("d_model").get<std::size_t>();
        c.n_layers = j.at("n_layers").get<std::size_t>();
        c.n_heads = j.at("n_heads").get<std::size_t>();
        c.ffn_hidden = j.at("ffn_hidden").get<std::size_t>();
        c.rank = j.at("rank").get<std::size_t>();
        c.proj_dim = j.at("proj_dim").get<std::size_t>();
        c.vocab_size = j.at("vocab_size").get<std::size_t>();
        c.max_len = j.at("max_len").get<std::size_t>();
        c.dropout = j.at("dropout").get<double>();
        c.single_tower = j.at("single_tower").get<bool>();
        c.querier_tag = j.at("querier_tag").get<bool>();
        c.validate();
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ManifestMismatch(std::string("bad model config: ") + e.what());
    }
}

const char* to_string(ParamGroup g) {
    switch (g) {
        case ParamGroup::embedding: return "embedding";
        case ParamGroup::attention: return "attention";
        case ParamGroup::general_norm: return "general_norm";
        case ParamGroup::general_ffn: return "general_ffn";
        case ParamGroup::final_norm: return "final_norm";
        case ParamGroup::lm_head: return "lm_head";
        case ParamGroup::specific_norm: return "specific_norm";
        case ParamGroup::specific_lowrank: return "specific_lowrank";
        case ParamGroup::projection: return "projection";
    }
    return "?";
}

bool is_general(ParamGroup g) {
    switch (g) {
        case ParamGroup::embedding:
        case ParamGroup::attention:
        case ParamGroup::general_norm:
        case ParamGroup::general_ffn:
        case ParamGroup::final_norm:
        case ParamGroup::lm_head: return true;
        default: return false;
    }
}

std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> expected_shapes(
    const ModelConfig& cfg) {
    const std::size_t d = cfg.d_model, f = cfg.ffn_hidden, r = cfg.rank, v = cfg.vocab_size;
    std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> out;
    out.push_back({"tok_emb", {v, d}});
    out.push_back({"pos_emb", {cfg.max_len, d}});
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) out.push_back({pre + w, {d, d}});
        for (const char* w : {"general.ln1_g", "general.ln1_b", "general.ln2_g", "general.ln2_b"}) {
            out.push_back({pre + w, {1, d}});
        }
        out.push_back({pre + "general.w1", {d, f}});
        out.push_back({pre + "general.b1", {1, f}});
        out.push_back({pre + "general.w2", {f, d}});
        out.push_back({pre + "general.b2", {1, d}});
        for (const char* w : {"specific.ln1_g", "specific.ln1_b", "specific.ln2_g", "specific.ln2_b"}) {
            out.push_back({pre + w, {1, d}});
        }
        out.push_back({pre + "specific.w_down", {d, r}});
        out.push_back({pre + "specific.w_up", {r, d}});
    }
    out.push_back({"lnf_g", {1, d}});
    out.push_back({"lnf_b", {1, d}});
    out.push_back({"lm_head", {d, v}});
    out.push_back({"proj_v1", {cfg.proj_dim, d}});
    out.push_back({"proj_v2", {cfg.proj_dim, d}});
    return out;
}

std::size_t specific_ffn_param_count(const ModelConfig& cfg) {
    return cfg.n_layers * 2 * cfg.d_model * cfg.rank;
}

std::size_t dense_ffn_param_count(const ModelConfig& cfg) {
    return cfg.n_layers * (2 * cfg.d_model * cfg.ffn_hidden + cfg.ffn_hidden + cfg.d_model);
}

// ---------------------------------------------------------------------------
// Parameter containers

template <class T>
Params<T> Params<T>::zeros(const ModelConfig& cfg) {
    cfg.validate();
    const auto d = static_cast<Eigen::Index>(cfg.d_model);
    const auto f = static_cast<Eigen::Index>(cfg.ffn_hidden);
    const auto r = static_cast<Eigen::Index>(cfg.rank);
    const auto v = static_cast<Eigen::Index>(cfg.vocab_size);
    Params p;
    p.tok_emb = Mat<T>::Zero(v, d);
    p.pos_emb = Mat<T>::Zero(static_cast<Eigen::Index>(cfg.max_len), d);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        p.attn.push_back({Mat<T>::Zero(d, d), Mat<T>::Zero(d, d), Mat<T>::Zero(d, d),
                          Mat<T>::Zero(d, d)});
        p.general.push_back({Mat<T>::Zero(1, d), Mat<T>::Zero(1, d), Mat<T>::Zero(1, d),
                             Mat<T>::Zero(1, d), Mat<T>::Zero(d, f), Mat<T>::Zero(1, f),
                             Mat<T>::Zero(f, d), Mat<T>::Zero(1, d)});
        p.specific.push_back({Mat<T>::Zero(1, d), Mat<T>::Zero(1, d), Mat<T>::Zero(1, d),
                              Mat<T>::Zero(1, d), Mat<T>::Zero(d, r), Mat<T>::Zero(r, d)});
    }
    p.lnf_g = Mat<T>::Zero(1, d);
    p.lnf_b = Mat<T>::Zero(1, d);
    p.lm_head = Mat<T>::Zero(d, v);
    p.proj_v1 = Mat<T>::Zero(static_cast<Eigen::Index>(cfg.proj_dim), d);
    p.proj_v2 = Mat<T>::Zero(static_cast<Eigen::Index>(cfg.proj_dim), d);
    return p;
}

template <class T>
Params<T> Params<T>::init(const ModelConfig& cfg, std::uint64_t seed) {
    auto p = zeros(cfg);
    std::mt19937_64 rng(seed);
    auto fill = [&](Mat<T>& m, double stddev) {
        std::normal_distribution<double> nd(0.0, stddev);
        for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(nd(rng));
    };
    auto ones = [](Mat<T>& m) { m.setOnes(); };
    const double d = static_cast<double>(cfg.d_model);
    const double residual_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));
    fill(p.tok_emb, 0.02);
    fill(p.pos_emb, 0.02);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        auto& a = p.attn[l];
        fill(a.wq, 1.0 / std::sqrt(d));
        fill(a.wk, 1.0 / std::sqrt(d));
        fill(a.wv, 1.0 / std::sqrt(d));
        fill(a.wo, residual_scale / std::sqrt(d));
        auto& g = p.general[l];
        ones(g.ln1_g);
        ones(g.ln2_g);
        fill(g.w1, 1.0 / std::sqrt(d));
        fill(g.w2, residual_scale / std::sqrt(static_cast<double>(cfg.ffn_hidden)));
        auto& s = p.specific[l];
        ones(s.ln1_g);
        ones(s.ln2_g);
        fill(s.w_down, 1.0 / std::sqrt(d));
        // w_up stays zero: the specific tower starts as an exact no-op.
    }
    ones(p.lnf_g);
    fill(p.lm_head, 1.0 / std::sqrt(d));
    fill(p.proj_v1, 1.0 / std::sqrt(d));
    fill(p.proj_v2, 1.0 / std::sqrt(d));
    return p;
}

namespace {

template <class P, class Out>
void collect(P& p, Out& out) {
    out.push_back({"tok_emb", ParamGroup::embedding, &p.tok_emb});
    out.push_back({"pos_emb", ParamGroup::embedding, &p.pos_emb});
    for (std::size_t l = 0; l < p.attn.size(); ++l) {
        const std::string pre = "layers." + std::to_string(l) + ".";
        auto& a = p.attn[l];
        out.push_back({pre + "attn.wq", ParamGroup::attention, &a.wq});
        out.push_back({pre + "attn.wk", ParamGroup::attention, &a.wk});
        out.push_back({pre + "attn.wv", ParamGroup::attention, &a.wv});
        out.push_back({pre + "attn.wo", ParamGroup::attention, &a.wo});
        auto& g = p.general[l];
        out.push_back({pre + "general.ln1_g", ParamGroup::general_norm, &g.ln1_g});
        out.push_back({pre + "general.ln1_b", ParamGroup::general_norm, &g.ln1_b});
        out.push_back({pre + "general.ln2_g", ParamGroup::general_norm, &g.ln2_g});
        out.push_back({pre + "general.ln2_b", ParamGroup::general_norm, &g.ln2_b});
        out.push_back({pre + "general.w1", ParamGroup::general_ffn, &g.w1});
        out.push_back({pre + "general.b1", ParamGroup::general_ffn, &g.b1});
        out.push_back({pre + "general.w2", ParamGroup::general_ffn, &g.w2});
        out.push_back({pre + "general.b2", ParamGroup::general_ffn, &g.b2});
        auto& s = p.specific[l];
        out.push_back({pre + "specific.ln1_g", ParamGroup::specific_norm, &s.ln1_g});
        out.push_back({pre + "specific.ln1_b", ParamGroup::specific_norm, &s.ln1_b});
        out.push_back({pre + "specific.ln2_g", ParamGroup::specific_norm, &s.ln2_g});
        out.push_back({pre + "specific.ln2_b", ParamGroup::specific_norm, &s.ln2_b});
        out.push_back({pre + "specific.w_down", ParamGroup::specific_lowrank, &s.w_down});
        out.push_back({pre + "specific.w_up", ParamGroup::specific_lowrank, &s.w_up});
    }
    out.push_back({"lnf_g", ParamGroup::final_norm, &p.lnf_g});
    out.push_back({"lnf_b", ParamGroup::final_norm, &p.lnf_b});
    out.push_back({"lm_head", ParamGroup::lm_head, &p.lm_head});
    out.push_back({"proj_v1", ParamGroup::projection, &p.proj_v1});
    out.push_back({"proj_v2", ParamGroup::projection, &p.proj_v2});
}

}  // namespace

template <class T>
std::vector<NamedTensor<T>> Params<T>::tensors() {
    std::vector<NamedTensor<T>> out;
    collect(*this, out);
    return out;
}

template <class T>
std::vector<NamedConstTensor<T>> Params<T>::tensors() const {
    std::vector<NamedConstTensor<T>> out;
    collect(*this, out);
    return out;
}

template <class T>
template <class U>
Params<U> Params<T>::cast() const {
    Params<U> out;
    auto c = [](const Mat<T>& m) { return Mat<U>(m.template cast<U>()); };
    out.tok_emb = c(tok_emb);
    out.pos_emb = c(pos_emb);
    for (std::size_t l = 0; l < attn.size(); ++l) {
        out.attn.push_back({c(attn[l].wq), c(attn[l].wk), c(attn[l].wv), c(attn[l].wo)});
        const auto& g = general[l];
        out.general.push_back({c(g.ln1_g), c(g.ln1_b), c(g.ln2_g), c(g.ln2_b), c(g.w1), c(g.b1),
                               c(g.w2), c(g.b2)});
        const auto& s = specific[l];
        out.specific.push_back(
            {c(s.ln1_g), c(s.ln1_b), c(s.ln2_g), c(s.ln2_b), c(s.w_down), c(s.w_up)});
    }
    out.lnf_g = c(lnf_g);
    out.lnf_b = c(lnf_b);
    out.lm_head = c(lm_head);
    out.proj_v1 = c(proj_v1);
    out.proj_v2 = c(proj_v2);
    return out;
}

template <class T>
void Params<T>::set_zero() {
    for (auto& t : tensors()) t.value->setZero();
}

template <class T>
void check_shapes(const ModelConfig& cfg, const Params<T>& p) {
    if (p.attn.size() != cfg.n_layers || p.general.size() != cfg.n_layers ||
        p.specific.size() != cfg.n_layers) {
        throw ShapeError("parameter layer count does not match config");
    }
    auto expected = expected_shapes(cfg);
    auto actual = p.tensors();
    for (std::size_t i = 0; i < actual.size(); ++i) {
        auto [rows, cols] = expected[i].second;
        if (static_cast<std::size_t>(actual[i].value->rows()) != rows ||
            static_cast<std::size_t>(actual[i].value->cols()) != cols) {
            throw ShapeError("tensor " + actual[i].name + " has shape " +
                             std::to_string(actual[i].value->rows()) + "x" +
                             std::to_string(actual[i].value->cols()) + ", expected " +
                             std::to_string(rows) + "x" + std::to_string(cols));
        }
    }
}

// ---------------------------------------------------------------------------
// Layers

namespace {

template <class T>
Mat<T> layer_norm(const Mat<T>& x, const Mat<T>& g, const Mat<T>& b, LayerNormCache<T>& c) {
    const auto n = x.rows();
    const auto d = x.cols();
    c.xhat.resize(n, d);
    c.rstd.resize(n);
    Mat<T> y(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        T mean = x.row(i).mean();
        T var = (x.row(i).array() - mean).square().mean();
        T rstd = T(1) / std::sqrt(var + static_cast<T>(kLnEps));
        c.rstd(i) = rstd;
        c.xhat.row(i) = (x.row(i).array() - mean) * rstd;
        y.row(i) = c.xhat.row(i).cwiseProduct(g) + b;
    }
    return y;
}

template <class T>
Mat<T> layer_norm_backward(const Mat<T>& dy, const Mat<T>& g, const LayerNormCache<T>& c,
                           Mat<T>& dg, Mat<T>& db) {
    const auto n = dy.rows();
    const auto d = static_cast<T>(dy.cols());
    dg += (dy.cwiseProduct(c.xhat)).colwise().sum();
    db += dy.colwise().sum();
    Mat<T> dx(dy.rows(), dy.cols());
    for (Eigen::Index i = 0; i < n; ++i) {
        RowVec<T> dxhat = dy.row(i).cwiseProduct(g);
        T mean_dxhat = dxhat.sum() / d;
        T mean_dxhat_xhat = dxhat.dot(c.xhat.row(i)) / d;
        dx.row(i) = c.rstd(i) *
                    (dxhat.array() - mean_dxhat - c.xhat.row(i).array() * mean_dxhat_xhat).matrix();
    }
    return dx;
}

template <class T>
T gelu(T x) {
    const T k = static_cast<T>(0.7978845608028654);  // sqrt(2/pi)
    const T a = static_cast<T>(0.044715);
    return T(0.5) * x * (T(1) + std::tanh(k * (x + a * x * x * x)));
}

template <class T>
T gelu_grad(T x) {
    const T k = static_cast<T>(0.7978845608028654);
    const T a = static_cast<T>(0.044715);
    T t = std::tanh(k * (x + a * x * x * x));
    return T(0.5) * (T(1) + t) + T(0.5) * x * (T(1) - t * t) * k * (T(1) + T(3) * a * x * x);
}

template <class T>
Mat<T> dropout_mask(Eigen::Index rows, Eigen::Index cols, double p, std::mt19937_64& rng) {
    Mat<T> m(rows, cols);
    std::bernoulli_distribution keep(1.0 - p);
    const T scale = static_cast<T>(1.0 / (1.0 - p));
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = keep(rng) ? scale : T(0);
    return m;
}

template <class T>
Mat<T> attention_forward(const ModelConfig& cfg, const AttentionParams<T>& a, BlockCache<T>& c) {
    const auto n = c.a_in.rows();
    const auto hd = static_cast<Eigen::Index>(cfg.head_dim());
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    c.q = c.a_in * a.wq;
    c.k = c.a_in * a.wk;
    c.v = c.a_in * a.wv;
    c.attn_cat.resize(n, c.a_in.cols());
    c.probs.assign(cfg.n_heads, Mat<T>());
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * hd;
        Mat<T> s = (c.q.middleCols(off, hd) * c.k.middleCols(off, hd).transpose()) * scale;
        Mat<T>& pr = c.probs[h];
        pr = Mat<T>::Zero(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            T mx = s.row(i).head(i + 1).maxCoeff();
            T sum = 0;
            for (Eigen::Index j = 0; j <= i; ++j) {
                pr(i, j) = std::exp(s(i, j) - mx);
                sum += pr(i, j);
            }
            pr.row(i).head(i + 1) /= sum;
        }
        c.attn_cat.middleCols(off, hd) = pr * c.v.middleCols(off, hd);
    }
    return c.attn_cat * a.wo;
}

// Returns dL/da_in; accumulates into the shared attention gradients.
template <class T>
Mat<T> attention_backward(const ModelConfig& cfg, const AttentionParams<T>& a,
                          const BlockCache<T>& c, const Mat<T>& d_out, AttentionParams<T>& ga) {
    const auto n = c.a_in.rows();
    const auto hd = static_cast<Eigen::Index>(cfg.head_dim());
    const T scale = T(1) / std::sqrt(static_cast<T>(hd));
    ga.wo.noalias() += c.attn_cat.transpose() * d_out;
    Mat<T> d_cat = d_out * a.wo.transpose();
    Mat<T> dq(n, c.q.cols()), dk(n, c.k.cols()), dv(n, c.v.cols());
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * hd;
        const Mat<T>& pr = c.probs[h];
        Mat<T> d_oh = d_cat.middleCols(off, hd);
        Mat<T> dp = d_oh * c.v.middleCols(off, hd).transpose();
        dv.middleCols(off, hd) = pr.transpose() * d_oh;
        Mat<T> ds(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            T row_dot = pr.row(i).dot(dp.row(i));
            ds.row(i) = pr.row(i).array() * (dp.row(i).array() - row_dot);
        }
        ds *= scale;
        dq.middleCols(off, hd) = ds * c.k.middleCols(off, hd);
        dk.middleCols(off, hd) = ds.transpose() * c.q.middleCols(off, hd);
    }
    ga.wq.noalias() += c.a_in.transpose() * dq;
    ga.wk.noalias() += c.a_in.transpose() * dk;
    ga.wv.noalias() += c.a_in.transpose() * dv;
    Mat<T> d_ain = dq * a.wq.transpose();
    d_ain.noalias() += dk * a.wk.transpose();
    d_ain.noalias() += dv * a.wv.transpose();
    return d_ain;
}

template <class T>
void maybe_dropout(Mat<T>& x, Mat<T>& mask, const ModelConfig& cfg, const ForwardOptions& opts) {
    if (!opts.training || cfg.dropout <= 0.0) {
        mask.resize(0, 0);
        return;
    }
    if (opts.rng == nullptr) throw ShapeError("training forward with dropout needs an rng");
    mask = dropout_mask<T>(x.rows(), x.cols(), cfg.dropout, *opts.rng);
    x = x.cwiseProduct(mask);
}

template <class T>
Mat<T> apply_mask_grad(const Mat<T>& d, const Mat<T>& mask) {
    return mask.size() == 0 ? d : Mat<T>(d.cwiseProduct(mask));
}

// One pre-norm block. The general block uses the dense feedforward; the
// specific block uses the rank-r pair with the same attention weights.
template <class T>
Mat<T> general_block(const ModelConfig& cfg, const AttentionParams<T>& a,
                     const GeneralBlockParams<T>& g, const Mat<T>& x, BlockCache<T>& c,
                     const ForwardOptions& opts) {
    c.x_in = x;
    c.a_in = layer_norm(x, g.ln1_g, g.ln1_b, c.ln1);
    c.attn_out = attention_forward(cfg, a, c);
    maybe_dropout(c.attn_out, c.attn_drop, cfg, opts);
    c.x_mid = x + c.attn_out;
    c.f_in = layer_norm(c.x_mid, g.ln2_g, g.ln2_b, c.ln2);
    c.h_pre = (c.f_in * g.w1).rowwise() + RowVec<T>(g.b1);
    c.h = c.h_pre.unaryExpr([](T v) { return gelu(v); });
    c.ffn_out = (c.h * g.w2).rowwise() + RowVec<T>(g.b2);
    maybe_dropout(c.ffn_out, c.ffn_drop, cfg, opts);
    return c.x_mid + c.ffn_out;
}

template <class T>
Mat<T> specific_block(const ModelConfig& cfg, const AttentionParams<T>& a,
                      const SpecificBlockParams<T>& s, const Mat<T>& x, BlockCache<T>& c,
                      const ForwardOptions& opts) {
    c.x_in = x;
    c.a_in = layer_norm(x, s.ln1_g, s.ln1_b, c.ln1);
    c.attn_out = attention_forward(cfg, a, c);
    maybe_dropout(c.attn_out, c.attn_drop, cfg, opts);
    c.x_mid = x + c.attn_out;
    c.f_in = layer_norm(c.x_mid, s.ln2_g, s.ln2_b, c.ln2);
    c.h_pre = c.f_in * s.w_down;
    c.h = c.h_pre.unaryExpr([](T v) { return gelu(v); });
    c.ffn_out = c.h * s.w_up;
    maybe_dropout(c.ffn_out, c.ffn_drop, cfg, opts);
    return c.x_mid + c.ffn_out;
}

}  // namespace

template <class T>
ForwardOutput<T> forward(const ModelConfig& cfg, const Params<T>& p,
                         std::span<const TokenId> tokens, const ForwardOptions& opts,
                         ForwardCache<T>* cache) {
    check_shapes(cfg, p);
    const auto n = static_cast<Eigen::Index>(tokens.size());
    if (n == 0) throw ShapeError("forward on an empty sequence");
    if (tokens.size() > cfg.max_len) {
        throw ShapeError("sequence of " + std::to_string(tokens.size()) + " tokens exceeds max_len " +
                         std::to_string(cfg.max_len));
    }
    for (auto t : tokens) {
        if (t < 0 || static_cast<std::size_t>(t) >= cfg.vocab_size) {
            throw ShapeError("token id " + std::to_string(t) + " outside the vocabulary");
        }
    }
    if (!opts.pool_mask.empty() && opts.pool_mask.size() != tokens.size()) {
        throw ShapeError("pool mask length does not match the sequence");
    }

    ForwardCache<T> local;
    ForwardCache<T>& c = cache ? *cache : local;
    c.tokens.assign(tokens.begin(), tokens.end());
    c.single_tower = cfg.single_tower;
    c.pool_positions.clear();
    for (std::size_t i = 0; i < opts.pool_mask.size(); ++i) {
        if (opts.pool_mask[i]) c.pool_positions.push_back(i);
    }
    if (c.pool_positions.empty()) c.pool_positions.push_back(tokens.size() - 1);

    const auto d = static_cast<Eigen::Index>(cfg.d_model);
    Mat<T> x0(n, d);
    for (Eigen::Index i = 0; i < n; ++i) {
        x0.row(i) = p.tok_emb.row(tokens[static_cast<std::size_t>(i)]) + p.pos_emb.row(i);
    }

    c.general.assign(cfg.n_layers, {});
    Mat<T> g = x0;
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        g = general_block(cfg, p.attn[l], p.general[l], g, c.general[l], opts);
    }
    c.g_final = g;

    ForwardOutput<T> out;
    out.general_hidden = layer_norm(g, p.lnf_g, p.lnf_b, c.lnf);
    out.specific_hidden = Mat<T>::Zero(n, d);
    out.pooled_specific = RowVec<T>::Zero(d);

    if (!cfg.single_tower) {
        c.specific.assign(cfg.n_layers, {});
        Mat<T> s = x0;
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            s = specific_block(cfg, p.attn[l], p.specific[l], s, c.specific[l], opts);
            out.specific_hidden += c.specific[l].ffn_out;
        }
        for (auto pos : c.pool_positions) out.pooled_specific += s.row(static_cast<Eigen::Index>(pos));
        out.pooled_specific /= static_cast<T>(c.pool_positions.size());
    } else {
        c.specific.clear();
    }

    c.fused = out.general_hidden + out.specific_hidden;
    out.fused_logits = c.fused * p.lm_head;
    return out;
}

template <class T>
void backward(const ModelConfig& cfg, const Params<T>& p, const ForwardCache<T>& c,
              const Mat<T>& d_logits, const RowVec<T>* d_pooled, Params<T>& grads) {
    const auto n = static_cast<Eigen::Index>(c.tokens.size());
    const auto d = static_cast<Eigen::Index>(cfg.d_model);
    if (d_logits.rows() != n || d_logits.cols() != static_cast<Eigen::Index>(cfg.vocab_size)) {
        throw ShapeError("logit gradient shape does not match the forward pass");
    }

    grads.lm_head.noalias() += c.fused.transpose() * d_logits;
    Mat<T> d_fused = d_logits * p.lm_head.transpose();

    Mat<T> dx0 = Mat<T>::Zero(n, d);

    if (!c.single_tower) {
        // Residual stream gradient; the final stream only feeds the pooled vector.
        Mat<T> ds = Mat<T>::Zero(n, d);
        if (d_pooled != nullptr) {
            const T w = T(1) / static_cast<T>(c.pool_positions.size());
            for (auto pos : c.pool_positions) ds.row(static_cast<Eigen::Index>(pos)) += *d_pooled * w;
        }
        for (std::size_t li = cfg.n_layers; li-- > 0;) {
            const auto& bc = c.specific[li];
            const auto& sp = p.specific[li];
            auto& gs = grads.specific[li];
            // The block output feeds both the residual stream and the fused sum.
            Mat<T> d_ffn = apply_mask_grad<T>(ds + d_fused, bc.ffn_drop);
            gs.w_up.noalias() += bc.h.transpose() * d_ffn;
            Mat<T> dh = d_ffn * sp.w_up.transpose();
            Mat<T> dh_pre = dh.cwiseProduct(bc.h_pre.unaryExpr([](T v) { return gelu_grad(v); }));
            gs.w_down.noalias() += bc.f_in.transpose() * dh_pre;
            Mat<T> d_fin = dh_pre * sp.w_down.transpose();
            Mat<T> d_mid = ds + layer_norm_backward(d_fin, sp.ln2_g, bc.ln2, gs.ln2_g, gs.ln2_b);
            Mat<T> d_attn = apply_mask_grad<T>(d_mid, bc.attn_drop);
            Mat<T> d_ain = attention_backward(cfg, p.attn[li], bc, d_attn, grads.attn[li]);
            ds = d_mid + layer_norm_backward(d_ain, sp.ln1_g, bc.ln1, gs.ln1_g, gs.ln1_b);
        }
        dx0 += ds;
    }

    Mat<T> dg = layer_norm_backward(d_fused, p.lnf_g, c.lnf, grads.lnf_g, grads.lnf_b);
    for (std::size_t li = cfg.n_layers; li-- > 0;) {
        const auto& bc = c.general[li];
        const auto& gp = p.general[li];
        auto& gg = grads.general[li];
        Mat<T> d_ffn = apply_mask_grad<T>(dg, bc.ffn_drop);
        gg.b2 += d_ffn.colwise().sum();
        gg.w2.noalias() += bc.h.transpose() * d_ffn;
        Mat<T> dh = d_ffn * gp.w2.transpose();
        Mat<T> dh_pre = dh.cwiseProduct(bc.h_pre.unaryExpr([](T v) { return gelu_grad(v); }));
        gg.b1 += dh_pre.colwise().sum();
        gg.w1.noalias() += bc.f_in.transpose() * dh_pre;
        Mat<T> d_fin = dh_pre * gp.w1.transpose();
        Mat<T> d_mid = dg + layer_norm_backward(d_fin, gp.ln2_g, bc.ln2, gg.ln2_g, gg.ln2_b);
        Mat<T> d_attn = apply_mask_grad<T>(d_mid, bc.attn_drop);
        Mat<T> d_ain = attention_backward(cfg, p.attn[li], bc, d_attn, grads.attn[li]);
        dg = d_mid + layer_norm_backward(d_ain, gp.ln1_g, bc.ln1, gg.ln1_g, gg.ln1_b);
    }
    dx0 += dg;

    for (Eigen::Index i = 0; i < n; ++i) {
        grads.tok_emb.row(c.tokens[static_cast<std::size_t>(i)]) += dx0.row(i);
        grads.pos_emb.row(i) += dx0.row(i);
    }
}

template <class T>
RowVec<T> project(const Params<T>& p, int view, const RowVec<T>& pooled) {
    const Mat<T>& w = view == 1 ? p.proj_v1 : p.proj_v2;
    if (view != 1 && view != 2) throw ShapeError("view must be 1 or 2");
    if (pooled.size() != w.cols()) throw ShapeError("pooled vector does not match projection");
    return pooled * w.transpose();
}

#define QALLM_INSTANTIATE(T)                                                                    \
    template struct Params<T>;                                                                  \
    template void check_shapes<T>(const ModelConfig&, const Params<T>&);                        \
    template ForwardOutput<T> forward<T>(const ModelConfig&, const Params<T>&,                  \
                                         std::span<const TokenId>, const ForwardOptions&,       \
                                         ForwardCache<T>*);                                     \
    template void backward<T>(const ModelConfig&, const Params<T>&, const ForwardCache<T>&,     \
                              const Mat<T>&, const RowVec<T>*, Params<T>&);                     \
    template RowVec<T> project<T>(const Params<T>&, int, const RowVec<T>&);

QALLM_INSTANTIATE(float)
QALLM_INSTANTIATE(double)
#undef QALLM_INSTANTIATE

template Params<double> Params<float>::cast<double>() const;
template Params<float> Params<double>::cast<float>() const;
template Params<float> Params<float>::cast<float>() const;
template Params<double> Params<double>::cast<double>() const;

}  // namespace qallm
