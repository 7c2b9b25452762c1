#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "qallm/cluster.h"
#include "qallm/corpus.h"
#include "qallm/model.h"
#include "qallm/objective.h"

namespace qallm {

struct TrainFlags {
    bool no_qcl = false;           // language-modelling loss only
    bool no_ccl = false;           // negatives from every querier, uniform batches
    bool single_tower_ft = false;  // plain fine-tuning baseline
    bool freeze_general = false;   // only the specific tower and projections learn
};

struct TrainConfig {
    double lr_max = 2e-4;
    double lr_min = 1e-4;
    std::size_t batch_size = 4;
    std::size_t epochs = 20;
    std::size_t max_len = 592;
    double lambda = 1.0;
    double tau = 0.07;
    std::size_t k_clusters = kDefaultClusters;
    std::uint64_t seed = 0;
    TrainFlags flags;
    double weight_decay = 0.01;
    double grad_clip = 1.0;
    // 0 = run every epoch.
    std::size_t max_steps = 0;
    double dropout = 0.05;
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t ffn_hidden = 256;
    std::size_t rank = 16;
    std::size_t proj_dim = 32;

    void validate() const;  // throws ConfigError
    ModelConfig model_config() const;
};

nlohmann::json to_json(const TrainConfig& c);
// Flat object; unknown keys throw ConfigError. Missing keys keep defaults.
TrainConfig train_config_from_json(const nlohmann::json& j);
// Applies the keys present in j on top of base.
TrainConfig merge_train_config(TrainConfig base, const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Batching and schedule

using Batch = std::vector<std::size_t>;  // indices into the dialogue list

// One epoch. cluster_of[i] is dialogue i's cluster (ignored when no_ccl).
// Cluster mode: members of each cluster are shuffled and chunked, the last
// batch of a cluster may be short, then all batches are shuffled.
std::vector<Batch> make_batches(const std::vector<int>& cluster_of, std::size_t batch_size,
                                std::uint64_t seed, bool no_ccl);

double lr_at(std::size_t step, std::size_t total_steps, double lr_max, double lr_min);

// ---------------------------------------------------------------------------
// Per-dialogue loss and gradient

struct QcInputs {
    const GlobalReprTable* table = nullptr;
    std::string querier_id;
    std::set<std::string> negatives;
    double tau = 0.07;
    bool multiview = true;  // false: single view, proj_v1 against view-1 means
};

struct LossWeights {
    double lm = 1.0;
    double qc = 1.0;
};

template <class T>
struct DialogueLoss {
    T lm = 0;
    T qc = 0;
    std::size_t m_effective = 1;
    bool has_qc = false;
    RowVec<T> z_v1, z_v2;  // detached projections
};

// Forward, losses and (when grads is non-null) accumulation of
// scale * d(w.lm * lm + w.qc * qc)/dparams. qc is skipped when qc is null.
template <class T>
DialogueLoss<T> dialogue_loss(const ModelConfig& cfg, const Params<T>& p, const EncodedDialogue& e,
                              const QcInputs* qc, LossWeights w, const ForwardOptions& fwd,
                              Params<T>* grads, T scale = T(1));

// Pooled specific-tower representation of a dialogue (no dropout).
RowVec<float> dialogue_representation(const Model& m, const Dialogue& d);

// ---------------------------------------------------------------------------
// AdamW

class AdamW {
public:
    AdamW(const ModelConfig& cfg, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    // One update; tensors whose group is skipped are left untouched.
    void step(Params<float>& p, const Params<float>& g, double lr, double weight_decay,
              const std::function<bool(ParamGroup)>& skip = {});
    std::size_t steps() const { return t_; }

private:
    Params<float> m_, v_;
    double b1_, b2_, eps_;
    std::size_t t_ = 0;
};

// Global L2 norm over the tensors not skipped.
double grad_norm(const Params<float>& g, const std::function<bool(ParamGroup)>& skip = {});

// ---------------------------------------------------------------------------
// Training

struct StepRecord {
    std::size_t step = 0;
    double lm = 0.0;
    double qc = 0.0;
    double total = 0.0;
    double mi_bound = 0.0;
    double lr = 0.0;
    std::size_t m_effective = 1;  // smallest candidate set in the batch
};

struct EpochRecord {
    std::size_t epoch = 0;
    std::optional<double> heldout_lm;  // mean LM loss on the test split
};

struct TrainLog {
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;

    std::string steps_csv() const;  // step,lm,qc,total,mi_bound,lr
};

struct TrainResult {
    Model model;
    GlobalReprTable table;
    TrainLog log;
};

struct TrainOptions {
    std::size_t workers = 1;
    // Written after every epoch; on a non-finite loss it keeps the last good
    // parameters before NonFiniteLoss propagates.
    std::optional<std::string> checkpoint_dir;
    std::function<void(const StepRecord&)> on_step;
    // Starting parameters instead of a fresh seeded initialisation.
    std::optional<Params<float>> initial;
};

// Dialogues in the train split are learned from; test-split dialogues feed
// the per-epoch held-out loss. Cluster ids come from the dialogues, falling
// back to index.assignments.
TrainResult train(const std::vector<Dialogue>& dialogues, const ClusterIndex* index,
                  const TrainConfig& config, const TrainOptions& options = {});

// Checkpoint plus global_repr.json, config.json and train_log.csv.
void save_training_run(const TrainResult& r, const TrainConfig& config, const std::string& dir);

}  // namespace qallm
