#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "qallm/tokenizer.h"

namespace qallm {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

struct ModelConfig {
    std::size_t d_model = 64;
    std::size_t n_layers = 2;
    std::size_t n_heads = 4;
    std::size_t ffn_hidden = 256;
    std::size_t rank = 16;      // specific-tower feedforward rank
    std::size_t proj_dim = 32;  // contrastive projection width
    std::size_t vocab_size = tok::kVocabSize;
    std::size_t max_len = 592;
    double dropout = 0.05;
    // Run the general tower alone (the plain fine-tuning baseline).
    bool single_tower = false;
    // Whether dialogues are encoded with the querier id after BOS.
    bool querier_tag = true;

    void validate() const;  // throws ShapeError
    std::size_t head_dim() const { return d_model / n_heads; }
    EncodeOptions encode_options() const { return {max_len, querier_tag}; }
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Parameters
//
// Matrices act on row vectors: y = x * W. The attention projections of layer
// l live once in `attn[l]` and are read by both towers.

enum class ParamGroup {
    embedding,
    attention,
    general_norm,
    general_ffn,
    final_norm,
    lm_head,
    specific_norm,
    specific_lowrank,
    projection,
};

const char* to_string(ParamGroup g);
// Parameters owned by the general tower (frozen by freeze_general). The
// shared attention counts as general.
bool is_general(ParamGroup g);

template <class T>
struct AttentionParams {
    Mat<T> wq, wk, wv, wo;  // d x d
};

template <class T>
struct GeneralBlockParams {
    Mat<T> ln1_g, ln1_b, ln2_g, ln2_b;  // 1 x d
    Mat<T> w1, b1;                      // d x F, 1 x F
    Mat<T> w2, b2;                      // F x d, 1 x d
};

template <class T>
struct SpecificBlockParams {
    Mat<T> ln1_g, ln1_b, ln2_g, ln2_b;  // 1 x d
    Mat<T> w_down;                      // d x r
    Mat<T> w_up;                        // r x d, zero at initialisation
};

template <class T>
struct NamedTensor {
    std::string name;
    ParamGroup group;
    Mat<T>* value;
};

template <class T>
struct NamedConstTensor {
    std::string name;
    ParamGroup group;
    const Mat<T>* value;
};

template <class T>
struct Params {
    Mat<T> tok_emb;  // V x d
    Mat<T> pos_emb;  // max_len x d
    std::vector<AttentionParams<T>> attn;
    std::vector<GeneralBlockParams<T>> general;
    std::vector<SpecificBlockParams<T>> specific;
    Mat<T> lnf_g, lnf_b;      // 1 x d
    Mat<T> lm_head;           // d x V
    Mat<T> proj_v1, proj_v2;  // p x d; z = W * pooled

    // Correctly shaped, all zero.
    static Params zeros(const ModelConfig& cfg);
    static Params init(const ModelConfig& cfg, std::uint64_t seed);

    // Every tensor in a fixed order with a stable name.
    std::vector<NamedTensor<T>> tensors();
    std::vector<NamedConstTensor<T>> tensors() const;

    template <class U>
    Params<U> cast() const;

    void set_zero();
};

// Expected shape of every named tensor for cfg.
std::vector<std::pair<std::string, std::pair<std::size_t, std::size_t>>> expected_shapes(
    const ModelConfig& cfg);

template <class T>
void check_shapes(const ModelConfig& cfg, const Params<T>& p);  // throws ShapeError

// Dense feedforward parameters of the specific tower (W_down + W_up).
std::size_t specific_ffn_param_count(const ModelConfig& cfg);
// Dense feedforward parameters a general-style tower of the same depth would use.
std::size_t dense_ffn_param_count(const ModelConfig& cfg);

// ---------------------------------------------------------------------------
// Forward / backward

struct ForwardOptions {
    bool training = false;
    std::mt19937_64* rng = nullptr;  // dropout; required when training with dropout > 0
    // Positions to pool the specific tower over (1 = include). Empty or all
    // zero pools the last position.
    std::span<const unsigned char> pool_mask;
};

template <class T>
struct ForwardOutput {
    Mat<T> general_hidden;   // n x d, after the final norm
    Mat<T> specific_hidden;  // n x d, summed low-rank feedforward output
    Mat<T> fused_logits;     // n x V = (general_hidden + specific_hidden) * lm_head
    RowVec<T> pooled_specific;  // mean of the specific tower's final residual stream
};

template <class T>
struct LayerNormCache {
    Mat<T> xhat;
    Eigen::Matrix<T, Eigen::Dynamic, 1> rstd;
};

template <class T>
struct BlockCache {
    Mat<T> x_in;
    LayerNormCache<T> ln1;
    Mat<T> a_in;
    Mat<T> q, k, v;
    std::vector<Mat<T>> probs;  // per head, n x n
    Mat<T> attn_cat;
    Mat<T> attn_out;
    Mat<T> attn_drop;  // scaled keep mask, empty when inactive
    Mat<T> x_mid;
    LayerNormCache<T> ln2;
    Mat<T> f_in;
    Mat<T> h_pre, h;
    Mat<T> ffn_out;
    Mat<T> ffn_drop;
};

template <class T>
struct ForwardCache {
    std::vector<TokenId> tokens;
    std::vector<BlockCache<T>> general, specific;
    Mat<T> g_final;
    LayerNormCache<T> lnf;
    Mat<T> fused;
    std::vector<std::size_t> pool_positions;
    bool single_tower = false;
};

template <class T>
ForwardOutput<T> forward(const ModelConfig& cfg, const Params<T>& p,
                         std::span<const TokenId> tokens, const ForwardOptions& opts = {},
                         ForwardCache<T>* cache = nullptr);

// Accumulates parameter gradients into `grads` given dL/dlogits and,
// optionally, dL/dpooled.
template <class T>
void backward(const ModelConfig& cfg, const Params<T>& p, const ForwardCache<T>& cache,
              const Mat<T>& d_logits, const RowVec<T>* d_pooled, Params<T>& grads);

// z = W * pooled for view 1 or 2.
template <class T>
RowVec<T> project(const Params<T>& p, int view, const RowVec<T>& pooled);

// ---------------------------------------------------------------------------
// Generation and checkpoints

struct Model {
    ModelConfig config;
    Params<float> params;
};

struct GenerateOptions {
    // <= 0 means greedy.
    double temperature = 0.0;
    std::size_t max_new = 64;
    std::uint64_t seed = 0;
};

std::vector<TokenId> generate_tokens(const Model& m, std::vector<TokenId> context,
                                     const GenerateOptions& opts);

std::string generate(const Model& m, const std::vector<TokenId>& context,
                     const GenerateOptions& opts);

// Response text for querier_id given the dialogue context turns.
std::string respond(const Model& m, const std::string& querier_id, const std::vector<Turn>& context,
                    const GenerateOptions& opts);

// Directory layout: manifest.json plus one raw little-endian float32 file per
// tensor.
void save_checkpoint(const Model& m, const std::string& dir);
Model load_checkpoint(const std::string& dir);

}  // namespace qallm
