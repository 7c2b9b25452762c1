#pragma once

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "qallm/model.h"

namespace qallm {

// ---------------------------------------------------------------------------
// Language modelling

// Mean next-token cross-entropy over the positions whose token is selected by
// loss_mask (logits at position j - 1 predict token j). Writes dL/dlogits when
// d_logits is non-null. Throws EmptyMask when nothing is selected.
template <class T>
T lm_loss(const Mat<T>& logits, std::span<const TokenId> tokens,
          std::span<const unsigned char> loss_mask, Mat<T>* d_logits = nullptr);

// ---------------------------------------------------------------------------
// Querier-contrastive scoring

// exp(cos(z, e) / tau). Throws ZeroVector when either vector is zero.
double score(std::span<const double> z, std::span<const double> e, double tau);

// Running mean of each querier's projected dialogue representations, one
// table per view. Values are detached statistics, never differentiated.
class GlobalReprTable {
public:
    struct Entry {
        std::vector<double> v1, v2;
        std::size_t count = 0;
    };

    bool contains(const std::string& querier_id) const { return entries_.count(querier_id) > 0; }
    // Throws MissingGlobalRepr.
    const Entry& at(const std::string& querier_id) const;
    const std::vector<double>& mean(const std::string& querier_id, int view) const;
    std::size_t size() const { return entries_.size(); }
    const std::map<std::string, Entry>& entries() const { return entries_; }

    // mean <- mean + (z - mean) / (count + 1), both views, one count.
    void update(const std::string& querier_id, std::span<const double> z_v1,
                std::span<const double> z_v2);

    nlohmann::json to_json() const;
    static GlobalReprTable from_json(const nlohmann::json& j);

private:
    std::map<std::string, Entry> entries_;
};

inline void update_global(GlobalReprTable& table, const std::string& querier_id,
                          std::span<const double> z_v1, std::span<const double> z_v2) {
    table.update(querier_id, z_v1, z_v2);
}

template <class T>
struct ContrastiveResult {
    T loss = 0;
    std::size_t m_effective = 1;  // candidate queriers, true one included
    RowVec<T> dz_v1, dz_v2;       // dL/dz; empty for an unused view
};

// -log[ f(z, e^i) / sum_j f(z, e^j) ] over j in {querier_id} U negatives,
// against the view-`key_view` global means. Throws MissingGlobalRepr.
template <class T>
ContrastiveResult<T> qc_loss(const RowVec<T>& z, const GlobalReprTable& table,
                             const std::string& querier_id,
                             const std::set<std::string>& negative_ids, double tau,
                             int key_view = 1);

// Two-view loss: z_v1 contrasts with view-2 means and z_v2 with view-1 means,
// averaged.
template <class T>
ContrastiveResult<T> qc_loss_multiview(const RowVec<T>& z_v1, const RowVec<T>& z_v2,
                                       const GlobalReprTable& table, const std::string& querier_id,
                                       const std::set<std::string>& negative_ids, double tau);

// Probability the contrastive softmax assigns to each candidate (in set
// order) for dialogue representation z against view-`key_view` means.
std::vector<double> candidate_probabilities(std::span<const double> z, const GlobalReprTable& table,
                                            const std::set<std::string>& candidates, double tau,
                                            int key_view = 1);

// ---------------------------------------------------------------------------
// Mixing

struct LossBreakdown {
    double lm = 0.0;
    double qc = 0.0;
    double total = 0.0;
    std::size_t m_effective = 1;
};

LossBreakdown total_loss(double lm, double qc, double lambda, std::size_t m_effective = 1);

// ln m - L: lower bound on the mutual information between a dialogue
// representation and its querier's global representation.
double mi_lower_bound(double loss, std::size_t m);

}  // namespace qallm
