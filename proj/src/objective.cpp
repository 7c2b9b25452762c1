#include "qallm/objective.h"

#include <cmath>

#include "qallm/error.h"

namespace qallm {

template <class T>
T lm_loss(const Mat<T>& logits, std::span<const TokenId> tokens,
          std::span<const unsigned char> loss_mask, Mat<T>* d_logits) {
    const auto n = static_cast<Eigen::Index>(tokens.size());
    if (logits.rows() != n || loss_mask.size() != tokens.size()) {
        throw ShapeError("logits, tokens and mask lengths disagree");
    }
    std::size_t count = 0;
    for (std::size_t j = 1; j < tokens.size(); ++j) count += loss_mask[j] ? 1 : 0;
    if (count == 0) throw EmptyMask("loss mask selects no predicted position");
    if (d_logits) *d_logits = Mat<T>::Zero(logits.rows(), logits.cols());

    const T inv = T(1) / static_cast<T>(count);
    T total = 0;
    for (Eigen::Index j = 1; j < n; ++j) {
        if (!loss_mask[static_cast<std::size_t>(j)]) continue;
        const auto row = logits.row(j - 1);
        const TokenId target = tokens[static_cast<std::size_t>(j)];
        T mx = row.maxCoeff();
        T sum = (row.array() - mx).exp().sum();
        T log_z = mx + std::log(sum);
        total += log_z - row(target);
        if (d_logits) {
            d_logits->row(j - 1) = ((row.array() - log_z).exp() * inv).matrix();
            (*d_logits)(j - 1, target) -= inv;
        }
    }
    return total * inv;
}

template float lm_loss<float>(const Mat<float>&, std::span<const TokenId>,
                              std::span<const unsigned char>, Mat<float>*);
template double lm_loss<double>(const Mat<double>&, std::span<const TokenId>,
                                std::span<const unsigned char>, Mat<double>*);

// ---------------------------------------------------------------------------

namespace {

double norm(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

template <class T>
struct Nce {
    T loss;
    RowVec<T> dz;
};

// -log softmax_true over cos(z, key_j) / tau, with its gradient in z.
template <class T>
Nce<T> info_nce(const RowVec<T>& z, const std::vector<const std::vector<double>*>& keys,
                std::size_t true_idx, double tau) {
    const T zn = z.norm();
    if (!(zn > T(0))) throw ZeroVector("dialogue representation is the zero vector");
    const RowVec<T> zhat = z / zn;
    const std::size_t m = keys.size();
    std::vector<RowVec<T>> ehat(m);
    std::vector<T> s(m);
    for (std::size_t j = 0; j < m; ++j) {
        const auto& e = *keys[j];
        if (static_cast<Eigen::Index>(e.size()) != z.size()) {
            throw ShapeError("global representation width does not match projection");
        }
        double en = norm(e);
        if (!(en > 0.0)) throw ZeroVector("global representation is the zero vector");
        ehat[j].resize(z.size());
        for (std::size_t k = 0; k < e.size(); ++k) {
            ehat[j](static_cast<Eigen::Index>(k)) = static_cast<T>(e[k] / en);
        }
        s[j] = zhat.dot(ehat[j]) / static_cast<T>(tau);
    }
    T mx = *std::max_element(s.begin(), s.end());
    T sum = 0;
    for (T v : s) sum += std::exp(v - mx);
    T log_z = mx + std::log(sum);
    Nce<T> out{log_z - s[true_idx], RowVec<T>::Zero(z.size())};
    // dL/dz = sum_j (p_j - [j = true]) / tau * (ehat_j - c_j zhat) / |z|
    for (std::size_t j = 0; j < m; ++j) {
        T p = std::exp(s[j] - log_z) - (j == true_idx ? T(1) : T(0));
        T c = s[j] * static_cast<T>(tau);
        out.dz += (p / static_cast<T>(tau)) * (ehat[j] - c * zhat) / zn;
    }
    return out;
}

std::vector<std::string> candidates_of(const std::string& querier_id,
                                       const std::set<std::string>& negative_ids,
                                       std::size_t& true_idx) {
    std::set<std::string> all = negative_ids;
    all.insert(querier_id);
    std::vector<std::string> out(all.begin(), all.end());
    true_idx = static_cast<std::size_t>(
        std::find(out.begin(), out.end(), querier_id) - out.begin());
    return out;
}

std::vector<const std::vector<double>*> keys_for(const GlobalReprTable& table,
                                                 const std::vector<std::string>& ids, int view) {
    std::vector<const std::vector<double>*> keys;
    for (const auto& id : ids) keys.push_back(&table.mean(id, view));
    return keys;
}

void check_tau(double tau) {
    if (!(tau > 0.0)) throw ConfigError("temperature must be positive");
}

}  // namespace

double score(std::span<const double> z, std::span<const double> e, double tau) {
    check_tau(tau);
    if (z.size() != e.size()) throw ShapeError("score of vectors with different sizes");
    double zn = norm(z), en = norm(e);
    if (!(zn > 0.0) || !(en > 0.0)) throw ZeroVector("score of a zero vector");
    double dot = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) dot += z[i] * e[i];
    return std::exp(dot / (zn * en) / tau);
}

const GlobalReprTable::Entry& GlobalReprTable::at(const std::string& querier_id) const {
    auto it = entries_.find(querier_id);
    if (it == entries_.end() || it->second.count == 0) {
        throw MissingGlobalRepr("no global representation for querier '" + querier_id + "'");
    }
    return it->second;
}

const std::vector<double>& GlobalReprTable::mean(const std::string& querier_id, int view) const {
    const auto& e = at(querier_id);
    return view == 1 ? e.v1 : e.v2;
}

void GlobalReprTable::update(const std::string& querier_id, std::span<const double> z_v1,
                             std::span<const double> z_v2) {
    auto& e = entries_[querier_id];
    if (e.count == 0) {
        e.v1.assign(z_v1.size(), 0.0);
        e.v2.assign(z_v2.size(), 0.0);
    }
    if (e.v1.size() != z_v1.size() || e.v2.size() != z_v2.size()) {
        throw ShapeError("global representation width changed for querier '" + querier_id + "'");
    }
    const double step = 1.0 / static_cast<double>(e.count + 1);
    for (std::size_t i = 0; i < z_v1.size(); ++i) e.v1[i] += (z_v1[i] - e.v1[i]) * step;
    for (std::size_t i = 0; i < z_v2.size(); ++i) e.v2[i] += (z_v2[i] - e.v2[i]) * step;
    ++e.count;
}

nlohmann::json GlobalReprTable::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [id, e] : entries_) j[id] = {{"v1", e.v1}, {"v2", e.v2}, {"count", e.count}};
    return j;
}

GlobalReprTable GlobalReprTable::from_json(const nlohmann::json& j) {
    GlobalReprTable t;
    try {
        for (const auto& [id, e] : j.items()) {
            Entry entry{e.at("v1").get<std::vector<double>>(), e.at("v2").get<std::vector<double>>(),
                        e.at("count").get<std::size_t>()};
            if (entry.count == 0) continue;
            t.entries_[id] = std::move(entry);
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("malformed global representation table: ") + e.what());
    }
    return t;
}

template <class T>
ContrastiveResult<T> qc_loss(const RowVec<T>& z, const GlobalReprTable& table,
                             const std::string& querier_id,
                             const std::set<std::string>& negative_ids, double tau, int key_view) {
    check_tau(tau);
    std::size_t true_idx = 0;
    auto ids = candidates_of(querier_id, negative_ids, true_idx);
    auto keys = keys_for(table, ids, key_view);
    ContrastiveResult<T> r;
    r.m_effective = ids.size();
    if (ids.size() == 1) {
        // -log(f / f) is exactly zero; z must still be usable.
        if (!(z.norm() > T(0))) throw ZeroVector("dialogue representation is the zero vector");
        r.loss = 0;
        r.dz_v1 = RowVec<T>::Zero(z.size());
        return r;
    }
    auto nce = info_nce(z, keys, true_idx, tau);
    r.loss = nce.loss;
    r.dz_v1 = std::move(nce.dz);
    return r;
}

template <class T>
ContrastiveResult<T> qc_loss_multiview(const RowVec<T>& z_v1, const RowVec<T>& z_v2,
                                       const GlobalReprTable& table, const std::string& querier_id,
                                       const std::set<std::string>& negative_ids, double tau) {
    auto a = qc_loss(z_v1, table, querier_id, negative_ids, tau, 2);
    auto b = qc_loss(z_v2, table, querier_id, negative_ids, tau, 1);
    ContrastiveResult<T> r;
    r.m_effective = a.m_effective;
    r.loss = T(0.5) * (a.loss + b.loss);
    r.dz_v1 = T(0.5) * a.dz_v1;
    r.dz_v2 = T(0.5) * b.dz_v1;
    return r;
}

#define QALLM_INSTANTIATE(T)                                                                      \
    template ContrastiveResult<T> qc_loss<T>(const RowVec<T>&, const GlobalReprTable&,            \
                                             const std::string&, const std::set<std::string>&,    \
                                             double, int);                                        \
    template ContrastiveResult<T> qc_loss_multiview<T>(const RowVec<T>&, const RowVec<T>&,        \
                                                       const GlobalReprTable&, const std::string&, \
                                                       const std::set<std::string>&, double);

QALLM_INSTANTIATE(float)
QALLM_INSTANTIATE(double)
#undef QALLM_INSTANTIATE

std::vector<double> candidate_probabilities(std::span<const double> z, const GlobalReprTable& table,
                                            const std::set<std::string>& candidates, double tau,
                                            int key_view) {
    std::vector<double> s;
    for (const auto& id : candidates) s.push_back(std::log(score(z, table.mean(id, key_view), tau)));
    double mx = *std::max_element(s.begin(), s.end());
    double sum = 0.0;
    for (double v : s) sum += std::exp(v - mx);
    std::vector<double> p;
    for (double v : s) p.push_back(std::exp(v - mx) / sum);
    return p;
}

LossBreakdown total_loss(double lm, double qc, double lambda, std::size_t m_effective) {
    if (!(lambda >= 0.0)) throw ConfigError("lambda must be non-negative");
    return {lm, qc, lm + lambda * qc, m_effective};
}

double mi_lower_bound(double loss, std::size_t m) {
    if (m < 1) throw ConfigError("m must be at least 1");
    return std::log(static_cast<double>(m)) - loss;
}

}  // namespace qallm
