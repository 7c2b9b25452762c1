#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

#include "qallm/error.h"
#include "qallm/eval.h"
#include "qallm/trainer.h"

namespace qallm {

void export_representations(const Model& model, const std::vector<Dialogue>& dialogues,
                            std::ostream& out) {
    const std::size_t d = model.config.d_model;
    out << "dialogue_id,querier_id,cluster_id";
    for (std::size_t k = 0; k < d; ++k) out << ",h" << k;
    out << "\n";
    char buf[32];
    for (const auto& dlg : dialogues) {
        auto h = dialogue_representation(model, dlg);
        out << dlg.id << "," << dlg.querier_id << ",";
        if (dlg.cluster_id) out << *dlg.cluster_id;
        for (Eigen::Index k = 0; k < h.size(); ++k) {
            std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(h(k)));
            out << buf;
        }
        out << "\n";
    }
}

void export_representations(const Model& model, const std::vector<Dialogue>& dialogues,
                            const std::filesystem::path& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    export_representations(model, dialogues, out);
}

std::vector<ExportedRow> read_representations(std::istream& in) {
    std::vector<ExportedRow> rows;
    std::string line;
    bool header = true;
    while (std::getline(in, line)) {
        if (header) {
            header = false;
            continue;
        }
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string cell;
        ExportedRow r;
        std::getline(ss, r.dialogue_id, ',');
        std::getline(ss, r.querier_id, ',');
        std::getline(ss, r.cluster_id, ',');
        while (std::getline(ss, cell, ',')) {
            try {
                r.values.push_back(std::stod(cell));
            } catch (const std::exception&) {
                throw FormatError("bad number '" + cell + "' in representation export");
            }
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

double nearest_centroid_accuracy(const std::vector<ExportedRow>& rows) {
    if (rows.empty()) return 0.0;
    const std::size_t dim = rows.front().values.size();
    std::map<std::string, std::vector<double>> sums;
    std::map<std::string, std::size_t> counts;
    for (const auto& r : rows) {
        if (r.values.size() != dim) throw FormatError("ragged representation export");
        auto& s = sums[r.querier_id];
        s.resize(dim, 0.0);
        for (std::size_t k = 0; k < dim; ++k) s[k] += r.values[k];
        ++counts[r.querier_id];
    }
    std::size_t correct = 0;
    for (const auto& r : rows) {
        std::string best;
        double best_d = 0.0;
        for (const auto& [q, s] : sums) {
            std::size_t n = counts[q] - (q == r.querier_id ? 1 : 0);
            if (n == 0) continue;
            double dist = 0.0;
            for (std::size_t k = 0; k < dim; ++k) {
                double c = (s[k] - (q == r.querier_id ? r.values[k] : 0.0)) / static_cast<double>(n);
                dist += (r.values[k] - c) * (r.values[k] - c);
            }
            if (best.empty() || dist < best_d) {
                best = q;
                best_d = dist;
            }
        }
        if (best == r.querier_id) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(rows.size());
}

}  // namespace qallm
