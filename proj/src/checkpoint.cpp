#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "qallm/corpus_io.h"
#include "qallm/error.h"
#include "qallm/model.h"

namespace qallm {

namespace fs = std::filesystem;

namespace {

static_assert(sizeof(float) == 4 && std::numeric_limits<float>::is_iec559);

std::uint32_t bswap32(std::uint32_t v) {
    return (v >> 24) | ((v >> 8) & 0xFF00u) | ((v << 8) & 0xFF0000u) | (v << 24);
}

void write_tensor(const fs::path& path, const Mat<float>& m) {
    std::vector<std::uint32_t> raw(static_cast<std::size_t>(m.size()));
    std::memcpy(raw.data(), m.data(), raw.size() * 4);
    if constexpr (std::endian::native == std::endian::big) {
        for (auto& w : raw) w = bswap32(w);
    }
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size() * 4));
}

void read_tensor(const fs::path& path, Mat<float>& m) {
    std::error_code ec;
    auto size = fs::file_size(path, ec);
    if (ec) throw CorruptTensor("missing tensor file " + path.string());
    if (size != static_cast<std::uintmax_t>(m.size()) * 4) {
        throw CorruptTensor("tensor file " + path.string() + " has " + std::to_string(size) +
                            " bytes, expected " + std::to_string(m.size() * 4));
    }
    std::vector<std::uint32_t> raw(static_cast<std::size_t>(m.size()));
    std::ifstream in(path, std::ios::binary);
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(size));
    if (!in) throw CorruptTensor("short read on " + path.string());
    if constexpr (std::endian::native == std::endian::big) {
        for (auto& w : raw) w = bswap32(w);
    }
    std::memcpy(m.data(), raw.data(), raw.size() * 4);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        if (!std::isfinite(m.data()[i])) throw CorruptTensor("non-finite value in " + path.string());
    }
}

}  // namespace

void save_checkpoint(const Model& m, const std::string& dir) {
    check_shapes(m.config, m.params);
    fs::create_directories(dir);
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : m.params.tensors()) {
        std::string file = t.name + ".bin";
        write_tensor(fs::path(dir) / file, *t.value);
        tensors.push_back({{"name", t.name},
                           {"shape", {t.value->rows(), t.value->cols()}},
                           {"dtype", "float32"},
                           {"file", file}});
    }
    nlohmann::json manifest = {{"config", to_json(m.config)}, {"tensors", std::move(tensors)}};
    write_text_file(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
}

Model load_checkpoint(const std::string& dir) {
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(read_text_file(fs::path(dir) / "manifest.json"));
    } catch (const nlohmann::json::parse_error& e) {
        throw ManifestMismatch(std::string("unreadable manifest: ") + e.what());
    }
    Model m;
    m.config = model_config_from_json(manifest.at("config"));
    m.params = Params<float>::zeros(m.config);

    auto expected = expected_shapes(m.config);
    const auto& listed = manifest.at("tensors");
    if (!listed.is_array() || listed.size() != expected.size()) {
        throw ManifestMismatch("manifest lists " + std::to_string(listed.size()) +
                               " tensors, config implies " + std::to_string(expected.size()));
    }
    auto tensors = m.params.tensors();
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const auto& entry = listed[i];
        try {
            auto name = entry.at("name").get<std::string>();
            auto shape = entry.at("shape").get<std::vector<std::size_t>>();
            if (name != expected[i].first) {
                throw ManifestMismatch("manifest entry " + std::to_string(i) + " is '" + name +
                                       "', expected '" + expected[i].first + "'");
            }
            if (shape.size() != 2 || shape[0] != expected[i].second.first ||
                shape[1] != expected[i].second.second) {
                throw ManifestMismatch("tensor " + name + " shape does not match config");
            }
            if (entry.at("dtype").get<std::string>() != "float32") {
                throw ManifestMismatch("tensor " + name + " is not float32");
            }
            read_tensor(fs::path(dir) / entry.at("file").get<std::string>(), *tensors[i].value);
        } catch (const nlohmann::json::exception& e) {
            throw ManifestMismatch(std::string("malformed manifest entry: ") + e.what());
        }
    }
    return m;
}

}  // namespace qallm
