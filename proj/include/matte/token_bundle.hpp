// SPDX-License-Identifier: Apache-2.0
#ifndef MATTE_TOKEN_BUNDLE_HPP
#define MATTE_TOKEN_BUNDLE_HPP

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "matte/matte_inversion.hpp"

// Token bundle, version 1 (all integers little-endian):
//
//   "MATTETOK"                    8 bytes
//   u32 version                   = 1
//   u64 n, n bytes                JSON metadata (mode, schedule, config, ground truth, hashes)
//   u32 count                     number of embeddings
//   count x { u32 n, name bytes; u32 dim; dim x f64 }
//   u64 n, n bytes                training log, one JSON object per line
//
// The embedding values are stored raw so that a reload is bit-exact.

namespace matte {

static_assert(std::endian::native == std::endian::little, "token bundle assumes a little-endian host");

struct BundleError : ConfigError {
    using ConfigError::ConfigError;
};

// What the evaluation harness needs to know about the reference.
struct BundleTruth {
    std::string class_label;
    std::string color_phrase;
    std::vector<std::string> color_names;
    std::string style_label;
    Vec c_gt;
    Vec o_gt;

    bool operator==(const BundleTruth&) const = default;
};

struct TokenBundle {
    static constexpr char kMagic[8] = {'M', 'A', 'T', 'T', 'E', 'T', 'O', 'K'};
    static constexpr uint32_t kVersion = 1;

    std::string mode = "matte";  // matte | p16 | s10
    std::map<std::string, Vec> embeddings;
    TokenSchedule schedule;  // empty for p16 / s10
    nlohmann::json config = nlohmann::json::object();
    BundleTruth truth;
    std::string reference_hash;
    std::string backend;
    TrainingLog log;

    bool operator==(const TokenBundle& o) const {
        return mode == o.mode && embeddings == o.embeddings && schedule == o.schedule && config == o.config &&
               truth == o.truth && reference_hash == o.reference_hash && backend == o.backend && log == o.log;
    }
};

inline nlohmann::json schedule_to_json(const TokenSchedule& s) {
    nlohmann::json j = nlohmann::json::object();
    for (const auto& [tok, a] : s) {
        j[tok] = {{"subsets", a.subsets}, {"stages", a.stages}};
    }
    return j;
}

inline TokenSchedule schedule_from_json(const nlohmann::json& j) {
    TokenSchedule s;
    for (const auto& [tok, a] : j.items()) {
        s[tok] = {a.at("subsets").get<std::set<std::string>>(), a.at("stages").get<std::set<std::string>>()};
    }
    return s;
}

namespace detail {

template <typename T>
void put(std::string& out, T v) {
    out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T take(const std::string& in, size_t& pos) {
    if (pos + sizeof(T) > in.size()) throw BundleError("truncated token bundle");
    T v;
    std::memcpy(&v, in.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
}

inline std::string take_bytes(const std::string& in, size_t& pos, size_t n) {
    if (pos + n > in.size()) throw BundleError("truncated token bundle");
    std::string s = in.substr(pos, n);
    pos += n;
    return s;
}

}  // namespace detail

inline std::string serialize_bundle(const TokenBundle& b) {
    nlohmann::json meta = {
        {"mode", b.mode},
        {"schedule", schedule_to_json(b.schedule)},
        {"config", b.config},
        {"ground_truth",
         {{"class_label", b.truth.class_label},
          {"color_phrase", b.truth.color_phrase},
          {"color_names", b.truth.color_names},
          {"style_label", b.truth.style_label},
          {"c_gt", b.truth.c_gt},
          {"o_gt", b.truth.o_gt}}},
        {"reference_hash", b.reference_hash},
        {"backend", b.backend},
    };
    const std::string m = meta.dump();
    std::string out(TokenBundle::kMagic, sizeof(TokenBundle::kMagic));
    detail::put<uint32_t>(out, TokenBundle::kVersion);
    detail::put<uint64_t>(out, m.size());
    out += m;
    detail::put<uint32_t>(out, static_cast<uint32_t>(b.embeddings.size()));
    for (const auto& [name, v] : b.embeddings) {
        detail::put<uint32_t>(out, static_cast<uint32_t>(name.size()));
        out += name;
        detail::put<uint32_t>(out, static_cast<uint32_t>(v.size()));
        for (double x : v) detail::put<double>(out, x);
    }
    std::string log;
    for (const auto& r : b.log.records) log += to_json(r).dump() + "\n";
    detail::put<uint64_t>(out, log.size());
    out += log;
    return out;
}

inline TokenBundle deserialize_bundle(const std::string& in) {
    if (in.size() < sizeof(TokenBundle::kMagic) || std::memcmp(in.data(), TokenBundle::kMagic, 8) != 0) {
        throw BundleError("not a token bundle");
    }
    size_t pos = 8;
    const auto version = detail::take<uint32_t>(in, pos);
    if (version != TokenBundle::kVersion) {
        throw BundleError("unsupported token bundle version " + std::to_string(version));
    }
    TokenBundle b;
    try {
        const auto meta = nlohmann::json::parse(detail::take_bytes(in, pos, detail::take<uint64_t>(in, pos)));
        b.mode = meta.at("mode").get<std::string>();
        b.schedule = schedule_from_json(meta.at("schedule"));
        b.config = meta.at("config");
        const auto& gt = meta.at("ground_truth");
        b.truth.class_label = gt.at("class_label").get<std::string>();
        b.truth.color_phrase = gt.at("color_phrase").get<std::string>();
        b.truth.color_names = gt.at("color_names").get<std::vector<std::string>>();
        b.truth.style_label = gt.at("style_label").get<std::string>();
        b.truth.c_gt = gt.at("c_gt").get<Vec>();
        b.truth.o_gt = gt.at("o_gt").get<Vec>();
        b.reference_hash = meta.at("reference_hash").get<std::string>();
        b.backend = meta.at("backend").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
        throw BundleError(std::string("bad token bundle metadata: ") + e.what());
    }
    const auto count = detail::take<uint32_t>(in, pos);
    for (uint32_t i = 0; i < count; ++i) {
        const std::string name = detail::take_bytes(in, pos, detail::take<uint32_t>(in, pos));
        const auto dim = detail::take<uint32_t>(in, pos);
        Vec v(dim);
        for (auto& x : v) x = detail::take<double>(in, pos);
        b.embeddings[name] = std::move(v);
    }
    std::istringstream log(detail::take_bytes(in, pos, detail::take<uint64_t>(in, pos)));
    for (std::string line; std::getline(log, line);) {
        if (!line.empty()) b.log.records.push_back(step_record_from_json(nlohmann::json::parse(line)));
    }
    return b;
}

inline void save_bundle(const std::string& path, const TokenBundle& b) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write '" + path + "'");
    const std::string bytes = serialize_bundle(b);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

inline TokenBundle load_bundle(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw BundleError("cannot open token bundle '" + path + "'");
    std::ostringstream ss;
    ss << f.rdbuf();
    return deserialize_bundle(ss.str());
}

// Registers (or overwrites) every placeholder of the bundle on the backend.
inline void install_bundle(const TokenBundle& b, DiffusionBackend& backend) {
    for (const auto& [name, v] : b.embeddings) {
        if (static_cast<int>(v.size()) != backend.descriptor().embedding_dim) {
            throw BackendError("bundle token " + name + " has dim " + std::to_string(v.size()) + ", backend expects " +
                               std::to_string(backend.descriptor().embedding_dim));
        }
        if (backend.has_placeholder(name)) {
            backend.set_placeholder(name, v);
        } else {
            backend.register_placeholder(name, v);
        }
    }
}

inline TokenBundle bundle_from_inversion(const InversionResult& r, const InversionConfig& cfg) {
    TokenBundle b;
    b.mode = "matte";
    b.embeddings = r.tokens.embeddings;
    b.schedule = r.tokens.schedule;
    b.config = to_json(cfg);
    b.truth.class_label = r.ground_truth.class_label;
    b.truth.color_phrase = r.ground_truth.color_phrase;
    b.truth.color_names = r.ground_truth.color_names;
    b.truth.c_gt = r.ground_truth.c_gt;
    b.truth.o_gt = r.ground_truth.o_gt;
    b.log = r.log;
    return b;
}

inline TokenBundle bundle_from_baseline(const BaselineResult& r, const InversionConfig& cfg) {
    TokenBundle b;
    b.mode = r.mode == BaselineMode::layer_only_16 ? "p16" : "s10";
    for (size_t i = 0; i < r.vectors.size(); ++i) {
        b.embeddings[baseline_token(r.mode, static_cast<int>(i))] = r.vectors[i];
    }
    b.config = to_json(cfg);
    b.log = r.log;
    return b;
}

}  // namespace matte

#endif  // MATTE_TOKEN_BUNDLE_HPP
