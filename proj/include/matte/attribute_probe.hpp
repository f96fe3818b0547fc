// SPDX-License-Identifier: Apache-2.0
#ifndef MATTE_ATTRIBUTE_PROBE_HPP
#define MATTE_ATTRIBUTE_PROBE_HPP

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "matte/array_container.hpp"
#include "matte/conditioning_router.hpp"
#include "matte/diffusion_backend.hpp"
#include "matte/image.hpp"

namespace matte {

struct ProbeError : ConfigError {
    using ConfigError::ConfigError;
};

struct ProbeSpec {
    ConditioningGrid grid;
    std::vector<std::string> tracked_tokens;
    SamplerConfig sampler;
};

// maps[token] holds one map per record, records ordered by (layer, step).
struct AttentionMapStack {
    struct Entry {
        int layer = 0;
        int step = 0;
        int t = 0;
        int resolution = 0;
        std::vector<float> map;  // resolution x resolution, row-major

        bool operator==(const Entry&) const = default;
    };

    std::vector<std::string> tokens;
    std::map<std::string, std::vector<Entry>> maps;
    bool normalized = false;  // true if every map was rescaled to max 1
    std::string grid_hash;
    uint64_t seed = 0;

    const std::vector<Entry>& of(const std::string& token) const {
        auto it = maps.find(token);
        if (it == maps.end()) {
            throw ProbeError("token '" + token + "' is not tracked in this stack");
        }
        return it->second;
    }

    bool operator==(const AttentionMapStack&) const = default;
};

namespace detail {

// Positions in `tokens` of every occurrence of the piece sequence `pieces`.
inline std::vector<size_t> find_word(const std::vector<std::string>& tokens, const std::vector<std::string>& pieces) {
    std::vector<size_t> starts;
    if (pieces.empty() || pieces.size() > tokens.size()) {
        return starts;
    }
    for (size_t i = 0; i + pieces.size() <= tokens.size(); ++i) {
        if (std::equal(pieces.begin(), pieces.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i))) {
            starts.push_back(i);
        }
    }
    return starts;
}

inline std::vector<std::string> word_pieces(const DiffusionBackend& backend, const std::string& word) {
    auto tokens = backend.encode_text(word).tokens;
    // drop BOS / EOS
    if (tokens.size() >= 2) {
        tokens = std::vector<std::string>(tokens.begin() + 1, tokens.end() - 1);
    }
    return tokens;
}

}  // namespace detail

inline void validate_probe(const ProbeSpec& spec, const DiffusionBackend& backend) {
    if (spec.tracked_tokens.empty()) {
        throw ProbeError("no tracked tokens");
    }
    for (const auto& word : spec.tracked_tokens) {
        const auto pieces = detail::word_pieces(backend, word);
        bool found = false;
        for (const auto& [key, cell] : spec.grid.cells()) {
            if (cell.text && !detail::find_word(detail::word_pieces(backend, *cell.text), pieces).empty()) {
                found = true;
                break;
            }
        }
        if (!found) {
            throw ProbeError("tracked token '" + word + "' appears in no cell prompt");
        }
    }
}

struct ProbeResult {
    Image image;
    AttentionMapStack stack;
};

// Samples with routed conditioning and keeps, for every (layer, step), one map per tracked
// word. A word split into several pieces takes the elementwise max over its pieces (and over
// repeated occurrences); a word absent from the prompt delivered to that layer gets zeros.
inline ProbeResult run_probe(const ProbeSpec& spec, const DiffusionBackend& backend) {
    validate_probe(spec, backend);
    SamplerConfig cfg = spec.sampler;
    cfg.capture_attention = true;
    SampleResult sampled = sample(backend, spec.grid, cfg);

    std::sort(sampled.attention.begin(), sampled.attention.end(), [](const AttentionRecord& a, const AttentionRecord& b) {
        return std::tie(a.layer, a.step) < std::tie(b.layer, b.step);
    });

    ProbeResult out;
    out.image = std::move(sampled.image);
    out.stack.tokens = spec.tracked_tokens;
    out.stack.grid_hash = grid_hash(spec.grid);
    out.stack.seed = cfg.seed;
    for (const auto& word : spec.tracked_tokens) {
        const auto pieces = detail::word_pieces(backend, word);
        auto& entries = out.stack.maps[word];
        for (const auto& rec : sampled.attention) {
            AttentionMapStack::Entry e;
            e.layer = rec.layer;
            e.step = rec.step;
            e.t = rec.t;
            e.resolution = rec.resolution;
            const size_t pixels = static_cast<size_t>(rec.resolution) * rec.resolution;
            const size_t n_tok = rec.tokens.size();
            e.map.assign(pixels, 0.0f);
            for (size_t start : detail::find_word(rec.tokens, pieces)) {
                for (size_t k = 0; k < pieces.size(); ++k) {
                    for (size_t p = 0; p < pixels; ++p) {
                        e.map[p] = std::max(e.map[p], rec.weights[p * n_tok + start + k]);
                    }
                }
            }
            entries.push_back(std::move(e));
        }
    }
    return out;
}

// Steps of `b` are renumbered to follow those of `a`.
inline AttentionMapStack concat_stacks(const AttentionMapStack& a, const AttentionMapStack& b) {
    if (a.tokens != b.tokens) {
        throw ProbeError("cannot concatenate stacks tracking different tokens");
    }
    AttentionMapStack out = a;
    int offset = 0;
    for (const auto& [tok, entries] : a.maps) {
        for (const auto& e : entries) offset = std::max(offset, e.step + 1);
    }
    for (const auto& [tok, entries] : b.maps) {
        for (auto e : entries) {
            e.step += offset;
            out.maps[tok].push_back(std::move(e));
        }
    }
    out.normalized = a.normalized || b.normalized;
    return out;
}

/*================================================== aggregation ==================================================*/

struct AttentionSummary {
    struct Cell {
        std::vector<double> mean_map;  // resolution x resolution
        double saliency = 0.0;
        int count = 0;
    };

    std::string token;
    int resolution = 0;
    std::vector<int> layers;
    std::vector<std::string> stages;
    std::map<std::pair<int, std::string>, Cell> cells;  // (layer, stage id)

    const Cell& at(int layer, const std::string& stage) const { return cells.at({layer, stage}); }
};

// Single-channel area resampling of a square float map.
inline std::vector<double> resample_map(const std::vector<float>& map, int from, int to) {
    return resample_area(std::vector<double>(map.begin(), map.end()), from, from, to, to);
}

// Mean map per (layer, stage) on the finest resolution present in the stack; saliency is the
// mean activation of that cell's mean map. Cells with no maps are omitted.
inline AttentionSummary summarize_attention(const AttentionMapStack& stack,
                                            const std::string& token,
                                            const StagePartition& stages = canonical_stage_partition()) {
    const auto& entries = stack.of(token);
    AttentionSummary s;
    s.token = token;
    for (const auto& e : entries) s.resolution = std::max(s.resolution, e.resolution);
    for (const auto& st : stages.stages) s.stages.push_back(st.id);

    std::map<std::pair<int, std::string>, std::vector<double>> sums;
    for (const auto& e : entries) {
        const std::pair<int, std::string> key{e.layer, stages.stage_of(e.t)};
        const auto m = resample_map(e.map, e.resolution, s.resolution);
        auto& acc = sums[key];
        if (acc.empty()) acc.assign(m.size(), 0.0);
        for (size_t i = 0; i < m.size(); ++i) acc[i] += m[i];
        s.cells[key].count++;
    }
    for (auto& [key, acc] : sums) {
        auto& cell = s.cells[key];
        for (double& v : acc) v /= cell.count;
        cell.mean_map = std::move(acc);
        double total = 0.0;
        for (double v : cell.mean_map) total += v;
        cell.saliency = total / static_cast<double>(cell.mean_map.size());
        if (std::find(s.layers.begin(), s.layers.end(), key.first) == s.layers.end()) s.layers.push_back(key.first);
    }
    std::sort(s.layers.begin(), s.layers.end());
    return s;
}

/*================================================== persistence ==================================================*/

// One float32 array per (token, layer): shape [steps, res, res], plus int arrays of steps and t.
inline ArrayContainer stack_to_container(const AttentionMapStack& stack) {
    ArrayContainer c;
    c.meta = {{"tokens", stack.tokens}, {"normalized", stack.normalized}, {"grid_hash", stack.grid_hash},
              {"seed", stack.seed}};
    for (size_t ti = 0; ti < stack.tokens.size(); ++ti) {
        std::map<int, std::vector<const AttentionMapStack::Entry*>> by_layer;
        for (const auto& e : stack.of(stack.tokens[ti])) by_layer[e.layer].push_back(&e);
        for (const auto& [layer, es] : by_layer) {
            const int res = es.front()->resolution;
            std::vector<float> values;
            std::vector<double> steps;
            std::vector<double> ts;
            for (const auto* e : es) {
                values.insert(values.end(), e->map.begin(), e->map.end());
                steps.push_back(e->step);
                ts.push_back(e->t);
            }
            const std::string base = "tok" + std::to_string(ti) + "/L" + std::to_string(layer);
            const auto n = static_cast<int64_t>(es.size());
            c.arrays[base + "/maps"] = NdArray::from_floats({n, res, res}, values);
            c.arrays[base + "/step"] = NdArray::from_doubles({n}, steps);
            c.arrays[base + "/t"] = NdArray::from_doubles({n}, ts);
        }
    }
    return c;
}

inline AttentionMapStack stack_from_container(const ArrayContainer& c) {
    AttentionMapStack s;
    s.tokens = c.meta.at("tokens").get<std::vector<std::string>>();
    s.normalized = c.meta.at("normalized").get<bool>();
    s.grid_hash = c.meta.at("grid_hash").get<std::string>();
    s.seed = c.meta.at("seed").get<uint64_t>();
    for (size_t ti = 0; ti < s.tokens.size(); ++ti) {
        auto& entries = s.maps[s.tokens[ti]];
        for (int layer = 1; layer <= kNumLayers; ++layer) {
            const std::string base = "tok" + std::to_string(ti) + "/L" + std::to_string(layer);
            auto it = c.arrays.find(base + "/maps");
            if (it == c.arrays.end()) continue;
            const auto values = it->second.floats();
            const auto steps = c.arrays.at(base + "/step").doubles();
            const auto ts = c.arrays.at(base + "/t").doubles();
            const int res = static_cast<int>(it->second.shape[1]);
            const size_t px = static_cast<size_t>(res) * res;
            for (size_t k = 0; k < steps.size(); ++k) {
                AttentionMapStack::Entry e;
                e.layer = layer;
                e.step = static_cast<int>(steps[k]);
                e.t = static_cast<int>(ts[k]);
                e.resolution = res;
                e.map.assign(values.begin() + static_cast<std::ptrdiff_t>(k * px),
                             values.begin() + static_cast<std::ptrdiff_t>((k + 1) * px));
                entries.push_back(std::move(e));
            }
        }
        std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
            return std::tie(a.layer, a.step) < std::tie(b.layer, b.step);
        });
    }
    return s;
}

/*================================================== rendering ==================================================*/

// black -> red -> yellow -> white
inline std::array<double, 3> hot_ramp(double v) {
    v = std::clamp(v, 0.0, 1.0);
    return {std::clamp(3.0 * v, 0.0, 1.0), std::clamp(3.0 * v - 1.0, 0.0, 1.0), std::clamp(3.0 * v - 2.0, 0.0, 1.0)};
}

// Normalized by the panel's own max; an all-zero panel renders black.
inline Image render_heatmap(const std::vector<double>& map, int resolution, int scale = 8) {
    const double peak = map.empty() ? 0.0 : *std::max_element(map.begin(), map.end());
    Image img;
    img.width = resolution;
    img.height = resolution;
    img.channels = 3;
    img.data.resize(static_cast<size_t>(resolution) * resolution * 3);
    for (size_t p = 0; p < map.size(); ++p) {
        const auto rgb = hot_ramp(peak > 0 ? map[p] / peak : 0.0);
        for (int k = 0; k < 3; ++k) img.data[p * 3 + k] = rgb[k];
    }
    return upscale_nearest(img, scale);
}

inline std::string saliency_csv(const std::vector<AttentionSummary>& summaries) {
    std::ostringstream os;
    os << std::setprecision(17);
    os << "token,layer,stage,count,saliency\n";
    for (const auto& s : summaries) {
        for (const auto& [key, cell] : s.cells) {
            os << s.token << ',' << key.first << ',' << key.second << ',' << cell.count << ',' << cell.saliency << '\n';
        }
    }
    return os.str();
}

inline std::string file_safe(const std::string& s) {
    std::string out;
    for (char ch : s) {
        out += std::isalnum(static_cast<unsigned char>(ch)) ? ch : '_';
    }
    return out;
}

// Writes image.png, attention.marr, heatmaps/<token>_L<l>_<stage>.png and saliency.csv.
inline std::vector<std::string> write_probe_outputs(const ProbeResult& r,
                                                    const std::filesystem::path& dir,
                                                    const StagePartition& stages = canonical_stage_partition()) {
    std::filesystem::create_directories(dir / "heatmaps");
    std::vector<std::string> written;
    write_png((dir / "image.png").string(), r.image);
    written.push_back((dir / "image.png").string());
    stack_to_container(r.stack).save((dir / "attention.marr").string());
    written.push_back((dir / "attention.marr").string());
    std::vector<AttentionSummary> summaries;
    for (const auto& tok : r.stack.tokens) {
        summaries.push_back(summarize_attention(r.stack, tok, stages));
        const auto& s = summaries.back();
        for (const auto& [key, cell] : s.cells) {
            const auto path = dir / "heatmaps" /
                              (file_safe(tok) + "_L" + std::to_string(key.first) + "_" + file_safe(key.second) + ".png");
            write_png(path.string(), render_heatmap(cell.mean_map, s.resolution));
            written.push_back(path.string());
        }
    }
    std::ofstream((dir / "saliency.csv").string()) << saliency_csv(summaries);
    written.push_back((dir / "saliency.csv").string());
    return written;
}

}  // namespace matte

#endif  // MATTE_ATTRIBUTE_PROBE_HPP
