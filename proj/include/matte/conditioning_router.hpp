// SPDX-License-Identifier: Apache-2.0
#ifndef MATTE_CONDITIONING_ROUTER_HPP
#define MATTE_CONDITIONING_ROUTER_HPP

#include <algorithm>
#include <array>
#include <compare>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "matte/common.hpp"

/*================================================== ConditioningRouter ==================================================*/

// Maps every (cross-attention layer, timestep) pair of the denoiser onto one cell of a
// conditioning grid. Layers are numbered 1..16:
//   L1..L6   encoder (64, 64, 32, 32, 16, 16)
//   L7       mid     (8)
//   L8..L16  decoder (16, 16, 16, 32, 32, 32, 64, 64, 64)
// Timesteps live in [0, 1000) and stages are half-open [lo, hi).

namespace matte {

constexpr int kNumLayers = 16;
constexpr int kMaxTimestep = 1000;

constexpr std::array<int, kNumLayers> kCanonicalLayerResolution = {64, 64, 32, 32, 16, 16, 8, 16,
                                                                   16, 16, 32, 32, 32, 64, 64, 64};

struct LayerSubset {
    std::string id;
    std::vector<int> layers;  // 1-based
};

struct LayerPartition {
    std::vector<LayerSubset> subsets;
    std::array<int, kNumLayers> layer_resolution = kCanonicalLayerResolution;

    void validate() const {
        if (subsets.empty()) {
            throw GridError("layer partition has no subsets");
        }
        std::array<int, kNumLayers> owner{};
        std::set<std::string> ids;
        for (size_t s = 0; s < subsets.size(); ++s) {
            if (!ids.insert(subsets[s].id).second) {
                throw GridError("duplicate subset id '" + subsets[s].id + "'");
            }
            for (int layer : subsets[s].layers) {
                if (layer < 1 || layer > kNumLayers) {
                    throw GridError("layer index " + std::to_string(layer) + " outside 1.." +
                                    std::to_string(kNumLayers));
                }
                if (owner[layer - 1] != 0) {
                    throw GridError("overlapping subsets: layer " + std::to_string(layer) + " in '" +
                                    subsets[owner[layer - 1] - 1].id + "' and '" + subsets[s].id + "'");
                }
                owner[layer - 1] = static_cast<int>(s) + 1;
            }
        }
        for (int layer = 1; layer <= kNumLayers; ++layer) {
            if (owner[layer - 1] == 0) {
                throw GridError("layer " + std::to_string(layer) + " not covered by any subset");
            }
        }
        for (int r : layer_resolution) {
            if (r != 8 && r != 16 && r != 32 && r != 64) {
                throw GridError("layer resolution must be one of 8, 16, 32, 64");
            }
        }
    }

    const std::string& subset_of(int layer) const {
        if (layer < 1 || layer > kNumLayers) {
            throw std::out_of_range("layer index " + std::to_string(layer) + " outside 1.." +
                                    std::to_string(kNumLayers));
        }
        for (const auto& s : subsets) {
            if (std::find(s.layers.begin(), s.layers.end(), layer) != s.layers.end()) {
                return s.id;
            }
        }
        throw GridError("layer " + std::to_string(layer) + " not covered by any subset");
    }

    const LayerSubset& subset(const std::string& id) const {
        for (const auto& s : subsets) {
            if (s.id == id) {
                return s;
            }
        }
        throw std::out_of_range("unknown subset '" + id + "'");
    }

    bool has_subset(const std::string& id) const {
        return std::any_of(subsets.begin(), subsets.end(), [&](const auto& s) { return s.id == id; });
    }
};

struct Stage {
    std::string id;
    int lo = 0;  // inclusive
    int hi = 0;  // exclusive
};

struct StagePartition {
    std::vector<Stage> stages;

    void validate() const {
        if (stages.empty()) {
            throw GridError("stage partition has no stages");
        }
        std::set<std::string> ids;
        for (const auto& s : stages) {
            if (!ids.insert(s.id).second) {
                throw GridError("duplicate stage id '" + s.id + "'");
            }
            if (s.lo < 0 || s.hi > kMaxTimestep || s.lo >= s.hi) {
                throw GridError("stage '" + s.id + "' has invalid interval [" + std::to_string(s.lo) + "," +
                                std::to_string(s.hi) + ")");
            }
        }
        std::vector<Stage> sorted = stages;
        std::sort(sorted.begin(), sorted.end(), [](const Stage& a, const Stage& b) { return a.lo < b.lo; });
        int cursor = 0;
        for (const auto& s : sorted) {
            if (s.lo > cursor) {
                throw GridError("timestep gap [" + std::to_string(cursor) + "," + std::to_string(s.lo) + ")");
            }
            if (s.lo < cursor) {
                throw GridError("timestep overlap [" + std::to_string(s.lo) + "," + std::to_string(cursor) + ")");
            }
            cursor = s.hi;
        }
        if (cursor != kMaxTimestep) {
            throw GridError("timestep gap [" + std::to_string(cursor) + "," + std::to_string(kMaxTimestep) + ")");
        }
    }

    const std::string& stage_of(int t) const {
        if (t < 0 || t >= kMaxTimestep) {
            throw std::out_of_range("timestep " + std::to_string(t) + " outside [0," +
                                    std::to_string(kMaxTimestep) + ")");
        }
        for (const auto& s : stages) {
            if (t >= s.lo && t < s.hi) {
                return s.id;
            }
        }
        throw GridError("timestep " + std::to_string(t) + " not covered by any stage");
    }

    const Stage& stage(const std::string& id) const {
        for (const auto& s : stages) {
            if (s.id == id) {
                return s;
            }
        }
        throw std::out_of_range("unknown stage '" + id + "'");
    }

    bool has_stage(const std::string& id) const {
        return std::any_of(stages.begin(), stages.end(), [&](const auto& s) { return s.id == id; });
    }
};

struct CellKey {
    std::string subset;
    std::string stage;

    auto operator<=>(const CellKey&) const = default;

    std::string str() const { return subset + "." + stage; }
};

struct CellPrompt {
    std::optional<std::string> text;
    std::optional<std::vector<Vec>> embedded;  // precomputed conditioning sequence

    CellPrompt() = default;
    CellPrompt(std::string t) : text(std::move(t)) {}  // NOLINT: implicit from prompt text
    CellPrompt(const char* t) : text(std::string(t)) {}  // NOLINT

    bool operator==(const CellPrompt&) const = default;

    void validate() const {
        if (!text && !embedded) {
            throw GridError("cell prompt has neither text nor embedded conditioning");
        }
        if (text) {
            const auto ph = placeholders_in(*text);
            std::set<std::string> seen;
            for (const auto& p : ph) {
                if (!seen.insert(p).second) {
                    throw GridError("placeholder " + p + " appears more than once in '" + *text + "'");
                }
            }
        }
    }

    std::string describe() const { return text ? *text : std::string("<embedded>"); }
};

enum class RoutingMode { joint, layer_only, stage_only, uniform };

inline std::string to_string(RoutingMode m) {
    switch (m) {
        case RoutingMode::joint:
            return "joint";
        case RoutingMode::layer_only:
            return "layer_only";
        case RoutingMode::stage_only:
            return "stage_only";
        case RoutingMode::uniform:
            return "uniform";
    }
    return "?";
}

inline RoutingMode routing_mode_from_string(const std::string& s) {
    if (s == "joint") return RoutingMode::joint;
    if (s == "layer_only") return RoutingMode::layer_only;
    if (s == "stage_only") return RoutingMode::stage_only;
    if (s == "uniform") return RoutingMode::uniform;
    throw GridError("unknown routing mode '" + s + "'");
}

/*================================================== partitions ==================================================*/

inline LayerPartition canonical_layer_partition() {
    LayerPartition p;
    p.subsets = {
        {"fine-down", {1, 2}},
        {"moderate-down", {3, 4, 5}},
        {"coarse", {6, 7, 8, 9}},
        {"moderate-up", {10, 11, 12, 13}},
        {"fine-up", {14, 15, 16}},
    };
    return p;
}

// Forward-process stages t1'..t4'; t1 is the noisiest.
inline StagePartition canonical_stage_partition() {
    return StagePartition{{{"t1", 800, 1000}, {"t2", 600, 800}, {"t3", 200, 600}, {"t4", 0, 200}}};
}

inline LayerPartition single_subset_partition(std::string id = "all") {
    LayerPartition p;
    LayerSubset s{std::move(id), {}};
    for (int l = 1; l <= kNumLayers; ++l) {
        s.layers.push_back(l);
    }
    p.subsets.push_back(std::move(s));
    return p;
}

inline StagePartition single_stage_partition(std::string id = "all") {
    return StagePartition{{{std::move(id), 0, kMaxTimestep}}};
}

// One subset per layer, ids "L1".."L16".
inline LayerPartition per_layer_partition() {
    LayerPartition p;
    for (int l = 1; l <= kNumLayers; ++l) {
        p.subsets.push_back({"L" + std::to_string(l), {l}});
    }
    return p;
}

// n equal stages, id "s1" is the noisiest ([1000 - 1000/n, 1000)).
inline StagePartition equal_stage_partition(int n) {
    if (n < 1 || kMaxTimestep % n != 0) {
        throw GridError("stage count must divide " + std::to_string(kMaxTimestep));
    }
    StagePartition p;
    const int width = kMaxTimestep / n;
    for (int j = 0; j < n; ++j) {
        const int hi = kMaxTimestep - j * width;
        p.stages.push_back({"s" + std::to_string(j + 1), hi - width, hi});
    }
    return p;
}

inline CellKey locate(const LayerPartition& layers, const StagePartition& stages, int layer_index, int t) {
    return CellKey{layers.subset_of(layer_index), stages.stage_of(t)};
}

/*================================================== grid ==================================================*/

class ConditioningGrid {
public:
    ConditioningGrid() = default;

    RoutingMode mode() const { return mode_; }
    const LayerPartition& layer_partition() const { return layers_; }
    const StagePartition& stage_partition() const { return stages_; }
    const std::map<CellKey, CellPrompt>& cells() const { return cells_; }

    const CellPrompt& cell(const CellKey& key) const {
        auto it = cells_.find(key);
        if (it == cells_.end()) {
            throw std::out_of_range("no cell " + key.str());
        }
        return it->second;
    }

    CellKey locate(int layer_index, int t) const { return matte::locate(layers_, stages_, layer_index, t); }

    const CellPrompt& resolve(int layer_index, int t) const {
        // validate both ranges even where the mode ignores one axis
        CellKey key = locate(layer_index, t);
        return cell(key);
    }

    bool operator==(const ConditioningGrid& other) const {
        if (mode_ != other.mode_ || cells_ != other.cells_) {
            return false;
        }
        if (layers_.subsets.size() != other.layers_.subsets.size() ||
            stages_.stages.size() != other.stages_.stages.size()) {
            return false;
        }
        for (size_t i = 0; i < layers_.subsets.size(); ++i) {
            if (layers_.subsets[i].id != other.layers_.subsets[i].id ||
                layers_.subsets[i].layers != other.layers_.subsets[i].layers) {
                return false;
            }
        }
        for (size_t i = 0; i < stages_.stages.size(); ++i) {
            const auto& a = stages_.stages[i];
            const auto& b = other.stages_.stages[i];
            if (a.id != b.id || a.lo != b.lo || a.hi != b.hi) {
                return false;
            }
        }
        return layers_.layer_resolution == other.layers_.layer_resolution;
    }

    friend ConditioningGrid build_grid(RoutingMode, LayerPartition, StagePartition, std::map<CellKey, CellPrompt>);

private:
    RoutingMode mode_ = RoutingMode::uniform;
    LayerPartition layers_;
    StagePartition stages_;
    std::map<CellKey, CellPrompt> cells_;
};

// Uniform mode accepts a single prompt (under any key) and replicates it into every cell.
inline ConditioningGrid build_grid(RoutingMode mode,
                                   LayerPartition layers,
                                   StagePartition stages,
                                   std::map<CellKey, CellPrompt> cells) {
    layers.validate();
    stages.validate();

    if (mode == RoutingMode::layer_only && stages.stages.size() != 1) {
        throw GridError("layer_only grid requires exactly one stage");
    }
    if (mode == RoutingMode::stage_only && layers.subsets.size() != 1) {
        throw GridError("stage_only grid requires exactly one layer subset");
    }

    if (mode == RoutingMode::uniform) {
        if (cells.empty()) {
            throw GridError("uniform grid needs one prompt");
        }
        const CellPrompt shared = cells.begin()->second;
        for (const auto& [key, prompt] : cells) {
            if (!(prompt == shared)) {
                throw GridError("uniform grid cells differ at " + key.str());
            }
        }
        cells.clear();
        for (const auto& s : layers.subsets) {
            for (const auto& st : stages.stages) {
                cells[{s.id, st.id}] = shared;
            }
        }
    }

    for (const auto& [key, prompt] : cells) {
        if (!layers.has_subset(key.subset) || !stages.has_stage(key.stage)) {
            throw GridError("extra cell " + key.str());
        }
        prompt.validate();
    }
    for (const auto& s : layers.subsets) {
        for (const auto& st : stages.stages) {
            if (!cells.count({s.id, st.id})) {
                throw GridError("missing cell " + s.id + "." + st.id);
            }
        }
    }

    ConditioningGrid g;
    g.mode_ = mode;
    g.layers_ = std::move(layers);
    g.stages_ = std::move(stages);
    g.cells_ = std::move(cells);
    return g;
}

inline ConditioningGrid uniform_grid(const CellPrompt& prompt) {
    return build_grid(RoutingMode::uniform, canonical_layer_partition(), canonical_stage_partition(),
                      {{{"coarse", "t1"}, prompt}});
}

// Cells from a [stage][subset] table laid out like the canonical partitions.
inline ConditioningGrid joint_grid(const LayerPartition& layers,
                                   const StagePartition& stages,
                                   const std::function<CellPrompt(const LayerSubset&, const Stage&)>& fill) {
    std::map<CellKey, CellPrompt> cells;
    for (const auto& s : layers.subsets) {
        for (const auto& st : stages.stages) {
            cells[{s.id, st.id}] = fill(s, st);
        }
    }
    return build_grid(RoutingMode::joint, layers, stages, std::move(cells));
}

// 16 prompts, one per layer.
inline ConditioningGrid layer_only_grid(const std::vector<CellPrompt>& per_layer) {
    if (per_layer.size() != kNumLayers) {
        throw GridError("layer_only grid needs " + std::to_string(kNumLayers) + " prompts");
    }
    LayerPartition layers = per_layer_partition();
    StagePartition stages = single_stage_partition();
    std::map<CellKey, CellPrompt> cells;
    for (int l = 0; l < kNumLayers; ++l) {
        cells[{layers.subsets[l].id, "all"}] = per_layer[l];
    }
    return build_grid(RoutingMode::layer_only, std::move(layers), std::move(stages), std::move(cells));
}

// prompts[0] conditions the noisiest stage.
inline ConditioningGrid stage_only_grid(const std::vector<CellPrompt>& per_stage) {
    StagePartition stages = equal_stage_partition(static_cast<int>(per_stage.size()));
    LayerPartition layers = single_subset_partition();
    std::map<CellKey, CellPrompt> cells;
    for (size_t j = 0; j < per_stage.size(); ++j) {
        cells[{"all", stages.stages[j].id}] = per_stage[j];
    }
    return build_grid(RoutingMode::stage_only, std::move(layers), std::move(stages), std::move(cells));
}

/*================================================== token schedules ==================================================*/

struct TokenActivity {
    std::set<std::string> subsets;
    std::set<std::string> stages;

    bool operator==(const TokenActivity&) const = default;

    bool active_in(const CellKey& key) const { return subsets.count(key.subset) && stages.count(key.stage); }
};

using TokenSchedule = std::map<std::string, TokenActivity>;

// <c>, <s>: moderate layers in t1', t2'. <o>: coarse in t2', t3'. <l>: coarse in t1'.
inline TokenSchedule default_token_schedule() {
    return {
        {"<c>", {{"moderate-down", "moderate-up"}, {"t1", "t2"}}},
        {"<s>", {{"moderate-down", "moderate-up"}, {"t1", "t2"}}},
        {"<o>", {{"coarse"}, {"t2", "t3"}}},
        {"<l>", {{"coarse"}, {"t1"}}},
    };
}

enum class ExpandPolicy { active_cells_only, everywhere };

inline std::string remove_placeholder(std::string text, const std::string& token) {
    size_t pos = 0;
    while ((pos = text.find(token, pos)) != std::string::npos) {
        text.replace(pos, token.size(), " ");
    }
    return normalize_whitespace(text);
}

// Builds a joint grid for a generation-time prompt: each cell keeps only the tokens active there.
inline ConditioningGrid expand_prompt(const std::string& user_prompt,
                                      const TokenSchedule& schedule,
                                      ExpandPolicy policy,
                                      const LayerPartition& layers = canonical_layer_partition(),
                                      const StagePartition& stages = canonical_stage_partition()) {
    const std::string prompt = normalize_whitespace(normalize_placeholders(user_prompt));
    const auto tokens = placeholders_in(prompt);
    for (const auto& tok : tokens) {
        if (!schedule.count(tok)) {
            throw GridError("unknown placeholder token " + tok);
        }
    }
    return joint_grid(layers, stages, [&](const LayerSubset& s, const Stage& st) {
        if (policy == ExpandPolicy::everywhere) {
            return CellPrompt(prompt);
        }
        std::string text = prompt;
        for (const auto& tok : tokens) {
            if (!schedule.at(tok).active_in({s.id, st.id})) {
                text = remove_placeholder(text, tok);
            }
        }
        return CellPrompt(text);
    });
}

/*================================================== JSON ==================================================*/

inline nlohmann::json grid_to_json(const ConditioningGrid& grid) {
    nlohmann::json j;
    j["mode"] = to_string(grid.mode());
    nlohmann::json subsets = nlohmann::json::array();
    nlohmann::json subset_ids = nlohmann::json::array();
    for (const auto& s : grid.layer_partition().subsets) {
        subsets.push_back(s.layers);
        subset_ids.push_back(s.id);
    }
    nlohmann::json stages = nlohmann::json::array();
    nlohmann::json stage_ids = nlohmann::json::array();
    for (const auto& st : grid.stage_partition().stages) {
        stages.push_back({st.lo, st.hi});
        stage_ids.push_back(st.id);
    }
    j["subsets"] = subsets;
    j["subset_ids"] = subset_ids;
    j["stages"] = stages;
    j["stage_ids"] = stage_ids;
    if (grid.layer_partition().layer_resolution != kCanonicalLayerResolution) {
        j["layer_resolution"] = grid.layer_partition().layer_resolution;
    }
    nlohmann::json cells = nlohmann::json::object();
    for (const auto& [key, prompt] : grid.cells()) {
        if (prompt.text && !prompt.embedded) {
            cells[key.str()] = *prompt.text;
        } else {
            nlohmann::json c = nlohmann::json::object();
            if (prompt.text) {
                c["text"] = *prompt.text;
            }
            if (prompt.embedded) {
                c["embedded"] = *prompt.embedded;
            }
            cells[key.str()] = c;
        }
    }
    j["cells"] = cells;
    return j;
}

// Subset ids default to "s1".."sN" and stage ids to "t1".."tM" when not given. Without
// "subsets" / "stages" the mode's standard partition is used (stage_only: 10 equal stages),
// and a uniform grid may be written as {"mode": "uniform", "prompt": "..."}.
inline ConditioningGrid grid_from_json(const nlohmann::json& j) {
    try {
        const RoutingMode mode = routing_mode_from_string(j.at("mode").get<std::string>());
        if (mode == RoutingMode::uniform && j.contains("prompt")) {
            return uniform_grid(CellPrompt(normalize_placeholders(j["prompt"].get<std::string>())));
        }
        LayerPartition layers;
        if (!j.contains("subsets")) {
            layers = mode == RoutingMode::joint        ? canonical_layer_partition()
                     : mode == RoutingMode::layer_only ? per_layer_partition()
                                                       : single_subset_partition();
        }
        const auto& subsets = j.contains("subsets") ? j["subsets"] : nlohmann::json::array();
        for (size_t i = 0; i < subsets.size(); ++i) {
            std::string id = j.contains("subset_ids") ? j["subset_ids"].at(i).get<std::string>()
                                                      : "s" + std::to_string(i + 1);
            layers.subsets.push_back({std::move(id), subsets[i].get<std::vector<int>>()});
        }
        if (j.contains("layer_resolution")) {
            layers.layer_resolution = j["layer_resolution"].get<std::array<int, kNumLayers>>();
        }
        StagePartition stages;
        if (!j.contains("stages")) {
            stages = mode == RoutingMode::joint        ? canonical_stage_partition()
                     : mode == RoutingMode::stage_only ? equal_stage_partition(10)
                                                       : single_stage_partition();
        }
        const auto& st = j.contains("stages") ? j["stages"] : nlohmann::json::array();
        for (size_t i = 0; i < st.size(); ++i) {
            std::string id = j.contains("stage_ids") ? j["stage_ids"].at(i).get<std::string>()
                                                     : "t" + std::to_string(i + 1);
            stages.stages.push_back({std::move(id), st[i].at(0).get<int>(), st[i].at(1).get<int>()});
        }
        std::map<CellKey, CellPrompt> cells;
        for (const auto& [k, v] : j.at("cells").items()) {
            const size_t dot_pos = k.rfind('.');
            if (dot_pos == std::string::npos) {
                throw GridError("cell key '" + k + "' is not of the form subset.stage");
            }
            CellPrompt prompt;
            if (v.is_string()) {
                prompt.text = v.get<std::string>();
            } else {
                if (v.contains("text")) {
                    prompt.text = v["text"].get<std::string>();
                }
                if (v.contains("embedded")) {
                    prompt.embedded = v["embedded"].get<std::vector<Vec>>();
                }
            }
            if (prompt.text) {
                prompt.text = normalize_placeholders(*prompt.text);
            }
            cells[{k.substr(0, dot_pos), k.substr(dot_pos + 1)}] = std::move(prompt);
        }
        return build_grid(mode, std::move(layers), std::move(stages), std::move(cells));
    } catch (const nlohmann::json::exception& e) {
        throw GridError(std::string("malformed grid document: ") + e.what());
    }
}

inline std::string grid_hash(const ConditioningGrid& grid) { return hex64(fnv1a64(grid_to_json(grid).dump())); }

}  // namespace matte

#endif  // MATTE_CONDITIONING_ROUTER_HPP
