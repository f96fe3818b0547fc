// SPDX-License-Identifier: Apache-2.0
#ifndef MATTE_MATTE_INVERSION_HPP
#define MATTE_MATTE_INVERSION_HPP

#include <cmath>
#include <functional>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "matte/attribute_lists.hpp"
#include "matte/conditioning_router.hpp"
#include "matte/diffusion_backend.hpp"
#include "matte/palette.hpp"

namespace matte {

inline const std::vector<std::string>& attribute_tokens() {
    static const std::vector<std::string> tokens = {"<c>", "<o>", "<s>", "<l>"};
    return tokens;
}

struct InversionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/*================================================== types ==================================================*/

struct TokenSet {
    std::map<std::string, Vec> embeddings;
    TokenSchedule schedule = default_token_schedule();

    const Vec& at(const std::string& token) const {
        auto it = embeddings.find(token);
        if (it == embeddings.end()) {
            throw std::out_of_range("token set has no " + token);
        }
        return it->second;
    }
};

struct GroundTruth {
    Vec c_gt;
    Vec o_gt;
    std::string class_label;
    std::string color_phrase;
    std::vector<std::string> color_names;
    std::vector<std::string> style_pool;
};

enum class CsVariant { literal, absolute };
enum class TokenInit { class_word, random };

struct InversionConfig {
    double lr = 5e-3;
    int steps = 500;
    int batch = 1;
    double lambda_cs = 0.1;
    double lambda_o = 0.1;
    CsVariant cs_variant = CsVariant::absolute;
    uint64_t seed = 0;
    TokenInit token_init = TokenInit::class_word;
    double init_sigma = 0.01;
    int palette_size = 5;
    int phrase_colors = 3;

    void validate() const {
        if (lambda_cs < 0 || lambda_o < 0) {
            throw ConfigError("loss weights must be non-negative");
        }
        if (steps < 0) {
            throw ConfigError("steps must be >= 0");
        }
        if (batch < 1) {
            throw ConfigError("batch must be >= 1");
        }
        if (!(lr > 0)) {
            throw ConfigError("learning rate must be positive");
        }
    }
};

inline nlohmann::json to_json(const InversionConfig& c) {
    return {
        {"lr", c.lr},
        {"steps", c.steps},
        {"batch", c.batch},
        {"lambda_cs", c.lambda_cs},
        {"lambda_o", c.lambda_o},
        {"cs_variant", c.cs_variant == CsVariant::literal ? "literal" : "absolute"},
        {"seed", c.seed},
        {"token_init", c.token_init == TokenInit::class_word ? "class_word" : "random"},
        {"init_sigma", c.init_sigma},
        {"palette_size", c.palette_size},
        {"phrase_colors", c.phrase_colors},
    };
}

// Keys absent from `j` keep the values already in `base`.
inline InversionConfig inversion_config_from_json(const nlohmann::json& j, InversionConfig base = {}) {
    try {
        if (j.contains("lr")) base.lr = j["lr"].get<double>();
        if (j.contains("steps")) base.steps = j["steps"].get<int>();
        if (j.contains("batch")) base.batch = j["batch"].get<int>();
        if (j.contains("lambda_cs")) base.lambda_cs = j["lambda_cs"].get<double>();
        if (j.contains("lambda_o")) base.lambda_o = j["lambda_o"].get<double>();
        if (j.contains("seed")) base.seed = j["seed"].get<uint64_t>();
        if (j.contains("init_sigma")) base.init_sigma = j["init_sigma"].get<double>();
        if (j.contains("palette_size")) base.palette_size = j["palette_size"].get<int>();
        if (j.contains("phrase_colors")) base.phrase_colors = j["phrase_colors"].get<int>();
        if (j.contains("cs_variant")) {
            const auto v = j["cs_variant"].get<std::string>();
            if (v != "literal" && v != "absolute") throw ConfigError("cs_variant must be literal|absolute");
            base.cs_variant = v == "literal" ? CsVariant::literal : CsVariant::absolute;
        }
        if (j.contains("token_init")) {
            const auto v = j["token_init"].get<std::string>();
            if (v != "class_word" && v != "random") throw ConfigError("token_init must be class_word|random");
            base.token_init = v == "class_word" ? TokenInit::class_word : TokenInit::random;
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad inversion config: ") + e.what());
    }
    base.validate();
    return base;
}

struct StepRecord {
    int step = 0;
    int t = 0;
    double l_r = 0;
    double l_cs = 0;
    double l_o = 0;
    double l_inv = 0;
    std::vector<std::string> active;  // "<token>@subset"
    std::string style;
    double o_distance = 0;  // ||o - o_gt|| before this step's update; 0 when no <o>

    bool operator==(const StepRecord&) const = default;
};

struct TrainingLog {
    std::vector<StepRecord> records;

    bool operator==(const TrainingLog&) const = default;
};

inline nlohmann::json to_json(const StepRecord& r) {
    return {{"step", r.step}, {"t", r.t},         {"L_R", r.l_r},       {"L_CS", r.l_cs},           {"L_O", r.l_o},
            {"L_inv", r.l_inv}, {"active", r.active}, {"style", r.style}, {"o_distance", r.o_distance}};
}

inline StepRecord step_record_from_json(const nlohmann::json& j) {
    StepRecord r;
    r.step = j.at("step").get<int>();
    r.t = j.at("t").get<int>();
    r.l_r = j.at("L_R").get<double>();
    r.l_cs = j.at("L_CS").get<double>();
    r.l_o = j.at("L_O").get<double>();
    r.l_inv = j.at("L_inv").get<double>();
    r.active = j.at("active").get<std::vector<std::string>>();
    r.style = j.at("style").get<std::string>();
    r.o_distance = j.at("o_distance").get<double>();
    return r;
}

/*================================================== routing during training ==================================================*/

using ActiveSet = std::set<std::pair<std::string, std::string>>;  // (token, subset_id)

inline ActiveSet active_tokens(int t, const TokenSchedule& schedule, const StagePartition& stages) {
    const std::string& stage = stages.stage_of(t);
    ActiveSet out;
    for (const auto& [token, activity] : schedule) {
        if (!activity.stages.count(stage)) {
            continue;
        }
        for (const auto& subset : activity.subsets) {
            out.insert({token, subset});
        }
    }
    return out;
}

inline std::set<std::string> active_token_names(const ActiveSet& active) {
    std::set<std::string> names;
    for (const auto& [token, subset] : active) {
        names.insert(token);
    }
    return names;
}

// Per-subset prompt templates. A bracketed segment "[ of <o>]" survives only when every
// placeholder inside it is active in the cell.
struct Scaffolds {
    std::map<std::string, std::string> by_subset;
    std::map<CellKey, std::string> by_cell;  // overrides

    const std::string& for_cell(const CellKey& key) const {
        if (auto it = by_cell.find(key); it != by_cell.end()) {
            return it->second;
        }
        if (auto it = by_subset.find(key.subset); it != by_subset.end()) {
            return it->second;
        }
        throw ConfigError("no scaffold for cell " + key.str());
    }
};

inline Scaffolds default_scaffolds() {
    Scaffolds s;
    s.by_subset = {
        {"fine-down", "a photo"},
        {"moderate-down", "a[ <c> colored] photo[ in <s> style]"},
        {"coarse", "a photo[ of <o>][ in <l> layout]"},
        {"moderate-up", "a[ <c> colored] photo[ in <s> style]"},
        {"fine-up", "a photo"},
    };
    return s;
}

inline std::string render_scaffold(const std::string& scaffold, const std::set<std::string>& active) {
    std::string out;
    size_t i = 0;
    while (i < scaffold.size()) {
        if (scaffold[i] == '[') {
            const size_t end = scaffold.find(']', i);
            if (end == std::string::npos) {
                throw ConfigError("unbalanced '[' in scaffold '" + scaffold + "'");
            }
            const std::string segment = scaffold.substr(i + 1, end - i - 1);
            bool keep = true;
            for (const auto& ph : placeholders_in(segment)) {
                keep = keep && active.count(ph) > 0;
            }
            if (keep) {
                out += segment;
            }
            i = end + 1;
        } else {
            out += scaffold[i++];
        }
    }
    for (const auto& ph : placeholders_in(out)) {
        if (!active.count(ph)) {
            out = remove_placeholder(out, ph);
        }
    }
    return normalize_whitespace(out);
}

// Every cell carries the tokens active for (its subset, stage of t); all stage columns are
// identical, so resolve(grid, layer, t) is the prompt layer `layer` sees at t.
inline ConditioningGrid build_training_conditioning(int t,
                                                   const TokenSchedule& schedule,
                                                   const Scaffolds& scaffolds = default_scaffolds(),
                                                   const LayerPartition& layers = canonical_layer_partition(),
                                                   const StagePartition& stages = canonical_stage_partition()) {
    const ActiveSet active = active_tokens(t, schedule, stages);
    return joint_grid(layers, stages, [&](const LayerSubset& subset, const Stage& stage) {
        std::set<std::string> here;
        for (const auto& [token, sub] : active) {
            if (sub == subset.id) {
                here.insert(token);
            }
        }
        const std::string text = render_scaffold(scaffolds.for_cell({subset.id, stage.id}), here);
        const auto present = placeholders_in(text);
        for (const auto& token : here) {
            if (std::find(present.begin(), present.end(), token) == present.end()) {
                throw ConfigError("scaffold for cell " + subset.id + "." + stage.id + " has no slot for " + token);
            }
        }
        return CellPrompt(text);
    });
}

/*================================================== losses ==================================================*/

struct LossTerms {
    double l_r = 0;
    double l_cs = 0;
    double l_o = 0;
    double l_inv = 0;
    bool cs_included = false;
    bool o_included = false;
};

inline double reconstruction_loss(const Latent& noise, const Latent& noise_pred) {
    if (!noise.same_shape(noise_pred)) {
        throw std::invalid_argument("dimension mismatch between noise and prediction");
    }
    double acc = 0.0;
    for (size_t i = 0; i < noise.size(); ++i) {
        const double d = noise.data[i] - noise_pred.data[i];
        acc += d * d;
    }
    return acc / static_cast<double>(noise.size());
}

inline double color_style_loss(const Vec& c, const Vec& c_gt, const Vec& style, CsVariant variant) {
    const double raw = squared_distance(c, style) - squared_distance(c_gt, style);
    return variant == CsVariant::literal ? raw : std::abs(raw);
}

inline double object_loss(const Vec& o, const Vec& o_gt) { return squared_distance(o, o_gt); }

// L_inv = L_R + lambda_cs * L_CS + lambda_o * L_O, with L_CS (L_O) included only when <c> (<o>) is active.
inline LossTerms compute_losses(const Latent& noise,
                                const Latent& noise_pred,
                                const TokenSet& tokens,
                                const GroundTruth& gt,
                                const Vec& sampled_style,
                                const InversionConfig& cfg,
                                const std::set<std::string>& active) {
    LossTerms out;
    out.l_r = reconstruction_loss(noise, noise_pred);
    if (active.count("<c>")) {
        out.cs_included = true;
        out.l_cs = color_style_loss(tokens.at("<c>"), gt.c_gt, sampled_style, cfg.cs_variant);
    }
    if (active.count("<o>")) {
        out.o_included = true;
        out.l_o = object_loss(tokens.at("<o>"), gt.o_gt);
    }
    out.l_inv = out.l_r + cfg.lambda_cs * out.l_cs + cfg.lambda_o * out.l_o;
    return out;
}

// d(L_CS)/dc; the absolute variant multiplies by sign(raw), which is 0 at the kink.
inline Vec color_style_gradient(const Vec& c, const Vec& c_gt, const Vec& style, CsVariant variant) {
    double factor = 2.0;
    if (variant == CsVariant::absolute) {
        const double raw = squared_distance(c, style) - squared_distance(c_gt, style);
        factor = raw > 0 ? 2.0 : (raw < 0 ? -2.0 : 0.0);
    }
    Vec g(c.size());
    for (size_t i = 0; i < c.size(); ++i) {
        g[i] = factor * (c[i] - style[i]);
    }
    return g;
}

inline Vec object_gradient(const Vec& o, const Vec& o_gt) {
    check_same_dim(o, o_gt);
    Vec g(o.size());
    for (size_t i = 0; i < o.size(); ++i) {
        g[i] = 2.0 * (o[i] - o_gt[i]);
    }
    return g;
}

/*================================================== optimizer ==================================================*/

// Adam with per-token state; a token's moments and step count advance only when it is updated.
class SparseAdam {
public:
    explicit SparseAdam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void update(const std::string& token, Vec& param, const Vec& grad) {
        State& s = state_[token];
        if (s.m.empty()) {
            s.m.assign(param.size(), 0.0);
            s.v.assign(param.size(), 0.0);
        }
        ++s.step;
        const double bc1 = 1.0 - std::pow(beta1_, s.step);
        const double bc2 = 1.0 - std::pow(beta2_, s.step);
        for (size_t i = 0; i < param.size(); ++i) {
            s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * grad[i];
            s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * grad[i] * grad[i];
            param[i] -= lr_ * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + eps_);
        }
    }

private:
    struct State {
        Vec m;
        Vec v;
        int step = 0;
    };
    double lr_, beta1_, beta2_, eps_;
    std::map<std::string, State> state_;
};

/*================================================== inversion ==================================================*/

// One optimisation sample: the timestep, the noise draws (one per batch item) and the style.
struct StepSample {
    int t = 0;
    std::vector<Latent> noise;
    std::string style;
};

struct StepOutcome {
    LossTerms losses;
    std::map<std::string, Vec> gradients;  // d(L_inv)/d(token) for every token, zero when inactive
    ActiveSet active;
    ConditioningGrid grid;
};

struct InversionResult {
    TokenSet tokens;
    TrainingLog log;
    GroundTruth ground_truth;
};

inline Image fit_to_backend(const DiffusionBackend& backend, const Image& image) {
    const int size = backend.descriptor().image_size;
    return resize_area(image, size, size);
}

inline GroundTruth make_ground_truth(const DiffusionBackend& backend,
                                     const Image& reference,
                                     const std::string& class_label,
                                     const InversionConfig& cfg) {
    if (trim(class_label).empty()) {
        throw ConfigError("class label must be non-empty");
    }
    GroundTruth gt;
    const Palette palette = extract_palette(reference, cfg.palette_size);
    gt.color_names = palette_names(palette, cfg.phrase_colors);
    gt.color_phrase = join_color_names(gt.color_names) + " colors";
    gt.c_gt = backend.token_embedding(gt.color_phrase);
    gt.class_label = class_label;
    gt.o_gt = backend.token_embedding(class_label);
    gt.style_pool = attribute_lists().styles_train;
    return gt;
}

// Learns <c>, <o>, <s>, <l> against a single reference image. The backend's placeholders
// for the four tokens are overwritten.
class MatteInverter {
public:
    MatteInverter(DiffusionBackend& backend,
                  const Image& reference,
                  GroundTruth gt,
                  InversionConfig cfg,
                  Scaffolds scaffolds = default_scaffolds())
        : backend_(backend),
          z0_(backend.encode_image(fit_to_backend(backend, reference))),
          gt_(std::move(gt)),
          cfg_(cfg),
          scaffolds_(std::move(scaffolds)),
          rng_(cfg.seed) {
        cfg_.validate();
        if (gt_.style_pool.empty()) {
            throw ConfigError("style pool must be non-empty");
        }
        const int dim = backend_.descriptor().embedding_dim;
        if (static_cast<int>(gt_.c_gt.size()) != dim || static_cast<int>(gt_.o_gt.size()) != dim) {
            throw std::invalid_argument("ground-truth anchors must have embedding_dim entries");
        }
        for (const auto& token : attribute_tokens()) {
            Vec v = rng_.normal_vec(dim, cfg_.init_sigma);
            if (token == "<o>" && cfg_.token_init == TokenInit::class_word) {
                v = gt_.o_gt;
            }
            tokens_.embeddings[token] = v;
            backend_.register_placeholder(token, v);
        }
    }

    const TokenSet& tokens() const { return tokens_; }
    const GroundTruth& ground_truth() const { return gt_; }
    const InversionConfig& config() const { return cfg_; }

    void set_token(const std::string& token, const Vec& v) {
        tokens_.embeddings.at(token) = v;
        backend_.set_placeholder(token, v);
    }

    StepSample draw_sample() {
        StepSample s;
        s.t = static_cast<int>(rng_.uniform_int(0, kMaxTimestep));
        for (int b = 0; b < cfg_.batch; ++b) {
            s.noise.push_back(backend_.noise_like(rng_));
        }
        s.style = gt_.style_pool[static_cast<size_t>(rng_.uniform_int(0, static_cast<int64_t>(gt_.style_pool.size())))];
        return s;
    }

    // Losses and exact gradients at the current tokens; does not update anything.
    StepOutcome evaluate(const StepSample& sample) const {
        StepOutcome out;
        out.active = active_tokens(sample.t, tokens_.schedule, canonical_stage_partition());
        const auto names = active_token_names(out.active);
        out.grid = build_training_conditioning(sample.t, tokens_.schedule, scaffolds_);
        const auto conds = backend_.route(out.grid, sample.t);
        const Vec style = backend_.token_embedding(sample.style);

        for (const auto& token : attribute_tokens()) {
            out.gradients[token].assign(backend_.descriptor().embedding_dim, 0.0);
        }
        const double inv_batch = 1.0 / static_cast<double>(sample.noise.size());
        for (const Latent& noise : sample.noise) {
            const Latent z_t = q_sample(backend_.schedule(), z0_, sample.t, noise);
            const Latent pred = backend_.predict_noise(z_t, sample.t, conds);
            const LossTerms terms = compute_losses(noise, pred, tokens_, gt_, style, cfg_, names);
            out.losses.l_r += inv_batch * terms.l_r;
            out.losses.l_cs += inv_batch * terms.l_cs;
            out.losses.l_o += inv_batch * terms.l_o;
            out.losses.l_inv += inv_batch * terms.l_inv;
            out.losses.cs_included = terms.cs_included;
            out.losses.o_included = terms.o_included;

            Latent upstream = pred;
            const double n = static_cast<double>(pred.size());
            for (size_t i = 0; i < pred.size(); ++i) {
                upstream.data[i] = -2.0 * (noise.data[i] - pred.data[i]) / n * inv_batch;
            }
            const auto cond_grads = backend_.predict_noise_vjp(z_t, sample.t, conds, upstream);
            for (const auto& [token, g] : backend_.placeholder_gradients(conds, cond_grads)) {
                Vec& acc = out.gradients.at(token);
                for (size_t i = 0; i < g.size(); ++i) {
                    acc[i] += g[i];
                }
            }
        }
        if (out.losses.cs_included) {
            const Vec g = color_style_gradient(tokens_.at("<c>"), gt_.c_gt, style, cfg_.cs_variant);
            for (size_t i = 0; i < g.size(); ++i) {
                out.gradients["<c>"][i] += cfg_.lambda_cs * g[i];
            }
        }
        if (out.losses.o_included) {
            const Vec g = object_gradient(tokens_.at("<o>"), gt_.o_gt);
            for (size_t i = 0; i < g.size(); ++i) {
                out.gradients["<o>"][i] += cfg_.lambda_o * g[i];
            }
        }
        return out;
    }

    StepRecord step(int index) {
        const StepSample sample = draw_sample();
        const double o_dist = distance(tokens_.at("<o>"), gt_.o_gt);
        StepOutcome out = evaluate(sample);
        if (!std::isfinite(out.losses.l_inv)) {
            throw InversionError("non-finite loss at step " + std::to_string(index) + " (t=" +
                                 std::to_string(sample.t) + ", L_R=" + std::to_string(out.losses.l_r) + ")");
        }
        const auto names = active_token_names(out.active);
        for (const auto& token : names) {
            Vec& param = tokens_.embeddings.at(token);
            optimizer_.update(token, param, out.gradients.at(token));
            if (!all_finite(param)) {
                throw InversionError("non-finite embedding for " + token + " at step " + std::to_string(index));
            }
            backend_.set_placeholder(token, param);
        }
        StepRecord rec;
        rec.step = index;
        rec.t = sample.t;
        rec.l_r = out.losses.l_r;
        rec.l_cs = out.losses.l_cs;
        rec.l_o = out.losses.l_o;
        rec.l_inv = out.losses.l_inv;
        rec.style = sample.style;
        rec.o_distance = o_dist;
        for (const auto& [token, subset] : out.active) {
            rec.active.push_back(token + "@" + subset);
        }
        return rec;
    }

    InversionResult run() {
        InversionResult result;
        for (int i = 0; i < cfg_.steps; ++i) {
            result.log.records.push_back(step(i));
        }
        result.tokens = tokens_;
        result.ground_truth = gt_;
        return result;
    }

private:
    DiffusionBackend& backend_;
    Latent z0_;
    GroundTruth gt_;
    InversionConfig cfg_;
    Scaffolds scaffolds_;
    Rng rng_;
    TokenSet tokens_;
    SparseAdam optimizer_{cfg_.lr};
};

inline InversionResult invert(const Image& reference,
                              const std::string& class_label,
                              const InversionConfig& cfg,
                              DiffusionBackend& backend) {
    cfg.validate();
    GroundTruth gt = make_ground_truth(backend, reference, class_label, cfg);
    MatteInverter inverter(backend, reference, std::move(gt), cfg);
    return inverter.run();
}

/*================================================== baselines ==================================================*/

enum class BaselineMode { layer_only_16, stage_only_10 };

inline std::string baseline_token(BaselineMode mode, int index) {
    return (mode == BaselineMode::layer_only_16 ? "<x" : "<y") + std::to_string(index + 1) + ">";
}

inline int baseline_count(BaselineMode mode) { return mode == BaselineMode::layer_only_16 ? kNumLayers : 10; }

// Training grid for the degenerate routings: cell i reads "a photo of <x_i>" (or <y_i>).
inline ConditioningGrid baseline_training_grid(BaselineMode mode) {
    std::vector<CellPrompt> prompts;
    for (int i = 0; i < baseline_count(mode); ++i) {
        prompts.emplace_back("a photo of " + baseline_token(mode, i));
    }
    return mode == BaselineMode::layer_only_16 ? layer_only_grid(prompts) : stage_only_grid(prompts);
}

struct BaselineResult {
    BaselineMode mode = BaselineMode::layer_only_16;
    std::vector<Vec> vectors;  // index i holds <x_{i+1}> / <y_{i+1}>
    TrainingLog log;
};

// Reconstruction-only inversion of 16 per-layer or 10 per-stage placeholders.
inline BaselineResult baseline_invert(const Image& reference,
                                      BaselineMode mode,
                                      const InversionConfig& cfg,
                                      DiffusionBackend& backend) {
    cfg.validate();
    const int dim = backend.descriptor().embedding_dim;
    const Latent z0 = backend.encode_image(fit_to_backend(backend, reference));
    Rng rng(cfg.seed);
    BaselineResult result;
    result.mode = mode;
    const int n = baseline_count(mode);
    for (int i = 0; i < n; ++i) {
        result.vectors.push_back(rng.normal_vec(dim, cfg.init_sigma));
        backend.register_placeholder(baseline_token(mode, i), result.vectors.back());
    }
    const ConditioningGrid grid = baseline_training_grid(mode);
    SparseAdam adam(cfg.lr);

    for (int step = 0; step < cfg.steps; ++step) {
        const int t = static_cast<int>(rng.uniform_int(0, kMaxTimestep));
        std::vector<Latent> noises;
        for (int b = 0; b < cfg.batch; ++b) {
            noises.push_back(backend.noise_like(rng));
        }
        const auto conds = backend.route(grid, t);
        std::map<std::string, Vec> grads;
        double l_r = 0.0;
        for (const Latent& noise : noises) {
            const Latent z_t = q_sample(backend.schedule(), z0, t, noise);
            const Latent pred = backend.predict_noise(z_t, t, conds);
            l_r += reconstruction_loss(noise, pred) / cfg.batch;
            Latent upstream = pred;
            for (size_t i = 0; i < pred.size(); ++i) {
                upstream.data[i] = -2.0 * (noise.data[i] - pred.data[i]) / static_cast<double>(pred.size()) / cfg.batch;
            }
            for (const auto& [token, g] :
                 backend.placeholder_gradients(conds, backend.predict_noise_vjp(z_t, t, conds, upstream))) {
                Vec& acc = grads[token];
                if (acc.empty()) acc.assign(dim, 0.0);
                for (int i = 0; i < dim; ++i) acc[i] += g[i];
            }
        }
        if (!std::isfinite(l_r)) {
            throw InversionError("non-finite loss at step " + std::to_string(step));
        }
        StepRecord rec;
        rec.step = step;
        rec.t = t;
        rec.l_r = l_r;
        rec.l_inv = l_r;
        for (int i = 0; i < n; ++i) {
            const std::string token = baseline_token(mode, i);
            auto it = grads.find(token);
            if (it == grads.end()) {
                continue;  // not routed at this t
            }
            adam.update(token, result.vectors[i], it->second);
            backend.set_placeholder(token, result.vectors[i]);
            rec.active.push_back(token);
        }
        result.log.records.push_back(std::move(rec));
    }
    return result;
}

}  // namespace matte

#endif  // MATTE_MATTE_INVERSION_HPP
