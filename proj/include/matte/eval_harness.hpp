// SPDX-License-Identifier: Apache-2.0
#ifndef MATTE_EVAL_HARNESS_HPP
#define MATTE_EVAL_HARNESS_HPP

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <future>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "matte/attribute_lists.hpp"
#include "matte/diffusion_backend.hpp"
#include "matte/matte_inversion.hpp"
#include "matte/token_bundle.hpp"

namespace matte {

struct EvalError : ConfigError {
    using ConfigError::ConfigError;
};

/*================================================== similarity ==================================================*/

inline double cosine(const Vec& a, const Vec& b) {
    check_same_dim(a, b);
    const double na = norm(a);
    const double nb = norm(b);
    if (na == 0.0 || nb == 0.0) {
        throw std::invalid_argument("cosine of a zero vector");
    }
    return dot(a, b) / (na * nb);
}

struct Encoders {
    std::function<Vec(const Image&)> image;
    std::function<Vec(const std::string&)> text;
};

inline Encoders encoders_of(const DiffusionBackend& backend) {
    return {[&backend](const Image& img) { return backend.image_embedding(img); },
            [&backend](const std::string& s) { return backend.text_embedding(s); }};
}

struct Label {
    size_t index = 0;
    std::string text;
};

// argmax of cosine(image, text); the first candidate wins ties.
inline Label nn_label(const Vec& image_embedding, const std::vector<std::string>& candidates, const Encoders& enc) {
    if (candidates.empty()) {
        throw std::invalid_argument("nn_label needs at least one candidate");
    }
    Label best{0, candidates[0]};
    double best_sim = -INFINITY;
    for (size_t i = 0; i < candidates.size(); ++i) {
        const double s = cosine(image_embedding, enc.text(candidates[i]));
        if (s > best_sim) {
            best_sim = s;
            best = {i, candidates[i]};
        }
    }
    return best;
}

inline Label nn_label(const Image& image, const std::vector<std::string>& candidates, const Encoders& enc) {
    return nn_label(enc.image(image), candidates, enc);
}

/*================================================== records ==================================================*/

// One per generated image (or, for text-text rows, one per prompt pair).
struct ImageScore {
    std::string metric;
    std::string subject;
    std::string setting;
    int index = 0;
    uint64_t seed = 0;
    double score = 0.0;

    bool operator==(const ImageScore&) const = default;
};

struct ReportRow {
    std::string metric;
    std::string subject;
    double score = 0.0;
    int n_images = 0;
    std::vector<uint64_t> seeds;
    std::string config_hash;

    bool operator==(const ReportRow&) const = default;
};

struct EvalReport {
    std::vector<ReportRow> rows;
    std::vector<ImageScore> images;

    const ReportRow& row(const std::string& metric, const std::string& subject) const {
        for (const auto& r : rows) {
            if (r.metric == metric && r.subject == subject) return r;
        }
        throw std::out_of_range("report has no row " + metric + "/" + subject);
    }

    void append(const EvalReport& o) {
        rows.insert(rows.end(), o.rows.begin(), o.rows.end());
        images.insert(images.end(), o.images.begin(), o.images.end());
    }
};

// Every row is the plain mean of its records, folded in (setting, index) order.
inline std::vector<ReportRow> aggregate(std::vector<ImageScore> images, const std::string& config_hash) {
    std::sort(images.begin(), images.end(), [](const ImageScore& a, const ImageScore& b) {
        return std::tie(a.metric, a.subject, a.setting, a.index) < std::tie(b.metric, b.subject, b.setting, b.index);
    });
    std::vector<ReportRow> rows;
    for (size_t i = 0; i < images.size();) {
        size_t j = i;
        ReportRow r;
        r.metric = images[i].metric;
        r.subject = images[i].subject;
        r.config_hash = config_hash;
        double sum = 0.0;
        std::set<uint64_t> seeds;
        while (j < images.size() && images[j].metric == r.metric && images[j].subject == r.subject) {
            sum += images[j].score;
            seeds.insert(images[j].seed);
            ++j;
        }
        r.n_images = static_cast<int>(j - i);
        r.score = sum / static_cast<double>(r.n_images);
        r.seeds.assign(seeds.begin(), seeds.end());
        rows.push_back(std::move(r));
        i = j;
    }
    return rows;
}

/*================================================== generation ==================================================*/

using Generator = std::function<Image(const ConditioningGrid&, uint64_t seed)>;

inline Generator sampler_generator(const DiffusionBackend& backend, SamplerConfig base) {
    return [&backend, base](const ConditioningGrid& grid, uint64_t seed) {
        SamplerConfig cfg = base;
        cfg.seed = seed;
        cfg.capture_attention = false;
        return sample(backend, grid, cfg).image;
    };
}

struct EvalContext {
    Generator generate;
    Encoders enc;
    int n = 64;
    uint64_t base_seed = 0;
    int workers = 1;
    std::string config_hash;

    uint64_t seed(int i) const { return base_seed + static_cast<uint64_t>(i); }
};

struct GenJob {
    const ConditioningGrid* grid;
    uint64_t seed;
};

// Runs the jobs on up to ctx.workers threads; results come back in job order.
inline std::vector<Image> generate_all(const EvalContext& ctx, const std::vector<GenJob>& jobs) {
    std::vector<Image> out(jobs.size());
    const size_t workers = static_cast<size_t>(std::max(1, ctx.workers));
    if (workers == 1) {
        for (size_t i = 0; i < jobs.size(); ++i) out[i] = ctx.generate(*jobs[i].grid, jobs[i].seed);
        return out;
    }
    for (size_t start = 0; start < jobs.size(); start += workers) {
        std::vector<std::future<Image>> batch;
        for (size_t i = start; i < std::min(jobs.size(), start + workers); ++i) {
            batch.push_back(std::async(std::launch::async, [&ctx, &jobs, i] { return ctx.generate(*jobs[i].grid, jobs[i].seed); }));
        }
        for (size_t k = 0; k < batch.size(); ++k) out[start + k] = batch[k].get();
    }
    return out;
}

/*================================================== token semantics ==================================================*/

struct AttributePrompts {
    std::string token;
    std::string token_prompt;
    std::string truth_prompt;
};

inline std::vector<AttributePrompts> token_semantic_prompts(const BundleTruth& truth) {
    if (truth.color_names.empty()) throw EvalError("no ground truth for <c>: color names missing");
    if (trim(truth.class_label).empty()) throw EvalError("no ground truth for <o>: class label missing");
    if (trim(truth.style_label).empty()) throw EvalError("no ground truth for <s>: style label missing");
    return {
        {"<c>", "a <c> colored photo", "a " + join_color_names(truth.color_names) + " colored photo"},
        {"<o>", "a photo of a <o>", "a photo of a " + truth.class_label},
        {"<s>", "a <s> style photo", "a " + truth.style_label + " style photo"},
    };
}

// Per attribute: matched-seed image-image cosine between token and ground-truth generations,
// and the text-text cosine of the two prompts. Token prompts are routed through `schedule`.
inline EvalReport token_semantic_eval(const TokenSchedule& schedule,
                                      const BundleTruth& truth,
                                      const EvalContext& ctx,
                                      const std::string& metric_prefix = "") {
    if (ctx.n < 1) throw EvalError("n must be >= 1");
    const auto prompts = token_semantic_prompts(truth);
    EvalReport report;
    for (const auto& p : prompts) {
        const ConditioningGrid token_grid = expand_prompt(p.token_prompt, schedule, ExpandPolicy::active_cells_only);
        const ConditioningGrid truth_grid = uniform_grid(CellPrompt(p.truth_prompt));
        std::vector<GenJob> jobs;
        for (int i = 0; i < ctx.n; ++i) {
            jobs.push_back({&token_grid, ctx.seed(i)});
            jobs.push_back({&truth_grid, ctx.seed(i)});
        }
        const auto images = generate_all(ctx, jobs);
        for (int i = 0; i < ctx.n; ++i) {
            const double s = cosine(ctx.enc.image(images[2 * i]), ctx.enc.image(images[2 * i + 1]));
            report.images.push_back({metric_prefix + "image-image", p.token, "", i, ctx.seed(i), s});
        }
        const double tt = cosine(ctx.enc.text(p.token_prompt), ctx.enc.text(p.truth_prompt));
        report.images.push_back({metric_prefix + "text-text", p.token, "", 0, 0, tt});
    }
    report.rows = aggregate(report.images, ctx.config_hash);
    return report;
}

/*================================================== pair disentanglement ==================================================*/

inline const std::vector<std::string>& evaluation_pairs() {
    static const std::vector<std::string> pairs = {"layout-color", "layout-object", "layout-style",
                                                   "color-object", "color-style",   "object-style"};
    return pairs;
}

inline std::pair<std::string, std::string> parse_pair(const std::string& pair) {
    if (std::find(evaluation_pairs().begin(), evaluation_pairs().end(), pair) == evaluation_pairs().end()) {
        throw EvalError("invalid pair '" + pair + "'");
    }
    const auto parts = split(pair, '-');
    return {parts[0], parts[1]};
}

inline std::string attribute_token(const std::string& attribute) {
    static const std::map<std::string, std::string> m = {
        {"color", "<c>"}, {"object", "<o>"}, {"style", "<s>"}, {"layout", "<l>"}};
    return m.at(attribute);
}

// "a [C colored] photo[ of O][ in S style][ in L layout]" with each slot either a held token
// or the swept word.
inline std::string compose_prompt(const std::map<std::string, std::string>& slots) {
    auto get = [&](const std::string& k) {
        auto it = slots.find(k);
        return it == slots.end() ? std::string() : it->second;
    };
    std::string s = "a";
    if (auto c = get("color"); !c.empty()) s += " " + c + " colored";
    s += " photo";
    if (auto o = get("object"); !o.empty()) s += is_placeholder(o) ? " of " + o : " of a " + o;
    if (auto st = get("style"); !st.empty()) s += " in " + st + " style";
    if (auto l = get("layout"); !l.empty()) s += " in " + l + " layout";
    return s;
}

// Which <x_i> (1-based layer) / <y_j> (1-based stage, noisiest first) a baseline keeps for an attribute.
inline std::vector<int> retained_indices(const std::string& mode, const std::string& attribute) {
    if (mode == "p16") {
        if (attribute == "object" || attribute == "layout") return {6, 7, 8, 9};
        return {1, 2, 3, 4, 5, 10, 11, 12, 13, 14, 15, 16};
    }
    if (mode == "s10") {
        if (attribute == "object") return {3, 4, 5, 6, 7, 8};
        if (attribute == "layout") return {1, 2};
        return {1, 2, 3, 4};
    }
    throw EvalError("no retention rule for mode '" + mode + "'");
}

// Grid that holds `held` from the inversion output and writes `swept_value` as text.
inline ConditioningGrid pair_grid(const TokenBundle& bundle,
                                  const std::string& held,
                                  const std::string& swept,
                                  const std::string& swept_value) {
    if (bundle.mode == "matte") {
        const std::string tok = attribute_token(held);
        if (!bundle.embeddings.count(tok) || !bundle.schedule.count(tok)) {
            throw EvalError("inversion output lacks " + tok + " for held attribute " + held);
        }
        const std::string prompt = compose_prompt({{held, tok}, {swept, swept_value}});
        return expand_prompt(prompt, bundle.schedule, ExpandPolicy::active_cells_only);
    }
    const BaselineMode bm = bundle.mode == "p16" ? BaselineMode::layer_only_16 : BaselineMode::stage_only_10;
    if (bundle.mode != "p16" && bundle.mode != "s10") throw EvalError("unknown mode '" + bundle.mode + "'");
    const std::string text = compose_prompt({{swept, swept_value}});
    const auto keep = retained_indices(bundle.mode, held);
    std::vector<CellPrompt> cells;
    for (int i = 1; i <= baseline_count(bm); ++i) {
        const std::string tok = baseline_token(bm, i - 1);
        const bool retained = std::find(keep.begin(), keep.end(), i) != keep.end();
        if (retained && !bundle.embeddings.count(tok)) {
            throw EvalError("inversion output lacks " + tok + " needed to hold " + held);
        }
        cells.emplace_back(retained ? tok + " " + text : text);
    }
    return bm == BaselineMode::layer_only_16 ? layer_only_grid(cells) : stage_only_grid(cells);
}

inline const std::vector<std::string>& sweep_values(const std::string& attribute, const AttributeLists& lists) {
    if (attribute == "color") return lists.colors;
    if (attribute == "object") return lists.objects;
    if (attribute == "style") return lists.styles_eval;
    throw EvalError("attribute '" + attribute + "' cannot be swept");
}

// Ground-truth text of the held attribute; empty for layout, which has none.
inline std::string held_truth_text(const std::string& held, const BundleTruth& truth) {
    if (held == "color") return truth.color_phrase;
    if (held == "object") return truth.class_label;
    if (held == "style") return truth.style_label;
    return "";
}

// Per image: mean of cosine(image, swept text) and cosine(image, held text) when the held
// attribute has ground truth, else the swept similarity alone. Score = mean over all images.
inline EvalReport pair_disentanglement_eval(const TokenBundle& bundle,
                                            const std::string& pair,
                                            const EvalContext& ctx,
                                            const AttributeLists& lists = attribute_lists()) {
    const auto [held, swept] = parse_pair(pair);
    if (ctx.n < 1) throw EvalError("n must be >= 1");
    const std::string held_text = held_truth_text(held, bundle.truth);
    const Vec held_emb = held_text.empty() ? Vec{} : ctx.enc.text(held_text);

    const auto& values = sweep_values(swept, lists);
    std::vector<ConditioningGrid> grids;
    for (const auto& v : values) grids.push_back(pair_grid(bundle, held, swept, v));
    std::vector<GenJob> jobs;
    for (const auto& g : grids) {
        for (int i = 0; i < ctx.n; ++i) jobs.push_back({&g, ctx.seed(i)});
    }
    const auto images = generate_all(ctx, jobs);

    EvalReport report;
    for (size_t k = 0; k < values.size(); ++k) {
        const Vec swept_emb = ctx.enc.text(values[k]);
        for (int i = 0; i < ctx.n; ++i) {
            const Vec e = ctx.enc.image(images[k * ctx.n + i]);
            double s = cosine(e, swept_emb);
            if (!held_emb.empty()) s = 0.5 * (s + cosine(e, held_emb));
            report.images.push_back({"pair:" + bundle.mode, pair, values[k], i, ctx.seed(i), s});
        }
    }
    report.rows = aggregate(report.images, ctx.config_hash);
    return report;
}

// True when joint routing outscores both degenerate routings on every pair.
inline bool joint_beats_baselines(const std::map<std::string, std::map<std::string, double>>& by_mode_pair) {
    for (const auto& pair : evaluation_pairs()) {
        const double m = by_mode_pair.at("matte").at(pair);
        if (!(m > by_mode_pair.at("p16").at(pair) && m > by_mode_pair.at("s10").at(pair))) return false;
    }
    return true;
}

/*================================================== ablation ==================================================*/

inline std::string style_label_of(const Image& reference, const Encoders& enc,
                                  const AttributeLists& lists = attribute_lists()) {
    return nn_label(reference, lists.styles_eval, enc).text;
}

// Inverts with L_R only, then with the configured loss weights, and evaluates both token sets.
inline EvalReport ablation_eval(const Image& reference,
                                const std::string& class_label,
                                const InversionConfig& cfg,
                                DiffusionBackend& backend,
                                const EvalContext& ctx) {
    EvalReport report;
    const std::string style = style_label_of(reference, ctx.enc);
    const std::pair<std::string, InversionConfig> runs[] = {
        {"L_R", [&] {
             InversionConfig c = cfg;
             c.lambda_cs = 0.0;
             c.lambda_o = 0.0;
             return c;
         }()},
        {"L_R+L_CS+L_O", cfg},
    };
    for (const auto& [name, c] : runs) {
        const InversionResult r = invert(reference, class_label, c, backend);
        TokenBundle b = bundle_from_inversion(r, c);
        b.truth.style_label = style;
        EvalContext sub = ctx;
        sub.config_hash = hex64(fnv1a64(to_json(c).dump() + ctx.config_hash));
        EvalReport part = token_semantic_eval(b.schedule, b.truth, sub, name + ":");
        report.append(part);
    }
    return report;
}

/*================================================== persistence ==================================================*/

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char ch : s) out += ch == '"' ? std::string("\"\"") : std::string(1, ch);
    return out + "\"";
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os << std::setprecision(17) << v;
    return os.str();
}

inline std::string report_csv(const EvalReport& r) {
    std::string out = "metric,subject,score,n_images,seeds,config_hash\n";
    for (const auto& row : r.rows) {
        std::string seeds;
        for (size_t i = 0; i < row.seeds.size(); ++i) seeds += (i ? ";" : "") + std::to_string(row.seeds[i]);
        out += csv_field(row.metric) + "," + csv_field(row.subject) + "," + format_double(row.score) + "," +
               std::to_string(row.n_images) + "," + seeds + "," + row.config_hash + "\n";
    }
    return out;
}

inline std::string image_scores_csv(const EvalReport& r) {
    std::string out = "metric,subject,setting,index,seed,score\n";
    for (const auto& s : r.images) {
        out += csv_field(s.metric) + "," + csv_field(s.subject) + "," + csv_field(s.setting) + "," +
               std::to_string(s.index) + "," + std::to_string(s.seed) + "," + format_double(s.score) + "\n";
    }
    return out;
}

// report.csv, report.images.csv (per-image scores) and report.json (hashes, seeds, config).
inline std::vector<std::string> write_report(const EvalReport& r, const std::string& csv_path, const nlohmann::json& config) {
    std::string stem = csv_path;
    if (stem.size() > 4 && stem.substr(stem.size() - 4) == ".csv") stem.resize(stem.size() - 4);
    const std::string images_path = stem + ".images.csv";
    const std::string json_path = stem + ".json";
    std::ofstream(csv_path) << report_csv(r);
    std::ofstream(images_path) << image_scores_csv(r);
    nlohmann::json side = {{"config", config}, {"per_image_scores", images_path}, {"rows", nlohmann::json::array()}};
    for (const auto& row : r.rows) {
        side["rows"].push_back({{"metric", row.metric},
                                {"subject", row.subject},
                                {"score", row.score},
                                {"n_images", row.n_images},
                                {"seeds", row.seeds},
                                {"config_hash", row.config_hash}});
    }
    std::ofstream(json_path) << side.dump(2) << "\n";
    return {csv_path, images_path, json_path};
}

}  // namespace matte

#endif  // MATTE_EVAL_HARNESS_HPP
