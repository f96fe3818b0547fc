// SPDX-License-Identifier: Apache-2.0
#ifndef MATTE_CLI_HPP
#define MATTE_CLI_HPP

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "matte/attribute_probe.hpp"
#include "matte/eval_harness.hpp"
#include "matte/manifest.hpp"
#include "matte/matte_inversion.hpp"
#include "matte/palette.hpp"
#include "matte/token_bundle.hpp"
#include "matte/toy_backend.hpp"

namespace matte::cli {

enum ExitCode { kOk = 0, kFailure = 1, kUnknownCommand = 2, kConfigError = 3, kBackendError = 4 };

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline const std::vector<std::string>& commands() {
    static const std::vector<std::string> c = {"invert", "generate", "probe", "eval", "palette"};
    return c;
}

/*================================================== backends ==================================================*/

inline ToyConfig toy_config_from_json(const nlohmann::json& j, ToyConfig c = {}) {
    try {
        if (j.contains("seed")) c.seed = j["seed"].get<uint64_t>();
        if (j.contains("embedding_dim")) c.embedding_dim = j["embedding_dim"].get<int>();
        if (j.contains("head_dim")) c.head_dim = j["head_dim"].get<int>();
        if (j.contains("data_variance")) c.data_variance = j["data_variance"].get<double>();
        if (j.contains("layer_gain")) c.layer_gain = j["layer_gain"].get<double>();
        if (j.contains("base_level")) c.base_level = j["base_level"].get<double>();
        if (j.contains("positional_scale")) c.positional_scale = j["positional_scale"].get<double>();
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad toy backend config: ") + e.what());
    }
    if (c.embedding_dim < 1 || c.head_dim < 1 || !(c.data_variance > 0)) {
        throw ConfigError("toy backend dims and data_variance must be positive");
    }
    return c;
}

// "toy", "latent-diffusion", or a JSON object {"name": ..., ...}.
inline nlohmann::json backend_spec(const std::string& arg) {
    if (arg == "toy" || arg == "latent-diffusion") return {{"name", arg}};
    std::ifstream f(arg);
    if (!f) throw ConfigError("backend '" + arg + "' is neither a known name nor a readable config file");
    try {
        nlohmann::json j = nlohmann::json::parse(f);
        if (j.is_string()) return {{"name", j.get<std::string>()}};
        if (!j.contains("name")) throw ConfigError("backend config '" + arg + "' has no \"name\"");
        return j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("backend config '" + arg + "': " + e.what());
    }
}

inline std::unique_ptr<DiffusionBackend> make_backend(const nlohmann::json& spec) {
    const std::string name = spec.value("name", "toy");
    if (name == "toy") return std::make_unique<ToyBackend>(toy_config_from_json(spec));
    if (name == "latent-diffusion") {
        throw BackendError("latent-diffusion backend is not available in this build (no pretrained weights loader)");
    }
    throw BackendError("unknown backend '" + name + "'");
}

/*================================================== config ==================================================*/

// Resolved settings: built-in defaults, overlaid by the --config file, overlaid by flags.
struct Settings {
    nlohmann::json backend = {{"name", "toy"}};
    InversionConfig inversion;
    SamplerConfig sampler;
    int eval_n = 64;
    int eval_workers = 1;

    nlohmann::json to_json() const {
        return {{"backend", backend},
                {"inversion", matte::to_json(inversion)},
                {"sampler", {{"steps", sampler.steps}, {"guidance_scale", sampler.guidance_scale}, {"seed", sampler.seed}}},
                {"eval", {{"n", eval_n}, {"workers", eval_workers}}}};
    }
};

inline Settings load_config_file(const std::string& path, Settings s) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file '" + path + "'");
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(f);
        if (j.contains("backend")) {
            s.backend = j["backend"].is_string() ? backend_spec(j["backend"].get<std::string>()) : j["backend"];
        }
        if (j.contains("inversion")) s.inversion = inversion_config_from_json(j["inversion"], s.inversion);
        if (j.contains("sampler")) {
            const auto& sj = j["sampler"];
            if (sj.contains("steps")) s.sampler.steps = sj["steps"].get<int>();
            if (sj.contains("guidance_scale")) s.sampler.guidance_scale = sj["guidance_scale"].get<double>();
            if (sj.contains("seed")) s.sampler.seed = sj["seed"].get<uint64_t>();
        }
        if (j.contains("eval")) {
            s.eval_n = j["eval"].value("n", s.eval_n);
            s.eval_workers = j["eval"].value("workers", s.eval_workers);
        }
        if (j.contains("seed")) {
            s.inversion.seed = j["seed"].get<uint64_t>();
            s.sampler.seed = s.inversion.seed;
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config file '" + path + "': " + e.what());
    }
    return s;
}

inline std::string manifest_path_for(const std::string& out) { return out + ".manifest.json"; }

/*================================================== commands ==================================================*/

struct Options {
    // global
    std::optional<std::string> backend;
    std::optional<uint64_t> seed;
    std::optional<std::string> out;
    std::optional<std::string> config;
    // invert
    std::string image;
    std::optional<std::string> class_label;
    std::string mode = "matte";
    std::optional<int> steps;
    std::optional<double> lr;
    std::optional<double> lambda_cs;
    std::optional<double> lambda_o;
    std::optional<std::string> cs_variant;
    std::optional<std::string> token_init;
    // generate / probe / eval
    std::vector<std::string> bundles;
    std::optional<std::string> prompt;
    std::optional<std::string> grid;
    std::string policy = "active";
    std::optional<int> sample_steps;
    std::optional<double> guidance;
    int upscale = 1;
    std::optional<std::string> spec;
    std::vector<std::string> track;
    std::string eval_kind;
    std::optional<int> n;
    std::optional<int> workers;
    std::string pair = "all";
    std::optional<std::string> ref;
    // palette
    int palette_size = 5;
};

class Runner {
public:
    Runner(Options o, std::vector<std::string> argv, std::ostream& out) : o_(std::move(o)), argv_(std::move(argv)), out_(out) {}

    Settings resolve() const {
        Settings s;
        if (o_.config) s = load_config_file(*o_.config, s);
        if (o_.backend) s.backend = backend_spec(*o_.backend);
        if (o_.seed) {
            s.inversion.seed = *o_.seed;
            s.sampler.seed = *o_.seed;
        }
        if (o_.steps) s.inversion.steps = *o_.steps;
        if (o_.lr) s.inversion.lr = *o_.lr;
        if (o_.lambda_cs) s.inversion.lambda_cs = *o_.lambda_cs;
        if (o_.lambda_o) s.inversion.lambda_o = *o_.lambda_o;
        nlohmann::json extra = nlohmann::json::object();
        if (o_.cs_variant) extra["cs_variant"] = *o_.cs_variant;
        if (o_.token_init) extra["token_init"] = *o_.token_init;
        s.inversion = inversion_config_from_json(extra, s.inversion);
        if (o_.sample_steps) s.sampler.steps = *o_.sample_steps;
        if (o_.guidance) s.sampler.guidance_scale = *o_.guidance;
        if (o_.n) s.eval_n = *o_.n;
        if (o_.workers) s.eval_workers = *o_.workers;
        if (s.eval_n < 1) throw ConfigError("eval n must be >= 1");
        if (s.eval_workers < 1) throw ConfigError("eval workers must be >= 1");
        s.sampler.validate(kMaxTimestep);
        return s;
    }

    RunManifest manifest(const std::string& command, const Settings& s) const {
        RunManifest m;
        m.command = command;
        m.argv = argv_;
        m.config = s.to_json();
        return m;
    }

    int invert() {
        const Settings s = resolve();
        if (o_.mode != "matte" && o_.mode != "p16" && o_.mode != "s10") {
            throw ConfigError("mode must be matte|p16|s10");
        }
        const std::string out = o_.out.value_or("tokens.bin");
        auto backend = make_backend(s.backend);
        const Image ref = read_png(o_.image);
        const Encoders enc = encoders_of(*backend);
        const std::string label = o_.class_label ? *o_.class_label : nn_label(ref, attribute_lists().objects, enc).text;

        RunManifest m = manifest("invert", s);
        m.config["mode"] = o_.mode;
        m.config["class_label"] = label;
        m.seeds = {s.inversion.seed};
        m.add_input(o_.image);
        m.outputs = {out};
        m.write(manifest_path_for(out));

        TokenBundle b;
        if (o_.mode == "matte") {
            b = bundle_from_inversion(invert_image(ref, label, s.inversion, *backend), s.inversion);
        } else {
            const auto mode = o_.mode == "p16" ? BaselineMode::layer_only_16 : BaselineMode::stage_only_10;
            b = bundle_from_baseline(baseline_invert(ref, mode, s.inversion, *backend), s.inversion);
            const GroundTruth gt = make_ground_truth(*backend, ref, label, s.inversion);
            b.truth.class_label = gt.class_label;
            b.truth.color_phrase = gt.color_phrase;
            b.truth.color_names = gt.color_names;
            b.truth.c_gt = gt.c_gt;
            b.truth.o_gt = gt.o_gt;
        }
        b.truth.style_label = style_label_of(ref, enc);
        b.reference_hash = m.input_hashes.at(o_.image);
        b.backend = s.backend.dump();
        save_bundle(out, b);
        const auto& last = b.log.records.empty() ? StepRecord{} : b.log.records.back();
        out_ << "wrote " << out << " (" << b.embeddings.size() << " tokens, " << b.log.records.size()
             << " steps, final L_inv " << last.l_inv << ")\n";
        return kOk;
    }

    int generate() {
        const Settings s = resolve();
        if (o_.prompt.has_value() == o_.grid.has_value()) throw ConfigError("give exactly one of --prompt or --grid");
        if (o_.policy != "active" && o_.policy != "everywhere") throw ConfigError("policy must be active|everywhere");
        if (o_.upscale < 1) throw ConfigError("upscale must be >= 1");
        if (o_.bundles.size() > 1) throw ConfigError("generate takes at most one --bundle");
        const std::string out = o_.out.value_or("out.png");
        auto backend = make_backend(s.backend);

        RunManifest m = manifest("generate", s);
        m.seeds = {s.sampler.seed};
        std::optional<TokenBundle> bundle;
        if (!o_.bundles.empty()) {
            m.add_input(o_.bundles[0]);
            bundle = load_bundle(o_.bundles[0]);
            install_bundle(*bundle, *backend);
        }
        if (o_.grid) m.add_input(*o_.grid);
        m.config["prompt"] = o_.prompt.value_or("");
        m.config["policy"] = o_.policy;
        m.config["upscale"] = o_.upscale;
        m.outputs = {out};

        ConditioningGrid grid = o_.grid ? read_grid(*o_.grid) : uniform_grid(CellPrompt(*o_.prompt));
        if (o_.prompt && bundle && bundle->mode == "matte") {
            grid = expand_prompt(*o_.prompt, bundle->schedule,
                                 o_.policy == "active" ? ExpandPolicy::active_cells_only : ExpandPolicy::everywhere);
        }
        m.write(manifest_path_for(out));
        const SampleResult r = sample(*backend, grid, s.sampler);
        write_png(out, upscale_nearest(r.image, o_.upscale));
        out_ << "wrote " << out << "\n";
        return kOk;
    }

    int probe() {
        const Settings s = resolve();
        if (!o_.spec) throw ConfigError("probe needs --spec");
        const std::string dir = o_.out.value_or("probe_out");
        auto backend = make_backend(s.backend);
        std::ifstream f(*o_.spec);
        if (!f) throw ConfigError("cannot read spec '" + *o_.spec + "'");
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(f);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("spec '" + *o_.spec + "': " + e.what());
        }
        ProbeSpec spec;
        spec.grid = grid_from_json(j.contains("grid") ? j["grid"] : j);
        spec.tracked_tokens = o_.track;
        if (spec.tracked_tokens.empty() && j.contains("track")) {
            spec.tracked_tokens = j["track"].get<std::vector<std::string>>();
        }
        spec.sampler = s.sampler;
        for (const auto& b : o_.bundles) install_bundle(load_bundle(b), *backend);

        std::filesystem::create_directories(dir);
        RunManifest m = manifest("probe", s);
        m.config["track"] = spec.tracked_tokens;
        m.seeds = {s.sampler.seed};
        m.add_input(*o_.spec);
        for (const auto& b : o_.bundles) m.add_input(b);
        m.outputs = {dir};
        m.write((std::filesystem::path(dir) / "manifest.json").string());

        const ProbeResult r = run_probe(spec, *backend);
        const auto written = write_probe_outputs(r, dir, canonical_stage_partition());
        out_ << "wrote " << written.size() << " files to " << dir << "\n";
        return kOk;
    }

    int eval() {
        const Settings s = resolve();
        const std::string out = o_.out.value_or("report.csv");
        auto backend = make_backend(s.backend);
        EvalContext ctx;
        ctx.generate = sampler_generator(*backend, s.sampler);
        ctx.enc = encoders_of(*backend);
        ctx.n = s.eval_n;
        ctx.base_seed = s.sampler.seed;
        ctx.workers = s.eval_workers;

        RunManifest m = manifest("eval " + o_.eval_kind, s);
        for (int i = 0; i < ctx.n; ++i) m.seeds.push_back(ctx.seed(i));
        m.config["pair"] = o_.pair;
        std::string stem = out;
        if (stem.size() > 4 && stem.substr(stem.size() - 4) == ".csv") stem.resize(stem.size() - 4);
        m.outputs = {out, stem + ".images.csv", stem + ".json"};

        EvalReport report;
        if (o_.eval_kind == "ablation") {
            if (!o_.ref) throw ConfigError("eval ablation needs --ref");
            const Image ref = read_png(*o_.ref);
            const std::string label = o_.class_label ? *o_.class_label : nn_label(ref, attribute_lists().objects, ctx.enc).text;
            m.config["class_label"] = label;
            m.add_input(*o_.ref);
            ctx.config_hash = hex64(fnv1a64(m.config.dump()));
            m.write(manifest_path_for(out));
            report = ablation_eval(ref, label, s.inversion, *backend, ctx);
        } else {
            if (o_.bundles.empty()) throw ConfigError("eval " + o_.eval_kind + " needs --bundle");
            std::vector<TokenBundle> bundles;
            for (const auto& p : o_.bundles) {
                m.add_input(p);
                bundles.push_back(load_bundle(p));
                install_bundle(bundles.back(), *backend);
            }
            ctx.config_hash = hex64(fnv1a64(m.config.dump() + nlohmann::json(m.input_hashes).dump()));
            std::vector<std::string> pairs;
            if (o_.eval_kind == "pairs") {
                pairs = o_.pair == "all" ? evaluation_pairs() : std::vector<std::string>{o_.pair};
                for (const auto& p : pairs) parse_pair(p);
            }
            m.write(manifest_path_for(out));
            for (const auto& b : bundles) {
                if (o_.eval_kind == "tokens") {
                    if (b.mode != "matte") throw ConfigError("eval tokens needs a matte bundle, got " + b.mode);
                    report.append(token_semantic_eval(b.schedule, b.truth, ctx));
                } else {
                    for (const auto& p : pairs) report.append(pair_disentanglement_eval(b, p, ctx));
                }
            }
        }
        write_report(report, out, m.config);
        for (const auto& row : report.rows) {
            out_ << row.metric << "\t" << row.subject << "\t" << format_double(row.score) << "\n";
        }
        return kOk;
    }

    int palette() {
        const Settings s = resolve();
        const std::string out = o_.out.value_or("palette.json");
        RunManifest m = manifest("palette", s);
        m.config["n"] = o_.palette_size;
        m.add_input(o_.image);
        m.outputs = {out};
        m.write(manifest_path_for(out));
        const Palette p = extract_palette(read_png(o_.image), o_.palette_size);
        nlohmann::json j = {{"phrase", palette_phrase(p)}, {"entries", nlohmann::json::array()}};
        for (const auto& e : p.entries) {
            char hex[8];
            std::snprintf(hex, sizeof(hex), "#%02x%02x%02x", e.rgb[0], e.rgb[1], e.rgb[2]);
            const std::string name = name_color(e.rgb);
            j["entries"].push_back({{"rgb", e.rgb}, {"hex", hex}, {"frequency", e.frequency}, {"name", name}});
            out_ << hex << "\t" << format_double(e.frequency) << "\t" << name << "\n";
        }
        out_ << palette_phrase(p) << "\n";
        std::ofstream(out) << j.dump(2) << "\n";
        return kOk;
    }

private:
    static InversionResult invert_image(const Image& ref, const std::string& label, const InversionConfig& cfg,
                                        DiffusionBackend& backend) {
        return matte::invert(ref, label, cfg, backend);
    }

    static ConditioningGrid read_grid(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw ConfigError("cannot read grid '" + path + "'");
        try {
            const auto j = nlohmann::json::parse(f);
            return grid_from_json(j.contains("grid") ? j["grid"] : j);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("grid '" + path + "': " + e.what());
        }
    }

    Options o_;
    std::vector<std::string> argv_;
    std::ostream& out_;
};

inline std::string one_line(std::string s) {
    for (char& ch : s) {
        if (ch == '\n' || ch == '\r') ch = ' ';
    }
    return s;
}

inline int report_error(std::ostream& err, const char* category, const std::string& msg, int code) {
    err << "matte: error[" << category << "]: " << one_line(msg) << "\n";
    return code;
}

// argv excludes the program name.
inline int run(const std::vector<std::string>& argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    const bool wants_help = !argv.empty() && (argv[0] == "-h" || argv[0] == "--help" || argv[0] == "--version");
    if (!wants_help) {
        if (argv.empty()) return report_error(err, "usage", "no command given", kUnknownCommand);
        if (std::find(commands().begin(), commands().end(), argv[0]) == commands().end()) {
            return report_error(err, "usage", "unknown command '" + argv[0] + "'", kUnknownCommand);
        }
    }

    Options o;
    CLI::App app{"matte: attribute inversion over a layer x timestep conditioning grid", "matte"};
    app.set_version_flag("--version", MATTE_VERSION);
    app.require_subcommand(1);
    app.add_option("--backend", o.backend, "toy | latent-diffusion | backend config JSON");
    app.add_option("--seed", o.seed, "seed for inversion, sampling and eval");
    app.add_option("--out", o.out, "output file or directory");
    app.add_option("--config", o.config, "JSON config file (flags override it)");

    auto* inv = app.add_subcommand("invert", "learn <c>, <o>, <s>, <l> from a reference image");
    inv->add_option("image", o.image, "reference PNG")->required();
    inv->add_option("--class", o.class_label, "object class label (default: nearest of the object list)");
    inv->add_option("--mode", o.mode, "matte | p16 | s10")->check(CLI::IsMember({"matte", "p16", "s10"}));
    inv->add_option("--steps", o.steps, "optimisation steps");
    inv->add_option("--lr", o.lr, "learning rate");
    inv->add_option("--lambda-cs", o.lambda_cs, "weight of L_CS");
    inv->add_option("--lambda-o", o.lambda_o, "weight of L_O");
    inv->add_option("--cs-variant", o.cs_variant, "absolute | literal");
    inv->add_option("--init", o.token_init, "class_word | random");

    auto* gen = app.add_subcommand("generate", "sample an image from a prompt or grid");
    gen->add_option("--bundle", o.bundles, "token bundle");
    gen->add_option("--prompt", o.prompt, "prompt; placeholders are routed by the bundle schedule");
    gen->add_option("--grid", o.grid, "conditioning grid JSON");
    gen->add_option("--policy", o.policy, "active | everywhere");
    gen->add_option("--steps", o.sample_steps, "sampler steps");
    gen->add_option("--guidance", o.guidance, "classifier-free guidance scale");
    gen->add_option("--upscale", o.upscale, "nearest-neighbour upscale factor for the PNG");

    auto* prb = app.add_subcommand("probe", "sample a grid and record cross-attention maps");
    prb->add_option("--spec", o.spec, "grid JSON, optionally {\"grid\":..., \"track\":[...]}");
    prb->add_option("--track", o.track, "words to track")->delimiter(',');
    prb->add_option("--bundle", o.bundles, "token bundle(s) whose placeholders the grid uses");
    prb->add_option("--steps", o.sample_steps, "sampler steps");
    prb->add_option("--guidance", o.guidance, "classifier-free guidance scale");

    auto* ev = app.add_subcommand("eval", "evaluation protocols");
    ev->require_subcommand(1);
    auto add_eval_opts = [&](CLI::App* sub) {
        sub->add_option("--bundle", o.bundles, "token bundle(s)");
        sub->add_option("--n", o.n, "images per setting");
        sub->add_option("--workers", o.workers, "generation threads");
        sub->add_option("--steps", o.sample_steps, "sampler steps");
        sub->add_option("--guidance", o.guidance, "classifier-free guidance scale");
        sub->fallthrough();
    };
    auto* ev_tokens = ev->add_subcommand("tokens", "token-semantic similarities");
    auto* ev_pairs = ev->add_subcommand("pairs", "pairwise disentanglement");
    auto* ev_abl = ev->add_subcommand("ablation", "L_R only vs full loss");
    for (auto* sub : {ev_tokens, ev_pairs, ev_abl}) add_eval_opts(sub);
    ev_pairs->add_option("--pair", o.pair, "pair name or 'all'");
    ev_abl->add_option("--ref", o.ref, "reference PNG");
    ev_abl->add_option("--class", o.class_label, "class label");
    ev_abl->add_option("--steps-inv", o.steps, "inversion steps");

    auto* pal = app.add_subcommand("palette", "dominant colors of an image");
    pal->add_option("image", o.image, "PNG")->required();
    pal->add_option("--n", o.palette_size, "palette size");

    for (auto* sub : {inv, gen, prb, ev, pal}) sub->fallthrough();

    std::vector<std::string> reversed(argv.rbegin(), argv.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForVersion& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        return report_error(err, "config", e.what(), kConfigError);
    }
    if (*ev_tokens) o.eval_kind = "tokens";
    if (*ev_pairs) o.eval_kind = "pairs";
    if (*ev_abl) o.eval_kind = "ablation";

    Runner r(o, argv, out);
    try {
        if (*inv) return r.invert();
        if (*gen) return r.generate();
        if (*prb) return r.probe();
        if (*ev) return r.eval();
        if (*pal) return r.palette();
    } catch (const BackendError& e) {
        return report_error(err, "backend", e.what(), kBackendError);
    } catch (const ConfigError& e) {
        return report_error(err, "config", e.what(), kConfigError);
    } catch (const std::exception& e) {
        return report_error(err, "runtime", e.what(), kFailure);
    }
    return report_error(err, "usage", "no command given", kUnknownCommand);
}

}  // namespace matte::cli

#endif  // MATTE_CLI_HPP
