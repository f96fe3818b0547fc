#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fixtures.hpp"
#include "matte/eval_harness.hpp"

using namespace matte;

namespace {

bool mentions_placeholder(const ConditioningGrid& g) {
    for (const auto& [k, c] : g.cells()) {
        if (c.text && c.text->find('<') != std::string::npos) return true;
    }
    return false;
}

Image vec_image(const Vec& v) {
    Image img(static_cast<int>(v.size()), 1, 1);
    img.data = v;
    return img;
}

// Planted world: images are 1-pixel-high strips whose values are the embedding itself.
Encoders planted_encoders(std::map<std::string, Vec> text_table) {
    return {[](const Image& img) { return img.data; },
            [text_table](const std::string& s) {
                auto it = text_table.find(s);
                return it == text_table.end() ? Vec{1.0, 1.0, 1.0} : it->second;
            }};
}

BundleTruth sample_truth() {
    BundleTruth t;
    t.class_label = "dog";
    t.color_names = {"red"};
    t.color_phrase = "red colors";
    t.style_label = "watercolor";
    return t;
}

TokenBundle matte_bundle() {
    TokenBundle b;
    b.mode = "matte";
    for (const auto& tok : attribute_tokens()) b.embeddings[tok] = Vec(32, 0.01);
    b.schedule = default_token_schedule();
    b.truth = sample_truth();
    return b;
}

}  // namespace

TEST(Cosine, Examples) {
    EXPECT_NEAR(cosine({1, 1}, {1, 0}), 1 / std::sqrt(2.0), 1e-12);
    EXPECT_NEAR(cosine({1, 2, 3}, {1, 2, 3}), 1.0, 1e-12);
    EXPECT_NEAR(cosine({1, 0}, {-1, 0}), -1.0, 1e-12);
    EXPECT_EQ(cosine({1, 2, 3}, {-4, 5, 0.5}), cosine({-4, 5, 0.5}, {1, 2, 3}));
    EXPECT_NEAR(cosine({1, 2, 3}, {-4, 5, 0.5}), cosine({3, 6, 9}, {-0.4, 0.5, 0.05}), 1e-12);
}

TEST(Cosine, ZeroVectorThrows) {
    EXPECT_THROW(cosine({0, 0}, {1, 0}), std::invalid_argument);
    EXPECT_THROW(cosine({1, 0}, {1, 0, 0}), std::invalid_argument);
}

TEST(NearestLabel, Planted) {
    const std::vector<std::string> cands = {"a", "b", "c", "d", "e"};
    std::map<std::string, Vec> table;
    for (size_t i = 0; i < cands.size(); ++i) {
        Vec e(5, 0.0);
        e[i] = 1.0;
        table[cands[i]] = e;
    }
    const Encoders enc = planted_encoders(table);
    EXPECT_EQ(nn_label(Vec{0.1, 0.0, 0.2, 0.9, 0.3}, cands, enc).index, 3u);
    EXPECT_EQ(nn_label(Vec{1, 1, 1, 5, 1}, cands, enc).text, "d");
    EXPECT_EQ(nn_label(Vec{10, 10, 10, 50, 10}, cands, enc).text, "d");
    EXPECT_EQ(nn_label(Vec{1, 2, 3, 4, 5}, {"e"}, enc).index, 0u);
    EXPECT_THROW(nn_label(Vec{1, 2, 3, 4, 5}, {}, enc), std::invalid_argument);
    // first candidate wins ties
    EXPECT_EQ(nn_label(Vec{1, 1, 0, 0, 0}, cands, enc).index, 0u);
}

TEST(NearestLabel, ToyImageMatchesOwnCaption) {
    ToyBackend b;
    const auto enc = encoders_of(b);
    for (const std::string obj : {"dog", "car", "guitar"}) {
        const std::vector<std::string> cands = {"dog", "car", "guitar"};
        EXPECT_EQ(nn_label(enc.text(obj), cands, enc).text, obj);
    }
}

TEST(TokenSemantics, TextTextIsOneForIdenticalPrompts) {
    EvalContext ctx;
    ctx.n = 1;
    ctx.generate = [](const ConditioningGrid&, uint64_t) { return vec_image({1, 0, 0}); };
    // every prompt maps to the same vector
    ctx.enc = planted_encoders({});
    const auto r = token_semantic_eval(default_token_schedule(), sample_truth(), ctx);
    for (const auto& tok : {"<c>", "<o>", "<s>"}) {
        EXPECT_NEAR(r.row("text-text", tok).score, 1.0, 1e-12);
        EXPECT_NEAR(r.row("image-image", tok).score, 1.0, 1e-12);
    }
}

TEST(TokenSemantics, PlantedMeanOverSeeds) {
    EvalContext ctx;
    ctx.n = 2;
    ctx.base_seed = 40;
    ctx.generate = [](const ConditioningGrid& g, uint64_t seed) {
        if (!mentions_placeholder(g)) return vec_image({1, 0, 0});
        return seed == 40 ? vec_image({1, 0, 0}) : vec_image({1, 1, 0});
    };
    ctx.enc = planted_encoders({{"a <o> photo", {0, 1, 0}}});
    const auto r = token_semantic_eval(default_token_schedule(), sample_truth(), ctx);
    const double expect = (1.0 + 1.0 / std::sqrt(2.0)) / 2.0;
    for (const auto& tok : {"<c>", "<o>", "<s>"}) {
        const auto& row = r.row("image-image", tok);
        EXPECT_NEAR(row.score, expect, 1e-12);
        EXPECT_EQ(row.n_images, 2);
        EXPECT_EQ(row.seeds, (std::vector<uint64_t>{40, 41}));
    }
}

TEST(TokenSemantics, MissingTruthIsAnError) {
    EvalContext ctx;
    ctx.n = 1;
    ctx.generate = [](const ConditioningGrid&, uint64_t) { return vec_image({1, 0, 0}); };
    ctx.enc = planted_encoders({});
    BundleTruth t = sample_truth();
    t.style_label.clear();
    EXPECT_THROW(token_semantic_eval(default_token_schedule(), t, ctx), EvalError);
}

TEST(TokenSemantics, TokenGridRoutesOnlyActiveCells) {
    std::vector<std::string> seen;
    EvalContext ctx;
    ctx.n = 1;
    ctx.generate = [&](const ConditioningGrid& g, uint64_t) {
        seen.push_back(*g.cell({"coarse", "t4"}).text);
        return vec_image({1, 0, 0});
    };
    ctx.enc = planted_encoders({});
    token_semantic_eval(default_token_schedule(), sample_truth(), ctx);
    ASSERT_EQ(seen.size(), 6u);
    EXPECT_EQ(seen[0], "a colored photo");  // <c> is not active in t4
    EXPECT_EQ(seen[1], "a red colored photo");
}

TEST(Pairs, ParseAndCompose) {
    EXPECT_EQ(parse_pair("color-object"), (std::pair<std::string, std::string>{"color", "object"}));
    EXPECT_THROW(parse_pair("object-color"), EvalError);
    EXPECT_THROW(parse_pair("shape-style"), EvalError);
    EXPECT_EQ(compose_prompt({{"color", "<c>"}, {"object", "dog"}}), "a <c> colored photo of a dog");
    EXPECT_EQ(compose_prompt({{"object", "<o>"}, {"style", "graffiti"}}), "a photo of <o> in graffiti style");
    EXPECT_EQ(compose_prompt({{"layout", "<l>"}, {"color", "blue"}}), "a blue colored photo in <l> layout");
}

TEST(Pairs, HandAverageSingleValue) {
    AttributeLists lists = attribute_lists();
    lists.objects = {"cube"};
    EvalContext ctx;
    ctx.n = 1;
    ctx.generate = [](const ConditioningGrid&, uint64_t) { return vec_image({1, 0, 0}); };
    ctx.enc = planted_encoders({{"cube", {1, 1, 0}}, {"red colors", {0, 0, 1}}});
    const auto r = pair_disentanglement_eval(matte_bundle(), "color-object", ctx, lists);
    ASSERT_EQ(r.images.size(), 1u);
    EXPECT_NEAR(r.row("pair:matte", "color-object").score, 0.5 * (1 / std::sqrt(2.0) + 0.0), 1e-12);
}

TEST(Pairs, LayoutHeldUsesSweptOnly) {
    AttributeLists lists = attribute_lists();
    lists.objects = {"dog", "cube"};
    EvalContext ctx;
    ctx.n = 1;
    ctx.generate = [](const ConditioningGrid&, uint64_t) { return vec_image({1, 0, 0}); };
    ctx.enc = planted_encoders({{"dog", {1, 0, 0}}, {"cube", {0, 1, 0}}});
    const auto r = pair_disentanglement_eval(matte_bundle(), "layout-object", ctx, lists);
    EXPECT_NEAR(r.row("pair:matte", "layout-object").score, 0.5, 1e-12);
}

TEST(Pairs, MissingHeldToken) {
    TokenBundle b = matte_bundle();
    b.embeddings.erase("<o>");
    EvalContext ctx;
    ctx.generate = [](const ConditioningGrid&, uint64_t) { return vec_image({1, 0, 0}); };
    ctx.enc = planted_encoders({});
    EXPECT_THROW(pair_disentanglement_eval(b, "object-style", ctx), EvalError);
    EXPECT_THROW(pair_disentanglement_eval(matte_bundle(), "style-shape", ctx), EvalError);
}

TEST(Pairs, BaselineGrids) {
    TokenBundle b;
    b.mode = "p16";
    for (int i = 0; i < 16; ++i) b.embeddings[baseline_token(BaselineMode::layer_only_16, i)] = Vec(32, 0.0);
    const auto g = pair_grid(b, "object", "color", "blue");
    EXPECT_EQ(*g.resolve(7, 500).text, "<x7> a blue colored photo");
    EXPECT_EQ(*g.resolve(1, 500).text, "a blue colored photo");

    b.mode = "s10";
    b.embeddings.clear();
    for (int i = 0; i < 10; ++i) b.embeddings[baseline_token(BaselineMode::stage_only_10, i)] = Vec(32, 0.0);
    const auto s = pair_grid(b, "layout", "style", "graffiti");
    EXPECT_EQ(*s.resolve(3, 950).text, "<y1> a photo in graffiti style");
    EXPECT_EQ(*s.resolve(3, 50).text, "a photo in graffiti style");
}

TEST(Pairs, ToyDeterministicAcrossWorkers) {
    ToyBackend b;
    const TokenBundle bundle = matte_bundle();
    install_bundle(bundle, b);
    SamplerConfig sc;
    sc.steps = 4;
    EvalContext ctx;
    ctx.generate = sampler_generator(b, sc);
    ctx.enc = encoders_of(b);
    ctx.n = 2;
    const auto one = pair_disentanglement_eval(bundle, "color-style", ctx);
    ctx.workers = 3;
    const auto three = pair_disentanglement_eval(bundle, "color-style", ctx);
    EXPECT_EQ(one.images, three.images);
    EXPECT_EQ(one.rows, three.rows);
}

TEST(Report, CsvRecomputes) {
    std::vector<ImageScore> images;
    Rng rng(3);
    for (int i = 0; i < 30; ++i) {
        images.push_back({i % 2 ? "m1" : "m2", i % 3 ? "a" : "b,c", "v" + std::to_string(i % 4), i, 100u + i, rng.uniform()});
    }
    EvalReport r;
    r.images = images;
    r.rows = aggregate(images, "abc");

    // independent re-aggregation from the per-image CSV text
    std::istringstream in(image_scores_csv(r));
    std::string line;
    std::getline(in, line);
    std::map<std::pair<std::string, std::string>, std::pair<double, int>> acc;
    while (std::getline(in, line)) {
        std::vector<std::string> f;
        std::string cur;
        bool quoted = false;
        for (char ch : line) {
            if (ch == '"') {
                quoted = !quoted;
            } else if (ch == ',' && !quoted) {
                f.push_back(cur);
                cur.clear();
            } else {
                cur += ch;
            }
        }
        f.push_back(cur);
        auto& a = acc[{f[0], f[1]}];
        a.first += std::stod(f[5]);
        a.second += 1;
    }
    ASSERT_EQ(acc.size(), r.rows.size());
    for (const auto& row : r.rows) {
        const auto& a = acc.at({row.metric, row.subject});
        EXPECT_EQ(row.n_images, a.second);
        EXPECT_NEAR(row.score, a.first / a.second, 1e-12);
    }
    EXPECT_NE(report_csv(r).find("\"b,c\""), std::string::npos);
}

TEST(Report, WritesThreeFiles) {
    EvalReport r;
    r.images = {{"m", "s", "", 0, 1, 0.5}};
    r.rows = aggregate(r.images, "h");
    const auto dir = std::filesystem::temp_directory_path() / "matte_eval_report";
    std::filesystem::create_directories(dir);
    const auto files = write_report(r, (dir / "report.csv").string(), {{"n", 1}});
    ASSERT_EQ(files.size(), 3u);
    for (const auto& f : files) EXPECT_TRUE(std::filesystem::exists(f));
    std::ifstream j(files[2]);
    EXPECT_EQ(nlohmann::json::parse(j)["rows"][0]["score"].get<double>(), 0.5);
    std::filesystem::remove_all(dir);
}

TEST(Ablation, ZeroWeightsCoincide) {
    ToyBackend b;
    const Image ref = fixtures::planted_reference(b);
    InversionConfig cfg;
    cfg.steps = 20;
    cfg.lambda_cs = 0.0;
    cfg.lambda_o = 0.0;
    SamplerConfig sc;
    sc.steps = 4;
    EvalContext ctx;
    ctx.generate = sampler_generator(b, sc);
    ctx.enc = encoders_of(b);
    ctx.n = 2;
    const auto r = ablation_eval(ref, "cat", cfg, b, ctx);
    for (const auto& tok : {"<c>", "<o>", "<s>"}) {
        EXPECT_EQ(r.row("L_R:image-image", tok).score, r.row("L_R+L_CS+L_O:image-image", tok).score);
        EXPECT_EQ(r.row("L_R:text-text", tok).score, r.row("L_R+L_CS+L_O:text-text", tok).score);
    }
}

TEST(Bundle, RoundTrip) {
    ToyBackend b;
    InversionConfig cfg;
    cfg.steps = 10;
    const auto res = invert(fixtures::planted_reference(b), "cat", cfg, b);
    TokenBundle bundle = bundle_from_inversion(res, cfg);
    bundle.truth.style_label = "graffiti";
    bundle.reference_hash = "00ff";
    bundle.backend = "toy";
    EXPECT_EQ(deserialize_bundle(serialize_bundle(bundle)), bundle);

    std::string bytes = serialize_bundle(bundle);
    bytes[0] = 'X';
    EXPECT_THROW(deserialize_bundle(bytes), BundleError);
    EXPECT_THROW(deserialize_bundle(serialize_bundle(bundle).substr(0, 40)), BundleError);

    ToyBackend other(ToyConfig{.embedding_dim = 16});
    EXPECT_THROW(install_bundle(bundle, other), BackendError);
}
