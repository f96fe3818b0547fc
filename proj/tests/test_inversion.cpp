#include <gtest/gtest.h>

#include <cmath>

#include "fixtures.hpp"
#include "matte/matte_inversion.hpp"

using namespace matte;

namespace {

StepSample sample_at(const ToyBackend& b, int t, uint64_t seed, const std::string& style = "oil painting") {
    Rng rng(seed);
    StepSample s;
    s.t = t;
    s.noise.push_back(b.noise_like(rng));
    s.style = style;
    return s;
}

InversionConfig quick(uint64_t seed = 0, int steps = 40) {
    InversionConfig c;
    c.seed = seed;
    c.steps = steps;
    return c;
}

}  // namespace

/*------------------------------------------------ activity ------------------------------------------------*/

TEST(Activity, Examples) {
    const auto s = default_token_schedule();
    const auto sp = canonical_stage_partition();
    EXPECT_EQ(active_tokens(900, s, sp), (ActiveSet{{"<l>", "coarse"},
                                                    {"<c>", "moderate-down"},
                                                    {"<c>", "moderate-up"},
                                                    {"<s>", "moderate-down"},
                                                    {"<s>", "moderate-up"}}));
    EXPECT_EQ(active_tokens(500, s, sp), (ActiveSet{{"<o>", "coarse"}}));
    EXPECT_TRUE(active_tokens(100, s, sp).empty());
    EXPECT_THROW(active_tokens(1000, s, sp), std::out_of_range);
}

TEST(TrainingGrid, Examples) {
    const auto s = default_token_schedule();
    auto text = [](const ConditioningGrid& g, int layer, int t) { return *g.resolve(layer, t).text; };

    const auto g900 = build_training_conditioning(900, s);
    EXPECT_EQ(text(g900, 7, 900), "a photo in <l> layout");
    EXPECT_EQ(text(g900, 4, 900), "a <c> colored photo in <s> style");
    EXPECT_EQ(text(g900, 11, 900), "a <c> colored photo in <s> style");
    EXPECT_EQ(text(g900, 1, 900), "a photo");
    EXPECT_EQ(text(g900, 15, 900), "a photo");

    const auto g500 = build_training_conditioning(500, s);
    for (int l = 1; l <= 16; ++l) EXPECT_EQ(text(g500, l, 500), l >= 6 && l <= 9 ? "a photo of <o>" : "a photo");

    const auto g100 = build_training_conditioning(100, s);
    for (int l = 1; l <= 16; ++l) EXPECT_EQ(text(g100, l, 100), "a photo");
}

TEST(TrainingGrid, T2CarriesBothColorAndObject) {
    const auto g = build_training_conditioning(700, default_token_schedule());
    EXPECT_EQ(*g.resolve(8, 700).text, "a photo of <o>");
    EXPECT_EQ(*g.resolve(3, 700).text, "a <c> colored photo in <s> style");
}

TEST(TrainingGrid, MissingSlotRejected) {
    Scaffolds sc = default_scaffolds();
    sc.by_subset["coarse"] = "a photo[ in <l> layout]";
    EXPECT_THROW(build_training_conditioning(500, default_token_schedule(), sc), ConfigError);
}

/*------------------------------------------------ losses ------------------------------------------------*/

TEST(Losses, ClosedForm) {
    Latent noise(1, 1, 3);
    Latent pred(1, 1, 3);
    noise.data = {1.0, -2.0, 0.5};
    pred.data = {0.5, -1.0, 0.5};
    const double l_r = (0.25 + 1.0 + 0.0) / 3.0;

    TokenSet ts;
    ts.embeddings = {{"<c>", {1.0, 2.0}}, {"<o>", {0.0, 3.0}}, {"<s>", {0, 0}}, {"<l>", {0, 0}}};
    GroundTruth gt;
    gt.c_gt = {2.0, 0.0};
    gt.o_gt = {1.0, 1.0};
    // equidistant style: 0.25 + 2.25 vs 2.25 + 0.25
    const Vec style = {0.5, 0.5};
    // ||c - s2||^2 = 4, ||c_gt - s2||^2 = 1
    const Vec style2 = {1.0, 0.0};
    const double l_o = 1.0 + 4.0;

    InversionConfig cfg;
    cfg.lambda_cs = 0.1;
    cfg.lambda_o = 0.1;
    for (auto variant : {CsVariant::literal, CsVariant::absolute}) {
        cfg.cs_variant = variant;
        const auto all = compute_losses(noise, pred, ts, gt, style2, cfg, {"<c>", "<o>"});
        EXPECT_NEAR(all.l_r, l_r, 1e-12);
        EXPECT_NEAR(all.l_cs, 3.0, 1e-12);
        EXPECT_NEAR(all.l_o, l_o, 1e-12);
        EXPECT_NEAR(all.l_inv, l_r + 0.1 * 3.0 + 0.1 * l_o, 1e-12);
        const auto zero = compute_losses(noise, pred, ts, gt, style, cfg, {"<c>"});
        EXPECT_NEAR(zero.l_cs, 0.0, 1e-12);
    }

    // only the active terms enter L_inv
    const auto none = compute_losses(noise, pred, ts, gt, style2, cfg, {"<s>", "<l>"});
    EXPECT_EQ(none.l_inv, none.l_r);
    EXPECT_FALSE(none.cs_included);
    EXPECT_FALSE(none.o_included);
    const auto only_o = compute_losses(noise, pred, ts, gt, style2, cfg, {"<o>"});
    EXPECT_NEAR(only_o.l_inv, l_r + 0.1 * l_o, 1e-12);
}

TEST(Losses, LiteralCanBeNegativeAbsoluteCannot) {
    const Vec c = {0.0, 0.0};
    const Vec c_gt = {3.0, 0.0};
    const Vec s = {0.0, 1.0};
    // 1 - 10 = -9
    EXPECT_DOUBLE_EQ(color_style_loss(c, c_gt, s, CsVariant::literal), -9.0);
    EXPECT_DOUBLE_EQ(color_style_loss(c, c_gt, s, CsVariant::absolute), 9.0);
}

TEST(Losses, SpecExamples) {
    EXPECT_DOUBLE_EQ(color_style_loss({1, 0}, {0, 1}, {0, 0}, CsVariant::literal), 0.0);
    EXPECT_DOUBLE_EQ(color_style_loss({0.3, 0.2}, {0.3, 0.2}, {5, 1}, CsVariant::absolute), 0.0);
    EXPECT_DOUBLE_EQ(object_loss({1, 2, 3}, {1, 2, 3}), 0.0);
}

TEST(Losses, DimensionMismatch) {
    EXPECT_THROW(reconstruction_loss(Latent(1, 2, 2), Latent(1, 2, 3)), std::invalid_argument);
    EXPECT_THROW(object_loss({1, 2}, {1, 2, 3}), std::invalid_argument);
}

TEST(Losses, CsGradientFiniteDifferences) {
    Rng rng(5);
    for (int trial = 0; trial < 20; ++trial) {
        const Vec c = rng.normal_vec(8, 1.0);
        const Vec c_gt = rng.normal_vec(8, 1.0);
        const Vec s = rng.normal_vec(8, 1.0);
        for (auto variant : {CsVariant::literal, CsVariant::absolute}) {
            const Vec g = color_style_gradient(c, c_gt, s, variant);
            for (size_t i = 0; i < c.size(); ++i) {
                Vec p = c;
                Vec m = c;
                const double h = 1e-5;
                p[i] += h;
                m[i] -= h;
                const double fd = (color_style_loss(p, c_gt, s, variant) - color_style_loss(m, c_gt, s, variant)) / (2 * h);
                EXPECT_LT(std::abs(fd - g[i]) / std::max(std::abs(g[i]), 1e-8), 1e-4);
            }
            if (variant == CsVariant::literal) {
                for (size_t i = 0; i < c.size(); ++i) EXPECT_DOUBLE_EQ(g[i], 2 * (c[i] - s[i]));
            }
        }
    }
}

/*------------------------------------------------ inversion ------------------------------------------------*/

TEST(Inversion, GradientIsolationAt500) {
    ToyBackend b;
    const Image ref = fixtures::planted_reference(b);
    MatteInverter inv(b, ref, make_ground_truth(b, ref, "cat", quick()), quick());
    const auto out = inv.evaluate(sample_at(b, 500, 1));
    for (const char* tok : {"<c>", "<s>", "<l>"}) {
        for (double g : out.gradients.at(tok)) ASSERT_EQ(g, 0.0) << tok;
    }
    EXPECT_GT(norm(out.gradients.at("<o>")), 0.0);
}

TEST(Inversion, FullGradientMatchesFiniteDifferences) {
    ToyBackend b;
    const Image ref = fixtures::planted_reference(b);
    InversionConfig cfg = quick();
    cfg.token_init = TokenInit::random;
    MatteInverter inv(b, ref, make_ground_truth(b, ref, "cat", cfg), cfg);
    for (const auto& [t, tok] : std::vector<std::pair<int, std::string>>{{900, "<c>"}, {900, "<l>"}, {450, "<o>"}, {700, "<s>"}}) {
        const StepSample smp = sample_at(b, t, 9);
        const auto base = inv.evaluate(smp);
        const Vec v0 = inv.tokens().at(tok);
        for (int d = 0; d < 32; d += 7) {
            Vec p = v0;
            Vec m = v0;
            const double h = 1e-6;
            p[d] += h;
            m[d] -= h;
            inv.set_token(tok, p);
            const double fp = inv.evaluate(smp).losses.l_inv;
            inv.set_token(tok, m);
            const double fm = inv.evaluate(smp).losses.l_inv;
            inv.set_token(tok, v0);
            const double fd = (fp - fm) / (2 * h);
            const double an = base.gradients.at(tok)[d];
            EXPECT_LT(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-7}), 1e-3)
                << tok << " t=" << t << " d=" << d << " fd=" << fd << " an=" << an;
        }
    }
}

TEST(Inversion, ClassWordInitStartsAtAnchor) {
    ToyBackend b;
    const Image ref = fixtures::planted_reference(b);
    const auto gt = make_ground_truth(b, ref, "cat", quick());
    MatteInverter inv(b, ref, gt, quick());
    EXPECT_EQ(inv.tokens().at("<o>"), gt.o_gt);
    EXPECT_EQ(gt.o_gt, b.token_embedding("cat"));
    EXPECT_LT(norm(inv.tokens().at("<c>")), 0.2);
}

TEST(Inversion, GroundTruthFromPalette) {
    ToyBackend b;
    Image ref(16, 16, 3);
    for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) {
            ref.at(x, y, 0) = 1.0;
            ref.at(x, y, 2) = x < 4 ? 1.0 : 0.0;
        }
    }
    const auto gt = make_ground_truth(b, ref, "dog", quick());
    const std::string phrase = "red and " + name_color({255, 0, 255}) + " colors";
    EXPECT_EQ(gt.color_phrase, phrase);
    EXPECT_EQ(gt.c_gt, b.token_embedding(phrase));
    EXPECT_EQ(gt.style_pool.size(), 26u);
    EXPECT_THROW(make_ground_truth(b, ref, "  ", quick()), ConfigError);
}

TEST(Inversion, Deterministic) {
    ToyBackend b1;
    ToyBackend b2;
    const Image ref = fixtures::planted_reference(b1);
    const auto r1 = invert(ref, "cat", quick(3), b1);
    const auto r2 = invert(ref, "cat", quick(3), b2);
    EXPECT_EQ(r1.log, r2.log);
    EXPECT_EQ(r1.tokens.embeddings, r2.tokens.embeddings);
    const auto r3 = invert(ref, "cat", quick(4), b2);
    EXPECT_NE(r1.log, r3.log);
}

TEST(Inversion, LogRecordsActivity) {
    ToyBackend b;
    const Image ref = fixtures::planted_reference(b);
    const auto r = invert(ref, "cat", quick(1, 30), b);
    ASSERT_EQ(r.log.records.size(), 30u);
    for (const auto& rec : r.log.records) {
        std::vector<std::string> expect;
        for (const auto& [tok, sub] : active_tokens(rec.t, default_token_schedule(), canonical_stage_partition())) {
            expect.push_back(tok + "@" + sub);
        }
        EXPECT_EQ(rec.active, expect);
        EXPECT_TRUE(std::find(attribute_lists().styles_train.begin(), attribute_lists().styles_train.end(), rec.style) !=
                    attribute_lists().styles_train.end());
        EXPECT_EQ(step_record_from_json(to_json(rec)), rec);
    }
}

TEST(Inversion, DeliveredConditioningMatchesTrainingGrid) {
    ToyBackend b;
    const Image ref = fixtures::planted_reference(b);
    MatteInverter inv(b, ref, make_ground_truth(b, ref, "cat", quick()), quick());
    std::vector<std::pair<int, Conditioning>> seen;
    b.set_injection_hook([&](int layer, int, const Conditioning& c) { seen.push_back({layer, c}); });
    for (int i = 0; i < 60; ++i) {
        seen.clear();
        const auto before = inv.tokens().embeddings;  // the step updates tokens after the forward pass
        const StepRecord rec = inv.step(i);
        const auto grid = build_training_conditioning(rec.t, default_token_schedule());
        ASSERT_EQ(seen.size(), 16u);
        for (const auto& [layer, c] : seen) {
            ASSERT_EQ(c, fixtures::encode_with(b, before, grid.resolve(layer, rec.t))) << layer;
        }
    }
}

TEST(Inversion, NonFiniteLossAborts) {
    ToyBackend b;
    const Image ref = fixtures::planted_reference(b);
    MatteInverter inv(b, ref, make_ground_truth(b, ref, "cat", quick()), quick());
    inv.set_token("<c>", Vec(32, std::nan("")));
    EXPECT_THROW(
        {
            for (int i = 0; i < 100; ++i) inv.step(i);
        },
        InversionError);
}

TEST(Inversion, InactiveTokensUntouched) {
    ToyBackend b;
    const Image ref = fixtures::planted_reference(b);
    MatteInverter inv(b, ref, make_ground_truth(b, ref, "cat", quick()), quick());
    for (int i = 0; i < 40; ++i) {
        const auto before = inv.tokens().embeddings;
        const StepRecord rec = inv.step(i);
        const auto names = active_token_names(active_tokens(rec.t, default_token_schedule(), canonical_stage_partition()));
        for (const auto& tok : attribute_tokens()) {
            if (!names.count(tok)) EXPECT_EQ(inv.tokens().at(tok), before.at(tok)) << tok << " t=" << rec.t;
        }
    }
}

TEST(Config, JsonRoundTripAndValidation) {
    InversionConfig c;
    c.lr = 0.01;
    c.steps = 7;
    c.cs_variant = CsVariant::literal;
    c.token_init = TokenInit::random;
    c.seed = 99;
    const auto back = inversion_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_THROW(inversion_config_from_json({{"lambda_cs", -1.0}}), ConfigError);
    EXPECT_THROW(inversion_config_from_json({{"cs_variant", "squared"}}), ConfigError);
    EXPECT_THROW(inversion_config_from_json({{"lr", "fast"}}), ConfigError);
}

/*------------------------------------------------ baselines ------------------------------------------------*/

TEST(Baseline, VectorCounts) {
    ToyBackend b;
    const Image ref = fixtures::planted_reference(b);
    EXPECT_EQ(baseline_invert(ref, BaselineMode::layer_only_16, quick(0, 5), b).vectors.size(), 16u);
    EXPECT_EQ(baseline_invert(ref, BaselineMode::stage_only_10, quick(0, 5), b).vectors.size(), 10u);
}

TEST(Baseline, ZeroStepsKeepsInit) {
    ToyBackend b;
    const Image ref = fixtures::planted_reference(b);
    const InversionConfig cfg = quick(8, 0);
    const auto r = baseline_invert(ref, BaselineMode::stage_only_10, cfg, b);
    Rng rng(8);
    for (const auto& v : r.vectors) EXPECT_EQ(v, rng.normal_vec(32, cfg.init_sigma));
    EXPECT_TRUE(r.log.records.empty());
}

TEST(Baseline, StageOnlyUpdatesOnlyRoutedToken) {
    ToyBackend b;
    const Image ref = fixtures::planted_reference(b);
    const auto r = baseline_invert(ref, BaselineMode::stage_only_10, quick(2, 20), b);
    for (const auto& rec : r.log.records) {
        ASSERT_EQ(rec.active.size(), 1u);
        EXPECT_EQ(rec.active[0], "<y" + std::to_string(10 - rec.t / 100) + ">");
    }
}
