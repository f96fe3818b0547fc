#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <set>

#include "matte/palette.hpp"

using namespace matte;

namespace {

Image from_pixels(int w, int h, const std::vector<std::array<int, 3>>& px) {
    std::vector<Rgb8> rgb;
    for (const auto& p : px) rgb.push_back({static_cast<uint8_t>(p[0]), static_cast<uint8_t>(p[1]), static_cast<uint8_t>(p[2])});
    return from_rgb8(w, h, rgb);
}

Image solid(int w, int h, std::array<int, 3> c) { return from_pixels(w, h, std::vector<std::array<int, 3>>(w * h, c)); }

// Independent sRGB -> XYZ -> Lab (D65) in one pass.
std::array<double, 3> lab_oracle(const std::array<int, 3>& c) {
    double lin[3];
    for (int k = 0; k < 3; ++k) {
        const double v = c[k] / 255.0;
        lin[k] = v > 0.04045 ? std::pow((v + 0.055) / 1.055, 2.4) : v / 12.92;
    }
    const double M[3][3] = {{0.4124564, 0.3575761, 0.1804375},
                            {0.2126729, 0.7151522, 0.0721750},
                            {0.0193339, 0.1191920, 0.9503041}};
    const double white[3] = {0.95047, 1.0, 1.08883};
    double f[3];
    for (int r = 0; r < 3; ++r) {
        const double t = (M[r][0] * lin[0] + M[r][1] * lin[1] + M[r][2] * lin[2]) / white[r];
        const double d = 6.0 / 29.0;
        f[r] = t > d * d * d ? std::cbrt(t) : t / (3 * d * d) + 4.0 / 29.0;
    }
    return {116 * f[1] - 16, 500 * (f[0] - f[1]), 200 * (f[1] - f[2])};
}

std::string nearest_name_oracle(const std::array<int, 3>& c) {
    const auto lab = lab_oracle(c);
    std::string best;
    double bd = 1e300;
    for (const auto& nc : color_vocabulary()) {
        const auto a = lab_oracle(nc.anchor_rgb);
        const double d = std::hypot(lab[0] - a[0], lab[1] - a[1], lab[2] - a[2]);
        if (d < bd) {
            bd = d;
            best = nc.name;
        }
    }
    return best;
}

}  // namespace

TEST(Palette, SolidRed) {
    const Palette p = extract_palette(solid(64, 64, {255, 0, 0}), 5);
    ASSERT_EQ(p.entries.size(), 1u);
    EXPECT_EQ(p.entries[0].rgb, (std::array<int, 3>{255, 0, 0}));
    EXPECT_EQ(p.entries[0].frequency, 1.0);
    EXPECT_EQ(palette_phrase(p), "red colors");
}

TEST(Palette, HalfRedHalfBlue) {
    std::vector<std::array<int, 3>> px;
    for (int i = 0; i < 64 * 64; ++i) px.push_back(i < 64 * 32 ? std::array<int, 3>{255, 0, 0} : std::array<int, 3>{0, 0, 255});
    const Palette p = extract_palette(from_pixels(64, 64, px), 5);
    ASSERT_EQ(p.entries.size(), 2u);
    EXPECT_EQ(p.entries[0].frequency, 0.5);
    EXPECT_EQ(p.entries[1].frequency, 0.5);
    // equal frequencies fall back to RGB order
    EXPECT_EQ(p.entries[0].rgb, (std::array<int, 3>{0, 0, 255}));
    EXPECT_EQ(palette_phrase(p), "blue and red colors");
}

TEST(Palette, FourBlocks) {
    const std::array<int, 3> cols[4] = {{10, 200, 30}, {250, 250, 0}, {0, 0, 0}, {90, 40, 160}};
    std::vector<std::array<int, 3>> px;
    for (int y = 0; y < 32; ++y) {
        for (int x = 0; x < 32; ++x) px.push_back(cols[(y / 16) * 2 + x / 16]);
    }
    const Palette p = extract_palette(from_pixels(32, 32, px), 5);
    ASSERT_EQ(p.entries.size(), 4u);
    std::set<std::array<int, 3>> got;
    for (const auto& e : p.entries) {
        got.insert(e.rgb);
        EXPECT_EQ(e.frequency, 0.25);
    }
    const std::set<std::array<int, 3>> want(std::begin(cols), std::end(cols));
    EXPECT_EQ(got, want);
}

TEST(Palette, EmptyImageRejected) { EXPECT_THROW(extract_palette(Image(), 5), std::invalid_argument); }

TEST(Palette, ExactRecoveryRandomized) {
    std::mt19937_64 gen(7);
    for (int trial = 0; trial < 50; ++trial) {
        const int k = 1 + trial % 5;
        std::set<std::array<int, 3>> colors;
        while (static_cast<int>(colors.size()) < k) {
            colors.insert({static_cast<int>(gen() % 256), static_cast<int>(gen() % 256), static_cast<int>(gen() % 256)});
        }
        const std::vector<std::array<int, 3>> cv(colors.begin(), colors.end());
        const int w = 8 + static_cast<int>(gen() % 40);
        const int h = 8 + static_cast<int>(gen() % 40);
        std::vector<std::array<int, 3>> px(w * h);
        for (int i = 0; i < k; ++i) px[i] = cv[i];  // every color present
        for (int i = k; i < w * h; ++i) px[i] = cv[gen() % k];
        std::shuffle(px.begin(), px.end(), gen);

        std::map<std::array<int, 3>, int> hist;
        for (const auto& p : px) hist[p]++;

        const Palette pal = extract_palette(from_pixels(w, h, px), 5);
        ASSERT_EQ(pal.entries.size(), hist.size()) << trial;
        for (const auto& e : pal.entries) {
            ASSERT_TRUE(hist.count(e.rgb)) << trial;
            EXPECT_EQ(e.frequency, static_cast<double>(hist[e.rgb]) / (w * h)) << trial;
        }
        for (size_t i = 1; i < pal.entries.size(); ++i) EXPECT_GE(pal.entries[i - 1].frequency, pal.entries[i].frequency);

        // pixel order does not matter
        std::shuffle(px.begin(), px.end(), gen);
        EXPECT_EQ(extract_palette(from_pixels(w, h, px), 5).entries, pal.entries);
    }
}

TEST(Palette, ManyColorsGiveNEntries) {
    std::mt19937_64 gen(1);
    std::vector<std::array<int, 3>> px(40 * 40);
    for (auto& p : px) p = {static_cast<int>(gen() % 256), static_cast<int>(gen() % 256), static_cast<int>(gen() % 256)};
    const Palette pal = extract_palette(from_pixels(40, 40, px), 5);
    EXPECT_EQ(pal.entries.size(), 5u);
    double total = 0;
    for (const auto& e : pal.entries) total += e.frequency;
    EXPECT_NEAR(total, 1.0, 1e-12);
}

TEST(Naming, Examples) {
    EXPECT_EQ(name_color({255, 0, 0}), "red");
    EXPECT_EQ(name_color({0, 0, 0}), "black");
    EXPECT_EQ(name_color({128, 128, 128}), "gray");
}

TEST(Naming, AnchorsAreFixedPoints) {
    for (const auto& nc : color_vocabulary()) EXPECT_EQ(name_color(nc.anchor_rgb), nc.name);
}

TEST(Naming, BruteForceLabScan) {
    std::mt19937_64 gen(99);
    for (int i = 0; i < 1000; ++i) {
        const std::array<int, 3> c{static_cast<int>(gen() % 256), static_cast<int>(gen() % 256), static_cast<int>(gen() % 256)};
        ASSERT_EQ(name_color(c), nearest_name_oracle(c)) << c[0] << "," << c[1] << "," << c[2];
    }
}

TEST(Phrase, JoinRules) {
    EXPECT_EQ(join_color_names({"red"}), "red");
    EXPECT_EQ(join_color_names({"red", "blue"}), "red and blue");
    EXPECT_EQ(join_color_names({"red", "blue", "green"}), "red, blue and green");
}

TEST(Phrase, DuplicateNamesCollapse) {
    Palette p;
    p.entries = {{{255, 0, 0}, 0.6}, {{250, 5, 5}, 0.4}};
    EXPECT_EQ(palette_phrase(p), "red colors");
}

TEST(Phrase, AtMostThreeColors) {
    Palette p;
    p.entries = {{{255, 0, 0}, 0.3}, {{0, 0, 255}, 0.25}, {{0, 128, 0}, 0.2}, {{255, 255, 0}, 0.15}, {{0, 0, 0}, 0.1}};
    EXPECT_EQ(palette_phrase(p), "red, blue and green colors");
}
