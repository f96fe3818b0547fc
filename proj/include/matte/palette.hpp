// SPDX-License-Identifier: Apache-2.0
#ifndef MATTE_PALETTE_HPP
#define MATTE_PALETTE_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "matte/common.hpp"
#include "matte/image.hpp"

namespace matte {

struct PaletteEntry {
    std::array<int, 3> rgb{};
    double frequency = 0.0;

    bool operator==(const PaletteEntry&) const = default;
};

// Sorted by descending frequency.
struct Palette {
    std::vector<PaletteEntry> entries;
};

struct NamedColor {
    std::string name;
    std::array<int, 3> anchor_rgb{};
};

inline const std::vector<NamedColor>& color_vocabulary() {
    static const std::vector<NamedColor> vocab = {
        {"black", {0, 0, 0}},         {"blue", {0, 0, 255}},     {"brown", {165, 42, 42}},
        {"gray", {128, 128, 128}},    {"green", {0, 128, 0}},    {"orange", {255, 165, 0}},
        {"pink", {255, 192, 203}},    {"purple", {128, 0, 128}}, {"red", {255, 0, 0}},
        {"white", {255, 255, 255}},   {"yellow", {255, 255, 0}},
    };
    return vocab;
}

/*================================================== median cut ==================================================*/

namespace detail {

struct ColorCount {
    std::array<int, 3> rgb;
    uint64_t count;
};

struct ColorBox {
    std::vector<ColorCount> colors;
    uint64_t count = 0;
    std::array<int, 3> lo{255, 255, 255};
    std::array<int, 3> hi{0, 0, 0};

    void refresh() {
        count = 0;
        lo = {255, 255, 255};
        hi = {0, 0, 0};
        for (const auto& c : colors) {
            count += c.count;
            for (int k = 0; k < 3; ++k) {
                lo[k] = std::min(lo[k], c.rgb[k]);
                hi[k] = std::max(hi[k], c.rgb[k]);
            }
        }
    }

    bool splittable() const { return colors.size() > 1; }

    double volume() const {
        return static_cast<double>(hi[0] - lo[0] + 1) * (hi[1] - lo[1] + 1) * (hi[2] - lo[2] + 1);
    }

    std::pair<ColorBox, ColorBox> split() const {
        int axis = 0;
        for (int k = 1; k < 3; ++k) {
            if (hi[k] - lo[k] > hi[axis] - lo[axis]) {
                axis = k;
            }
        }
        std::vector<ColorCount> sorted = colors;
        std::sort(sorted.begin(), sorted.end(), [axis](const ColorCount& a, const ColorCount& b) {
            return a.rgb[axis] != b.rgb[axis] ? a.rgb[axis] < b.rgb[axis] : a.rgb < b.rgb;
        });
        // median by pixel count along the axis
        uint64_t acc = 0;
        int median_value = sorted.back().rgb[axis];
        for (const auto& c : sorted) {
            acc += c.count;
            if (2 * acc >= count) {
                median_value = c.rgb[axis];
                break;
            }
        }
        ColorBox left;
        ColorBox right;
        for (const auto& c : sorted) {
            (c.rgb[axis] <= median_value ? left : right).colors.push_back(c);
        }
        if (right.colors.empty()) {
            left.colors.clear();
            for (const auto& c : sorted) {
                (c.rgb[axis] < median_value ? left : right).colors.push_back(c);
            }
        }
        left.refresh();
        right.refresh();
        return {std::move(left), std::move(right)};
    }
};

}  // namespace detail

// Modified median cut: boxes are split by pixel population until 75% of the target count,
// then by population x volume. Each entry is the pixel-weighted mean of its box.
inline Palette extract_palette(const Image& image, int n = 5) {
    if (n < 1) {
        throw std::invalid_argument("palette size must be >= 1");
    }
    if (image.empty()) {
        throw std::invalid_argument("empty image");
    }
    std::map<std::array<int, 3>, uint64_t> histogram;
    for (const Rgb8& px : to_rgb8(image)) {
        histogram[{px[0], px[1], px[2]}]++;
    }
    detail::ColorBox root;
    for (const auto& [rgb, count] : histogram) {
        root.colors.push_back({rgb, count});
    }
    root.refresh();
    const uint64_t total = root.count;

    std::vector<detail::ColorBox> boxes{std::move(root)};
    const size_t population_phase = static_cast<size_t>(std::ceil(0.75 * n));
    while (static_cast<int>(boxes.size()) < n) {
        const bool by_population = boxes.size() < population_phase;
        int best = -1;
        double best_score = -1.0;
        for (size_t i = 0; i < boxes.size(); ++i) {
            if (!boxes[i].splittable()) {
                continue;
            }
            const double score = by_population ? static_cast<double>(boxes[i].count)
                                               : static_cast<double>(boxes[i].count) * boxes[i].volume();
            if (score > best_score) {
                best_score = score;
                best = static_cast<int>(i);
            }
        }
        if (best < 0) {
            break;
        }
        auto [a, b] = boxes[best].split();
        boxes[best] = std::move(a);
        boxes.push_back(std::move(b));
    }

    Palette palette;
    for (const auto& box : boxes) {
        double sum[3] = {0, 0, 0};
        for (const auto& c : box.colors) {
            for (int k = 0; k < 3; ++k) {
                sum[k] += static_cast<double>(c.rgb[k]) * c.count;
            }
        }
        PaletteEntry e;
        for (int k = 0; k < 3; ++k) {
            e.rgb[k] = static_cast<int>(std::lround(sum[k] / box.count));
        }
        e.frequency = static_cast<double>(box.count) / static_cast<double>(total);
        palette.entries.push_back(e);
    }
    std::sort(palette.entries.begin(), palette.entries.end(), [](const PaletteEntry& a, const PaletteEntry& b) {
        return a.frequency != b.frequency ? a.frequency > b.frequency : a.rgb < b.rgb;
    });
    return palette;
}

/*================================================== naming ==================================================*/

// sRGB (D65) to CIELAB.
inline std::array<double, 3> rgb_to_lab(const std::array<int, 3>& rgb) {
    auto linear = [](int v) {
        const double c = v / 255.0;
        return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
    };
    const double r = linear(rgb[0]);
    const double g = linear(rgb[1]);
    const double b = linear(rgb[2]);
    const double x = (0.4124564 * r + 0.3575761 * g + 0.1804375 * b) / 0.95047;
    const double y = (0.2126729 * r + 0.7151522 * g + 0.0721750 * b) / 1.00000;
    const double z = (0.0193339 * r + 0.1191920 * g + 0.9503041 * b) / 1.08883;
    auto f = [](double t) {
        constexpr double eps = 216.0 / 24389.0;
        constexpr double kappa = 24389.0 / 27.0;
        return t > eps ? std::cbrt(t) : (kappa * t + 16.0) / 116.0;
    };
    const double fx = f(x);
    const double fy = f(y);
    const double fz = f(z);
    return {116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

inline std::string name_color(const std::array<int, 3>& rgb,
                              const std::vector<NamedColor>& vocabulary = color_vocabulary()) {
    if (vocabulary.empty()) {
        throw std::invalid_argument("empty color vocabulary");
    }
    const auto lab = rgb_to_lab(rgb);
    size_t best = 0;
    double best_d = INFINITY;
    for (size_t i = 0; i < vocabulary.size(); ++i) {
        const auto a = rgb_to_lab(vocabulary[i].anchor_rgb);
        const double d = (lab[0] - a[0]) * (lab[0] - a[0]) + (lab[1] - a[1]) * (lab[1] - a[1]) +
                         (lab[2] - a[2]) * (lab[2] - a[2]);
        if (d < best_d) {
            best_d = d;
            best = i;
        }
    }
    return vocabulary[best].name;
}

// Deduplicated names of the top entries, most frequent first.
inline std::vector<std::string> palette_names(const Palette& palette, int max_colors = 3) {
    std::vector<std::string> names;
    for (size_t i = 0; i < palette.entries.size() && static_cast<int>(i) < max_colors; ++i) {
        std::string name = name_color(palette.entries[i].rgb);
        if (std::find(names.begin(), names.end(), name) == names.end()) {
            names.push_back(std::move(name));
        }
    }
    return names;
}

// "red colors", "red and blue colors", "red, blue and green colors"
inline std::string join_color_names(const std::vector<std::string>& names) {
    std::string out;
    for (size_t i = 0; i < names.size(); ++i) {
        if (i > 0) {
            out += i + 1 == names.size() ? " and " : ", ";
        }
        out += names[i];
    }
    return out;
}

inline std::string palette_phrase(const Palette& palette, int max_colors = 3) {
    return join_color_names(palette_names(palette, max_colors)) + " colors";
}

}  // namespace matte

#endif  // MATTE_PALETTE_HPP
