// SPDX-License-Identifier: Apache-2.0
#ifndef MATTE_COMMON_HPP
#define MATTE_COMMON_HPP

#include <cctype>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace matte {

using Vec = std::vector<double>;

/*================================================== errors ==================================================*/

// Error categories map onto CLI exit codes (see cli.hpp).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BackendError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct GridError : ConfigError {
    using ConfigError::ConfigError;
};

/*================================================== vector math ==================================================*/

inline void check_same_dim(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) {
        throw std::invalid_argument("dimension mismatch: " + std::to_string(a.size()) + " vs " +
                                    std::to_string(b.size()));
    }
}

inline double dot(std::span<const double> a, std::span<const double> b) {
    check_same_dim(a, b);
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        acc += a[i] * b[i];
    }
    return acc;
}

inline double squared_norm(std::span<const double> a) {
    double acc = 0.0;
    for (double v : a) {
        acc += v * v;
    }
    return acc;
}

inline double norm(std::span<const double> a) { return std::sqrt(squared_norm(a)); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
    check_same_dim(a, b);
    double acc = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        acc += d * d;
    }
    return acc;
}

inline double distance(std::span<const double> a, std::span<const double> b) {
    return std::sqrt(squared_distance(a, b));
}

inline Vec mean_of(const std::vector<Vec>& rows) {
    if (rows.empty()) {
        throw std::invalid_argument("mean of empty set");
    }
    Vec out(rows.front().size(), 0.0);
    for (const auto& r : rows) {
        check_same_dim(out, r);
        for (size_t i = 0; i < r.size(); ++i) {
            out[i] += r[i];
        }
    }
    for (double& v : out) {
        v /= static_cast<double>(rows.size());
    }
    return out;
}

inline bool all_finite(std::span<const double> a) {
    for (double v : a) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

/*================================================== hashing / rng ==================================================*/

// FNV-1a, 64 bit. Used for seeding per-word embeddings and for content hashes in manifests.
inline uint64_t fnv1a64(std::string_view bytes, uint64_t seed = 0xcbf29ce484222325ULL) {
    uint64_t h = seed;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(uint64_t v) {
    static const char* digits = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[i] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

// mt19937_64 is fully specified by the standard; the distributions are not, so
// normal and uniform draws are derived here to keep streams platform independent.
class Rng {
public:
    explicit Rng(uint64_t seed) : engine_(seed) {}

    double uniform() {
        // 53 random bits in [0, 1)
        return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
    }

    int64_t uniform_int(int64_t lo, int64_t hi_exclusive) {
        const uint64_t span = static_cast<uint64_t>(hi_exclusive - lo);
        const uint64_t limit = UINT64_MAX - UINT64_MAX % span;
        uint64_t r;
        do {
            r = engine_();
        } while (r >= limit);
        return lo + static_cast<int64_t>(r % span);
    }

    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * M_PI * u2);
        has_spare_ = true;
        return r * std::cos(2.0 * M_PI * u2);
    }

    Vec normal_vec(size_t n, double sigma = 1.0) {
        Vec out(n);
        for (double& v : out) {
            v = sigma * normal();
        }
        return out;
    }

    uint64_t next_u64() { return engine_(); }

private:
    std::mt19937_64 engine_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

/*================================================== strings ==================================================*/

inline std::string trim(std::string_view s) {
    size_t b = 0;
    size_t e = s.size();
    while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) {
        ++b;
    }
    while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) {
        --e;
    }
    return std::string(s.substr(b, e - b));
}

inline std::vector<std::string> split_whitespace(std::string_view s) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : s) {
        if (std::isspace(static_cast<unsigned char>(ch))) {
            if (!cur.empty()) {
                out.push_back(std::move(cur));
                cur.clear();
            }
        } else {
            cur.push_back(ch);
        }
    }
    if (!cur.empty()) {
        out.push_back(std::move(cur));
    }
    return out;
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
    std::string out;
    for (size_t i = 0; i < parts.size(); ++i) {
        if (i) {
            out += sep;
        }
        out += parts[i];
    }
    return out;
}

inline std::string normalize_whitespace(std::string_view s) { return join(split_whitespace(s), " "); }

inline std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    size_t start = 0;
    while (true) {
        const size_t pos = s.find(sep, start);
        out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) {
            break;
        }
        start = pos + 1;
    }
    return out;
}

// "⟨c⟩" (U+27E8 / U+27E9) is accepted as an alias for "<c>".
inline std::string normalize_placeholders(std::string_view s) {
    static const std::string open = "\xE2\x9F\xA8";
    static const std::string close = "\xE2\x9F\xA9";
    std::string out(s);
    for (const auto& [from, to] : {std::pair{open, std::string("<")}, std::pair{close, std::string(">")}}) {
        size_t pos = 0;
        while ((pos = out.find(from, pos)) != std::string::npos) {
            out.replace(pos, from.size(), to);
            pos += to.size();
        }
    }
    return out;
}

inline bool is_placeholder(std::string_view word) {
    return word.size() >= 3 && word.front() == '<' && word.back() == '>' &&
           word.find(' ') == std::string_view::npos;
}

// Placeholder tokens ("<c>", "<x12>") in order of appearance.
inline std::vector<std::string> placeholders_in(std::string_view prompt) {
    std::vector<std::string> out;
    const std::string text = normalize_placeholders(prompt);
    size_t pos = 0;
    while ((pos = text.find('<', pos)) != std::string::npos) {
        const size_t end = text.find('>', pos);
        if (end == std::string::npos) {
            break;
        }
        const std::string cand = text.substr(pos, end - pos + 1);
        if (is_placeholder(cand)) {
            out.push_back(cand);
        }
        pos = end + 1;
    }
    return out;
}

}  // namespace matte

#endif  // MATTE_COMMON_HPP
