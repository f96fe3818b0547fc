// SPDX-License-Identifier: Apache-2.0
#ifndef MATTE_TOY_BACKEND_HPP
#define MATTE_TOY_BACKEND_HPP

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "matte/diffusion_backend.hpp"

/*================================================== ToyBackend ==================================================*/

// CPU-sized stand-in for a latent diffusion stack, float64 and fully differentiable with
// respect to the conditioning.
//
// text encoder: lowercase word pieces (at most 8 chars each), each mapped to a seeded
//               pseudo-random unit vector; output = input embedding + small positional term.
// denoiser:     16 cross-attention layers at resolutions {8,4,2,1} (the 64/32/16/8 layout
//               divided by 8) over a 3x16x16 latent. Each layer attends from its spatial grid
//               to the text tokens; the summed, upsampled outputs form a template image g.
//               With a Gaussian prior of variance sigma^2 around g, the posterior-mean noise
//               prediction is eps = kappa_t * (z_t - sqrt(abar_t) * g),
//               kappa_t = sqrt(1 - abar_t) / (abar_t * sigma^2 + 1 - abar_t).
// codec:        identity (latent == RGB planes).

namespace matte {

struct ToyConfig {
    uint64_t seed = 20240601;
    int embedding_dim = 32;
    int head_dim = 8;
    int latent_size = 16;
    int channels = 3;
    int context_length = 77;
    double data_variance = 0.05;
    double layer_gain = 0.25;
    double base_level = 0.5;
    double positional_scale = 0.1;
    double beta_start = 1e-4;
    double beta_end = 0.02;
};

class ToyBackend : public DiffusionBackend {
public:
    static constexpr const char* kBos = "<|startoftext|>";
    static constexpr const char* kEos = "<|endoftext|>";
    static constexpr int kFeatureDim = 7;

    explicit ToyBackend(ToyConfig cfg = {}) : cfg_(cfg) {
        schedule_ = NoiseSchedule::linear(cfg_.beta_start, cfg_.beta_end, kMaxTimestep);
        desc_.name = "toy";
        desc_.n_cross_attention_layers = kNumLayers;
        desc_.layer_resolutions.assign(kCanonicalLayerResolution.begin(), kCanonicalLayerResolution.end());
        desc_.embedding_dim = cfg_.embedding_dim;
        desc_.max_timestep = kMaxTimestep;
        desc_.beta_start = cfg_.beta_start;
        desc_.beta_end = cfg_.beta_end;
        desc_.latent_channels = cfg_.channels;
        desc_.latent_size = cfg_.latent_size;
        desc_.image_size = cfg_.latent_size;
        desc_.validate();
        init_weights();
    }

    const ToyConfig& config() const { return cfg_; }
    const BackendDescriptor& descriptor() const override { return desc_; }
    const NoiseSchedule& schedule() const override { return schedule_; }

    /*---------------------------------------------- text ----------------------------------------------*/

    // Word pieces without BOS/EOS.
    std::vector<std::string> tokenize(const std::string& prompt) const {
        static const std::string punct = ",.;:!?\"()[]";
        const std::string text = normalize_placeholders(prompt);
        std::vector<std::string> words;
        std::string cur;
        auto flush = [&] {
            if (!cur.empty()) {
                words.push_back(cur);
                cur.clear();
            }
        };
        for (size_t i = 0; i < text.size(); ++i) {
            const char ch = text[i];
            if (ch == '<') {
                const size_t end = text.find('>', i);
                if (end != std::string::npos && is_placeholder(text.substr(i, end - i + 1))) {
                    flush();
                    words.push_back(text.substr(i, end - i + 1));
                    i = end;
                    continue;
                }
            }
            if (std::isspace(static_cast<unsigned char>(ch))) {
                flush();
            } else if (punct.find(ch) != std::string::npos) {
                flush();
                words.emplace_back(1, ch);
            } else {
                cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
            }
        }
        flush();

        std::vector<std::string> pieces;
        for (const auto& w : words) {
            if (is_placeholder(w) || w.size() <= 8) {
                pieces.push_back(w);
            } else {
                for (size_t p = 0; p < w.size(); p += 8) {
                    pieces.push_back(w.substr(p, 8));
                }
            }
        }
        return pieces;
    }

    Conditioning encode_text(const std::string& prompt) const override {
        auto pieces = tokenize(prompt);
        if (static_cast<int>(pieces.size()) + 2 > cfg_.context_length) {
            throw BackendError("prompt too long: " + std::to_string(pieces.size() + 2) + " tokens > " +
                               std::to_string(cfg_.context_length));
        }
        Conditioning c;
        c.text = prompt;
        c.tokens.reserve(pieces.size() + 2);
        c.tokens.push_back(kBos);
        for (auto& p : pieces) {
            c.tokens.push_back(std::move(p));
        }
        c.tokens.push_back(kEos);
        for (size_t j = 0; j < c.tokens.size(); ++j) {
            Vec v = input_embedding(c.tokens[j]);
            const Vec& pos = positional_[j];
            for (size_t d = 0; d < v.size(); ++d) {
                v[d] += pos[d];
            }
            c.vectors.push_back(std::move(v));
        }
        return c;
    }

    Vec token_embedding(const std::string& word_or_token) const override {
        const auto pieces = tokenize(word_or_token);
        if (pieces.empty()) {
            throw std::invalid_argument("token_embedding of an empty string");
        }
        std::vector<Vec> rows;
        for (const auto& p : pieces) {
            rows.push_back(input_embedding(p));
        }
        return mean_of(rows);
    }

    void register_placeholder(const std::string& token, const Vec& embedding) override {
        if (!is_placeholder(token)) {
            throw std::invalid_argument("'" + token + "' is not a placeholder token");
        }
        check_dim(embedding);
        placeholders_[token] = embedding;
    }

    void set_placeholder(const std::string& token, const Vec& embedding) override {
        auto it = placeholders_.find(token);
        if (it == placeholders_.end()) {
            throw BackendError("unregistered placeholder " + token);
        }
        check_dim(embedding);
        it->second = embedding;
    }

    Vec placeholder(const std::string& token) const override {
        auto it = placeholders_.find(token);
        if (it == placeholders_.end()) {
            throw BackendError("unregistered placeholder " + token);
        }
        return it->second;
    }

    bool has_placeholder(const std::string& token) const override { return placeholders_.count(token) > 0; }

    std::map<std::string, Vec> placeholder_gradients(std::span<const Conditioning> per_layer,
                                                     const ConditioningGrads& grads) const override {
        // encoder output = input embedding + positional, so the Jacobian is the identity
        std::map<std::string, Vec> out;
        for (size_t l = 0; l < per_layer.size(); ++l) {
            const auto& toks = per_layer[l].tokens;
            for (size_t j = 0; j < toks.size(); ++j) {
                if (!placeholders_.count(toks[j])) {
                    continue;
                }
                Vec& acc = out[toks[j]];
                if (acc.empty()) {
                    acc.assign(cfg_.embedding_dim, 0.0);
                }
                for (int d = 0; d < cfg_.embedding_dim; ++d) {
                    acc[d] += grads[l][j][d];
                }
            }
        }
        return out;
    }

    /*---------------------------------------------- denoiser ----------------------------------------------*/

    double kappa(int t) const {
        const double abar = schedule_.alpha_bar(t);
        return std::sqrt(1.0 - abar) / (abar * cfg_.data_variance + 1.0 - abar);
    }

    // Noise-free image the conditioning describes (before the prior blend).
    Latent render_template(const Latent& z_t, std::span<const Conditioning> per_layer,
                           AttentionRecorder* attention = nullptr, int step = 0, int t = 0) const {
        check_layers(per_layer);
        check_latent(z_t);
        Latent g = zero_latent();
        std::fill(g.data.begin(), g.data.end(), cfg_.base_level);
        for (int l = 0; l < kNumLayers; ++l) {
            LayerCache cache = layer_forward(l, z_t, per_layer[l]);
            const int r = layers_[l].res;
            const int block = cfg_.latent_size / r;
            for (int c = 0; c < cfg_.channels; ++c) {
                for (int y = 0; y < cfg_.latent_size; ++y) {
                    for (int x = 0; x < cfg_.latent_size; ++x) {
                        const int p = (y / block) * r + (x / block);
                        g.at(c, y, x) += cache.y[p][c];
                    }
                }
            }
            if (attention) {
                AttentionRecord rec;
                rec.layer = l + 1;
                rec.step = step;
                rec.t = t;
                rec.resolution = r;
                rec.tokens = per_layer[l].tokens;
                rec.weights.reserve(cache.attn.size() * rec.tokens.size());
                for (const auto& row : cache.attn) {
                    for (double a : row) {
                        rec.weights.push_back(static_cast<float>(a));
                    }
                }
                attention->push_back(std::move(rec));
            }
        }
        return g;
    }

    Latent predict_noise(const Latent& z_t,
                         int t,
                         std::span<const Conditioning> per_layer,
                         AttentionRecorder* attention = nullptr,
                         int step = 0) const override {
        check_layers(per_layer);
        const double abar = schedule_.alpha_bar(t);
        for (int l = 0; l < kNumLayers; ++l) {
            notify(l + 1, t, per_layer[l]);
        }
        const Latent g = render_template(z_t, per_layer, attention, step, t);
        const double k = kappa(t);
        const double sa = std::sqrt(abar);
        Latent eps = z_t;
        for (size_t i = 0; i < eps.size(); ++i) {
            eps.data[i] = k * (z_t.data[i] - sa * g.data[i]);
        }
        return eps;
    }

    ConditioningGrads predict_noise_vjp(const Latent& z_t,
                                        int t,
                                        std::span<const Conditioning> per_layer,
                                        const Latent& upstream) const override {
        check_layers(per_layer);
        check_latent(upstream);
        const double scale = -kappa(t) * std::sqrt(schedule_.alpha_bar(t));
        const int d = cfg_.head_dim;
        const int dim = cfg_.embedding_dim;
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

        ConditioningGrads grads(kNumLayers);
        for (int l = 0; l < kNumLayers; ++l) {
            const LayerWeights& w = layers_[l];
            const LayerCache cache = layer_forward(l, z_t, per_layer[l]);
            const int r = w.res;
            const int block = cfg_.latent_size / r;
            const int n_pix = r * r;
            const size_t n_tok = per_layer[l].vectors.size();

            // dL/dy per layer cell: sum of upstream over the upsampled block
            std::vector<Vec> g_y(n_pix, Vec(cfg_.channels, 0.0));
            for (int c = 0; c < cfg_.channels; ++c) {
                for (int y = 0; y < cfg_.latent_size; ++y) {
                    for (int x = 0; x < cfg_.latent_size; ++x) {
                        g_y[(y / block) * r + (x / block)][c] += scale * upstream.at(c, y, x);
                    }
                }
            }

            std::vector<Vec> g_v(n_tok, Vec(d, 0.0));
            std::vector<Vec> g_k(n_tok, Vec(d, 0.0));
            for (int p = 0; p < n_pix; ++p) {
                Vec g_out(d, 0.0);
                for (int k = 0; k < d; ++k) {
                    for (int c = 0; c < cfg_.channels; ++c) {
                        g_out[k] += w.wo[c * d + k] * g_y[p][c];
                    }
                }
                Vec g_a(n_tok);
                double weighted = 0.0;
                for (size_t j = 0; j < n_tok; ++j) {
                    g_a[j] = dot(g_out, cache.v[j]);
                    weighted += cache.attn[p][j] * g_a[j];
                    for (int k = 0; k < d; ++k) {
                        g_v[j][k] += cache.attn[p][j] * g_out[k];
                    }
                }
                for (size_t j = 0; j < n_tok; ++j) {
                    const double g_s = cache.attn[p][j] * (g_a[j] - weighted);
                    for (int k = 0; k < d; ++k) {
                        g_k[j][k] += g_s * cache.q[p][k] * inv_sqrt_d;
                    }
                }
            }

            grads[l].assign(n_tok, Vec(dim, 0.0));
            for (size_t j = 0; j < n_tok; ++j) {
                for (int e = 0; e < dim; ++e) {
                    double acc = 0.0;
                    for (int k = 0; k < d; ++k) {
                        acc += w.wv[k * dim + e] * g_v[j][k] + w.wk[k * dim + e] * g_k[j][k];
                    }
                    grads[l][j][e] = acc;
                }
            }
        }
        return grads;
    }

    // Noise-free rendering of a routed grid at timestep t (queries see an all-zero latent).
    Image render(const ConditioningGrid& grid, int t = 0) const {
        return decode_latent(render_template(zero_latent(), route(grid, t)));
    }

    /*---------------------------------------------- codec ----------------------------------------------*/

    Latent zero_latent() const override { return Latent(cfg_.channels, cfg_.latent_size, cfg_.latent_size); }

    Latent encode_image(const Image& image) const override {
        if (image.channels != cfg_.channels) {
            throw BackendError("toy codec expects " + std::to_string(cfg_.channels) + " channels, got " +
                               std::to_string(image.channels));
        }
        if (image.width != cfg_.latent_size || image.height != cfg_.latent_size) {
            throw BackendError("toy codec expects " + std::to_string(cfg_.latent_size) + "x" +
                               std::to_string(cfg_.latent_size) + " images");
        }
        Latent z = zero_latent();
        for (int c = 0; c < cfg_.channels; ++c) {
            for (int y = 0; y < cfg_.latent_size; ++y) {
                for (int x = 0; x < cfg_.latent_size; ++x) {
                    z.at(c, y, x) = image.at(x, y, c);
                }
            }
        }
        return z;
    }

    Image decode_latent(const Latent& z) const override {
        check_latent(z);
        Image img(cfg_.latent_size, cfg_.latent_size, cfg_.channels);
        for (int c = 0; c < cfg_.channels; ++c) {
            for (int y = 0; y < cfg_.latent_size; ++y) {
                for (int x = 0; x < cfg_.latent_size; ++x) {
                    img.at(x, y, c) = std::clamp(z.at(c, y, x), 0.0, 1.0);
                }
            }
        }
        return img;
    }

    /*---------------------------------------------- joint embeddings ----------------------------------------------*/

    // Images and texts share one space: a text embeds as the projection of the template it renders.
    Vec image_embedding(const Image& image) const override {
        const Image fitted = resize_area(image, cfg_.latent_size, cfg_.latent_size);
        return project(encode_image(fitted));
    }

    Vec text_embedding(const std::string& prompt) const override {
        const std::vector<Conditioning> all(kNumLayers, encode_text(prompt));
        return project(render_template(zero_latent(), all));
    }

private:
    struct LayerWeights {
        int res = 1;
        Vec wq;  // head_dim x kFeatureDim
        Vec wk;  // head_dim x embedding_dim
        Vec wv;  // head_dim x embedding_dim
        Vec wo;  // channels x head_dim
    };

    struct LayerCache {
        std::vector<Vec> q;     // [pixel][head_dim]
        std::vector<Vec> v;     // [token][head_dim]
        std::vector<Vec> attn;  // [pixel][token]
        std::vector<Vec> y;     // [pixel][channel]
    };

    void init_weights() {
        Rng rng(cfg_.seed);
        const int d = cfg_.head_dim;
        const int dim = cfg_.embedding_dim;
        layers_.resize(kNumLayers);
        for (int l = 0; l < kNumLayers; ++l) {
            LayerWeights& w = layers_[l];
            w.res = desc_.layer_resolutions[l] / 8;
            w.wq = rng.normal_vec(static_cast<size_t>(d) * kFeatureDim, 3.0 / std::sqrt(double(kFeatureDim)));
            w.wk = rng.normal_vec(static_cast<size_t>(d) * dim, 1.0);
            w.wv = rng.normal_vec(static_cast<size_t>(d) * dim, 1.0);
            w.wo = rng.normal_vec(static_cast<size_t>(cfg_.channels) * d, cfg_.layer_gain / std::sqrt(double(d)));
        }
        for (int j = 0; j < cfg_.context_length; ++j) {
            Rng prng(cfg_.seed * 31 + 7 + static_cast<uint64_t>(j));
            Vec p = prng.normal_vec(dim);
            const double n = norm(p);
            for (double& x : p) {
                x *= cfg_.positional_scale / n;
            }
            positional_.push_back(std::move(p));
        }
        Rng proj(cfg_.seed ^ 0x9e3779b97f4a7c15ULL);
        const size_t n_latent = static_cast<size_t>(cfg_.channels) * cfg_.latent_size * cfg_.latent_size;
        projection_ = proj.normal_vec(static_cast<size_t>(dim) * n_latent, 1.0 / std::sqrt(double(n_latent)));
    }

    Vec vocabulary_vector(const std::string& token) const {
        Rng rng(fnv1a64(token) ^ (cfg_.seed * 0x100000001b3ULL));
        Vec v = rng.normal_vec(cfg_.embedding_dim);
        const double n = norm(v);
        for (double& x : v) {
            x /= n;
        }
        return v;
    }

    Vec input_embedding(const std::string& token) const {
        if (is_placeholder(token) && token != kBos && token != kEos) {
            auto it = placeholders_.find(token);
            if (it == placeholders_.end()) {
                throw BackendError("unregistered placeholder " + token);
            }
            return it->second;
        }
        return vocabulary_vector(token);
    }

    LayerCache layer_forward(int l, const Latent& z_t, const Conditioning& cond) const {
        const LayerWeights& w = layers_[l];
        const int d = cfg_.head_dim;
        const int dim = cfg_.embedding_dim;
        const int r = w.res;
        const int block = cfg_.latent_size / r;
        const size_t n_tok = cond.vectors.size();
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

        LayerCache cache;
        std::vector<Vec> keys(n_tok, Vec(d, 0.0));
        cache.v.assign(n_tok, Vec(d, 0.0));
        for (size_t j = 0; j < n_tok; ++j) {
            const Vec& e = cond.vectors[j];
            if (static_cast<int>(e.size()) != dim) {
                throw BackendError("conditioning vector width differs from embedding_dim");
            }
            for (int k = 0; k < d; ++k) {
                double kk = 0.0;
                double vv = 0.0;
                for (int x = 0; x < dim; ++x) {
                    kk += w.wk[k * dim + x] * e[x];
                    vv += w.wv[k * dim + x] * e[x];
                }
                keys[j][k] = kk;
                cache.v[j][k] = vv;
            }
        }

        const int n_pix = r * r;
        cache.q.assign(n_pix, Vec(d, 0.0));
        cache.attn.assign(n_pix, Vec(n_tok, 0.0));
        cache.y.assign(n_pix, Vec(cfg_.channels, 0.0));
        for (int py = 0; py < r; ++py) {
            for (int px = 0; px < r; ++px) {
                const int p = py * r + px;
                double f[kFeatureDim];
                for (int c = 0; c < 3; ++c) {
                    double acc = 0.0;
                    const int ch = std::min(c, cfg_.channels - 1);
                    for (int y = py * block; y < (py + 1) * block; ++y) {
                        for (int x = px * block; x < (px + 1) * block; ++x) {
                            acc += z_t.at(ch, y, x);
                        }
                    }
                    f[c] = acc / (block * block);
                }
                const double cx = 2.0 * (px + 0.5) / r - 1.0;
                const double cy = 2.0 * (py + 0.5) / r - 1.0;
                f[3] = cx;
                f[4] = cy;
                f[5] = cx * cy;
                f[6] = 1.0;
                for (int k = 0; k < d; ++k) {
                    double acc = 0.0;
                    for (int i = 0; i < kFeatureDim; ++i) {
                        acc += w.wq[k * kFeatureDim + i] * f[i];
                    }
                    cache.q[p][k] = acc;
                }
                Vec& a = cache.attn[p];
                double mx = -INFINITY;
                for (size_t j = 0; j < n_tok; ++j) {
                    a[j] = dot(cache.q[p], keys[j]) * inv_sqrt_d;
                    mx = std::max(mx, a[j]);
                }
                double sum = 0.0;
                for (size_t j = 0; j < n_tok; ++j) {
                    a[j] = std::exp(a[j] - mx);
                    sum += a[j];
                }
                Vec out(d, 0.0);
                for (size_t j = 0; j < n_tok; ++j) {
                    a[j] /= sum;
                    for (int k = 0; k < d; ++k) {
                        out[k] += a[j] * cache.v[j][k];
                    }
                }
                for (int c = 0; c < cfg_.channels; ++c) {
                    double acc = 0.0;
                    for (int k = 0; k < d; ++k) {
                        acc += w.wo[c * d + k] * out[k];
                    }
                    cache.y[p][c] = acc;
                }
            }
        }
        return cache;
    }

    Vec project(const Latent& z) const {
        const size_t n = z.size();
        Vec out(cfg_.embedding_dim, 0.0);
        for (int e = 0; e < cfg_.embedding_dim; ++e) {
            double acc = 0.0;
            for (size_t i = 0; i < n; ++i) {
                acc += projection_[e * n + i] * (z.data[i] - cfg_.base_level);
            }
            out[e] = acc;
        }
        return out;
    }

    void check_dim(const Vec& v) const {
        if (static_cast<int>(v.size()) != cfg_.embedding_dim) {
            throw std::invalid_argument("embedding has dimension " + std::to_string(v.size()) + ", expected " +
                                        std::to_string(cfg_.embedding_dim));
        }
    }

    void check_layers(std::span<const Conditioning> per_layer) const {
        if (static_cast<int>(per_layer.size()) != kNumLayers) {
            throw BackendError("expected " + std::to_string(kNumLayers) + " conditionings, got " +
                               std::to_string(per_layer.size()));
        }
    }

    void check_latent(const Latent& z) const {
        if (z.channels != cfg_.channels || z.height != cfg_.latent_size || z.width != cfg_.latent_size) {
            throw BackendError("latent shape mismatch");
        }
    }

    ToyConfig cfg_;
    BackendDescriptor desc_;
    NoiseSchedule schedule_;
    std::vector<LayerWeights> layers_;
    std::vector<Vec> positional_;
    Vec projection_;
    std::map<std::string, Vec> placeholders_;
};

}  // namespace matte

#endif  // MATTE_TOY_BACKEND_HPP
