// SPDX-License-Identifier: Apache-2.0
#ifndef MATTE_DIFFUSION_BACKEND_HPP
#define MATTE_DIFFUSION_BACKEND_HPP

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "matte/common.hpp"
#include "matte/conditioning_router.hpp"
#include "matte/image.hpp"

namespace matte {

/*================================================== tensors ==================================================*/

struct Latent {
    int channels = 0;
    int height = 0;
    int width = 0;
    Vec data;

    Latent() = default;
    Latent(int c, int h, int w) : channels(c), height(h), width(w), data(static_cast<size_t>(c) * h * w, 0.0) {}

    size_t size() const { return data.size(); }
    bool same_shape(const Latent& o) const { return channels == o.channels && height == o.height && width == o.width; }
    double& at(int c, int y, int x) { return data[(static_cast<size_t>(c) * height + y) * width + x]; }
    double at(int c, int y, int x) const { return data[(static_cast<size_t>(c) * height + y) * width + x]; }

    bool operator==(const Latent&) const = default;
};

struct LatentState {
    Latent z;
    int t = 0;
};

/*================================================== noise schedule ==================================================*/

struct NoiseSchedule {
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int num_timesteps = kMaxTimestep;
    Vec betas;
    Vec alphas_cumprod;

    static NoiseSchedule linear(double beta_start = 1e-4, double beta_end = 0.02, int n = kMaxTimestep) {
        NoiseSchedule s;
        s.beta_start = beta_start;
        s.beta_end = beta_end;
        s.num_timesteps = n;
        s.betas.resize(n);
        s.alphas_cumprod.resize(n);
        double prod = 1.0;
        for (int i = 0; i < n; ++i) {
            s.betas[i] = n == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / (n - 1);
            prod *= 1.0 - s.betas[i];
            s.alphas_cumprod[i] = prod;
        }
        return s;
    }

    double alpha_bar(int t) const {
        if (t < 0 || t >= num_timesteps) {
            throw std::out_of_range("timestep " + std::to_string(t) + " out of range");
        }
        return alphas_cumprod[t];
    }
};

// z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) noise
inline Latent q_sample(const NoiseSchedule& schedule, const Latent& z0, int t, const Latent& noise) {
    if (!z0.same_shape(noise)) {
        throw std::invalid_argument("noise shape differs from latent shape");
    }
    const double abar = schedule.alpha_bar(t);
    const double a = std::sqrt(abar);
    const double b = std::sqrt(1.0 - abar);
    Latent out = z0;
    for (size_t i = 0; i < out.size(); ++i) {
        out.data[i] = a * z0.data[i] + b * noise.data[i];
    }
    return out;
}

/*================================================== conditioning ==================================================*/

// Output of the text encoder for one prompt: one vector per token, BOS/EOS included.
struct Conditioning {
    std::string text;
    std::vector<std::string> tokens;
    std::vector<Vec> vectors;

    bool operator==(const Conditioning&) const = default;
};

// d(loss)/d(conditioning vector) for every layer and token position.
using ConditioningGrads = std::vector<std::vector<Vec>>;

struct AttentionRecord {
    int layer = 0;  // 1-based
    int step = 0;
    int t = 0;
    int resolution = 0;  // map is resolution x resolution
    std::vector<std::string> tokens;
    std::vector<float> weights;  // [pixel][token], averaged over heads
};

using AttentionRecorder = std::vector<AttentionRecord>;

// Called for every layer whenever the denoiser consumes a conditioning.
using InjectionHook = std::function<void(int layer, int t, const Conditioning& delivered)>;

struct BackendDescriptor {
    std::string name;
    int n_cross_attention_layers = kNumLayers;
    std::vector<int> layer_resolutions;
    int embedding_dim = 0;
    int max_timestep = kMaxTimestep;
    double beta_start = 1e-4;
    double beta_end = 0.02;
    int latent_channels = 0;
    int latent_size = 0;
    int image_size = 0;

    void validate() const {
        if (n_cross_attention_layers < 1) {
            throw BackendError("backend needs at least one cross-attention layer");
        }
        if (static_cast<int>(layer_resolutions.size()) != n_cross_attention_layers) {
            throw BackendError("layer_resolutions length differs from layer count");
        }
    }
};

struct SamplerConfig {
    int steps = 50;
    double guidance_scale = 7.5;
    uint64_t seed = 0;
    bool capture_attention = false;

    void validate(int max_timestep) const {
        if (steps < 1) {
            throw ConfigError("sampler steps must be >= 1");
        }
        if (steps > max_timestep) {
            throw ConfigError("sampler steps exceed max timestep");
        }
    }
};

/*================================================== backend interface ==================================================*/

class DiffusionBackend {
public:
    virtual ~DiffusionBackend() = default;

    virtual const BackendDescriptor& descriptor() const = 0;
    virtual const NoiseSchedule& schedule() const = 0;

    // text side
    virtual Conditioning encode_text(const std::string& prompt) const = 0;
    virtual Vec token_embedding(const std::string& word_or_token) const = 0;
    virtual void register_placeholder(const std::string& token, const Vec& embedding) = 0;
    virtual void set_placeholder(const std::string& token, const Vec& embedding) = 0;
    virtual Vec placeholder(const std::string& token) const = 0;
    virtual bool has_placeholder(const std::string& token) const = 0;

    // Gradient of the loss w.r.t. each placeholder's input embedding, given the gradient
    // w.r.t. the encoder output of every layer's conditioning.
    virtual std::map<std::string, Vec> placeholder_gradients(std::span<const Conditioning> per_layer,
                                                             const ConditioningGrads& grads) const = 0;

    // denoiser
    virtual Latent predict_noise(const Latent& z_t,
                                 int t,
                                 std::span<const Conditioning> per_layer,
                                 AttentionRecorder* attention = nullptr,
                                 int step = 0) const = 0;

    // Vector-Jacobian product of predict_noise w.r.t. the per-layer conditionings.
    virtual ConditioningGrads predict_noise_vjp(const Latent& z_t,
                                                int t,
                                                std::span<const Conditioning> per_layer,
                                                const Latent& upstream) const = 0;

    // codec
    virtual Latent encode_image(const Image& image) const = 0;
    virtual Image decode_latent(const Latent& z) const = 0;
    virtual Latent zero_latent() const = 0;

    // CLIP-style joint embeddings used by the evaluation harness.
    virtual Vec image_embedding(const Image& image) const = 0;
    virtual Vec text_embedding(const std::string& prompt) const = 0;

    void set_injection_hook(InjectionHook hook) { hook_ = std::move(hook); }
    const InjectionHook& injection_hook() const { return hook_; }

    Conditioning encode_cell(const CellPrompt& cell) const {
        if (cell.embedded) {
            Conditioning c;
            c.text = cell.text.value_or("");
            c.vectors = *cell.embedded;
            for (size_t j = 0; j < c.vectors.size(); ++j) {
                if (static_cast<int>(c.vectors[j].size()) != descriptor().embedding_dim) {
                    throw BackendError("embedded conditioning has wrong width");
                }
                c.tokens.push_back("<embedded:" + std::to_string(j) + ">");
            }
            return c;
        }
        return encode_text(*cell.text);
    }

    // Per-layer conditioning for timestep t: layer i receives resolve(grid, i, t).
    std::vector<Conditioning> route(const ConditioningGrid& grid, int t) const {
        std::map<CellKey, Conditioning> cache;
        std::vector<Conditioning> out;
        out.reserve(descriptor().n_cross_attention_layers);
        for (int layer = 1; layer <= descriptor().n_cross_attention_layers; ++layer) {
            const CellKey key = grid.locate(layer, t);
            auto it = cache.find(key);
            if (it == cache.end()) {
                it = cache.emplace(key, encode_cell(grid.cell(key))).first;
            }
            out.push_back(it->second);
        }
        return out;
    }

    Latent noise_like(Rng& rng) const {
        Latent z = zero_latent();
        for (double& v : z.data) {
            v = rng.normal();
        }
        return z;
    }

protected:
    void notify(int layer, int t, const Conditioning& c) const {
        if (hook_) {
            hook_(layer, t, c);
        }
    }

private:
    InjectionHook hook_;
};

/*================================================== sampler ==================================================*/

struct SampleResult {
    Image image;
    Latent latent;
    std::vector<int> timesteps;
    AttentionRecorder attention;
};

// Descending DDIM timesteps: 999, 999 - stride, ...
inline std::vector<int> sampling_timesteps(int steps, int max_timestep = kMaxTimestep) {
    std::vector<int> ts;
    const int stride = max_timestep / steps;
    for (int k = 0; k < steps; ++k) {
        ts.push_back(max_timestep - 1 - k * stride);
    }
    return ts;
}

namespace detail {

// Deterministic DDIM (eta = 0) with classifier-free guidance. `conditional(t)` yields the
// per-layer conditioning at timestep t.
inline SampleResult ddim_loop(const DiffusionBackend& backend,
                              const std::function<std::vector<Conditioning>(int)>& conditional,
                              const SamplerConfig& cfg) {
    cfg.validate(backend.descriptor().max_timestep);
    const NoiseSchedule& sched = backend.schedule();
    const int n_layers = backend.descriptor().n_cross_attention_layers;

    Rng rng(cfg.seed);
    SampleResult result;
    Latent z = backend.noise_like(rng);
    result.timesteps = sampling_timesteps(cfg.steps, backend.descriptor().max_timestep);

    const bool guided = cfg.guidance_scale != 1.0;
    std::vector<Conditioning> uncond;
    if (guided) {
        uncond.assign(n_layers, backend.encode_text(""));
    }

    for (size_t k = 0; k < result.timesteps.size(); ++k) {
        const int t = result.timesteps[k];
        const auto cond = conditional(t);
        Latent eps = backend.predict_noise(z, t, cond, cfg.capture_attention ? &result.attention : nullptr,
                                           static_cast<int>(k));
        if (guided) {
            const Latent eps_u = backend.predict_noise(z, t, uncond);
            for (size_t i = 0; i < eps.size(); ++i) {
                eps.data[i] = eps_u.data[i] + cfg.guidance_scale * (eps.data[i] - eps_u.data[i]);
            }
        }
        const double abar = sched.alpha_bar(t);
        const double abar_prev = k + 1 < result.timesteps.size() ? sched.alpha_bar(result.timesteps[k + 1]) : 1.0;
        for (size_t i = 0; i < z.size(); ++i) {
            const double x0 = (z.data[i] - std::sqrt(1.0 - abar) * eps.data[i]) / std::sqrt(abar);
            z.data[i] = std::sqrt(abar_prev) * x0 + std::sqrt(1.0 - abar_prev) * eps.data[i];
        }
    }
    result.latent = z;
    result.image = backend.decode_latent(z);
    return result;
}

}  // namespace detail

// Reverse process where layer i at step t receives resolve(grid, i, t).
inline SampleResult sample(const DiffusionBackend& backend, const ConditioningGrid& grid, const SamplerConfig& cfg) {
    if (backend.descriptor().n_cross_attention_layers != kNumLayers) {
        throw ConfigError("grid is defined over " + std::to_string(kNumLayers) + " layers but backend has " +
                          std::to_string(backend.descriptor().n_cross_attention_layers));
    }
    return detail::ddim_loop(backend, [&](int t) { return backend.route(grid, t); }, cfg);
}

// Ordinary single-prompt text-to-image sampling, no router involved.
inline SampleResult sample_prompt(const DiffusionBackend& backend, const std::string& prompt, const SamplerConfig& cfg) {
    const Conditioning c = backend.encode_text(prompt);
    const std::vector<Conditioning> all(backend.descriptor().n_cross_attention_layers, c);
    return detail::ddim_loop(backend, [&](int) { return all; }, cfg);
}

}  // namespace matte

#endif  // MATTE_DIFFUSION_BACKEND_HPP
