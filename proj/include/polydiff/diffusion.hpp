#pragma once
// Diffusion machinery: DDPM noise schedule, forward noising q_sample, the
// Eq.-style denoising objective, classifier-free guidance combination, DDIM
// sampling, and img2img.
//
// Sampling runs outside the autodiff graph (double-precision update math on
// raw float buffers); only the denoising loss builds a graph.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "polydiff/denoiser.hpp"
#include "polydiff/errors.hpp"
#include "polydiff/latent_codec.hpp"
#include "polydiff/rng.hpp"
#include "polydiff/tensor.hpp"

namespace polydiff {

// ---------------------------------------------------------------------------
// noise schedule

struct NoiseSchedule {
    int T = 1000;
    // index 0 is the "clean" convention slot: beta[0] = 0, alpha_bar[0] = 1
    std::vector<double> beta, alpha, alpha_bar, sqrt_ab, sqrt_1mab;

    static NoiseSchedule linear(int T = 1000, double beta1 = 1e-4, double betaT = 0.02) {
        if (T < 2) throw ConfigError("schedule: T must be >= 2");
        if (!(0 < beta1 && beta1 <= betaT && betaT < 1))
            throw ConfigError("schedule: need 0 < beta_1 <= beta_T < 1");
        NoiseSchedule s;
        s.T = T;
        s.beta.resize(T + 1);
        s.alpha.resize(T + 1);
        s.alpha_bar.resize(T + 1);
        s.sqrt_ab.resize(T + 1);
        s.sqrt_1mab.resize(T + 1);
        s.beta[0] = 0;
        s.alpha[0] = 1;
        s.alpha_bar[0] = 1;
        s.sqrt_ab[0] = 1;
        s.sqrt_1mab[0] = 0;
        for (int t = 1; t <= T; ++t) {
            s.beta[t] = beta1 + (betaT - beta1) * double(t - 1) / double(T - 1);
            s.alpha[t] = 1.0 - s.beta[t];
            s.alpha_bar[t] = s.alpha_bar[t - 1] * s.alpha[t];
            s.sqrt_ab[t] = std::sqrt(s.alpha_bar[t]);
            s.sqrt_1mab[t] = std::sqrt(1.0 - s.alpha_bar[t]);
        }
        s.validate();
        return s;
    }

    void validate() const {
        for (int t = 1; t <= T; ++t) {
            if (!(alpha_bar[t] < alpha_bar[t - 1]))
                throw NumericError("schedule: alpha_bar not strictly decreasing at t=" +
                                   std::to_string(t));
            if (std::abs(sqrt_ab[t] * sqrt_ab[t] - alpha_bar[t]) > 1e-7 ||
                std::abs(sqrt_1mab[t] * sqrt_1mab[t] - (1.0 - alpha_bar[t])) > 1e-7)
                throw NumericError("schedule: sqrt tables inconsistent at t=" + std::to_string(t));
        }
    }

    void check_t(int t) const {
        if (t < 0 || t > T)
            throw std::invalid_argument("schedule: t=" + std::to_string(t) + " out of range [0, " +
                                        std::to_string(T) + "]");
    }
};

// ---------------------------------------------------------------------------
// forward noising: z_t = sqrt(alpha_bar_t) z0 + sqrt(1 - alpha_bar_t) eps

inline std::vector<float> q_sample_vec(const std::vector<float>& z0, int t,
                                       const std::vector<float>& eps, const NoiseSchedule& s) {
    s.check_t(t);
    if (eps.size() != z0.size()) throw std::invalid_argument("q_sample: eps shape mismatch");
    std::vector<float> z(z0.size());
    for (size_t i = 0; i < z0.size(); ++i)
        z[i] = float(s.sqrt_ab[t] * double(z0[i]) + s.sqrt_1mab[t] * double(eps[i]));
    return z;
}

// batched, per-example timesteps; result does not require grad (the training
// loss differentiates only through eps_hat)
template <typename S>
Tensor<S> q_sample(const Tensor<S>& z0, const std::vector<int>& t, const Tensor<S>& eps,
                   const NoiseSchedule& s) {
    if (z0.shape() != eps.shape()) throw std::invalid_argument("q_sample: eps shape mismatch");
    if (z0.shape().empty() || static_cast<int>(t.size()) != z0.shape()[0])
        throw std::invalid_argument("q_sample: need one timestep per example");
    auto out = Tensor<S>::zeros(z0.shape());
    int64_t per = z0.numel() / static_cast<int64_t>(t.size());
    for (size_t b = 0; b < t.size(); ++b) {
        s.check_t(t[b]);
        double sa = s.sqrt_ab[t[b]], sm = s.sqrt_1mab[t[b]];
        for (int64_t i = 0; i < per; ++i) {
            int64_t k = b * per + i;
            out.data()[k] = S(sa * double(z0.data()[k]) + sm * double(eps.data()[k]));
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// training objective: mean_t,eps || eps - eps_model(z_t, c, t) ||^2

template <typename S>
using EpsModel =
    std::function<Tensor<S>(const Tensor<S>& z_t, const std::vector<int>& t, const Tensor<S>& c)>;

// t ~ Uniform[1, T] and eps ~ N(0, I), both drawn from counter streams keyed
// by (seed, step) so every loss evaluation is reproducible.
template <typename S>
Tensor<S> diffusion_loss(const EpsModel<S>& model, const Tensor<S>& z0, const Tensor<S>& c,
                         const NoiseSchedule& sched, uint64_t seed, uint64_t step) {
    if (z0.shape().size() != 3) throw std::invalid_argument("diffusion_loss: z0 must be [B, N, c_lat]");
    int B = z0.shape()[0];
    Rng tr = Rng::stream(seed, "diff_t", step);
    Rng er = Rng::stream(seed, "diff_eps", step);
    std::vector<int> t(B);
    for (int b = 0; b < B; ++b) t[b] = 1 + static_cast<int>(tr.below(static_cast<uint32_t>(sched.T)));
    auto eps = Tensor<S>::zeros(z0.shape());
    for (auto& v : eps.data()) v = S(er.normal());
    auto z_t = q_sample(z0, t, eps, sched);
    auto loss = mse(model(z_t, t, c), eps);
    if (!std::isfinite(double(loss.data()[0])))
        throw NumericError("diffusion_loss: non-finite loss at step " + std::to_string(step));
    return loss;
}

template <typename S>
Tensor<S> diffusion_loss(Denoiser<S>& dn, const Tensor<S>& z0, const Tensor<S>& c,
                         const NoiseSchedule& sched, uint64_t seed, uint64_t step) {
    EpsModel<S> m = [&dn, &sched](const Tensor<S>& z_t, const std::vector<int>& t,
                                  const Tensor<S>& cc) { return denoise(dn, z_t, t, cc, sched.T); };
    return diffusion_loss(m, z0, c, sched, seed, step);
}

// ---------------------------------------------------------------------------
// classifier-free guidance: eps_uncond + alpha * (eps_cond - eps_uncond)

inline std::vector<float> cfg_combine(const std::vector<float>& eps_cond,
                                      const std::vector<float>& eps_uncond, double guidance) {
    if (eps_cond.size() != eps_uncond.size())
        throw std::invalid_argument("cfg_combine: shape mismatch");
    if (guidance == 1.0) return eps_cond;  // exact degenerate case
    std::vector<float> out(eps_cond.size());
    for (size_t i = 0; i < out.size(); ++i)
        out[i] = float(double(eps_uncond[i]) + guidance * (double(eps_cond[i]) - double(eps_uncond[i])));
    return out;
}

// ---------------------------------------------------------------------------
// DDIM

struct SamplerConfig {
    int num_steps = 50;
    double guidance = 9.0;
    double eta = 0.0;
    uint64_t seed = 0;

    void validate(int T) const {
        if (num_steps < 1) throw ConfigError("sampler: num_steps must be >= 1");
        if (num_steps > T)
            throw ConfigError("sampler: num_steps " + std::to_string(num_steps) + " exceeds T=" +
                              std::to_string(T));
        if (eta < 0.0 || eta > 1.0) throw ConfigError("sampler: eta must be in [0, 1]");
        if (guidance < 1.0) throw ConfigError("sampler: guidance_scale must be >= 1 for guided runs");
    }
};

// uniformly spaced descending timesteps tau_1 > ... > tau_S, largest = T
inline std::vector<int> ddim_tau_schedule(int T, int num_steps) {
    std::vector<int> tau(num_steps);
    for (int i = 0; i < num_steps; ++i)
        tau[i] = static_cast<int>(std::lround(double(T) * double(num_steps - i) / double(num_steps)));
    return tau;
}

// One DDIM update from timestep with cumulative ab_t to the previous timestep
// with ab_prev (ab_prev = 1 lands on clean z0). noise required iff eta > 0.
inline void ddim_step(std::vector<float>& z, const std::vector<float>& eps_hat, double ab_t,
                      double ab_prev, double eta, const std::vector<float>* noise = nullptr) {
    if (eps_hat.size() != z.size()) throw std::invalid_argument("ddim_step: shape mismatch");
    double sigma = 0.0;
    if (eta > 0.0 && ab_prev < 1.0)
        sigma = eta * std::sqrt((1.0 - ab_prev) / (1.0 - ab_t)) * std::sqrt(1.0 - ab_t / ab_prev);
    if (sigma > 0.0 && (!noise || noise->size() != z.size()))
        throw std::invalid_argument("ddim_step: eta > 0 requires noise of matching shape");
    double sq_ab_t = std::sqrt(ab_t), sq_1m_t = std::sqrt(1.0 - ab_t);
    double sq_ab_p = std::sqrt(ab_prev);
    double dir = std::sqrt(std::max(0.0, 1.0 - ab_prev - sigma * sigma));
    for (size_t i = 0; i < z.size(); ++i) {
        double x0 = (double(z[i]) - sq_1m_t * double(eps_hat[i])) / sq_ab_t;
        double v = sq_ab_p * x0 + dir * double(eps_hat[i]);
        if (sigma > 0.0) v += sigma * double((*noise)[i]);
        z[i] = float(v);
    }
}

struct SampleResult {
    std::vector<float> z0;  // final latent, [N * c_lat]
    int grid = 0;           // latent grid side
    Image image;            // decoded (and clamped to [-1, 1])
};

namespace detail {

// evaluate the denoiser on a single latent state (B = 1), returning raw data
inline std::vector<float> eval_eps(DenoiserF& dn, const std::vector<float>& z, int grid, int t,
                                   const TensorF& cond, int T) {
    auto z_t = TensorF::from_data({1, grid * grid, static_cast<int>(z.size()) / (grid * grid)},
                                  std::vector<float>(z));
    auto out = denoise(dn, z_t, std::vector<int>{t}, cond, T);
    return out.data();
}

// CFG-guided denoiser evaluation: condition + null, combined per Eq. 2
inline std::vector<float> eval_guided(DenoiserF& dn, const std::vector<float>& z, int grid, int t,
                                      const TensorF& cond, const TensorF& null_cond,
                                      const NoiseSchedule& sched, double guidance) {
    auto eps_c = eval_eps(dn, z, grid, t, cond, sched.T);
    auto eps_u = eval_eps(dn, z, grid, t, null_cond, sched.T);
    return cfg_combine(eps_c, eps_u, guidance);
}

inline Image decode_clamped(const CodecF& codec, const std::vector<float>& z0, int grid) {
    auto zt = TensorF::from_data({grid * grid, static_cast<int>(z0.size()) / (grid * grid)},
                                 std::vector<float>(z0));
    auto img = tensor_to_image(codec.decode(zt));
    for (auto& v : img.data) v = std::max(-1.0f, std::min(1.0f, v));
    return img;
}

// run the guided DDIM chain over the given descending tau list
inline void run_ddim_chain(std::vector<float>& z, const std::vector<int>& tau, DenoiserF& dn,
                           int grid, const TensorF& cond, const TensorF& null_cond,
                           const NoiseSchedule& sched, const SamplerConfig& cfg) {
    for (size_t i = 0; i < tau.size(); ++i) {
        int t = tau[i];
        int t_prev = i + 1 < tau.size() ? tau[i + 1] : 0;
        auto eps = eval_guided(dn, z, grid, t, cond, null_cond, sched, cfg.guidance);
        std::vector<float> noise;
        const std::vector<float>* np = nullptr;
        if (cfg.eta > 0.0) {
            Rng nr = Rng::stream(cfg.seed, "ddim_noise", i);
            noise.resize(z.size());
            for (auto& v : noise) v = nr.normalf();
            np = &noise;
        }
        ddim_step(z, eps, sched.alpha_bar[t], sched.alpha_bar[t_prev], cfg.eta, np);
    }
}

}  // namespace detail

// Guided DDIM sampling from pure noise. cond / null_cond: [1, L, text_d]
// token sequences (null = encoding of empty text). grid: latent grid side
// (4 for stage 1, 8 for stage 2). Deterministic given seed and config.
inline SampleResult ddim_sample(DenoiserF& dn, const TensorF& cond, const TensorF& null_cond,
                                const CodecF& codec, const NoiseSchedule& sched,
                                const SamplerConfig& cfg, int grid) {
    cfg.validate(sched.T);
    int n = grid * grid * dn.cfg.c_lat;
    Rng ir = Rng::stream(cfg.seed, "init_noise", 0);
    std::vector<float> z(n);
    for (auto& v : z) v = ir.normalf();
    auto tau = ddim_tau_schedule(sched.T, cfg.num_steps);
    detail::run_ddim_chain(z, tau, dn, grid, cond, null_cond, sched, cfg);
    SampleResult res;
    res.grid = grid;
    res.image = detail::decode_clamped(codec, z, grid);
    res.z0 = std::move(z);
    return res;
}

// Image-to-image: encode init, noise to t* = round(strength * T), run the
// DDIM tail from t*. strength 0 returns the codec round-trip unchanged;
// strength 1 is exactly ddim_sample with the same seed.
inline SampleResult img2img(DenoiserF& dn, const Image& init, double strength, const TensorF& cond,
                            const TensorF& null_cond, const CodecF& codec,
                            const NoiseSchedule& sched, const SamplerConfig& cfg) {
    if (strength < 0.0 || strength > 1.0)
        throw ConfigError("img2img: strength must be in [0, 1]");
    int grid = codec.grid_side(init.w);
    auto z0t = codec.encode(image_to_tensor<float>(init));
    std::vector<float> z = z0t.data();
    if (strength == 0.0) {
        SampleResult res;
        res.grid = grid;
        res.image = detail::decode_clamped(codec, z, grid);
        res.z0 = std::move(z);
        return res;
    }
    if (strength == 1.0) return ddim_sample(dn, cond, null_cond, codec, sched, cfg, grid);
    cfg.validate(sched.T);
    int t_star = static_cast<int>(std::lround(strength * sched.T));
    t_star = std::max(1, std::min(sched.T, t_star));
    Rng nr = Rng::stream(cfg.seed, "img2img_noise", 0);
    std::vector<float> eps(z.size());
    for (auto& v : eps) v = nr.normalf();
    z = q_sample_vec(z, t_star, eps, sched);
    // tail: start exactly at t*, then every full-schedule step strictly below it
    std::vector<int> tau{t_star};
    for (int t : ddim_tau_schedule(sched.T, cfg.num_steps))
        if (t < t_star) tau.push_back(t);
    detail::run_ddim_chain(z, tau, dn, grid, cond, null_cond, sched, cfg);
    SampleResult res;
    res.grid = grid;
    res.image = detail::decode_clamped(codec, z, grid);
    res.z0 = std::move(z);
    return res;
}

}  // namespace polydiff
