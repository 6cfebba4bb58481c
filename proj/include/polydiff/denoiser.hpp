#pragma once
// Cross-attention transformer denoiser eps_theta(z_t, c, t) over latent patch
// tokens, with an explicit K/V parameter partition.
//
// Each of the B blocks is pre-LN: self-attention over latent tokens, then
// cross-attention (queries from latent tokens, keys/values from the text token
// sequence c), then an MLP. Timestep conditioning: sinusoidal embedding of t
// through a 2-layer MLP, added to every token. Position information: fixed 2D
// sinusoidal embeddings generated per grid size, so the same parameters
// evaluate on both the 4x4 (stage 1) and 8x8 (stage 2) latent grids.

#include <cmath>
#include <string>
#include <vector>

#include "polydiff/encoder.hpp"  // linear/ln/mha/mlp helpers + param builders
#include "polydiff/errors.hpp"
#include "polydiff/optim.hpp"
#include "polydiff/rng.hpp"
#include "polydiff/tensor.hpp"

namespace polydiff {

struct DenoiserConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_blocks = 6;
    int mlp_mult = 4;
    int c_lat = 4;
    int text_d = 64;        // channel width of the conditioning token sequence
    bool use_cross = true;  // false builds a text-blind model (kv partition empty)
};

template <typename S>
struct Denoiser {
    DenoiserConfig cfg;
    ParamSet<S> params;

    static Denoiser make(const DenoiserConfig& cfg, uint64_t seed) {
        if (cfg.text_d != cfg.d_model)
            throw ConfigError("denoiser: text_d must equal d_model for shared attention widths");
        Denoiser dn;
        dn.cfg = cfg;
        Rng rng = Rng::stream(seed, "denoiser_init", 0);
        auto& ps = dn.params;
        add_linear(ps, "in_proj", cfg.c_lat, cfg.d_model, rng);
        add_linear(ps, "t_mlp.fc1", cfg.d_model, cfg.d_model * cfg.mlp_mult, rng);
        add_linear(ps, "t_mlp.fc2", cfg.d_model * cfg.mlp_mult, cfg.d_model, rng);
        for (int b = 0; b < cfg.n_blocks; ++b) {
            std::string pfx = "blk" + std::to_string(b);
            add_layer_norm_params(ps, pfx + ".ln1", cfg.d_model);
            add_attention(ps, pfx + ".self", cfg.d_model, rng);
            if (cfg.use_cross) {
                add_layer_norm_params(ps, pfx + ".ln2", cfg.d_model);
                add_attention(ps, pfx + ".cross", cfg.d_model, rng);
            }
            add_layer_norm_params(ps, pfx + ".ln3", cfg.d_model);
            add_mlp(ps, pfx + ".mlp", cfg.d_model, cfg.mlp_mult, rng);
        }
        add_layer_norm_params(ps, "lnf", cfg.d_model);
        add_linear(ps, "out", cfg.d_model, cfg.c_lat, rng);
        // start as a near-zero predictor: helps early loss ~= E||eps||^2 baseline
        for (auto& v : ps.get("out.w").data()) v *= S(0.1);
        return dn;
    }

    void freeze() { params.set_trainable([](const std::string&) { return false; }); }
    uint64_t hash() const { return params_hash(const_cast<ParamSet<S>&>(params)); }
};

using DenoiserF = Denoiser<float>;

// ---------------------------------------------------------------------------
// fixed (non-trainable) embeddings

// classic transformer sinusoidal embedding of integer timesteps; [B, dim]
template <typename S>
Tensor<S> sinusoidal_timestep_embedding(const std::vector<int>& t, int dim) {
    int half = dim / 2;
    auto out = Tensor<S>::zeros({static_cast<int>(t.size()), dim});
    for (size_t b = 0; b < t.size(); ++b)
        for (int i = 0; i < half; ++i) {
            double w = std::exp(-std::log(10000.0) * double(i) / double(half));
            out.data()[b * dim + i] = S(std::sin(double(t[b]) * w));
            out.data()[b * dim + half + i] = S(std::cos(double(t[b]) * w));
        }
    return out;
}

// 2D sinusoidal position embedding for a g x g token grid; [g*g, dim].
// First half of the channels encodes the row, second half the column.
template <typename S>
Tensor<S> pos_embedding_2d(int g, int dim) {
    if (dim % 4 != 0) throw ConfigError("pos_embedding_2d: dim must be divisible by 4");
    int m = dim / 2, half = m / 2;
    auto out = Tensor<S>::zeros({g * g, dim});
    auto encode = [&](int pos, int64_t base_off) {
        for (int i = 0; i < half; ++i) {
            double w = std::exp(-std::log(10000.0) * double(i) / double(half));
            out.data()[base_off + i] = S(std::sin(double(pos) * w));
            out.data()[base_off + half + i] = S(std::cos(double(pos) * w));
        }
    };
    for (int r = 0; r < g; ++r)
        for (int c = 0; c < g; ++c) {
            int64_t row_off = static_cast<int64_t>(r * g + c) * dim;
            encode(r, row_off);
            encode(c, row_off + m);
        }
    return out;
}

// ---------------------------------------------------------------------------
// forward

// z_t [B, N, c_lat] with N a square grid; t per-example timesteps in [1, T];
// c [B, L, text_d] conditioning token sequence. Returns eps_hat, same shape
// as z_t.
template <typename S>
Tensor<S> denoise(Denoiser<S>& dn, const Tensor<S>& z_t, const std::vector<int>& t,
                  const Tensor<S>& c, int T) {
    const Shape& zs = z_t.shape();
    if (zs.size() != 3 || zs[2] != dn.cfg.c_lat)
        throw std::invalid_argument("denoise: z_t must be [B, N, c_lat]");
    int B = zs[0], N = zs[1];
    int g = static_cast<int>(std::lround(std::sqrt(double(N))));
    if (g * g != N) throw std::invalid_argument("denoise: token count is not a square grid");
    if (static_cast<int>(t.size()) != B)
        throw std::invalid_argument("denoise: need one timestep per example");
    for (int ti : t)
        if (ti < 1 || ti > T)
            throw std::invalid_argument("denoise: timestep " + std::to_string(ti) +
                                        " out of range [1, " + std::to_string(T) + "]");
    if (dn.cfg.use_cross) {
        const Shape& cs = c.shape();
        if (cs.size() != 3 || cs[0] != B || cs[2] != dn.cfg.text_d)
            throw std::invalid_argument("denoise: c must be [B, L, text_d]");
    }
    auto& ps = dn.params;
    int d = dn.cfg.d_model;

    auto x = linear(ps, "in_proj", z_t);                       // [B, N, d]
    x = add(x, pos_embedding_2d<S>(g, d));                     // suffix broadcast [N, d]
    auto t_emb = mlp_forward(ps, "t_mlp", sinusoidal_timestep_embedding<S>(t, d));  // [B, d]
    // add the per-example vector to every token: [B,N,d] -> [N,B,d] (+[B,d]) -> back
    x = permute(add(permute(x, {1, 0, 2}), t_emb), {1, 0, 2});

    for (int b = 0; b < dn.cfg.n_blocks; ++b) {
        std::string pfx = "blk" + std::to_string(b);
        auto h = ln(ps, pfx + ".ln1", x);
        x = add(x, mha(ps, pfx + ".self", h, h, dn.cfg.n_heads));
        if (dn.cfg.use_cross)
            x = add(x, mha(ps, pfx + ".cross", ln(ps, pfx + ".ln2", x), c, dn.cfg.n_heads));
        x = add(x, mlp_forward(ps, pfx + ".mlp", ln(ps, pfx + ".ln3", x)));
    }
    return linear(ps, "out", ln(ps, "lnf", x));                // [B, N, c_lat]
}

// ---------------------------------------------------------------------------
// K/V parameter partition ("only unfreeze the k and v parameters")

// Returns (kv_names, other_names): kv_names is exactly every cross-attention
// key/value weight (and bias, if the architecture had them; ours is bias-free
// in attention). The two sets are disjoint and their union is all names.
template <typename S>
std::pair<std::vector<std::string>, std::vector<std::string>> param_partition(
    const ParamSet<S>& params) {
    std::vector<std::string> kv, other;
    for (const auto& name : params.names) {
        bool is_kv = name.find(".cross.wk") != std::string::npos ||
                     name.find(".cross.wv") != std::string::npos ||
                     name.find(".cross.bk") != std::string::npos ||
                     name.find(".cross.bv") != std::string::npos;
        (is_kv ? kv : other).push_back(name);
    }
    return {kv, other};
}

// total scalar count across a list of param names
template <typename S>
int64_t scalar_count_of(ParamSet<S>& params, const std::vector<std::string>& names) {
    int64_t n = 0;
    for (const auto& name : names) n += params.get(name).numel();
    return n;
}

}  // namespace polydiff
