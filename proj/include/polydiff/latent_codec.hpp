#pragma once
// Linear patch latent codec: the autoencoder that maps images to the
// low-dimensional latent space where diffusion runs, and back.
//
// encode: [*, H, W, 3] -> patches (p*p*3) -> affine map -> [*, (H/p)*(W/p), c_lat]
// decode: the inverse affine map followed by patch reassembly.
//
// A single global latent_scale (fit after training so latents have ~unit
// standard deviation) multiplies encoded latents and divides before decode.

#include <cmath>
#include <string>
#include <vector>

#include "polydiff/errors.hpp"
#include "polydiff/image.hpp"
#include "polydiff/optim.hpp"
#include "polydiff/rng.hpp"
#include "polydiff/tensor.hpp"

namespace polydiff {

template <typename S>
struct LatentCodec {
    int p = 4;      // patch side in pixels
    int c_lat = 4;  // latent channels per patch
    // enc.w [p*p*3, c_lat], enc.b [c_lat], dec.w [c_lat, p*p*3], dec.b [p*p*3],
    // scale [1] (global latent scale; never trainable, but checkpointed)
    ParamSet<S> params;

    static LatentCodec make(int p, int c_lat, uint64_t seed) {
        if (p <= 0 || c_lat <= 0) throw ConfigError("codec: patch size and c_lat must be positive");
        LatentCodec cd;
        cd.p = p;
        cd.c_lat = c_lat;
        Rng rng = Rng::stream(seed, "codec_init", 0);
        int d_patch = p * p * 3;
        cd.params.add("enc.w", Tensor<S>::randn({d_patch, c_lat}, rng, S(0.05)));
        cd.params.add("enc.b", Tensor<S>::zeros({c_lat}));
        cd.params.add("dec.w", Tensor<S>::randn({c_lat, d_patch}, rng, S(0.05)));
        cd.params.add("dec.b", Tensor<S>::zeros({d_patch}));
        cd.add_scale_slot();
        return cd;
    }

    void add_scale_slot() {
        auto t = params.add("scale", Tensor<S>::full({1}, S(1)));
        t.node().requires_grad = false;  // fitted after training, never optimized
    }

    S latent_scale() const { return const_cast<ParamSet<S>&>(params).get("scale").data()[0]; }
    void set_latent_scale(S v) { const_cast<ParamSet<S>&>(params).get("scale").data()[0] = v; }

    // degenerate full-rank codec: c_lat = p*p*3 with identity maps; round-trip
    // is exact before any training
    static LatentCodec make_identity(int p) {
        LatentCodec cd;
        cd.p = p;
        cd.c_lat = p * p * 3;
        int d = cd.c_lat;
        std::vector<S> eye(static_cast<size_t>(d) * d, S(0));
        for (int i = 0; i < d; ++i) eye[static_cast<size_t>(i) * d + i] = S(1);
        cd.params.add("enc.w", Tensor<S>::from_data({d, d}, eye));
        cd.params.add("enc.b", Tensor<S>::zeros({d}));
        cd.params.add("dec.w", Tensor<S>::from_data({d, d}, eye));
        cd.params.add("dec.b", Tensor<S>::zeros({d}));
        cd.add_scale_slot();
        return cd;
    }

    int grid_side(int img_side) const {
        if (img_side % p != 0)
            throw ConfigError("codec: image side " + std::to_string(img_side) +
                              " not divisible by patch size " + std::to_string(p));
        return img_side / p;
    }

    // img: [H, W, 3] or [B, H, W, 3]  ->  [N, c_lat] or [B, N, c_lat]
    Tensor<S> encode(const Tensor<S>& img) const {
        const Shape& s = img.shape();
        if (s.size() != 3 && s.size() != 4)
            throw ConfigError("codec.encode: expected [H,W,3] or [B,H,W,3]");
        int H = s[s.size() == 4 ? 1 : 0], W = s[s.size() == 4 ? 2 : 1];
        if (H % p != 0 || W % p != 0)
            throw ConfigError("codec.encode: image " + std::to_string(H) + "x" + std::to_string(W) +
                              " not divisible by patch size " + std::to_string(p));
        auto& ps = const_cast<ParamSet<S>&>(params);
        auto z = add(matmul(im2patches(img, p), ps.get("enc.w")), ps.get("enc.b"));
        S ls = latent_scale();
        if (ls != S(1)) z = scale(z, double(ls));
        return z;
    }

    // z: [N, c_lat] or [B, N, c_lat]  ->  [H, W, 3] or [B, H, W, 3]
    // (the latent grid is square; side inferred from N)
    Tensor<S> decode(const Tensor<S>& z) const {
        const Shape& s = z.shape();
        if (s.size() != 2 && s.size() != 3)
            throw ConfigError("codec.decode: expected [N,c_lat] or [B,N,c_lat]");
        int N = s[s.size() == 3 ? 1 : 0], C = s[s.size() == 3 ? 2 : 1];
        if (C != c_lat) throw ConfigError("codec.decode: latent channels mismatch");
        int g = static_cast<int>(std::lround(std::sqrt(double(N))));
        if (g * g != N) throw ConfigError("codec.decode: token count is not a square grid");
        auto& ps = const_cast<ParamSet<S>&>(params);
        S ls = latent_scale();
        auto zin = ls != S(1) ? scale(z, 1.0 / double(ls)) : z;
        auto patches = add(matmul(zin, ps.get("dec.w")), ps.get("dec.b"));
        return patches2im(patches, p, g * p, g * p, 3);
    }

    void freeze() { params.set_trainable([](const std::string&) { return false; }); }

    uint64_t hash() const { return params_hash(const_cast<ParamSet<S>&>(params)); }
};

using CodecF = LatentCodec<float>;

// ---------------------------------------------------------------------------
// image <-> tensor conversion

template <typename S>
Tensor<S> image_to_tensor(const Image& img, bool requires_grad = false) {
    auto t = Tensor<S>::zeros({img.h, img.w, 3}, requires_grad);
    for (size_t i = 0; i < img.data.size(); ++i) t.data()[i] = S(img.data[i]);
    return t;
}

template <typename S>
Tensor<S> images_to_tensor(const std::vector<Image>& imgs) {
    if (imgs.empty()) throw ConfigError("images_to_tensor: empty batch");
    int h = imgs[0].h, w = imgs[0].w;
    auto t = Tensor<S>::zeros({static_cast<int>(imgs.size()), h, w, 3});
    int64_t per = static_cast<int64_t>(h) * w * 3;
    for (size_t b = 0; b < imgs.size(); ++b) {
        if (imgs[b].h != h || imgs[b].w != w) throw ConfigError("images_to_tensor: mixed sizes");
        for (int64_t i = 0; i < per; ++i) t.data()[b * per + i] = S(imgs[b].data[i]);
    }
    return t;
}

template <typename S>
Image tensor_to_image(const Tensor<S>& t, int batch_index = 0) {
    const Shape& s = t.shape();
    if (s.size() != 3 && s.size() != 4) throw ConfigError("tensor_to_image: expected [H,W,3] or [B,H,W,3]");
    int H = s[s.size() == 4 ? 1 : 0], W = s[s.size() == 4 ? 2 : 1];
    Image img(W, H);
    int64_t per = static_cast<int64_t>(H) * W * 3;
    int64_t off = s.size() == 4 ? batch_index * per : 0;
    for (int64_t i = 0; i < per; ++i) img.data[i] = float(t.data()[off + i]);
    return img;
}

// ---------------------------------------------------------------------------
// training

struct CodecTrainConfig {
    int steps = 600;
    int batch = 64;
    double lr = 3e-3;
    int warmup = 20;
    uint64_t seed = 3;
    std::function<void(int, double)> on_step;  // (step, loss)
};

struct CodecTrainReport {
    double first_loss = 0, last_loss = 0;
    double latent_std = 0;  // raw latent std before scale was applied
};

// Train the affine patch codec by reconstruction MSE on rendered images, then
// fit the global latent scale so training-set latents have unit std, and
// freeze. images: >= 512 training renders (square, side divisible by p).
template <typename S>
CodecTrainReport train_codec(LatentCodec<S>& codec, const std::vector<Image>& images,
                             const CodecTrainConfig& cfg = {}) {
    if (images.size() < 512)
        throw ConfigError("train_codec: need >= 512 images, got " + std::to_string(images.size()));
    codec.grid_side(images[0].w);  // validates divisibility
    codec.set_latent_scale(S(1));
    AdamWConfig oc;
    oc.lr = cfg.lr;
    oc.warmup_steps = cfg.warmup;
    oc.weight_decay = 0.0;
    AdamW<S> opt(codec.params, oc);
    CodecTrainReport rep;
    for (int step = 0; step < cfg.steps; ++step) {
        Rng br = Rng::stream(cfg.seed, "codec_batch", step);
        std::vector<Image> batch;
        batch.reserve(cfg.batch);
        for (int i = 0; i < cfg.batch; ++i)
            batch.push_back(images[br.below(static_cast<uint32_t>(images.size()))]);
        auto x = images_to_tensor<S>(batch);
        auto loss = mse(codec.decode(codec.encode(x)), x);
        double lv = double(loss.data()[0]);
        if (!std::isfinite(lv)) throw NumericError("train_codec: non-finite loss at step " + std::to_string(step));
        if (step == 0) rep.first_loss = lv;
        rep.last_loss = lv;
        codec.params.zero_grad();
        loss.backward();
        opt.step();
        if (cfg.on_step) cfg.on_step(step, lv);
    }
    // fit global latent scale over the training set (raw latents, scale still 1)
    double sum = 0, sumsq = 0;
    int64_t count = 0;
    const int chunk = 64;
    for (size_t start = 0; start < images.size(); start += chunk) {
        std::vector<Image> part(images.begin() + start,
                                images.begin() + std::min(images.size(), start + chunk));
        auto z = codec.encode(images_to_tensor<S>(part));
        for (S v : z.data()) {
            sum += double(v);
            sumsq += double(v) * double(v);
            ++count;
        }
    }
    double mean = sum / double(count);
    rep.latent_std = std::sqrt(std::max(1e-12, sumsq / double(count) - mean * mean));
    codec.set_latent_scale(S(1.0 / rep.latent_std));
    codec.freeze();
    return rep;
}

// mean round-trip PSNR (dB) over a held-out set
template <typename S>
double codec_psnr(const LatentCodec<S>& codec, const std::vector<Image>& images) {
    if (images.empty()) throw ConfigError("codec_psnr: empty set");
    double total = 0;
    for (const auto& img : images) {
        auto x = image_to_tensor<S>(img);
        auto rec = tensor_to_image(codec.decode(codec.encode(x)));
        total += image_psnr(img, rec);
    }
    return total / double(images.size());
}

}  // namespace polydiff
