#pragma once
// Toy attribute classifier and aesthetics regressor.
//
// The classifier predicts (shape, fg, bg, motif) from a render and doubles as
// the metric backbone: its penultimate activations are the FID features and
// its shape-head posteriors feed the inception score. The aesthetics scorer
// is a small regressor trained on synthetic labels (clean renders high,
// degraded renders low), clamped to [1, 10].
//
// Both consume per-block features: mean RGB over each 4x4 pixel block plus a
// color-invariant silhouette channel (distance of the block mean from the
// median block color, a robust background estimate). The silhouette channel
// is what lets the shape head generalize across fg/bg color combinations
// instead of memorizing them.

#include <array>
#include <algorithm>
#include <string>
#include <vector>

#include "polydiff/encoder.hpp"  // add_linear / linear / silu helpers
#include "polydiff/errors.hpp"
#include "polydiff/image.hpp"
#include "polydiff/optim.hpp"
#include "polydiff/render.hpp"
#include "polydiff/rng.hpp"
#include "polydiff/scene.hpp"
#include "polydiff/tensor.hpp"

namespace polydiff {

inline constexpr int FEAT_BLOCK = 4;                                     // feature patch side
inline constexpr int FEAT_GRID = IMG_SIDE / FEAT_BLOCK;                  // 8
inline constexpr int FEAT_DIM = FEAT_GRID * FEAT_GRID * 4;               // rgb + silhouette
inline constexpr int CLS_FEAT_DIM = 32;                                  // penultimate width
inline constexpr int MOTIF_CLASSES = NUM_MOTIFS + 1;                     // none + 6

// per block: mean RGB, then distance from the median block color,
// flattened row-major [block_y][block_x][r, g, b, dist]
inline std::vector<float> patch_mean_features(const Image& img) {
    if (img.w != IMG_SIDE || img.h != IMG_SIDE)
        throw std::invalid_argument("patch_mean_features: expected " + std::to_string(IMG_SIDE) +
                                    "x" + std::to_string(IMG_SIDE) + " image");
    constexpr int NB = FEAT_GRID * FEAT_GRID;
    float bm[NB][3] = {};
    for (int by = 0; by < FEAT_GRID; ++by)
        for (int bx = 0; bx < FEAT_GRID; ++bx)
            for (int y = 0; y < FEAT_BLOCK; ++y)
                for (int x = 0; x < FEAT_BLOCK; ++x) {
                    const float* p = img.px(by * FEAT_BLOCK + y, bx * FEAT_BLOCK + x);
                    for (int ch = 0; ch < 3; ++ch)
                        bm[by * FEAT_GRID + bx][ch] += p[ch] / float(FEAT_BLOCK * FEAT_BLOCK);
                }
    // background estimate: per-channel median over blocks (background blocks
    // are always the majority in a render)
    float med[3];
    for (int ch = 0; ch < 3; ++ch) {
        std::array<float, NB> vals;
        for (int i = 0; i < NB; ++i) vals[i] = bm[i][ch];
        std::nth_element(vals.begin(), vals.begin() + NB / 2, vals.end());
        med[ch] = vals[NB / 2];
    }
    std::vector<float> f(FEAT_DIM);
    for (int i = 0; i < NB; ++i) {
        float d2 = 0;
        for (int ch = 0; ch < 3; ++ch) {
            f[i * 4 + ch] = bm[i][ch];
            float d = bm[i][ch] - med[ch];
            d2 += d * d;
        }
        f[i * 4 + 3] = std::sqrt(d2);
    }
    return f;
}

template <typename S>
Tensor<S> feature_batch(const std::vector<Image>& imgs) {
    if (imgs.empty()) throw std::invalid_argument("feature_batch: empty image list");
    auto t = Tensor<S>::zeros({static_cast<int>(imgs.size()), FEAT_DIM});
    for (size_t i = 0; i < imgs.size(); ++i) {
        auto f = patch_mean_features(imgs[i]);
        for (int j = 0; j < FEAT_DIM; ++j) t.data()[i * FEAT_DIM + j] = S(f[j]);
    }
    return t;
}

// ---------------------------------------------------------------------------
// attribute classifier

template <typename S>
struct AttrClassifier {
    ParamSet<S> params;
    bool trained = false;

    static AttrClassifier make(uint64_t seed) {
        AttrClassifier c;
        Rng rng = Rng::stream(seed, "clf_init", 0);
        add_linear(c.params, "fc1", FEAT_DIM, 128, rng);
        add_linear(c.params, "fc2", 128, CLS_FEAT_DIM, rng);
        add_linear(c.params, "head.shape", CLS_FEAT_DIM, NUM_SHAPES, rng);
        add_linear(c.params, "head.fg", CLS_FEAT_DIM, NUM_COLORS, rng);
        add_linear(c.params, "head.bg", CLS_FEAT_DIM, NUM_COLORS, rng);
        add_linear(c.params, "head.motif", CLS_FEAT_DIM, MOTIF_CLASSES, rng);
        return c;
    }

    // penultimate features [B, CLS_FEAT_DIM]
    Tensor<S> trunk(const Tensor<S>& feats) {
        return silu(linear(params, "fc2", silu(linear(params, "fc1", feats))));
    }

    struct Logits {
        Tensor<S> shape, fg, bg, motif;
    };
    Logits heads(const Tensor<S>& trunk_out) {
        return {linear(params, "head.shape", trunk_out), linear(params, "head.fg", trunk_out),
                linear(params, "head.bg", trunk_out), linear(params, "head.motif", trunk_out)};
    }

    void require_trained(const char* who) const {
        if (!trained) throw ConfigError(std::string(who) + ": attribute classifier is untrained");
    }

    void freeze() { params.set_trainable([](const std::string&) { return false; }); }
};

using AttrClassifierF = AttrClassifier<float>;

struct AttrPrediction {
    int shape = -1, fg = -1, bg = -1, motif = -1;  // motif: 0 = none, m+1 = motif m
    std::vector<float> shape_probs;                // for inception score
};

template <typename S>
std::vector<AttrPrediction> classify(AttrClassifier<S>& clf, const std::vector<Image>& imgs) {
    clf.require_trained("classify");
    auto t = clf.trunk(feature_batch<S>(imgs));
    auto h = clf.heads(t);
    auto shape_probs = softmax_lastdim(h.shape);
    std::vector<AttrPrediction> out(imgs.size());
    auto argmax_row = [](const Tensor<S>& logits, size_t row) {
        int d = logits.shape().back();
        int best = 0;
        for (int i = 1; i < d; ++i)
            if (logits.data()[row * d + i] > logits.data()[row * d + best]) best = i;
        return best;
    };
    for (size_t i = 0; i < imgs.size(); ++i) {
        out[i].shape = argmax_row(h.shape, i);
        out[i].fg = argmax_row(h.fg, i);
        out[i].bg = argmax_row(h.bg, i);
        out[i].motif = argmax_row(h.motif, i);
        out[i].shape_probs.resize(NUM_SHAPES);
        for (int c = 0; c < NUM_SHAPES; ++c)
            out[i].shape_probs[c] = float(shape_probs.data()[i * NUM_SHAPES + c]);
    }
    return out;
}

// FID feature extraction (penultimate layer), row-major [n, CLS_FEAT_DIM]
template <typename S>
std::vector<float> classifier_features(AttrClassifier<S>& clf, const std::vector<Image>& imgs) {
    clf.require_trained("classifier_features");
    auto t = clf.trunk(feature_batch<S>(imgs));
    std::vector<float> out(t.data().begin(), t.data().end());
    return out;
}

struct ClassifierTrainConfig {
    int n_scenes = 6000;   // each expanded into 3 augmented variants
    int steps = 3000;
    int batch = 64;
    double lr = 2e-3;
    int warmup = 30;
    uint64_t seed = 4;
};

struct ClassifierReport {
    double first_loss = 0, last_loss = 0;
    double heldout_joint = 0;  // clean held-out (shape, fg, bg) joint accuracy
};

namespace detail {

struct ClsExample {
    std::vector<float> feats;
    int shape, fg, bg, motif;
};

// variants per scene: clean, mild noise, 16->32 up/down round trip — the last
// two cover generated-image imperfections
inline std::vector<ClsExample> make_cls_examples(int n_scenes, uint64_t seed, const char* tag) {
    std::vector<ClsExample> ex;
    ex.reserve(static_cast<size_t>(n_scenes) * 3);
    for (int i = 0; i < n_scenes; ++i) {
        Rng rng = Rng::stream(seed, tag, i);
        SceneSpec sc = random_scene(rng, 0.4);
        Image clean = render(sc);
        for (int v = 0; v < 3; ++v) {
            Image img = clean;
            if (v == 1) {
                Rng nr = Rng::stream(seed, "cls_noise", i);
                apply_noise(img, nr, 0.25f);
            } else if (v == 2) {
                img = upsample2x_nearest(downsample2x(clean));
            }
            ClsExample e;
            e.feats = patch_mean_features(img);
            e.shape = sc.shape;
            e.fg = sc.fg;
            e.bg = sc.bg;
            e.motif = sc.motif + 1;
            ex.push_back(std::move(e));
        }
    }
    return ex;
}

}  // namespace detail

template <typename S>
ClassifierReport train_classifier(AttrClassifier<S>& clf, const ClassifierTrainConfig& cfg = {}) {
    auto ex = detail::make_cls_examples(cfg.n_scenes, cfg.seed, "cls_train");
    AdamWConfig oc;
    oc.lr = cfg.lr;
    oc.warmup_steps = cfg.warmup;
    oc.weight_decay = 0.0;
    AdamW<S> opt(clf.params, oc);
    ClassifierReport rep;
    for (int step = 0; step < cfg.steps; ++step) {
        Rng br = Rng::stream(cfg.seed, "cls_batch", step);
        auto x = Tensor<S>::zeros({cfg.batch, FEAT_DIM});
        std::vector<int> ts(cfg.batch), tf(cfg.batch), tb(cfg.batch), tm(cfg.batch);
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& e = ex[br.below(static_cast<uint32_t>(ex.size()))];
            for (int j = 0; j < FEAT_DIM; ++j) x.data()[b * FEAT_DIM + j] = S(e.feats[j]);
            ts[b] = e.shape;
            tf[b] = e.fg;
            tb[b] = e.bg;
            tm[b] = e.motif;
        }
        auto t = clf.trunk(x);
        auto h = clf.heads(t);
        auto loss = add(add(cross_entropy_logits(h.shape, ts), cross_entropy_logits(h.fg, tf)),
                        add(cross_entropy_logits(h.bg, tb), cross_entropy_logits(h.motif, tm)));
        double lv = double(loss.data()[0]);
        if (!std::isfinite(lv))
            throw NumericError("train_classifier: non-finite loss at step " + std::to_string(step));
        if (step == 0) rep.first_loss = lv;
        rep.last_loss = lv;
        clf.params.zero_grad();
        loss.backward();
        opt.step();
    }
    clf.trained = true;
    clf.freeze();
    // held-out joint accuracy on clean renders
    const int n_held = 400;
    std::vector<Image> imgs;
    std::vector<SceneSpec> scenes;
    for (int i = 0; i < n_held; ++i) {
        Rng rng = Rng::stream(cfg.seed, "cls_held", i);
        scenes.push_back(random_scene(rng, 0.4));
        imgs.push_back(render(scenes.back()));
    }
    auto preds = classify(clf, imgs);
    int joint = 0;
    for (int i = 0; i < n_held; ++i)
        if (preds[i].shape == scenes[i].shape && preds[i].fg == scenes[i].fg &&
            preds[i].bg == scenes[i].bg)
            ++joint;
    rep.heldout_joint = double(joint) / n_held;
    return rep;
}

// ---------------------------------------------------------------------------
// aesthetics scorer

template <typename S>
struct AestheticsScorer {
    ParamSet<S> params;
    bool trained = false;

    static AestheticsScorer make(uint64_t seed) {
        AestheticsScorer a;
        Rng rng = Rng::stream(seed, "aes_init", 0);
        add_linear(a.params, "fc1", FEAT_DIM, 64, rng);
        add_linear(a.params, "fc2", 64, 1, rng);
        return a;
    }

    void freeze() { params.set_trainable([](const std::string&) { return false; }); }

    // score in [1, 10]
    double score(const Image& img) {
        if (!trained) throw ConfigError("aesthetics: scorer is untrained");
        std::vector<Image> one{img};
        auto y = linear(params, "fc2", silu(linear(params, "fc1", feature_batch<S>(one))));
        return std::min(10.0, std::max(1.0, double(y.data()[0])));
    }
};

using AestheticsScorerF = AestheticsScorer<float>;

struct AestheticsTrainConfig {
    int n_scenes = 800;  // half clean, half degraded
    int steps = 800;
    int batch = 64;
    double lr = 2e-3;
    int warmup = 30;
    uint64_t seed = 8;
};

// synthetic labels: clean uniform in [8, 10], degraded (noise or overlay)
// uniform in [1, 6]
template <typename S>
double train_aesthetics(AestheticsScorer<S>& aes, const AestheticsTrainConfig& cfg = {}) {
    struct Ex {
        std::vector<float> feats;
        float label;
    };
    std::vector<Ex> ex;
    ex.reserve(cfg.n_scenes);
    for (int i = 0; i < cfg.n_scenes; ++i) {
        Rng rng = Rng::stream(cfg.seed, "aes_scene", i);
        Image img = render(random_scene(rng, 0.4));
        Rng lr = Rng::stream(cfg.seed, "aes_label", i);
        float label;
        if (i % 2 == 0) {
            label = float(lr.uniform(8.0, 10.0));
        } else {
            Rng dr = Rng::stream(cfg.seed, "aes_degrade", i);
            if (i % 4 == 1) {
                apply_noise(img, dr, 0.7f);
            } else {
                int wc = 0;
                apply_overlay(img, dr, wc);
            }
            label = float(lr.uniform(1.0, 6.0));
        }
        ex.push_back({patch_mean_features(img), label});
    }
    AdamWConfig oc;
    oc.lr = cfg.lr;
    oc.warmup_steps = cfg.warmup;
    oc.weight_decay = 0.0;
    AdamW<S> opt(aes.params, oc);
    double last = 0;
    for (int step = 0; step < cfg.steps; ++step) {
        Rng br = Rng::stream(cfg.seed, "aes_batch", step);
        auto x = Tensor<S>::zeros({cfg.batch, FEAT_DIM});
        auto y = Tensor<S>::zeros({cfg.batch, 1});
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& e = ex[br.below(static_cast<uint32_t>(ex.size()))];
            for (int j = 0; j < FEAT_DIM; ++j) x.data()[b * FEAT_DIM + j] = S(e.feats[j]);
            y.data()[b] = S(e.label);
        }
        auto pred = linear(aes.params, "fc2", silu(linear(aes.params, "fc1", x)));
        auto loss = mse(pred, y);
        last = double(loss.data()[0]);
        if (!std::isfinite(last))
            throw NumericError("train_aesthetics: non-finite loss at step " + std::to_string(step));
        aes.params.zero_grad();
        loss.backward();
        opt.step();
    }
    aes.trained = true;
    aes.freeze();
    return last;
}

}  // namespace polydiff
