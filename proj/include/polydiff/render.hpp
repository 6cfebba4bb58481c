#pragma once

#include <algorithm>

#include "polydiff/image.hpp"
#include "polydiff/rng.hpp"
#include "polydiff/scene.hpp"

// Deterministic 32x32 renderer. All geometry is built from 4x4-pixel blocks
// aligned to the latent patch grid, so every clean patch is a flat color —
// which is what lets a rank-4 linear patch codec reconstruct renders
// near-losslessly. Shape = a stencil over an s x s block grid (s = 3 small,
// 4 large); motif = a solid 8x8 stamp in the top-left corner.

namespace polydiff {

constexpr int IMG_SIDE = 32;
constexpr int BLOCK_PX = 4;

enum class Degradation { none = 0, overlay, noise, caption_shuffle };

inline const char* degradation_name(Degradation d) {
    switch (d) {
        case Degradation::none: return "none";
        case Degradation::overlay: return "overlay";
        case Degradation::noise: return "noise";
        case Degradation::caption_shuffle: return "caption_shuffle";
    }
    return "none";
}

inline Degradation degradation_from_name(const std::string& s) {
    if (s == "none") return Degradation::none;
    if (s == "overlay") return Degradation::overlay;
    if (s == "noise") return Degradation::noise;
    if (s == "caption_shuffle") return Degradation::caption_shuffle;
    throw ConfigError("unknown degradation kind: " + s);
}

// whether block (r, c) of the s x s stencil is part of the shape
inline bool stencil_block(int shape, int s, int r, int c) {
    switch (shape) {
        case 0:  // circle: rounded square (corner blocks cut)
            return !((r == 0 || r == s - 1) && (c == 0 || c == s - 1));
        case 1:  // square
            return true;
        case 2:  // triangle: lower-left
            return c <= r;
        case 3:  // cross: both diagonals
            return c == r || c == s - 1 - r;
    }
    return false;
}

inline Image render(const SceneSpec& scene) {
    scene.validate();
    Image img(IMG_SIDE, IMG_SIDE);
    for (int y = 0; y < IMG_SIDE; ++y)
        for (int x = 0; x < IMG_SIDE; ++x) img.set(y, x, FG_COLORS[scene.bg]);

    int s = scene.size == 0 ? 3 : 4;
    static constexpr int ORIGIN_SMALL[3] = {0, 8, 20};
    static constexpr int ORIGIN_LARGE[3] = {0, 8, 16};
    const int* origins = scene.size == 0 ? ORIGIN_SMALL : ORIGIN_LARGE;
    int oy = origins[scene.pos / 3];
    int ox = origins[scene.pos % 3];
    for (int r = 0; r < s; ++r)
        for (int c = 0; c < s; ++c) {
            if (!stencil_block(scene.shape, s, r, c)) continue;
            for (int y = 0; y < BLOCK_PX; ++y)
                for (int x = 0; x < BLOCK_PX; ++x)
                    img.set(oy + r * BLOCK_PX + y, ox + c * BLOCK_PX + x, FG_COLORS[scene.fg]);
        }

    if (scene.motif >= 0)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) img.set(y, x, MOTIF_COLORS[scene.motif]);
    return img;
}

// overlay: three "text lines" of alternating white/black dashes; the word
// count the OCR stage would read is returned via overlay_word_count
inline void apply_overlay(Image& img, Rng& rng, int& overlay_word_count) {
    overlay_word_count = 6 + rng.below_int(4);  // 6..9, always over the filter limit
    static constexpr float WHITE[3] = {1, 1, 1};
    static constexpr float BLACK[3] = {-1, -1, -1};
    for (int line = 0; line < 3; ++line) {
        int y0 = 5 + 9 * line;
        for (int y = y0; y < y0 + 3; ++y)
            for (int x = 2; x < 30; ++x) img.set(y, x, (x / 3) % 2 ? BLACK : WHITE);
    }
}

inline void apply_noise(Image& img, Rng& rng, float sigma = 0.7f) {
    for (auto& v : img.data) v = std::clamp(v + sigma * rng.normalf(), -1.f, 1.f);
}

}  // namespace polydiff
