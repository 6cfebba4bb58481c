#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "polydiff/image.hpp"
#include "polydiff/optim.hpp"
#include "polydiff/render.hpp"
#include "polydiff/scene.hpp"
#include "polydiff/tensor.hpp"

// Transformer building blocks shared by the CLIP towers, the student text
// encoder, and the denoiser, plus the teacher/student models themselves.
// Pre-LN blocks, bias-free attention projections, SiLU MLPs.

namespace polydiff {

struct TransformerConfig {
    int d_model = 64;
    int n_heads = 4;
    int n_blocks = 2;
    int mlp_mult = 4;
};

constexpr int IMG_PATCH = 8;                                  // CLIP image tower patch size
constexpr int IMG_TOKENS = (IMG_SIDE / IMG_PATCH) * (IMG_SIDE / IMG_PATCH);
constexpr int IMG_PATCH_DIM = IMG_PATCH * IMG_PATCH * 3;

// ---------------------------------------------------------------------------
// parameter construction

template <typename S>
void add_linear(ParamSet<S>& ps, const std::string& name, int in, int out, Rng& rng,
                bool bias = true, S stddev = S(0.02)) {
    ps.add(name + ".w", Tensor<S>::randn({in, out}, rng, stddev));
    if (bias) ps.add(name + ".b", Tensor<S>::zeros({out}));
}

template <typename S>
void add_layer_norm_params(ParamSet<S>& ps, const std::string& name, int d) {
    ps.add(name + ".g", Tensor<S>::full({d}, S(1)));
    ps.add(name + ".b", Tensor<S>::zeros({d}));
}

template <typename S>
void add_attention(ParamSet<S>& ps, const std::string& pfx, int d, Rng& rng) {
    // bias-free projections (so the K/V partition is exactly the wk/wv matrices)
    ps.add(pfx + ".wq", Tensor<S>::randn({d, d}, rng, S(0.02)));
    ps.add(pfx + ".wk", Tensor<S>::randn({d, d}, rng, S(0.02)));
    ps.add(pfx + ".wv", Tensor<S>::randn({d, d}, rng, S(0.02)));
    ps.add(pfx + ".wo", Tensor<S>::randn({d, d}, rng, S(0.02)));
}

template <typename S>
void add_mlp(ParamSet<S>& ps, const std::string& pfx, int d, int mult, Rng& rng) {
    add_linear(ps, pfx + ".fc1", d, d * mult, rng);
    add_linear(ps, pfx + ".fc2", d * mult, d, rng);
}

// a text-tower block: self-attention + MLP
template <typename S>
void add_text_block(ParamSet<S>& ps, const std::string& pfx, const TransformerConfig& cfg, Rng& rng) {
    add_layer_norm_params(ps, pfx + ".ln1", cfg.d_model);
    add_attention(ps, pfx + ".attn", cfg.d_model, rng);
    add_layer_norm_params(ps, pfx + ".ln2", cfg.d_model);
    add_mlp(ps, pfx + ".mlp", cfg.d_model, cfg.mlp_mult, rng);
}

template <typename S>
void add_text_tower(ParamSet<S>& ps, const std::string& pfx, int vocab,
                    const TransformerConfig& cfg, Rng& rng) {
    ps.add(pfx + "tok_emb", Tensor<S>::randn({vocab, cfg.d_model}, rng, S(0.02)));
    ps.add(pfx + "pos_emb", Tensor<S>::randn({L_MAX, cfg.d_model}, rng, S(0.02)));
    for (int b = 0; b < cfg.n_blocks; ++b) add_text_block(ps, pfx + "b" + std::to_string(b), cfg, rng);
    add_layer_norm_params(ps, pfx + "lnf", cfg.d_model);
}

// ---------------------------------------------------------------------------
// forward pieces

template <typename S>
Tensor<S> linear(ParamSet<S>& ps, const std::string& name, const Tensor<S>& x) {
    auto y = matmul(x, ps.get(name + ".w"));
    if (ps.has(name + ".b")) y = add(y, ps.get(name + ".b"));
    return y;
}

template <typename S>
Tensor<S> ln(ParamSet<S>& ps, const std::string& name, const Tensor<S>& x) {
    return layer_norm(x, ps.get(name + ".g"), ps.get(name + ".b"));
}

// multi-head attention; q_in [B, Lq, D], kv_in [B, Lk, D]
template <typename S>
Tensor<S> mha(ParamSet<S>& ps, const std::string& pfx, const Tensor<S>& q_in,
              const Tensor<S>& kv_in, int heads) {
    int B = q_in.shape()[0], Lq = q_in.shape()[1], D = q_in.shape()[2];
    int Lk = kv_in.shape()[1];
    int hd = D / heads;
    auto split = [&](const Tensor<S>& t, int L) {
        return permute(reshape(t, {B, L, heads, hd}), {0, 2, 1, 3});
    };
    auto q = split(matmul(q_in, ps.get(pfx + ".wq")), Lq);
    auto k = split(matmul(kv_in, ps.get(pfx + ".wk")), Lk);
    auto v = split(matmul(kv_in, ps.get(pfx + ".wv")), Lk);
    auto att = softmax_lastdim(scale(matmul(q, transpose_last2(k)), 1.0 / std::sqrt(double(hd))));
    auto ctx = reshape(permute(matmul(att, v), {0, 2, 1, 3}), {B, Lq, D});
    return matmul(ctx, ps.get(pfx + ".wo"));
}

template <typename S>
Tensor<S> mlp_forward(ParamSet<S>& ps, const std::string& pfx, const Tensor<S>& x) {
    return linear(ps, pfx + ".fc2", silu(linear(ps, pfx + ".fc1", x)));
}

template <typename S>
Tensor<S> text_block_forward(ParamSet<S>& ps, const std::string& pfx, const Tensor<S>& x,
                             const TransformerConfig& cfg) {
    auto h = add(x, mha(ps, pfx + ".attn", ln(ps, pfx + ".ln1", x), ln(ps, pfx + ".ln1", x),
                        cfg.n_heads));
    return add(h, mlp_forward(ps, pfx + ".mlp", ln(ps, pfx + ".ln2", h)));
}

// ids_flat: B*L_MAX token ids; returns normalized sequence [B, L_MAX, D]
template <typename S>
Tensor<S> text_tower_forward(ParamSet<S>& ps, const std::string& pfx,
                             const std::vector<int>& ids_flat, int B, const TransformerConfig& cfg) {
    auto x = reshape(embedding(ps.get(pfx + "tok_emb"), ids_flat), {B, L_MAX, cfg.d_model});
    x = add(x, ps.get(pfx + "pos_emb"));
    for (int b = 0; b < cfg.n_blocks; ++b)
        x = text_block_forward(ps, pfx + "b" + std::to_string(b), x, cfg);
    return ln(ps, pfx + "lnf", x);
}

// sequence position 0 ([TOS]/[CLS]) -> [B, D]
template <typename S>
Tensor<S> pool_position0(const Tensor<S>& seq) {
    int B = seq.shape()[0], D = seq.shape()[2];
    return reshape(slice(seq, 1, 0, 1), {B, D});
}

// ---------------------------------------------------------------------------
// encoder output handed to the denoiser / metrics (plain data, no graph)

struct EncoderOutput {
    std::vector<float> pooled;  // [D]
    std::vector<float> tokens;  // [L_MAX * D]
    int d = 0;
    int len = L_MAX;
};

// ---------------------------------------------------------------------------
// teacher CLIP: text tower ([TOS]-pooled) + patch image tower + temperature

template <typename S>
struct ClipTeacher {
    ParamSet<S> params;
    TransformerConfig cfg;

    static ClipTeacher make(uint64_t seed) {
        ClipTeacher t;
        auto rng = Rng::stream(seed, "teacher_init");
        int vocab = tokenizer().vocab_size();
        add_text_tower(t.params, "txt.", vocab, t.cfg, rng);
        t.params.add("img.patch.w", Tensor<S>::randn({IMG_PATCH_DIM, t.cfg.d_model}, rng, S(0.02)));
        t.params.add("img.patch.b", Tensor<S>::zeros({t.cfg.d_model}));
        t.params.add("img.pos_emb", Tensor<S>::randn({IMG_TOKENS, t.cfg.d_model}, rng, S(0.02)));
        for (int b = 0; b < t.cfg.n_blocks; ++b)
            add_text_block(t.params, "img.b" + std::to_string(b), t.cfg, rng);
        add_layer_norm_params(t.params, "img.lnf", t.cfg.d_model);
        add_linear(t.params, "img.proj", t.cfg.d_model, t.cfg.d_model, rng);
        t.params.add("log_t", Tensor<S>::full({1}, S(std::log(10.0))));
        return t;
    }

    // [TOS]-led token ids -> sequence [B, L, D]
    Tensor<S> text_seq(const std::vector<int>& ids_flat, int B) {
        return text_tower_forward(params, "txt.", ids_flat, B, cfg);
    }

    // images flattened to patch rows [B, IMG_TOKENS, IMG_PATCH_DIM] -> pooled [B, D]
    Tensor<S> image_pooled(const Tensor<S>& patches) {
        int B = patches.shape()[0];
        auto x = add(matmul(patches, params.get("img.patch.w")), params.get("img.patch.b"));
        x = add(x, params.get("img.pos_emb"));
        for (int b = 0; b < cfg.n_blocks; ++b)
            x = text_block_forward(params, "img.b" + std::to_string(b), x, cfg);
        x = ln(params, "img.lnf", x);
        // mean over the token axis via a constant averaging matrix
        auto avg = Tensor<S>::full({IMG_TOKENS, 1}, S(1.0 / IMG_TOKENS));
        auto pooled = reshape(matmul(transpose_last2(x), avg), {B, cfg.d_model});
        return linear(params, "img.proj", pooled);
    }
};

// images -> [B, IMG_TOKENS, IMG_PATCH_DIM] patch tensor (no grad)
template <typename S>
Tensor<S> images_to_patches(const std::vector<Image>& imgs) {
    int B = static_cast<int>(imgs.size());
    auto t = Tensor<S>::zeros({B, IMG_TOKENS, IMG_PATCH_DIM});
    int grid = IMG_SIDE / IMG_PATCH;
    S* p = t.data().data();
    for (int b = 0; b < B; ++b) {
        if (imgs[b].w != IMG_SIDE || imgs[b].h != IMG_SIDE)
            throw std::invalid_argument("images_to_patches: expected 32x32 input");
        for (int gy = 0; gy < grid; ++gy)
            for (int gx = 0; gx < grid; ++gx)
                for (int y = 0; y < IMG_PATCH; ++y)
                    for (int x = 0; x < IMG_PATCH; ++x)
                        for (int c = 0; c < 3; ++c)
                            *p++ = static_cast<S>(
                                imgs[b].px(gy * IMG_PATCH + y, gx * IMG_PATCH + x)[c]);
    }
    return t;
}

// symmetric InfoNCE over a batch of matched (text, image) pooled embeddings
template <typename S>
Tensor<S> clip_infonce(ClipTeacher<S>& t, const Tensor<S>& txt_pooled, const Tensor<S>& img_pooled) {
    int B = txt_pooled.shape()[0];
    auto tn = l2_normalize_rows(txt_pooled);
    auto im = l2_normalize_rows(img_pooled);
    auto logits = mul(matmul(tn, transpose_last2(im)), exp_op(t.params.get("log_t")));
    std::vector<int> diag(B);
    for (int i = 0; i < B; ++i) diag[i] = i;
    auto l1 = cross_entropy_logits(logits, diag);
    auto l2 = cross_entropy_logits(transpose_last2(logits), diag);
    return scale(add(l1, l2), 0.5);
}

// ---------------------------------------------------------------------------
// student: mirrors the teacher text tower + affine projection head

template <typename S>
struct StudentEncoder {
    ParamSet<S> params;
    TransformerConfig cfg;

    static StudentEncoder make(uint64_t seed) {
        StudentEncoder s;
        auto rng = Rng::stream(seed, "student_init");
        add_text_tower(s.params, "txt.", tokenizer().vocab_size(), s.cfg, rng);
        // identity-initialized projection head
        auto w = Tensor<S>::zeros({s.cfg.d_model, s.cfg.d_model});
        for (int i = 0; i < s.cfg.d_model; ++i) w.data()[i * s.cfg.d_model + i] = S(1);
        s.params.add("proj.w", w);
        s.params.add("proj.b", Tensor<S>::zeros({s.cfg.d_model}));
        return s;
    }

    // warm start: copy shared names from the teacher; [CLS] row <- [TOS] row
    // so a [CLS]-led student sequence initially reproduces the teacher
    static StudentEncoder from_teacher(const ClipTeacher<S>& t, uint64_t seed) {
        StudentEncoder s = make(seed);
        for (size_t i = 0; i < s.params.size(); ++i) {
            const std::string& name = s.params.names[i];
            if (t.params.has(name)) s.params.tensors[i].data() = t.params.get(name).data();
        }
        auto& emb = s.params.get("txt.tok_emb").data();
        int d = s.cfg.d_model;
        for (int j = 0; j < d; ++j) emb[TOK_CLS * d + j] = emb[TOK_TOS * d + j];
        return s;
    }

    Tensor<S> seq(const std::vector<int>& ids_flat, int B) {
        return text_tower_forward(params, "txt.", ids_flat, B, cfg);
    }

    // [CLS] position through the projection head -> [B, D]
    Tensor<S> pooled(const Tensor<S>& seq_out) {
        return linear(params, "proj", pool_position0(seq_out));
    }
};

// ---------------------------------------------------------------------------
// plain-data encoding helpers (frozen encoders, no autodiff graph kept)

template <typename S>
EncoderOutput encode_text(StudentEncoder<S>& enc, const std::string& text) {
    auto ids = tokenizer().encode(text, TOK_CLS);
    auto s = enc.seq(ids, 1);
    auto p = enc.pooled(s);
    EncoderOutput out;
    out.d = enc.cfg.d_model;
    out.tokens.assign(s.data().begin(), s.data().end());
    out.pooled.assign(p.data().begin(), p.data().end());
    return out;
}

template <typename S>
EncoderOutput encode_text_teacher(ClipTeacher<S>& enc, const std::string& text) {
    auto ids = tokenizer().encode(text, TOK_TOS);
    auto s = enc.text_seq(ids, 1);
    auto p = pool_position0(s);
    EncoderOutput out;
    out.d = enc.cfg.d_model;
    out.tokens.assign(s.data().begin(), s.data().end());
    out.pooled.assign(p.data().begin(), p.data().end());
    return out;
}

inline double cosine(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size() || a.empty()) throw std::invalid_argument("cosine: size mismatch");
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += static_cast<double>(a[i]) * b[i];
        na += static_cast<double>(a[i]) * a[i];
        nb += static_cast<double>(b[i]) * b[i];
    }
    if (na <= 0 || nb <= 0) throw NumericError("cosine: zero-norm embedding");
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

// cosine similarity between the teacher's image embedding and a pooled text
// embedding (teacher [TOS] or projected student [CLS] — both live in the
// teacher's embedding space)
template <typename S>
double clip_sim(ClipTeacher<S>& teacher, const Image& img, const std::vector<float>& text_pooled) {
    auto patches = images_to_patches<S>({img});
    auto ip = teacher.image_pooled(patches);
    std::vector<float> iv(ip.data().begin(), ip.data().end());
    return cosine(iv, text_pooled);
}

}  // namespace polydiff
