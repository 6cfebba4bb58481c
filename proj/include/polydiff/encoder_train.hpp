#pragma once

#include <functional>
#include <vector>

#include "polydiff/encoder.hpp"
#include "polydiff/render.hpp"

// Teacher CLIP contrastive training and teacher->student knowledge
// distillation. Both operate on synthetic scenes sampled on the fly; all
// randomness is stream-seeded so runs are bitwise reproducible.

namespace polydiff {

struct ClipTrainConfig {
    int steps = 2000;
    int batch = 32;
    int n_train = 768;
    int n_heldout = 128;
    double lr = 1e-3;
    int64_t warmup = 50;
    uint64_t seed = 1;
    std::function<void(int, double)> on_step;  // (step, loss) for logging
};

inline std::vector<SceneSpec> sample_scenes(int n, uint64_t seed, const std::string& tag,
                                            double motif_prob = 0.35) {
    std::vector<SceneSpec> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        auto rng = Rng::stream(seed, tag, static_cast<uint64_t>(i));
        out.push_back(random_scene(rng, motif_prob));
    }
    return out;
}

namespace detail {

// cached per-scene encoder inputs for the teacher
template <typename S>
struct ClipExample {
    std::vector<int> tos_ids;     // [TOS]-led English caption tokens
    std::vector<S> patch_rows;    // IMG_TOKENS * IMG_PATCH_DIM
};

template <typename S>
std::vector<ClipExample<S>> prep_clip_examples(const std::vector<SceneSpec>& scenes) {
    const auto& en = languages()[0];
    std::vector<ClipExample<S>> out;
    out.reserve(scenes.size());
    for (const auto& s : scenes) {
        ClipExample<S> ex;
        ex.tos_ids = tokenizer().encode(caption(s, en), TOK_TOS);
        auto t = images_to_patches<S>({render(s)});
        ex.patch_rows = t.data();
        out.push_back(std::move(ex));
    }
    return out;
}

template <typename S>
void fill_batch(const std::vector<ClipExample<S>>& exs, const std::vector<int>& idx,
                std::vector<int>& ids_flat, Tensor<S>& patches) {
    ids_flat.clear();
    S* p = patches.data().data();
    for (size_t b = 0; b < idx.size(); ++b) {
        const auto& ex = exs[idx[b]];
        ids_flat.insert(ids_flat.end(), ex.tos_ids.begin(), ex.tos_ids.end());
        std::copy(ex.patch_rows.begin(), ex.patch_rows.end(),
                  p + b * ex.patch_rows.size());
    }
}

}  // namespace detail

// held-out image<->text top-1 retrieval over `way`-sized candidate sets,
// averaged over both directions and all complete groups
template <typename S>
double clip_retrieval_accuracy(ClipTeacher<S>& t, const std::vector<SceneSpec>& scenes,
                               int way = 16) {
    auto exs = detail::prep_clip_examples<S>(scenes);
    int groups = static_cast<int>(exs.size()) / way;
    if (groups == 0) throw std::invalid_argument("clip_retrieval_accuracy: fewer scenes than way");
    int hits = 0, total = 0;
    for (int g = 0; g < groups; ++g) {
        std::vector<int> ids_flat;
        auto patches = Tensor<S>::zeros({way, IMG_TOKENS, IMG_PATCH_DIM});
        std::vector<int> idx(way);
        for (int i = 0; i < way; ++i) idx[i] = g * way + i;
        detail::fill_batch(exs, idx, ids_flat, patches);
        auto txt = pool_position0(t.text_seq(ids_flat, way));
        auto img = t.image_pooled(patches);
        auto tn = l2_normalize_rows(txt);
        auto im = l2_normalize_rows(img);
        auto sims = matmul(tn, transpose_last2(im));  // [way, way]
        const auto& d = sims.data();
        for (int r = 0; r < way; ++r) {
            int best_c = 0, best_r = 0;
            for (int c = 0; c < way; ++c) {
                if (d[r * way + c] > d[r * way + best_c]) best_c = c;
                if (d[c * way + r] > d[best_r * way + r]) best_r = c;
            }
            hits += (best_c == r) + (best_r == r);
            total += 2;
        }
    }
    return static_cast<double>(hits) / total;
}

template <typename S>
ClipTeacher<S> train_teacher(const ClipTrainConfig& cfg) {
    if (cfg.n_train < cfg.batch) throw std::invalid_argument("train_teacher: fewer pairs than batch size");
    ClipTeacher<S> t = ClipTeacher<S>::make(cfg.seed);
    auto scenes = sample_scenes(cfg.n_train, cfg.seed, "clip_train");
    auto exs = detail::prep_clip_examples<S>(scenes);

    AdamWConfig oc;
    oc.lr = cfg.lr;
    oc.warmup_steps = cfg.warmup;
    AdamW<S> opt(t.params, oc);
    for (int step = 0; step < cfg.steps; ++step) {
        auto rng = Rng::stream(cfg.seed, "clip_batch", static_cast<uint64_t>(step));
        std::vector<int> idx(cfg.batch);
        for (auto& i : idx) i = rng.below_int(cfg.n_train);
        std::vector<int> ids_flat;
        auto patches = Tensor<S>::zeros({cfg.batch, IMG_TOKENS, IMG_PATCH_DIM});
        detail::fill_batch(exs, idx, ids_flat, patches);
        auto txt = pool_position0(t.text_seq(ids_flat, cfg.batch));
        auto img = t.image_pooled(patches);
        auto loss = clip_infonce(t, txt, img);
        t.params.zero_grad();
        loss.backward();
        opt.step();
        if (cfg.on_step) cfg.on_step(step, loss.item());
    }
    return t;
}

// ---------------------------------------------------------------------------
// distillation

struct DistillConfig {
    int steps = 2000;
    int batch = 32;
    int n_train = 768;
    int n_heldout = 128;
    double lr = 1e-3;
    int64_t warmup = 50;
    uint64_t seed = 2;
    std::function<void(int, double)> on_step;
};

namespace detail {

// (student ids, teacher target) pairs for every (scene, language)
template <typename S>
struct DistillSet {
    std::vector<std::vector<int>> cls_ids;   // per (scene, lang)
    std::vector<std::vector<S>> targets;     // teacher pooled per scene (shared by langs)
    std::vector<int> scene_of;               // pair index -> scene index
    int d = 0;
};

template <typename S>
DistillSet<S> prep_distill(ClipTeacher<S>& teacher, const std::vector<SceneSpec>& scenes) {
    DistillSet<S> ds;
    ds.d = teacher.cfg.d_model;
    const auto& en = languages()[0];
    // teacher targets computed in inference mode (no graphs kept)
    teacher.params.set_trainable([](const std::string&) { return false; });
    for (const auto& s : scenes) {
        auto ids = tokenizer().encode(caption(s, en), TOK_TOS);
        auto pooled = pool_position0(teacher.text_seq(ids, 1));
        ds.targets.emplace_back(pooled.data().begin(), pooled.data().end());
    }
    teacher.params.set_trainable([](const std::string&) { return true; });
    for (size_t i = 0; i < scenes.size(); ++i)
        for (const auto& l : languages()) {
            ds.cls_ids.push_back(tokenizer().encode(caption(scenes[i], l), TOK_CLS));
            ds.scene_of.push_back(static_cast<int>(i));
        }
    return ds;
}

}  // namespace detail

// mean pooled MSE of the student against teacher targets over a DistillSet
template <typename S>
double distill_heldout_mse(StudentEncoder<S>& student, const detail::DistillSet<S>& ds) {
    student.params.set_trainable([](const std::string&) { return false; });
    double acc = 0;
    int64_t n = 0;
    int B = 32;
    for (size_t start = 0; start < ds.cls_ids.size(); start += B) {
        size_t end = std::min(ds.cls_ids.size(), start + B);
        std::vector<int> ids_flat;
        for (size_t i = start; i < end; ++i)
            ids_flat.insert(ids_flat.end(), ds.cls_ids[i].begin(), ds.cls_ids[i].end());
        auto pooled = student.pooled(student.seq(ids_flat, static_cast<int>(end - start)));
        const auto& d = pooled.data();
        for (size_t i = start; i < end; ++i) {
            const auto& tgt = ds.targets[ds.scene_of[i]];
            for (int j = 0; j < ds.d; ++j) {
                double diff = static_cast<double>(d[(i - start) * ds.d + j]) - tgt[j];
                acc += diff * diff;
                ++n;
            }
        }
    }
    student.params.set_trainable([](const std::string&) { return true; });
    return acc / static_cast<double>(n);
}

// cross-lingual retrieval: non-English captions against `way` English
// candidates in teacher space, top-1 accuracy
template <typename S>
double cross_lingual_retrieval(StudentEncoder<S>& student, const detail::DistillSet<S>& ds,
                               int n_scenes, int way = 16) {
    student.params.set_trainable([](const std::string&) { return false; });
    int groups = n_scenes / way;
    int hits = 0, total = 0;
    for (int g = 0; g < groups; ++g) {
        for (int li = 1; li < NUM_LANGUAGES; ++li) {
            std::vector<int> ids_flat;
            for (int i = 0; i < way; ++i) {
                int scene = g * way + i;
                ids_flat.insert(ids_flat.end(), ds.cls_ids[scene * NUM_LANGUAGES + li].begin(),
                                ds.cls_ids[scene * NUM_LANGUAGES + li].end());
            }
            auto pooled = student.pooled(student.seq(ids_flat, way));
            const auto& d = pooled.data();
            for (int i = 0; i < way; ++i) {
                std::vector<float> q(d.begin() + i * ds.d, d.begin() + (i + 1) * ds.d);
                int best = 0;
                double best_sim = -2;
                for (int c = 0; c < way; ++c) {
                    std::vector<float> cand(ds.targets[g * way + c].begin(),
                                            ds.targets[g * way + c].end());
                    double sim = cosine(q, cand);
                    if (sim > best_sim) {
                        best_sim = sim;
                        best = c;
                    }
                }
                hits += best == i;
                ++total;
            }
        }
    }
    student.params.set_trainable([](const std::string&) { return true; });
    return total ? static_cast<double>(hits) / total : 0.0;
}

struct DistillReport {
    double heldout_mse_before = 0;
    double heldout_mse_after = 0;
    double retrieval_top1 = 0;
};

template <typename S>
DistillReport distill(ClipTeacher<S>& teacher, StudentEncoder<S>& student, const DistillConfig& cfg) {
    uint64_t teacher_hash = params_hash(teacher.params);
    auto train_scenes = sample_scenes(cfg.n_train, cfg.seed, "distill_train");
    auto held_scenes = sample_scenes(cfg.n_heldout, cfg.seed, "distill_heldout");
    auto train_set = detail::prep_distill(teacher, train_scenes);
    auto held_set = detail::prep_distill(teacher, held_scenes);

    DistillReport rep;
    rep.heldout_mse_before = distill_heldout_mse(student, held_set);

    AdamWConfig oc;
    oc.lr = cfg.lr;
    oc.warmup_steps = cfg.warmup;
    AdamW<S> opt(student.params, oc);
    int n_pairs = static_cast<int>(train_set.cls_ids.size());
    for (int step = 0; step < cfg.steps; ++step) {
        auto rng = Rng::stream(cfg.seed, "distill_batch", static_cast<uint64_t>(step));
        std::vector<int> idx(cfg.batch);
        for (auto& i : idx) i = rng.below_int(n_pairs);
        std::vector<int> ids_flat;
        auto targets = Tensor<S>::zeros({cfg.batch, train_set.d});
        for (int b = 0; b < cfg.batch; ++b) {
            ids_flat.insert(ids_flat.end(), train_set.cls_ids[idx[b]].begin(),
                            train_set.cls_ids[idx[b]].end());
            const auto& tgt = train_set.targets[train_set.scene_of[idx[b]]];
            std::copy(tgt.begin(), tgt.end(), targets.data().begin() + b * train_set.d);
        }
        auto pooled = student.pooled(student.seq(ids_flat, cfg.batch));
        auto loss = mse(pooled, targets);
        student.params.zero_grad();
        loss.backward();
        opt.step();
        if (cfg.on_step) cfg.on_step(step, loss.item());
    }

    rep.heldout_mse_after = distill_heldout_mse(student, held_set);
    rep.retrieval_top1 = cross_lingual_retrieval(student, held_set, cfg.n_heldout);
    if (params_hash(teacher.params) != teacher_hash)
        throw NumericError("distill: teacher parameters changed (frozen-ness violated)");
    return rep;
}

}  // namespace polydiff
