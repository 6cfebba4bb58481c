#pragma once
// Evaluation harness: checkpoint loading for generation, prompt-conditioned
// sampling, per-language report assembly (FID / IS / CLIP Sim / attribute
// accuracy / exclusive-concept motif detection), guidance-scale sweeps, and
// the stage-ablation comparison.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "polydiff/checkpoint.hpp"
#include "polydiff/classifier.hpp"
#include "polydiff/diffusion.hpp"
#include "polydiff/encoder.hpp"
#include "polydiff/errors.hpp"
#include "polydiff/latent_codec.hpp"
#include "polydiff/metrics.hpp"
#include "polydiff/scene.hpp"

namespace polydiff {

// ---------------------------------------------------------------------------
// checkpoint loading into ready-to-run (frozen) modules

namespace detail {

template <typename S>
void expect_model(const CheckpointState<S>& st, const std::string& model,
                  const std::filesystem::path& path) {
    if (st.manifest.model != model)
        throw ConfigError(path.string() + " holds model '" + st.manifest.model + "', expected '" +
                          model + "'");
}

}  // namespace detail

inline StudentEncoder<float> load_student_checkpoint(const std::filesystem::path& path) {
    auto st = load_checkpoint<float>(path);
    detail::expect_model(st, "student", path);
    auto enc = StudentEncoder<float>::make(0);
    apply_params(st, enc.params);
    enc.params.set_trainable([](const std::string&) { return false; });
    return enc;
}

inline ClipTeacher<float> load_teacher_checkpoint(const std::filesystem::path& path) {
    auto st = load_checkpoint<float>(path);
    detail::expect_model(st, "teacher", path);
    auto t = ClipTeacher<float>::make(0);
    apply_params(st, t.params);
    t.params.set_trainable([](const std::string&) { return false; });
    return t;
}

inline CodecF load_codec_checkpoint(const std::filesystem::path& path) {
    auto st = load_checkpoint<float>(path);
    detail::expect_model(st, "codec", path);
    auto codec = CodecF::make(4, 4, 0);
    apply_params(st, codec.params);
    codec.freeze();
    return codec;
}

// Overwrites parameters with their EMA shadows where the checkpoint carries
// them. Returns how many parameters took an EMA value.
template <typename S>
int apply_ema_weights(const CheckpointState<S>& st, ParamSet<S>& params) {
    int applied = 0;
    for (size_t i = 0; i < params.size(); ++i) {
        const auto* v = st.find("ema", params.names[i]);
        if (!v) continue;
        auto& dst = params.tensors[i].data();
        if (v->size() != dst.size())
            throw ConfigError("ema entry shape mismatch for " + params.names[i]);
        std::copy(v->begin(), v->end(), dst.begin());
        ++applied;
    }
    return applied;
}

struct DenoiserLoad {
    DenoiserF denoiser;
    int stage = 0;
    int64_t step = 0;
    bool ema_used = false;
};

inline DenoiserLoad load_denoiser_checkpoint(const std::filesystem::path& path,
                                             bool use_ema = true) {
    auto st = load_checkpoint<float>(path);
    detail::expect_model(st, "denoiser", path);
    DenoiserLoad out{DenoiserF::make(DenoiserConfig{}, 0), st.manifest.stage, st.manifest.step,
                     false};
    apply_params(st, out.denoiser.params);
    if (use_ema) out.ema_used = apply_ema_weights(st, out.denoiser.params) > 0;
    out.denoiser.freeze();
    return out;
}

// ---------------------------------------------------------------------------
// generation bundle

struct GenModel {
    StudentEncoder<float> student;
    CodecF codec;
    DenoiserF denoiser;
    NoiseSchedule sched = NoiseSchedule::linear(1000);
    int stage = 0;
    int64_t step = 0;
    bool ema_used = false;

    int resolution() const { return stage == 1 ? 16 : 32; }
    int grid() const { return resolution() / codec.p; }
};

// A generation run directory is self-contained: student.pdc, codec.pdc,
// denoiser.pdc. EMA weights are used for sampling/eval when present.
inline GenModel load_gen_model(const std::filesystem::path& run_dir, bool use_ema = true) {
    GenModel m{load_student_checkpoint(run_dir / "student.pdc"),
               load_codec_checkpoint(run_dir / "codec.pdc"),
               DenoiserF::make(DenoiserConfig{}, 0)};
    auto dl = load_denoiser_checkpoint(run_dir / "denoiser.pdc", use_ema);
    m.denoiser = std::move(dl.denoiser);
    m.stage = dl.stage;
    m.step = dl.step;
    m.ema_used = dl.ema_used;
    if (m.stage != 1 && m.stage != 2)
        throw ConfigError("denoiser checkpoint has stage " + std::to_string(m.stage) +
                          ", expected 1 or 2");
    return m;
}

inline TensorF text_condition(StudentEncoder<float>& student, const std::string& text) {
    auto enc = encode_text(student, text);
    return TensorF::from_data({1, L_MAX, enc.d}, std::vector<float>(enc.tokens));
}

// per-image sampling seed: decorrelated across indices, stable across runs
inline uint64_t derive_seed(uint64_t base, uint64_t index) {
    return fnv1a64("sample/" + std::to_string(index)) ^ base;
}

// 16x16 stage-1 outputs are upsampled so the 32x32 metric stack applies
inline Image eval_view(const Image& img) {
    return img.w == IMG_SIDE / 2 ? upsample2x_nearest(img) : img;
}

struct GenOutput {
    std::vector<Image> images;       // as sampled (16x16 for stage 1)
    std::vector<uint64_t> seeds;     // per-image sampler seeds
};

inline GenOutput generate_images(GenModel& m, const std::vector<std::string>& prompts,
                                 const SamplerConfig& base, uint64_t seed_base) {
    GenOutput out;
    auto null_cond = text_condition(m.student, "");
    for (size_t i = 0; i < prompts.size(); ++i) {
        auto cond = text_condition(m.student, prompts[i]);
        SamplerConfig cfg = base;
        cfg.seed = derive_seed(seed_base, i);
        auto res = ddim_sample(m.denoiser, cond, null_cond, m.codec, m.sched, cfg, m.grid());
        out.images.push_back(std::move(res.image));
        out.seeds.push_back(cfg.seed);
    }
    return out;
}

// ---------------------------------------------------------------------------
// embedding functions for CLIP Sim (student text x teacher image, both in the
// teacher's embedding space via distillation)

inline ImageEmbedFn teacher_image_embed(ClipTeacher<float>& teacher) {
    return [&teacher](const Image& img) {
        auto ip = teacher.image_pooled(images_to_patches<float>({eval_view(img)}));
        return std::vector<float>(ip.data());
    };
}

inline TextEmbedFn student_text_embed(StudentEncoder<float>& student) {
    return [&student](const std::string& text, int) {
        return encode_text(student, text).pooled;
    };
}

// ---------------------------------------------------------------------------
// evaluation report (per-language FID / IS / CLIP Sim / attribute accuracy)

struct EvalLangRow {
    int lang = 0;
    std::string lang_name;
    int n = 0;              // generated samples behind accuracy/IS/CLIP Sim
    int n_real = 0;         // real samples behind the FID reference
    double fid = 0;
    double is_score = 0;
    double clip_sim = 0;
    double shape_acc = 0, fg_acc = 0, bg_acc = 0, joint_acc = 0;
    int n_owned = 0;        // owned-concept prompts scored for motif detection
    double motif_owned = 0;
    int n_lossy = 0;        // same scenes re-captioned in a non-owning language
    double motif_lossy = 0;
};

struct EvalReport {
    std::string run_id;
    int stage = 0;
    int64_t step = 0;
    std::vector<EvalLangRow> rows;
    EvalLangRow overall;  // lang = -1, aggregated over all languages
    double fid_noise = 0; // uniform-noise floor against the same real features
    std::string config_echo;
};

struct EvalConfig {
    int prompts_per_language = 50;
    SamplerConfig sampler;   // num_steps 50, guidance 9.0, eta 0
    uint64_t seed = 7;
    bool include_lossy = true;
};

namespace detail {

inline double ratio(double num, int den) { return den > 0 ? num / den : 0.0; }

}  // namespace detail

// prompts: make_concept_prompts output (or compatible). real_images: held-out
// renders for the FID reference (>= CLS_FEAT_DIM + 1 of them).
inline EvalReport evaluate_model(GenModel& m, AttrClassifier<float>& clf,
                                 ClipTeacher<float>& teacher,
                                 const std::vector<ConceptPrompt>& prompts,
                                 const std::vector<Image>& real_images, const EvalConfig& cfg) {
    clf.require_trained("evaluate_model");
    if (prompts.empty()) throw std::invalid_argument("evaluate_model: empty prompt set");
    if (static_cast<int>(real_images.size()) < CLS_FEAT_DIM + 1)
        throw NumericError("evaluate_model: need at least " + std::to_string(CLS_FEAT_DIM + 1) +
                           " real images for FID, got " + std::to_string(real_images.size()));

    std::vector<std::string> texts;
    texts.reserve(prompts.size());
    for (const auto& p : prompts) texts.push_back(p.text);
    auto gen = generate_images(m, texts, cfg.sampler, cfg.seed);
    std::vector<Image> views;
    views.reserve(gen.images.size());
    for (const auto& img : gen.images) views.push_back(eval_view(img));
    auto preds = classify(clf, views);

    // the lossy arm: every owned-concept prompt re-captioned in a language
    // that does not own the motif (English owns none)
    std::vector<size_t> owned_idx;
    for (size_t i = 0; i < prompts.size(); ++i)
        if (prompts[i].owned_concept && prompts[i].scene.motif >= 0) owned_idx.push_back(i);
    std::vector<AttrPrediction> lossy_preds;
    if (cfg.include_lossy && !owned_idx.empty()) {
        const Language& neutral = languages()[0];
        std::vector<std::string> lossy_texts;
        for (size_t i : owned_idx) lossy_texts.push_back(caption(prompts[i].scene, neutral));
        auto lossy = generate_images(m, lossy_texts, cfg.sampler, cfg.seed ^ 0x9e3779b9ull);
        std::vector<Image> lossy_views;
        for (const auto& img : lossy.images) lossy_views.push_back(eval_view(img));
        lossy_preds = classify(clf, lossy_views);
    }

    auto real_feats = FeatureSet::from_floats("real", CLS_FEAT_DIM,
                                              classifier_features(clf, real_images));
    auto image_embed = teacher_image_embed(teacher);
    auto text_embed = student_text_embed(m.student);

    EvalReport rep;
    rep.stage = m.stage;
    rep.step = m.step;

    // uniform-noise floor: the FID a structureless baseline scores against the
    // same real features; a trained model must sit far below it
    {
        int n_noise = std::max(CLS_FEAT_DIM + 1, static_cast<int>(views.size()));
        auto nrng = Rng::stream(cfg.seed, "fid_noise");
        std::vector<Image> noise_imgs;
        noise_imgs.reserve(n_noise);
        for (int i = 0; i < n_noise; ++i) {
            Image img(IMG_SIDE, IMG_SIDE);
            for (auto& v : img.data) v = float(nrng.uniform(-1.0, 1.0));
            noise_imgs.push_back(std::move(img));
        }
        auto noise_feats =
            FeatureSet::from_floats("noise", CLS_FEAT_DIM, classifier_features(clf, noise_imgs));
        rep.fid_noise = fid(noise_feats, real_feats);
    }

    auto build_row = [&](int lang_filter) {
        EvalLangRow row;
        row.lang = lang_filter;
        std::vector<Image> imgs;
        std::vector<std::string> row_texts;
        std::vector<int> row_langs;
        std::vector<SceneSpec> scenes;
        for (size_t i = 0; i < prompts.size(); ++i) {
            if (lang_filter >= 0 && prompts[i].lang != lang_filter) continue;
            imgs.push_back(views[i]);
            row_texts.push_back(prompts[i].text);
            row_langs.push_back(prompts[i].lang);
            scenes.push_back(prompts[i].scene);
        }
        if (imgs.empty()) throw std::invalid_argument("evaluate_model: language with no prompts");
        row.n = static_cast<int>(imgs.size());
        row.n_real = static_cast<int>(real_images.size());

        auto acc = attribute_accuracy(clf, imgs, scenes);
        row.shape_acc = acc.shape;
        row.fg_acc = acc.fg;
        row.bg_acc = acc.bg;
        row.joint_acc = acc.joint;
        row.is_score = inception_score(shape_posteriors(clf, imgs));
        row.clip_sim = clip_sim_eval(imgs, row_texts, row_langs, image_embed, text_embed).mean;
        if (row.n >= CLS_FEAT_DIM + 1) {
            auto gen_feats = FeatureSet::from_floats("gen", CLS_FEAT_DIM,
                                                     classifier_features(clf, imgs));
            row.fid = fid(gen_feats, real_feats);
        } else {
            row.fid = -1;  // insufficient samples for a nondegenerate covariance
        }

        double owned_hits = 0, lossy_hits = 0;
        for (size_t k = 0; k < owned_idx.size(); ++k) {
            size_t i = owned_idx[k];
            if (lang_filter >= 0 && prompts[i].lang != lang_filter) continue;
            int want = prompts[i].scene.motif + 1;
            ++row.n_owned;
            owned_hits += preds[i].motif == want;
            if (!lossy_preds.empty()) {
                ++row.n_lossy;
                lossy_hits += lossy_preds[k].motif == want;
            }
        }
        row.motif_owned = detail::ratio(owned_hits, row.n_owned);
        row.motif_lossy = detail::ratio(lossy_hits, row.n_lossy);
        return row;
    };

    for (const auto& lang : languages()) {
        auto row = build_row(lang.id);
        row.lang_name = lang.name;
        rep.rows.push_back(row);
    }
    rep.overall = build_row(-1);
    rep.overall.lang_name = "all";
    return rep;
}

inline nlohmann::json eval_row_json(const EvalLangRow& r) {
    return {{"lang", r.lang},          {"lang_name", r.lang_name},
            {"n", r.n},                {"n_real", r.n_real},
            {"fid", r.fid},            {"is", r.is_score},
            {"clip_sim", r.clip_sim},  {"shape_acc", r.shape_acc},
            {"fg_acc", r.fg_acc},      {"bg_acc", r.bg_acc},
            {"joint_acc", r.joint_acc},{"n_owned", r.n_owned},
            {"motif_owned", r.motif_owned}, {"n_lossy", r.n_lossy},
            {"motif_lossy", r.motif_lossy}};
}

inline void save_eval_report(const std::filesystem::path& json_path,
                             const std::filesystem::path& csv_path, const EvalReport& rep) {
    nlohmann::json j{{"run_id", rep.run_id}, {"stage", rep.stage}, {"step", rep.step},
                     {"fid_noise", rep.fid_noise}, {"config", rep.config_echo}};
    j["rows"] = nlohmann::json::array();
    for (const auto& r : rep.rows) j["rows"].push_back(eval_row_json(r));
    j["overall"] = eval_row_json(rep.overall);
    std::ofstream jf(json_path, std::ios::binary);
    if (!jf) throw MissingFileError("cannot write " + json_path.string());
    jf << j.dump(2) << "\n";

    std::ofstream cf(csv_path, std::ios::binary);
    if (!cf) throw MissingFileError("cannot write " + csv_path.string());
    cf << "lang,lang_name,n,n_real,fid,is,clip_sim,shape_acc,fg_acc,bg_acc,joint_acc,"
          "n_owned,motif_owned,n_lossy,motif_lossy\n";
    auto emit = [&cf](const EvalLangRow& r) {
        char buf[320];
        std::snprintf(buf, sizeof buf,
                      "%d,%s,%d,%d,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%.6g,%d,%.6g,%d,%.6g\n", r.lang,
                      r.lang_name.c_str(), r.n, r.n_real, r.fid, r.is_score, r.clip_sim,
                      r.shape_acc, r.fg_acc, r.bg_acc, r.joint_acc, r.n_owned, r.motif_owned,
                      r.n_lossy, r.motif_lossy);
        cf << buf;
    };
    for (const auto& r : rep.rows) emit(r);
    emit(rep.overall);
}

// ---------------------------------------------------------------------------
// guidance sweep (Appendix C analog)

struct SweepRow {
    double scale = 0;
    double joint_acc = 0;
    double clip_sim = 0;
    int n = 0;
};

inline std::vector<double> default_sweep_scales() { return {1.5, 3.0, 5.0, 7.0, 9.0}; }

// Fixed prompts and per-prompt seeds across scales, so rows differ only in
// the guidance strength.
inline std::vector<SweepRow> guidance_sweep(GenModel& m, AttrClassifier<float>& clf,
                                            ClipTeacher<float>& teacher,
                                            const std::vector<ConceptPrompt>& prompts,
                                            const std::vector<double>& scales,
                                            const SamplerConfig& base, uint64_t seed) {
    if (scales.empty()) throw ConfigError("guidance_sweep: empty scale list");
    if (prompts.empty()) throw std::invalid_argument("guidance_sweep: empty prompt set");
    clf.require_trained("guidance_sweep");
    std::vector<std::string> texts;
    std::vector<std::string> row_texts;
    std::vector<int> row_langs;
    std::vector<SceneSpec> scenes;
    for (const auto& p : prompts) {
        texts.push_back(p.text);
        row_langs.push_back(p.lang);
        scenes.push_back(p.scene);
    }
    auto image_embed = teacher_image_embed(teacher);
    auto text_embed = student_text_embed(m.student);

    std::vector<SweepRow> rows;
    for (double scale : scales) {
        SamplerConfig cfg = base;
        cfg.guidance = scale;
        auto gen = generate_images(m, texts, cfg, seed);
        std::vector<Image> views;
        for (const auto& img : gen.images) views.push_back(eval_view(img));
        SweepRow row;
        row.scale = scale;
        row.n = static_cast<int>(views.size());
        row.joint_acc = attribute_accuracy(clf, views, scenes).joint;
        row.clip_sim = clip_sim_eval(views, texts, row_langs, image_embed, text_embed).mean;
        rows.push_back(row);
    }
    return rows;
}

inline void save_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw MissingFileError("cannot write " + path.string());
    f << "scale,joint_acc,clip_sim,n\n";
    for (const auto& r : rows) {
        char buf[128];
        std::snprintf(buf, sizeof buf, "%.6g,%.6g,%.6g,%d\n", r.scale, r.joint_acc, r.clip_sim,
                      r.n);
        f << buf;
    }
}

// trained metric backbone with the default recipe; deterministic in `seed`
inline AttrClassifier<float> make_eval_classifier(uint64_t seed = 4) {
    auto clf = AttrClassifier<float>::make(seed);
    ClassifierTrainConfig cfg;
    cfg.seed = seed;
    train_classifier(clf, cfg);
    return clf;
}

}  // namespace polydiff
