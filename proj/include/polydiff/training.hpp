#pragma once
// Two-stage training orchestration: stage-1 concept alignment (cross-attention
// K/V only, low resolution) and stage-2 quality improvement (full denoiser,
// high resolution, seeded text dropout), with checkpoint resume continuity.
//
// Every stochastic choice (batch composition, caption language, timestep,
// noise, text dropout) is a pure function of (seed, absolute step, example
// slot), so "train k+m steps" and "train k, save, resume, train m" produce
// bitwise-identical parameters.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>
#include <string>
#include <vector>

#include "polydiff/checkpoint.hpp"
#include "polydiff/corpus.hpp"
#include "polydiff/denoiser.hpp"
#include "polydiff/diffusion.hpp"
#include "polydiff/encoder.hpp"
#include "polydiff/errors.hpp"
#include "polydiff/latent_codec.hpp"
#include "polydiff/optim.hpp"

namespace polydiff {

// Toy budgets are the paper's schedule scaled by roughly 1/100:
//   stage 1: 3,000 steps (paper 330,000), batch 64 (paper 3,072)
//   stage 2: 3,000 steps (paper 270,000 + 150,000), batch 64 (paper 3,840)
//   warmup 100 (paper 10,000), lr 1e-4 (paper), EMA decay 0.9999 (paper)
//   resolution 16 -> 32 (paper 256 -> 512)
struct StageConfig {
    int stage = 1;              // 1 | 2
    int resolution = 16;        // stage 1: 16, stage 2: 32
    int steps = 3000;
    int batch = 64;
    double lr = 1e-4;
    int warmup = 100;
    double ema_decay = 0.9999;
    double text_dropout = 0.0;  // stage 2 default 0.10
    std::string selector = "kv_only";  // kv_only | full_denoiser
    uint64_t seed = 5;
    int T = 1000;
    bool override_config_hash = false;  // accept a resume checkpoint with a different hash

    static StageConfig stage1_defaults() { return StageConfig{}; }

    static StageConfig stage2_defaults() {
        StageConfig c;
        c.stage = 2;
        c.resolution = 32;
        c.text_dropout = 0.10;
        c.selector = "full_denoiser";
        return c;
    }

    void validate() const {
        if (stage != 1 && stage != 2) throw ConfigError("StageConfig: stage must be 1 or 2");
        if (steps < 0 || batch < 1) throw ConfigError("StageConfig: bad steps/batch");
        if (!(lr > 0) || warmup < 0) throw ConfigError("StageConfig: bad lr/warmup");
        if (!(ema_decay > 0 && ema_decay < 1)) throw ConfigError("StageConfig: bad ema_decay");
        int want_res = stage == 1 ? 16 : 32;
        if (resolution != want_res)
            throw ConfigError("StageConfig: resolution mismatch — stage " + std::to_string(stage) +
                              " trains at " + std::to_string(want_res) + ", got " +
                              std::to_string(resolution));
        if (stage == 1) {
            if (selector != "kv_only")
                throw ConfigError("StageConfig: stage 1 requires selector kv_only");
            if (text_dropout != 0.0)
                throw ConfigError("StageConfig: stage 1 requires text_dropout 0");
        } else {
            if (selector != "full_denoiser")
                throw ConfigError("StageConfig: stage 2 requires selector full_denoiser");
            // 0 is allowed for the two-phase mode's first round
            if (!(text_dropout >= 0.0 && text_dropout <= 0.5))
                throw ConfigError("StageConfig: stage 2 text_dropout must be in [0, 0.5]");
        }
    }

    // Structural fields only: steps and text_dropout are excluded so a run can
    // be extended, and so the paper's second stage-2 round (same config, drop
    // rate switched on) resumes cleanly.
    std::string config_hash() const {
        std::string s = "stage=" + std::to_string(stage) + ";res=" + std::to_string(resolution) +
                        ";batch=" + std::to_string(batch) + ";lr=" + std::to_string(lr) +
                        ";warmup=" + std::to_string(warmup) +
                        ";ema=" + std::to_string(ema_decay) + ";sel=" + selector +
                        ";seed=" + std::to_string(seed) + ";T=" + std::to_string(T);
        char buf[17];
        std::snprintf(buf, sizeof buf, "%016llx",
                      static_cast<unsigned long long>(fnv1a64(s)));
        return buf;
    }
};

// ---------------------------------------------------------------------------
// dataset preparation: frozen encoders run once, training reads caches

template <typename S>
struct PreparedData {
    int n = 0;         // examples
    int n_langs = 0;   // captions per example
    int tokens = 0;    // latent tokens per example at this resolution
    int c_lat = 0;
    int text_d = 0;
    std::vector<std::vector<S>> latents;            // [n] rows of tokens*c_lat
    std::vector<std::vector<std::vector<S>>> text;  // [n][lang] rows of L_MAX*text_d
    std::vector<S> null_text;                       // student encoding of empty text
};

template <typename S>
PreparedData<S> prepare_training_data(const std::vector<Record>& records,
                                      StudentEncoder<S>& student, LatentCodec<S>& codec,
                                      int resolution) {
    if (records.empty()) throw ConfigError("prepare_training_data: empty dataset");
    if (resolution != 16 && resolution != 32)
        throw ConfigError("prepare_training_data: resolution must be 16 or 32, got " +
                          std::to_string(resolution));
    PreparedData<S> d;
    d.n = static_cast<int>(records.size());
    d.n_langs = static_cast<int>(records.front().captions.size());
    d.c_lat = codec.c_lat;
    int side = resolution / codec.p;
    d.tokens = side * side;
    d.text_d = student.cfg.d_model;

    // latents in chunks through the frozen codec
    d.latents.reserve(d.n);
    const int CHUNK = 64;
    for (int base = 0; base < d.n; base += CHUNK) {
        int nb = std::min(CHUNK, d.n - base);
        std::vector<Image> imgs;
        imgs.reserve(nb);
        for (int i = 0; i < nb; ++i) {
            const Image& im = records[base + i].image;
            if (im.w != IMG_SIDE || im.h != IMG_SIDE)
                throw ConfigError("prepare_training_data: corpus image is not 32x32");
            imgs.push_back(resolution == 32 ? im : downsample2x(im));
        }
        auto z = codec.encode(images_to_tensor<S>(imgs));
        size_t row = static_cast<size_t>(d.tokens) * d.c_lat;
        for (int i = 0; i < nb; ++i)
            d.latents.emplace_back(z.data().begin() + i * row, z.data().begin() + (i + 1) * row);
    }

    // caption encodings through the frozen student
    d.text.reserve(d.n);
    for (const auto& r : records) {
        if (static_cast<int>(r.captions.size()) != d.n_langs)
            throw ConfigError("prepare_training_data: ragged caption map");
        std::vector<std::vector<S>> per_lang;
        per_lang.reserve(d.n_langs);
        for (const auto& [lang, text] : r.captions) {
            auto enc = encode_text(student, text);
            per_lang.emplace_back(enc.tokens.begin(), enc.tokens.end());
        }
        d.text.push_back(std::move(per_lang));
    }
    auto null_enc = encode_text(student, "");
    d.null_text.assign(null_enc.tokens.begin(), null_enc.tokens.end());
    return d;
}

// ---------------------------------------------------------------------------
// training session

struct StepLog {
    int64_t step = 0;  // 1-based count of completed steps
    double loss = 0, lr = 0, ema_gap = 0;
};

struct TrainReport {
    std::vector<StepLog> log;
    int64_t start_step = 0, end_step = 0;
    std::string selector_used;
    bool resumed = false;     // continued a same-stage run (optimizer restored)
    bool warm_start = false;  // initialized from a previous stage's parameters
    int64_t dropout_events = 0, dropout_draws = 0;

    double smoothed_loss_at(int64_t step, int window = 50) const {
        double sum = 0;
        int count = 0;
        for (const auto& row : log)
            if (row.step > step - window && row.step <= step) {
                sum += row.loss;
                ++count;
            }
        if (count == 0) throw ConfigError("smoothed_loss_at: no logged steps near " +
                                          std::to_string(step));
        return sum / count;
    }
};

inline void save_metrics_csv(const std::filesystem::path& path, const std::vector<StepLog>& log) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw MissingFileError("save_metrics_csv: cannot open " + path.string());
    f << "step,loss,lr,ema_gap\n";
    for (const auto& row : log) {
        char buf[160];
        std::snprintf(buf, sizeof buf, "%lld,%.8g,%.8g,%.8g\n",
                      static_cast<long long>(row.step), row.loss, row.lr, row.ema_gap);
        f << buf;
    }
}

namespace detail {

template <typename S>
uint64_t hash_of_names(const ParamSet<S>& ps, const std::set<std::string>& names) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < ps.size(); ++i) {
        if (!names.count(ps.names[i])) continue;
        h ^= fnv1a64(ps.names[i]);
        h *= 0x100000001b3ull;
        const auto& data = ps.tensors[i].data();
        const unsigned char* bytes = reinterpret_cast<const unsigned char*>(data.data());
        for (size_t b = 0; b < data.size() * sizeof(S); ++b) {
            h ^= bytes[b];
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

}  // namespace detail

// Core loop shared by both stages. Loads source_checkpoint when given:
// same-stage checkpoints resume (optimizer, EMA and step restored), and a
// stage-1 checkpoint feeding a stage-2 config warm-starts parameters with a
// fresh optimizer. Saves the trained denoiser (params + optimizer + EMA) to
// out_checkpoint when given.
template <typename S>
TrainReport run_stage(const StageConfig& cfg, const std::vector<Record>& dataset,
                      StudentEncoder<S>& student, LatentCodec<S>& codec, Denoiser<S>& dn,
                      const std::filesystem::path& out_checkpoint = {},
                      const std::filesystem::path& source_checkpoint = {},
                      const std::function<void(const StepLog&)>& on_step = {}) {
    cfg.validate();
    if (!student.params.trainable_names().empty())
        throw ConfigError("run_stage: student encoder must be frozen");
    if (!codec.params.trainable_names().empty())
        throw ConfigError("run_stage: codec must be frozen");

    TrainReport rep;
    rep.selector_used = cfg.selector;

    // trainable set
    auto [kv_names, other_names] = param_partition(dn.params);
    std::set<std::string> kv_set(kv_names.begin(), kv_names.end());
    std::set<std::string> all_set(kv_names.begin(), kv_names.end());
    all_set.insert(other_names.begin(), other_names.end());
    if (cfg.selector == "kv_only")
        dn.params.set_trainable([&](const std::string& n) { return kv_set.count(n) > 0; });
    else
        dn.params.set_trainable([](const std::string&) { return true; });
    std::set<std::string> frozen_set;
    for (const auto& n : all_set)
        if (cfg.selector == "kv_only" && !kv_set.count(n)) frozen_set.insert(n);

    AdamWConfig oc;
    oc.lr = cfg.lr;
    oc.warmup_steps = cfg.warmup;
    AdamW<S> opt(dn.params, oc);
    Ema<S> ema(dn.params, cfg.ema_decay);

    int64_t start_step = 0;
    if (!source_checkpoint.empty()) {
        auto st = load_checkpoint<S>(source_checkpoint);
        if (st.manifest.model != "denoiser")
            throw ConfigError("run_stage: checkpoint holds model '" + st.manifest.model +
                              "', expected denoiser");
        if (st.manifest.stage > cfg.stage)
            throw StageMismatchError("run_stage: cannot load a stage-" +
                                     std::to_string(st.manifest.stage) +
                                     " checkpoint into stage " + std::to_string(cfg.stage));
        apply_params(st, dn.params);
        if (st.manifest.stage == cfg.stage) {
            if (st.manifest.config_hash != cfg.config_hash() && !cfg.override_config_hash)
                throw ConfigError("run_stage: config hash mismatch (checkpoint " +
                                  st.manifest.config_hash + " vs config " + cfg.config_hash() +
                                  "); pass override to resume anyway");
            apply_opt_state(st, dn.params, opt);
            apply_ema(st, dn.params, ema);
            start_step = st.manifest.step;
            rep.resumed = true;
        } else {
            // warm start from the previous stage: fresh optimizer and EMA
            for (size_t i = 0; i < dn.params.size(); ++i)
                ema.shadow()[i] = dn.params.tensors[i].data();
            rep.warm_start = true;
        }
    }
    if (start_step > cfg.steps)
        throw ConfigError("run_stage: checkpoint already at step " + std::to_string(start_step) +
                          " beyond configured steps " + std::to_string(cfg.steps));

    auto data = prepare_training_data(dataset, student, codec, cfg.resolution);
    NoiseSchedule sched = NoiseSchedule::linear(cfg.T);

    // belt-and-suspenders freeze guards
    uint64_t frozen_before = detail::hash_of_names(dn.params, frozen_set);
    uint64_t student_before = params_hash(student.params);
    uint64_t codec_before = params_hash(codec.params);

    bool any_trainable = !dn.params.trainable_names().empty();
    rep.start_step = start_step;

    for (int64_t step = start_step; step < cfg.steps; ++step) {
        // batch assembly: every draw keyed to the absolute step
        Rng br = Rng::stream(cfg.seed, "batch", static_cast<uint64_t>(step));
        Rng drop = Rng::stream(cfg.seed, "text_dropout", static_cast<uint64_t>(step));
        auto z0 = Tensor<S>::zeros({cfg.batch, data.tokens, data.c_lat});
        auto c = Tensor<S>::zeros({cfg.batch, L_MAX, data.text_d});
        size_t zrow = static_cast<size_t>(data.tokens) * data.c_lat;
        size_t trow = static_cast<size_t>(L_MAX) * data.text_d;
        for (int b = 0; b < cfg.batch; ++b) {
            int idx = static_cast<int>(br.below(static_cast<uint64_t>(data.n)));
            int lang = static_cast<int>(br.below(static_cast<uint64_t>(data.n_langs)));
            std::copy(data.latents[idx].begin(), data.latents[idx].end(),
                      z0.data().begin() + b * zrow);
            ++rep.dropout_draws;
            bool dropped = cfg.text_dropout > 0 && drop.uniform() < cfg.text_dropout;
            if (dropped) ++rep.dropout_events;
            const auto& src = dropped ? data.null_text : data.text[idx][lang];
            std::copy(src.begin(), src.end(), c.data().begin() + b * trow);
        }

        auto loss = diffusion_loss(dn, z0, c, sched, cfg.seed, step);
        if (any_trainable) {
            dn.params.zero_grad();
            loss.backward();
            opt.step();
            ema.update(dn.params);
        }
        StepLog row{step + 1, double(loss.data()[0]),
                    any_trainable ? opt.last_lr() : 0.0, ema.gap(dn.params)};
        rep.log.push_back(row);
        if (on_step) on_step(row);
    }
    rep.end_step = cfg.steps;

    if (detail::hash_of_names(dn.params, frozen_set) != frozen_before)
        throw NumericError("run_stage: frozen denoiser parameters drifted (freeze invariant)");
    if (params_hash(student.params) != student_before)
        throw NumericError("run_stage: student encoder parameters drifted (freeze invariant)");
    if (params_hash(codec.params) != codec_before)
        throw NumericError("run_stage: codec parameters drifted (freeze invariant)");

    if (!out_checkpoint.empty()) {
        std::filesystem::create_directories(out_checkpoint.parent_path());
        save_checkpoint(out_checkpoint, "denoiser", cfg.stage, cfg.steps, cfg.config_hash(),
                        dn.params, &opt, &ema);
    }
    return rep;
}

template <typename S>
TrainReport train_stage1(const StageConfig& cfg, const std::vector<Record>& dataset,
                         StudentEncoder<S>& student, LatentCodec<S>& codec, Denoiser<S>& dn,
                         const std::filesystem::path& out_checkpoint = {},
                         const std::filesystem::path& source_checkpoint = {},
                         const std::function<void(const StepLog&)>& on_step = {}) {
    if (cfg.stage != 1) throw ConfigError("train_stage1: config is not stage 1");
    return run_stage(cfg, dataset, student, codec, dn, out_checkpoint, source_checkpoint, on_step);
}

template <typename S>
TrainReport train_stage2(const StageConfig& cfg, const std::vector<Record>& dataset,
                         StudentEncoder<S>& student, LatentCodec<S>& codec, Denoiser<S>& dn,
                         const std::filesystem::path& out_checkpoint = {},
                         const std::filesystem::path& source_checkpoint = {},
                         const std::function<void(const StepLog&)>& on_step = {}) {
    if (cfg.stage != 2) throw ConfigError("train_stage2: config is not stage 2");
    return run_stage(cfg, dataset, student, codec, dn, out_checkpoint, source_checkpoint, on_step);
}

}  // namespace polydiff
