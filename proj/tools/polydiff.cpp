// polydiff — single entry point for the whole pipeline. One subcommand per
// process; every subcommand writes only inside its --out run directory and
// leaves a config echo (config.txt) plus a seeds manifest (seeds.json) there.
//
// Exit codes: 0 success, 2 config error, 3 missing file, 4 stage mismatch,
// 5 numeric error, 1 anything else. Failures print exactly one line to
// stderr: error code=<n> kind=<kind> msg="..."

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <nlohmann/json.hpp>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "polydiff/checkpoint.hpp"
#include "polydiff/classifier.hpp"
#include "polydiff/config.hpp"
#include "polydiff/corpus.hpp"
#include "polydiff/diffusion.hpp"
#include "polydiff/encoder.hpp"
#include "polydiff/encoder_train.hpp"
#include "polydiff/errors.hpp"
#include "polydiff/eval.hpp"
#include "polydiff/latent_codec.hpp"
#include "polydiff/metrics.hpp"
#include "polydiff/training.hpp"

namespace fs = std::filesystem;
using namespace polydiff;
using nlohmann::json;

namespace {

// ---------------------------------------------------------------------------
// run-directory plumbing

struct RunDir {
    fs::path dir;
    RunConfig rc;
    json seeds = json::object();

    void init() {
        if (dir.empty()) throw ConfigError("--out is required");
        fs::create_directories(dir);
    }

    // config echo + seeds manifest, written on success
    void finish() const {
        rc.write_echo(dir / "config.txt");
        std::ofstream f(dir / "seeds.json", std::ios::binary);
        if (!f) throw MissingFileError("cannot write seeds manifest in " + dir.string());
        f << seeds.dump(2) << "\n";
    }
};

// config = defaults <- file <- --set pairs <- explicit flags
RunConfig layered_config(const RunConfig& defaults, const std::string& config_file,
                         const std::vector<std::string>& sets,
                         const std::vector<std::pair<std::string, std::string>>& flag_overrides,
                         const std::set<std::string>& allowed, const std::string& who) {
    RunConfig rc = defaults;
    if (!config_file.empty()) {
        RunConfig file_rc = RunConfig::from_file(config_file);
        for (const auto& [k, v] : file_rc.items) rc.set(k, v);
    }
    for (const auto& pair : sets) rc.set_pair(pair);
    for (const auto& [k, v] : flag_overrides) rc.set(k, v);
    rc.restrict_keys(allowed, who);
    return rc;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%g", v);
    return buf;
}

// Filtered corpora (marked by filter_report.json) contribute only kept
// records; raw gen-data output is used whole.
std::vector<Record> load_training_records(const fs::path& dir) {
    auto records = load_corpus(dir);
    if (!fs::exists(dir / "filter_report.json")) return records;
    auto kept = kept_subset(records);
    if (kept.empty())
        throw ConfigError("corpus " + dir.string() + " was filtered but keeps zero records");
    return kept;
}

void write_json(const fs::path& path, const json& j) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw MissingFileError("cannot write " + path.string());
    f << j.dump(2) << "\n";
}

// source may be a denoiser checkpoint file or a training run directory
fs::path resolve_denoiser_source(const fs::path& source) {
    if (fs::is_directory(source)) return source / "denoiser.pdc";
    return source;
}

// checkpoint flags accept either the .pdc file or the run directory that holds it
fs::path resolve_ckpt(const std::string& path, const char* filename) {
    fs::path p(path);
    if (fs::is_directory(p)) return p / filename;
    return p;
}

void copy_into_run(const fs::path& src, const fs::path& dst) {
    if (!fs::exists(src)) throw MissingFileError("missing artifact: " + src.string());
    fs::copy_file(src, dst, fs::copy_options::overwrite_existing);
}

std::vector<double> parse_scales(const std::string& csv) {
    std::vector<double> out;
    std::string cur;
    std::stringstream ss(csv);
    while (std::getline(ss, cur, ',')) {
        if (cur.find_first_not_of(" \t") == std::string::npos) continue;
        try {
            size_t pos = 0;
            double v = std::stod(cur, &pos);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("bad guidance scale '" + cur + "'");
        }
    }
    return out;
}

std::string hex_id(uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

// ---------------------------------------------------------------------------
// shared state for CLI flag plumbing

struct CommonArgs {
    std::string config_file;
    std::vector<std::string> sets;
    std::string out;
};

void add_common(CLI::App* cmd, CommonArgs& a) {
    cmd->add_option("--config", a.config_file, "key=value config file");
    cmd->add_option("--set", a.sets, "config override key=value (repeatable)");
    cmd->add_option("--out", a.out, "run directory (all outputs land here)");
}

using FlagPairs = std::vector<std::pair<std::string, std::string>>;

// collect only flags the user actually passed, so they override the file;
// owns the flag storage (shared_ptr) so it outlives the definition scope
struct FlagCollector {
    CLI::App* cmd;
    FlagPairs pairs;
    std::vector<std::function<void()>> readers;

    template <typename T>
    void opt(const std::string& flag, const std::string& key, std::shared_ptr<T> storage,
             const std::string& help) {
        auto* o = cmd->add_option(flag, *storage, help);
        readers.push_back([this, o, key, storage]() {
            if (o->count() > 0) {
                if constexpr (std::is_same_v<T, std::string>)
                    pairs.emplace_back(key, *storage);
                else if constexpr (std::is_same_v<T, double>)
                    pairs.emplace_back(key, fmt_double(*storage));
                else
                    pairs.emplace_back(key, std::to_string(*storage));
            }
        });
    }

    FlagPairs collect() {
        pairs.clear();
        for (auto& r : readers) r();
        return pairs;
    }
};

// ---------------------------------------------------------------------------
// training-subcommand core shared by train-stage1 / train-stage2

void run_train_stage(int stage, const RunConfig& rc, RunDir& run) {
    StageConfig cfg = stage == 1 ? StageConfig::stage1_defaults() : StageConfig::stage2_defaults();
    cfg.steps = static_cast<int>(rc.get_int("steps", cfg.steps));
    cfg.batch = static_cast<int>(rc.get_int("batch", cfg.batch));
    cfg.lr = rc.get_double("lr", cfg.lr);
    cfg.warmup = static_cast<int>(rc.get_int("warmup", cfg.warmup));
    cfg.ema_decay = rc.get_double("ema_decay", cfg.ema_decay);
    cfg.text_dropout = rc.get_double("dropout", cfg.text_dropout);
    cfg.resolution = static_cast<int>(rc.get_int("resolution", cfg.resolution));
    cfg.seed = rc.get_u64("seed", cfg.seed);
    cfg.override_config_hash = rc.get_bool("override_config_hash", false);
    cfg.validate();

    fs::path data_dir = rc.get("data_dir");
    fs::path source;
    if (rc.has("source") && !rc.get("source").empty()) source = rc.get("source");
    if (stage == 2 && source.empty())
        throw ConfigError("train-stage2 requires --source: the stage-1 checkpoint (or run "
                          "directory) whose denoiser is being adapted");

    // student/codec default to the source run directory's copies
    fs::path student_path = rc.get_str("student", "");
    fs::path codec_path = rc.get_str("codec", "");
    if (!student_path.empty()) student_path = resolve_ckpt(student_path, "student.pdc");
    if (!codec_path.empty()) codec_path = resolve_ckpt(codec_path, "codec.pdc");
    if (student_path.empty() && !source.empty() && fs::is_directory(source))
        student_path = source / "student.pdc";
    if (codec_path.empty() && !source.empty() && fs::is_directory(source))
        codec_path = source / "codec.pdc";
    if (student_path.empty()) throw ConfigError("train-stage" + std::to_string(stage) +
                                                " requires --student (student.pdc)");
    if (codec_path.empty()) throw ConfigError("train-stage" + std::to_string(stage) +
                                              " requires --codec (codec.pdc)");

    auto student = load_student_checkpoint(student_path);
    auto codec = load_codec_checkpoint(codec_path);
    auto records = load_training_records(data_dir);

    fs::path source_ckpt = source.empty() ? fs::path{} : resolve_denoiser_source(source);
    DenoiserF dn = DenoiserF::make(DenoiserConfig{}, cfg.seed);

    int64_t print_every = std::max<int64_t>(1, cfg.steps / 30);
    auto on_step = [&](const StepLog& row) {
        if (row.step % print_every == 0 || row.step == cfg.steps)
            std::printf("step %6lld  loss %.5f  lr %.3g  ema_gap %.3g\n",
                        static_cast<long long>(row.step), row.loss, row.lr, row.ema_gap);
    };

    TrainReport rep = run_stage(cfg, records, student, codec, dn, run.dir / "denoiser.pdc",
                                source_ckpt, on_step);
    save_metrics_csv(run.dir / "metrics.csv", rep.log);

    // make the run directory a self-contained generation bundle
    copy_into_run(student_path, run.dir / "student.pdc");
    copy_into_run(codec_path, run.dir / "codec.pdc");

    json stage_info{{"stage", cfg.stage},
                    {"steps", cfg.steps},
                    {"selector", rep.selector_used},
                    {"config_hash", cfg.config_hash()},
                    {"n_examples", records.size()},
                    {"resumed", rep.resumed},
                    {"warm_start", rep.warm_start},
                    {"start_step", rep.start_step},
                    {"dropout_draws", rep.dropout_draws},
                    {"dropout_events", rep.dropout_events}};
    if (!rep.log.empty()) {
        stage_info["loss_last"] = rep.log.back().loss;
        stage_info["loss_smoothed_end"] = rep.smoothed_loss_at(rep.end_step);
    }
    if (!source.empty()) stage_info["source"] = source.string();
    write_json(run.dir / "stage.json", stage_info);

    run.seeds["train_seed"] = cfg.seed;
    run.seeds["denoiser_init_seed"] = cfg.seed;
    std::printf("stage %d done: %lld steps, %zu examples, checkpoint %s\n", cfg.stage,
                static_cast<long long>(cfg.steps), records.size(),
                (run.dir / "denoiser.pdc").c_str());
}

// sampler settings shared by sample / img2img / eval / sweep
SamplerConfig sampler_from(const RunConfig& rc) {
    SamplerConfig s;
    s.num_steps = static_cast<int>(rc.get_int("steps", 50));
    s.guidance = rc.get_double("guidance", 9.0);
    s.eta = rc.get_double("eta", 0.0);
    return s;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"polydiff: desk-scale multilingual latent diffusion pipeline"};
    app.require_subcommand(1);
    std::function<void()> task;

    // ---------------------------------------------------------- gen-data
    {
        auto* cmd = app.add_subcommand("gen-data", "generate the synthetic multilingual corpus");
        auto a = std::make_shared<CommonArgs>();
        auto fc = std::make_shared<FlagCollector>();
        fc->cmd = cmd;
        add_common(cmd, *a);
        auto n = std::make_shared<int64_t>(0);
        auto seed = std::make_shared<uint64_t>(0);
        auto rate = std::make_shared<double>(0);
        fc->opt("--n", "n", n, "number of records");
        fc->opt("--seed", "seed", seed, "corpus seed");
        fc->opt("--degradation-rate", "degradation_rate", rate, "fraction degraded");
        cmd->callback([=, &task]() {
            task = [=]() {
                RunConfig defaults;
                defaults.set("n", "1200");
                defaults.set("seed", "11");
                defaults.set("degradation_rate", "0.25");
                RunConfig rc = layered_config(defaults, a->config_file, a->sets, fc->collect(),
                                              {"n", "seed", "degradation_rate"}, "gen-data");
                RunDir run{a->out, rc};
                run.init();
                auto records = generate_corpus(static_cast<int>(rc.get_int("n", 0)),
                                               rc.get_u64("seed", 0),
                                               rc.get_double("degradation_rate", 0));
                save_corpus(run.dir, records);
                run.seeds["corpus_seed"] = rc.get_u64("seed", 0);
                run.finish();
                std::printf("gen-data: %zu records -> %s\n", records.size(), run.dir.c_str());
            };
        });
    }

    // ---------------------------------------------------------- filter
    {
        auto* cmd = app.add_subcommand("filter", "apply the word-count / CLIP-Sim / aesthetics rules");
        auto a = std::make_shared<CommonArgs>();
        auto fc = std::make_shared<FlagCollector>();
        fc->cmd = cmd;
        add_common(cmd, *a);
        auto data = std::make_shared<std::string>();
        auto clip = std::make_shared<std::string>();
        auto wl = std::make_shared<int64_t>(0);
        auto st = std::make_shared<double>(0);
        auto at = std::make_shared<double>(0);
        auto seed = std::make_shared<uint64_t>(0);
        fc->opt("--data", "data_dir", data, "input corpus directory");
        fc->opt("--clip", "clip", clip, "teacher CLIP checkpoint for similarity scores");
        fc->opt("--word-limit", "word_limit", wl, "overlay word-count limit (keep <=)");
        fc->opt("--sim-threshold", "sim_threshold", st, "CLIP-Sim threshold (keep >)");
        fc->opt("--aesthetics-threshold", "aesthetics_threshold", at,
                "aesthetics threshold (keep >)");
        fc->opt("--seed", "seed", seed, "aesthetics-scorer training seed");
        cmd->callback([=, &task]() {
            task = [=]() {
                RunConfig defaults;
                defaults.set("word_limit", "5");
                defaults.set("sim_threshold", "0.2");
                defaults.set("aesthetics_threshold", "7");
                defaults.set("word_rule", "true");
                defaults.set("sim_rule", "true");
                defaults.set("aesthetics_rule", "true");
                defaults.set("seed", "8");
                RunConfig rc = layered_config(
                    defaults, a->config_file, a->sets, fc->collect(),
                    {"data_dir", "clip", "word_limit", "sim_threshold", "aesthetics_threshold",
                     "word_rule", "sim_rule", "aesthetics_rule", "seed"},
                    "filter");
                RunDir run{a->out, rc};
                run.init();

                auto records = load_corpus(rc.get("data_dir"));
                auto teacher = load_teacher_checkpoint(resolve_ckpt(rc.get("clip"), "teacher.pdc"));
                auto aes = AestheticsScorer<float>::make(rc.get_u64("seed", 8));
                AestheticsTrainConfig acfg;
                acfg.seed = rc.get_u64("seed", 8);
                train_aesthetics(aes, acfg);

                FilterConfig fcfg;
                fcfg.word_limit = static_cast<int>(rc.get_int("word_limit", 5));
                fcfg.sim_threshold = rc.get_double("sim_threshold", 0.2);
                fcfg.aesthetics_threshold = rc.get_double("aesthetics_threshold", 7.0);
                fcfg.use_word_rule = rc.get_bool("word_rule", true);
                fcfg.use_sim_rule = rc.get_bool("sim_rule", true);
                fcfg.use_aesthetics_rule = rc.get_bool("aesthetics_rule", true);

                const Language& en = languages()[0];
                SimScorerFn sim_fn = [&](const Record& r) {
                    auto enc = encode_text_teacher(teacher, r.captions.at(en.id));
                    return clip_sim(teacher, r.image, enc.pooled);
                };
                AestheticsFn aes_fn = [&](const Image& img) { return aes.score(img); };

                auto report = filter_pipeline(records, fcfg, sim_fn, aes_fn);
                save_corpus(run.dir, records);
                save_filter_report(run.dir / "filter_report.json", report);
                run.seeds["aesthetics_seed"] = rc.get_u64("seed", 8);
                run.finish();
                std::printf("filter: kept %lld / %lld (word %lld, sim %lld, aesthetics %lld rejections)\n",
                            static_cast<long long>(report.n_kept), static_cast<long long>(report.n_input),
                            static_cast<long long>(report.rejected_word_limit),
                            static_cast<long long>(report.rejected_clip_sim),
                            static_cast<long long>(report.rejected_aesthetics));
            };
        });
    }

    // ---------------------------------------------------------- train-clip
    {
        auto* cmd = app.add_subcommand("train-clip", "train the toy teacher CLIP");
        auto a = std::make_shared<CommonArgs>();
        auto fc = std::make_shared<FlagCollector>();
        fc->cmd = cmd;
        add_common(cmd, *a);
        auto steps = std::make_shared<int64_t>(0);
        auto seed = std::make_shared<uint64_t>(0);
        fc->opt("--steps", "steps", steps, "training steps");
        fc->opt("--seed", "seed", seed, "training seed");
        cmd->callback([=, &task]() {
            task = [=]() {
                ClipTrainConfig dflt;
                RunConfig defaults;
                defaults.set("steps", std::to_string(dflt.steps));
                defaults.set("batch", std::to_string(dflt.batch));
                defaults.set("n_train", std::to_string(dflt.n_train));
                defaults.set("n_heldout", std::to_string(dflt.n_heldout));
                defaults.set("lr", fmt_double(dflt.lr));
                defaults.set("warmup", std::to_string(dflt.warmup));
                defaults.set("seed", std::to_string(dflt.seed));
                RunConfig rc = layered_config(
                    defaults, a->config_file, a->sets, fc->collect(),
                    {"steps", "batch", "n_train", "n_heldout", "lr", "warmup", "seed"},
                    "train-clip");
                RunDir run{a->out, rc};
                run.init();

                ClipTrainConfig cfg;
                cfg.steps = static_cast<int>(rc.get_int("steps", cfg.steps));
                cfg.batch = static_cast<int>(rc.get_int("batch", cfg.batch));
                cfg.n_train = static_cast<int>(rc.get_int("n_train", cfg.n_train));
                cfg.n_heldout = static_cast<int>(rc.get_int("n_heldout", cfg.n_heldout));
                cfg.lr = rc.get_double("lr", cfg.lr);
                cfg.warmup = static_cast<int>(rc.get_int("warmup", cfg.warmup));
                cfg.seed = rc.get_u64("seed", cfg.seed);
                int64_t print_every = std::max(1, cfg.steps / 10);
                cfg.on_step = [&](int step, double loss) {
                    if ((step + 1) % print_every == 0)
                        std::printf("clip step %5d  loss %.4f\n", step + 1, loss);
                };
                auto teacher = train_teacher<float>(cfg);
                auto held = sample_scenes(cfg.n_heldout, cfg.seed, "clip_heldout");
                double retrieval = clip_retrieval_accuracy(teacher, held, 16);
                save_checkpoint(run.dir / "teacher.pdc", "teacher", 0, cfg.steps, "", teacher.params);
                write_json(run.dir / "clip_report.json",
                           json{{"steps", cfg.steps}, {"heldout_retrieval_top1", retrieval},
                                {"n_heldout", cfg.n_heldout}});
                run.seeds["clip_seed"] = cfg.seed;
                run.finish();
                std::printf("train-clip: retrieval top-1 %.3f -> %s\n", retrieval,
                            (run.dir / "teacher.pdc").c_str());
            };
        });
    }

    // ---------------------------------------------------------- distill
    {
        auto* cmd = app.add_subcommand("distill", "distill the multilingual student encoder");
        auto a = std::make_shared<CommonArgs>();
        auto fc = std::make_shared<FlagCollector>();
        fc->cmd = cmd;
        add_common(cmd, *a);
        auto clip = std::make_shared<std::string>();
        auto steps = std::make_shared<int64_t>(0);
        auto seed = std::make_shared<uint64_t>(0);
        fc->opt("--clip", "clip", clip, "teacher CLIP checkpoint");
        fc->opt("--steps", "steps", steps, "distillation steps");
        fc->opt("--seed", "seed", seed, "distillation seed");
        cmd->callback([=, &task]() {
            task = [=]() {
                DistillConfig dflt;
                RunConfig defaults;
                defaults.set("steps", std::to_string(dflt.steps));
                defaults.set("batch", std::to_string(dflt.batch));
                defaults.set("n_train", std::to_string(dflt.n_train));
                defaults.set("n_heldout", std::to_string(dflt.n_heldout));
                defaults.set("lr", fmt_double(dflt.lr));
                defaults.set("warmup", std::to_string(dflt.warmup));
                defaults.set("seed", std::to_string(dflt.seed));
                RunConfig rc = layered_config(
                    defaults, a->config_file, a->sets, fc->collect(),
                    {"clip", "steps", "batch", "n_train", "n_heldout", "lr", "warmup", "seed"},
                    "distill");
                RunDir run{a->out, rc};
                run.init();

                auto teacher = load_teacher_checkpoint(resolve_ckpt(rc.get("clip"), "teacher.pdc"));
                DistillConfig cfg;
                cfg.steps = static_cast<int>(rc.get_int("steps", cfg.steps));
                cfg.batch = static_cast<int>(rc.get_int("batch", cfg.batch));
                cfg.n_train = static_cast<int>(rc.get_int("n_train", cfg.n_train));
                cfg.n_heldout = static_cast<int>(rc.get_int("n_heldout", cfg.n_heldout));
                cfg.lr = rc.get_double("lr", cfg.lr);
                cfg.warmup = rc.get_int("warmup", cfg.warmup);
                cfg.seed = rc.get_u64("seed", cfg.seed);
                int64_t print_every = std::max(1, cfg.steps / 10);
                cfg.on_step = [&](int step, double loss) {
                    if ((step + 1) % print_every == 0)
                        std::printf("distill step %5d  loss %.6f\n", step + 1, loss);
                };
                auto student = StudentEncoder<float>::make(cfg.seed);
                auto rep = distill(teacher, student, cfg);
                save_checkpoint(run.dir / "student.pdc", "student", 0, cfg.steps, "",
                                student.params);
                double ratio = rep.heldout_mse_after > 0
                                   ? rep.heldout_mse_before / rep.heldout_mse_after
                                   : 0.0;
                write_json(run.dir / "distill_report.json",
                           json{{"heldout_mse_before", rep.heldout_mse_before},
                                {"heldout_mse_after", rep.heldout_mse_after},
                                {"mse_drop_ratio", ratio},
                                {"cross_lingual_retrieval_top1", rep.retrieval_top1}});
                run.seeds["distill_seed"] = cfg.seed;
                run.finish();
                std::printf("distill: heldout mse %.5f -> %.5f (x%.1f), retrieval %.3f\n",
                            rep.heldout_mse_before, rep.heldout_mse_after, ratio,
                            rep.retrieval_top1);
            };
        });
    }

    // ---------------------------------------------------------- train-codec
    {
        auto* cmd = app.add_subcommand("train-codec", "train the linear patch latent codec");
        auto a = std::make_shared<CommonArgs>();
        auto fc = std::make_shared<FlagCollector>();
        fc->cmd = cmd;
        add_common(cmd, *a);
        auto data = std::make_shared<std::string>();
        auto steps = std::make_shared<int64_t>(0);
        auto seed = std::make_shared<uint64_t>(0);
        fc->opt("--data", "data_dir", data, "training corpus directory");
        fc->opt("--steps", "steps", steps, "training steps");
        fc->opt("--seed", "seed", seed, "training seed");
        cmd->callback([=, &task]() {
            task = [=]() {
                CodecTrainConfig dflt;
                RunConfig defaults;
                defaults.set("steps", std::to_string(dflt.steps));
                defaults.set("batch", std::to_string(dflt.batch));
                defaults.set("lr", fmt_double(dflt.lr));
                defaults.set("warmup", std::to_string(dflt.warmup));
                defaults.set("seed", std::to_string(dflt.seed));
                RunConfig rc = layered_config(defaults, a->config_file, a->sets, fc->collect(),
                                              {"data_dir", "steps", "batch", "lr", "warmup",
                                               "seed"},
                                              "train-codec");
                RunDir run{a->out, rc};
                run.init();

                auto records = load_training_records(rc.get("data_dir"));
                std::vector<Image> images;
                images.reserve(records.size());
                for (const auto& r : records) images.push_back(r.image);
                auto codec = CodecF::make(4, 4, rc.get_u64("seed", 3));
                CodecTrainConfig cfg;
                cfg.steps = static_cast<int>(rc.get_int("steps", cfg.steps));
                cfg.batch = static_cast<int>(rc.get_int("batch", cfg.batch));
                cfg.lr = rc.get_double("lr", cfg.lr);
                cfg.warmup = static_cast<int>(rc.get_int("warmup", cfg.warmup));
                cfg.seed = rc.get_u64("seed", cfg.seed);
                auto rep = train_codec(codec, images, cfg);
                save_checkpoint(run.dir / "codec.pdc", "codec", 0, cfg.steps, "", codec.params);
                write_json(run.dir / "codec_report.json",
                           json{{"first_loss", rep.first_loss}, {"last_loss", rep.last_loss},
                                {"latent_std", rep.latent_std}, {"n_images", images.size()}});
                run.seeds["codec_seed"] = cfg.seed;
                run.finish();
                std::printf("train-codec: recon loss %.5f -> %.5f, latent std %.4f\n",
                            rep.first_loss, rep.last_loss, rep.latent_std);
            };
        });
    }

    // ---------------------------------------------------------- train-stage1 / train-stage2
    for (int stage : {1, 2}) {
        std::string name = "train-stage" + std::to_string(stage);
        std::string desc = stage == 1 ? "stage-1 concept alignment (cross-attention K/V only)"
                                      : "stage-2 quality training (full denoiser, text dropout)";
        auto* cmd = app.add_subcommand(name, desc);
        auto a = std::make_shared<CommonArgs>();
        auto fc = std::make_shared<FlagCollector>();
        fc->cmd = cmd;
        add_common(cmd, *a);
        auto data = std::make_shared<std::string>();
        auto student = std::make_shared<std::string>();
        auto codec = std::make_shared<std::string>();
        auto source = std::make_shared<std::string>();
        auto steps = std::make_shared<int64_t>(0);
        auto seed = std::make_shared<uint64_t>(0);
        auto dropout = std::make_shared<double>(0);
        fc->opt("--data", "data_dir", data, "filtered corpus directory");
        fc->opt("--student", "student", student, "distilled student checkpoint");
        fc->opt("--codec", "codec", codec, "trained codec checkpoint");
        fc->opt("--source", "source", source,
                stage == 1 ? "same-stage checkpoint to resume from"
                           : "stage-1 checkpoint or run directory (required)");
        fc->opt("--steps", "steps", steps, "training steps");
        fc->opt("--seed", "seed", seed, "training seed");
        if (stage == 2) fc->opt("--dropout", "dropout", dropout, "text dropout probability");
        cmd->callback([=, &task]() {
            task = [=]() {
                StageConfig dflt =
                    stage == 1 ? StageConfig::stage1_defaults() : StageConfig::stage2_defaults();
                RunConfig defaults;
                defaults.set("stage", std::to_string(stage));
                defaults.set("resolution", std::to_string(dflt.resolution));
                defaults.set("steps", std::to_string(dflt.steps));
                defaults.set("batch", std::to_string(dflt.batch));
                defaults.set("lr", fmt_double(dflt.lr));
                defaults.set("warmup", std::to_string(dflt.warmup));
                defaults.set("ema_decay", fmt_double(dflt.ema_decay));
                defaults.set("dropout", fmt_double(dflt.text_dropout));
                defaults.set("seed", std::to_string(dflt.seed));
                RunConfig rc = layered_config(
                    defaults, a->config_file, a->sets, fc->collect(),
                    {"stage", "resolution", "steps", "batch", "lr", "warmup", "ema_decay",
                     "dropout", "seed", "data_dir", "out_dir", "student", "codec", "source",
                     "override_config_hash"},
                    name);
                if (rc.get_int("stage", stage) != stage)
                    throw ConfigError(name + ": config stage key contradicts the subcommand");
                RunDir run{a->out, rc};
                run.init();
                run_train_stage(stage, rc, run);
                run.finish();
            };
        });
    }

    // ---------------------------------------------------------- sample
    {
        auto* cmd = app.add_subcommand("sample", "generate images from text prompts");
        auto a = std::make_shared<CommonArgs>();
        auto fc = std::make_shared<FlagCollector>();
        fc->cmd = cmd;
        add_common(cmd, *a);
        auto run_dir = std::make_shared<std::string>();
        auto prompts = std::make_shared<std::vector<std::string>>();
        auto steps = std::make_shared<int64_t>(0);
        auto guidance = std::make_shared<double>(0);
        auto eta = std::make_shared<double>(0);
        auto seed = std::make_shared<uint64_t>(0);
        auto n_per = std::make_shared<int64_t>(0);
        fc->opt("--run", "run_dir", run_dir, "training run directory (self-contained)");
        cmd->add_option("--prompt", *prompts, "text prompt (repeatable; mixed languages fine)");
        fc->opt("--steps", "steps", steps, "DDIM steps");
        fc->opt("--guidance", "guidance", guidance, "classifier-free guidance scale");
        fc->opt("--eta", "eta", eta, "DDIM eta");
        fc->opt("--seed", "seed", seed, "sampling seed");
        fc->opt("--n", "n_per_prompt", n_per, "images per prompt");
        cmd->callback([=, &task]() {
            task = [=]() {
                RunConfig defaults;
                defaults.set("steps", "50");
                defaults.set("guidance", "9");
                defaults.set("eta", "0");
                defaults.set("seed", "7");
                defaults.set("n_per_prompt", "1");
                RunConfig rc = layered_config(defaults, a->config_file, a->sets, fc->collect(),
                                              {"run_dir", "steps", "guidance", "eta", "seed",
                                               "n_per_prompt"},
                                              "sample");
                if (prompts->empty()) throw ConfigError("sample: at least one --prompt required");
                RunDir run{a->out, rc};
                run.init();

                auto model = load_gen_model(rc.get("run_dir"));
                SamplerConfig scfg = sampler_from(rc);
                uint64_t seed_base = rc.get_u64("seed", 7);
                int n_per_prompt = static_cast<int>(rc.get_int("n_per_prompt", 1));
                auto null_cond = text_condition(model.student, "");
                json manifest = json::array();
                int idx = 0;
                for (const auto& prompt : *prompts) {
                    auto cond = text_condition(model.student, prompt);
                    for (int j = 0; j < n_per_prompt; ++j, ++idx) {
                        SamplerConfig si = scfg;
                        si.seed = derive_seed(seed_base, idx);
                        auto res =
                            ddim_sample(model.denoiser, cond, null_cond, model.codec, model.sched,
                                        si, model.grid());
                        char fname[64];
                        std::snprintf(fname, sizeof fname, "sample_%03d.ppm", idx);
                        write_ppm(run.dir / fname, res.image);
                        manifest.push_back(json{{"file", fname}, {"prompt", prompt},
                                                {"seed", si.seed}});
                    }
                }
                write_json(run.dir / "samples.json", manifest);
                run.seeds["sample_seed"] = seed_base;
                run.finish();
                std::printf("sample: %d image(s) (stage %d, %s weights) -> %s\n", idx, model.stage,
                            model.ema_used ? "EMA" : "raw", run.dir.c_str());
            };
        });
    }

    // ---------------------------------------------------------- img2img
    {
        auto* cmd = app.add_subcommand("img2img", "noise an init image to strength*T, denoise with text");
        auto a = std::make_shared<CommonArgs>();
        auto fc = std::make_shared<FlagCollector>();
        fc->cmd = cmd;
        add_common(cmd, *a);
        auto run_dir = std::make_shared<std::string>();
        auto init = std::make_shared<std::string>();
        auto prompt = std::make_shared<std::string>();
        auto strength = std::make_shared<double>(0);
        auto steps = std::make_shared<int64_t>(0);
        auto guidance = std::make_shared<double>(0);
        auto seed = std::make_shared<uint64_t>(0);
        fc->opt("--run", "run_dir", run_dir, "training run directory");
        fc->opt("--init", "init", init, "init image (PPM)");
        cmd->add_option("--prompt", *prompt, "text prompt");
        fc->opt("--strength", "strength", strength, "noise strength in [0,1]");
        fc->opt("--steps", "steps", steps, "DDIM steps");
        fc->opt("--guidance", "guidance", guidance, "guidance scale");
        fc->opt("--seed", "seed", seed, "sampling seed");
        cmd->callback([=, &task]() {
            task = [=]() {
                RunConfig defaults;
                defaults.set("strength", "0.5");
                defaults.set("steps", "50");
                defaults.set("guidance", "9");
                defaults.set("eta", "0");
                defaults.set("seed", "7");
                RunConfig rc = layered_config(defaults, a->config_file, a->sets, fc->collect(),
                                              {"run_dir", "init", "strength", "steps", "guidance",
                                               "eta", "seed"},
                                              "img2img");
                RunDir run{a->out, rc};
                run.init();

                auto model = load_gen_model(rc.get("run_dir"));
                Image init_img = read_ppm(rc.get("init"));
                SamplerConfig scfg = sampler_from(rc);
                scfg.seed = rc.get_u64("seed", 7);
                auto cond = text_condition(model.student, *prompt);
                auto null_cond = text_condition(model.student, "");
                auto res = img2img(model.denoiser, init_img, rc.get_double("strength", 0.5), cond,
                                   null_cond, model.codec, model.sched, scfg);
                write_ppm(run.dir / "img2img_000.ppm", res.image);
                write_json(run.dir / "samples.json",
                           json::array({json{{"file", "img2img_000.ppm"}, {"prompt", *prompt},
                                             {"strength", rc.get_double("strength", 0.5)},
                                             {"seed", scfg.seed}}}));
                run.seeds["sample_seed"] = scfg.seed;
                run.finish();
                std::printf("img2img: strength %.2f -> %s\n", rc.get_double("strength", 0.5),
                            (run.dir / "img2img_000.ppm").c_str());
            };
        });
    }

    // ---------------------------------------------------------- eval
    {
        auto* cmd = app.add_subcommand("eval", "FID / IS / CLIP-Sim / attribute-accuracy report");
        auto a = std::make_shared<CommonArgs>();
        auto fc = std::make_shared<FlagCollector>();
        fc->cmd = cmd;
        add_common(cmd, *a);
        auto run_dir = std::make_shared<std::string>();
        auto data = std::make_shared<std::string>();
        auto clip = std::make_shared<std::string>();
        auto compare = std::make_shared<std::string>();
        auto ppl = std::make_shared<int64_t>(0);
        auto steps = std::make_shared<int64_t>(0);
        auto guidance = std::make_shared<double>(0);
        auto seed = std::make_shared<uint64_t>(0);
        fc->opt("--run", "run_dir", run_dir, "model run directory to evaluate");
        fc->opt("--data", "data_dir", data, "held-out corpus for the FID reference");
        fc->opt("--clip", "clip", clip, "teacher CLIP checkpoint (CLIP Sim image side)");
        fc->opt("--compare-run", "compare_run", compare,
                "second run directory for the stage-ablation block");
        fc->opt("--prompts-per-lang", "prompts_per_language", ppl, "prompts per language");
        fc->opt("--steps", "steps", steps, "DDIM steps");
        fc->opt("--guidance", "guidance", guidance, "guidance scale");
        fc->opt("--seed", "seed", seed, "prompt/sampling seed");
        cmd->callback([=, &task]() {
            task = [=]() {
                RunConfig defaults;
                defaults.set("prompts_per_language", "50");
                defaults.set("steps", "50");
                defaults.set("guidance", "9");
                defaults.set("eta", "0");
                defaults.set("seed", "7");
                defaults.set("classifier_seed", "4");
                defaults.set("include_lossy", "true");
                RunConfig rc = layered_config(
                    defaults, a->config_file, a->sets, fc->collect(),
                    {"run_dir", "data_dir", "clip", "compare_run", "prompts_per_language",
                     "steps", "guidance", "eta", "seed", "classifier_seed", "include_lossy"},
                    "eval");
                RunDir run{a->out, rc};
                run.init();

                auto model = load_gen_model(rc.get("run_dir"));
                auto teacher = load_teacher_checkpoint(resolve_ckpt(rc.get("clip"), "teacher.pdc"));
                auto clf = make_eval_classifier(rc.get_u64("classifier_seed", 4));
                auto real_records = load_training_records(rc.get("data_dir"));
                std::vector<Image> real_images;
                for (const auto& r : real_records) real_images.push_back(r.image);

                EvalConfig ecfg;
                ecfg.prompts_per_language = static_cast<int>(rc.get_int("prompts_per_language", 50));
                ecfg.sampler = sampler_from(rc);
                ecfg.seed = rc.get_u64("seed", 7);
                ecfg.include_lossy = rc.get_bool("include_lossy", true);
                auto prompts = make_concept_prompts(ecfg.prompts_per_language, ecfg.seed);

                auto rep = evaluate_model(model, clf, teacher, prompts, real_images, ecfg);
                rep.config_echo = rc.echo();
                rep.run_id = hex_id(fnv1a64(rep.config_echo + "/" + std::to_string(model.step)));
                save_eval_report(run.dir / "eval_report.json", run.dir / "eval_report.csv", rep);

                if (rc.has("compare_run") && !rc.get("compare_run").empty()) {
                    auto other = load_gen_model(rc.get("compare_run"));
                    auto orep = evaluate_model(other, clf, teacher, prompts, real_images, ecfg);
                    orep.config_echo = rep.config_echo;
                    orep.run_id = rep.run_id;
                    save_eval_report(run.dir / "compare_report.json",
                                     run.dir / "compare_report.csv", orep);
                    write_json(run.dir / "ablation.json",
                               json{{"run_stage", rep.stage},
                                    {"run_joint_acc", rep.overall.joint_acc},
                                    {"compare_stage", orep.stage},
                                    {"compare_joint_acc", orep.overall.joint_acc},
                                    {"delta", rep.overall.joint_acc - orep.overall.joint_acc}});
                }
                run.seeds["eval_seed"] = ecfg.seed;
                run.seeds["classifier_seed"] = rc.get_u64("classifier_seed", 4);
                run.finish();
                std::printf(
                    "eval: joint %.3f  fid %.2f (noise floor %.2f)  is %.2f  clip_sim %.3f  "
                    "(n=%d) -> %s\n",
                    rep.overall.joint_acc, rep.overall.fid, rep.fid_noise, rep.overall.is_score,
                    rep.overall.clip_sim, rep.overall.n, run.dir.c_str());
            };
        });
    }

    // ---------------------------------------------------------- sweep
    {
        auto* cmd = app.add_subcommand("sweep", "guidance-scale sweep (accuracy + CLIP Sim per scale)");
        auto a = std::make_shared<CommonArgs>();
        auto fc = std::make_shared<FlagCollector>();
        fc->cmd = cmd;
        add_common(cmd, *a);
        auto run_dir = std::make_shared<std::string>();
        auto clip = std::make_shared<std::string>();
        auto scales = std::make_shared<std::string>();
        auto ppl = std::make_shared<int64_t>(0);
        auto steps = std::make_shared<int64_t>(0);
        auto seed = std::make_shared<uint64_t>(0);
        fc->opt("--run", "run_dir", run_dir, "model run directory");
        fc->opt("--clip", "clip", clip, "teacher CLIP checkpoint");
        fc->opt("--scales", "scales", scales, "comma-separated guidance scales");
        fc->opt("--prompts-per-lang", "prompts_per_language", ppl, "prompts per language");
        fc->opt("--steps", "steps", steps, "DDIM steps");
        fc->opt("--seed", "seed", seed, "prompt/sampling seed");
        cmd->callback([=, &task]() {
            task = [=]() {
                RunConfig defaults;
                defaults.set("scales", "1.5,3,5,7,9");
                defaults.set("prompts_per_language", "12");
                defaults.set("steps", "50");
                defaults.set("eta", "0");
                defaults.set("seed", "7");
                defaults.set("classifier_seed", "4");
                RunConfig rc = layered_config(defaults, a->config_file, a->sets, fc->collect(),
                                              {"run_dir", "clip", "scales",
                                               "prompts_per_language", "steps", "eta", "seed",
                                               "classifier_seed"},
                                              "sweep");
                RunDir run{a->out, rc};
                run.init();

                auto scale_list = parse_scales(rc.get("scales"));
                if (scale_list.empty()) throw ConfigError("sweep: empty scale list");
                auto model = load_gen_model(rc.get("run_dir"));
                auto teacher = load_teacher_checkpoint(resolve_ckpt(rc.get("clip"), "teacher.pdc"));
                auto clf = make_eval_classifier(rc.get_u64("classifier_seed", 4));
                auto prompts = make_concept_prompts(
                    static_cast<int>(rc.get_int("prompts_per_language", 12)),
                    rc.get_u64("seed", 7));
                SamplerConfig base = sampler_from(rc);
                auto rows = guidance_sweep(model, clf, teacher, prompts, scale_list, base,
                                           rc.get_u64("seed", 7));
                save_sweep_csv(run.dir / "sweep.csv", rows);
                run.seeds["sweep_seed"] = rc.get_u64("seed", 7);
                run.finish();
                for (const auto& r : rows)
                    std::printf("scale %4.1f  joint %.3f  clip_sim %.3f (n=%d)\n", r.scale,
                                r.joint_acc, r.clip_sim, r.n);
            };
        });
    }

    // ---------------------------------------------------------- human-eval
    {
        auto* cmd = app.add_subcommand("human-eval", "aggregate annotator votes (Eq. 3 totals)");
        auto a = std::make_shared<CommonArgs>();
        auto fc = std::make_shared<FlagCollector>();
        fc->cmd = cmd;
        add_common(cmd, *a);
        auto votes = std::make_shared<std::string>();
        fc->opt("--votes", "votes", votes, "annotator CSV (annotator_id,prompt_id,choice,culture_score,text_image_score)");
        cmd->callback([=, &task]() {
            task = [=]() {
                RunConfig rc = layered_config(RunConfig{}, a->config_file, a->sets, fc->collect(),
                                              {"votes"}, "human-eval");
                RunDir run{a->out, rc};
                run.init();
                fs::path votes_path = rc.get("votes");
                std::ifstream f(votes_path, std::ios::binary);
                if (!f) throw MissingFileError("votes file not found: " + votes_path.string());
                std::stringstream ss;
                ss << f.rdbuf();
                auto rows = parse_human_eval_csv(ss.str());
                auto rep = aggregate_human_eval(rows);
                write_json(run.dir / "human_eval.json",
                           json{{"count_a", rep.tally.a},
                                {"count_b", rep.tally.b},
                                {"count_same", rep.tally.c},
                                {"total_alt", rep.total_a},
                                {"total_sd", rep.total_b},
                                {"culture_mean", rep.culture_mean},
                                {"text_image_mean", rep.text_image_mean},
                                {"n_rows", rep.n_rows},
                                {"n_annotators", rep.n_annotators}});
                run.finish();
                std::printf("human-eval: Total_alt %.3f  Total_sd %.3f  culture %.2f  "
                            "text-image %.2f (%d rows, %d annotators)\n",
                            rep.total_a, rep.total_b, rep.culture_mean, rep.text_image_mean,
                            rep.n_rows, rep.n_annotators);
            };
        });
    }

    try {
        app.parse(argc, argv);
        if (task) task();
        return 0;
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::string msg = e.what();
        for (auto& ch : msg)
            if (ch == '"') ch = '\'';
        std::fprintf(stderr, "error code=2 kind=config msg=\"%s\"\n", msg.c_str());
        return 2;
    } catch (const ConfigError& e) {
        std::string msg = e.what();
        for (auto& ch : msg)
            if (ch == '"') ch = '\'';
        std::fprintf(stderr, "error code=2 kind=config msg=\"%s\"\n", msg.c_str());
        return 2;
    } catch (const MissingFileError& e) {
        std::string msg = e.what();
        for (auto& ch : msg)
            if (ch == '"') ch = '\'';
        std::fprintf(stderr, "error code=3 kind=missing_file msg=\"%s\"\n", msg.c_str());
        return 3;
    } catch (const StageMismatchError& e) {
        std::string msg = e.what();
        for (auto& ch : msg)
            if (ch == '"') ch = '\'';
        std::fprintf(stderr, "error code=4 kind=stage_mismatch msg=\"%s\"\n", msg.c_str());
        return 4;
    } catch (const NumericError& e) {
        std::string msg = e.what();
        for (auto& ch : msg)
            if (ch == '"') ch = '\'';
        std::fprintf(stderr, "error code=5 kind=numeric msg=\"%s\"\n", msg.c_str());
        return 5;
    } catch (const std::exception& e) {
        std::string msg = e.what();
        for (auto& ch : msg)
            if (ch == '"') ch = '\'';
        std::fprintf(stderr, "error code=1 kind=error msg=\"%s\"\n", msg.c_str());
        return 1;
    }
}
