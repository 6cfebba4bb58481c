#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "doctest.h"
#include "polydiff/corpus.hpp"
#include "polydiff/training.hpp"

using namespace polydiff;
namespace fs = std::filesystem;

namespace {

std::vector<Record> small_dataset(int n, uint64_t seed) {
    return generate_corpus(n, seed, 0.0);
}

StudentEncoder<float> frozen_student(uint64_t seed) {
    auto s = StudentEncoder<float>::make(seed);
    s.params.set_trainable([](const std::string&) { return false; });
    return s;
}

LatentCodec<float> frozen_codec(uint64_t seed) {
    auto c = LatentCodec<float>::make(4, 4, seed);
    c.freeze();
    return c;
}

Denoiser<float> small_denoiser(int n_blocks, uint64_t seed, bool use_cross = true) {
    DenoiserConfig cfg;
    cfg.n_blocks = n_blocks;
    cfg.mlp_mult = 2;
    cfg.use_cross = use_cross;
    return Denoiser<float>::make(cfg, seed);
}

std::vector<std::vector<float>> snapshot(const ParamSet<float>& ps) {
    std::vector<std::vector<float>> out;
    for (const auto& t : ps.tensors) out.push_back(t.data());
    return out;
}

bool bits_equal(const std::vector<float>& a, const std::vector<float>& b) {
    if (a.size() != b.size()) return false;
    return std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0;
}

fs::path temp_dir(const std::string& tag) {
    fs::path p = fs::temp_directory_path() / ("polydiff_train_" + tag);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("stage config validation and hashing") {
    StageConfig s1 = StageConfig::stage1_defaults();
    StageConfig s2 = StageConfig::stage2_defaults();
    CHECK_NOTHROW(s1.validate());
    CHECK_NOTHROW(s2.validate());
    CHECK(s1.resolution == 16);
    CHECK(s2.resolution == 32);
    CHECK(s2.text_dropout == doctest::Approx(0.10));

    auto bad = s1;
    bad.resolution = 32;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s2;
    bad.resolution = 16;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s1;
    bad.text_dropout = 0.1;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s1;
    bad.selector = "full_denoiser";
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s2;
    bad.selector = "kv_only";
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s2;
    bad.text_dropout = 0.6;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    bad = s2;
    bad.text_dropout = 0.0;  // two-phase first round
    CHECK_NOTHROW(bad.validate());
    bad = s1;
    bad.stage = 3;
    CHECK_THROWS_AS(bad.validate(), ConfigError);

    // hash covers structure, not duration or dropout
    auto a = s2, b = s2;
    b.steps = 9999;
    b.text_dropout = 0.0;
    CHECK(a.config_hash() == b.config_hash());
    b = s2;
    b.lr = 2e-4;
    CHECK(a.config_hash() != b.config_hash());
    b = s2;
    b.seed = 99;
    CHECK(a.config_hash() != b.config_hash());
    CHECK(s1.config_hash() != s2.config_hash());
}

TEST_CASE("prepare_training_data builds caches at both resolutions") {
    auto records = small_dataset(6, 21);
    auto student = frozen_student(22);
    auto codec = frozen_codec(23);

    auto d16 = prepare_training_data(records, student, codec, 16);
    CHECK(d16.n == 6);
    CHECK(d16.tokens == 16);
    CHECK(d16.c_lat == 4);
    CHECK(d16.n_langs == 4);
    CHECK(d16.text_d == 64);
    CHECK(d16.latents.size() == 6);
    CHECK(d16.latents[0].size() == size_t(16 * 4));
    CHECK(d16.text[0].size() == 4);
    CHECK(d16.text[0][0].size() == size_t(L_MAX * 64));
    CHECK(d16.null_text.size() == size_t(L_MAX * 64));

    auto d32 = prepare_training_data(records, student, codec, 32);
    CHECK(d32.tokens == 64);
    CHECK(d32.latents[0].size() == size_t(64 * 4));

    // the 16-res latent is the codec applied to the downsampled image
    auto manual = codec.encode(images_to_tensor<float>({downsample2x(records[0].image)}));
    REQUIRE(manual.data().size() == d16.latents[0].size());
    CHECK(bits_equal(manual.data(), d16.latents[0]));

    // null text is the student encoding of the empty caption
    auto null_enc = encode_text(student, "");
    for (size_t i = 0; i < d16.null_text.size(); ++i)
        CHECK(d16.null_text[i] == doctest::Approx(null_enc.tokens[i]));

    CHECK_THROWS_AS(prepare_training_data(records, student, codec, 8), ConfigError);
    CHECK_THROWS_AS(prepare_training_data(std::vector<Record>{}, student, codec, 16), ConfigError);
}

TEST_CASE("stage 1 touches exactly the cross-attention k/v parameters") {
    auto records = small_dataset(12, 31);
    auto student = frozen_student(32);
    auto codec = frozen_codec(33);
    auto dn = small_denoiser(2, 34);
    auto [kv_names, other_names] = param_partition(dn.params);
    REQUIRE(!kv_names.empty());
    REQUIRE(!other_names.empty());

    auto before = snapshot(dn.params);
    StageConfig cfg = StageConfig::stage1_defaults();
    cfg.steps = 20;
    cfg.batch = 8;
    cfg.lr = 1e-3;
    cfg.warmup = 5;
    auto rep = train_stage1(cfg, records, student, codec, dn);

    CHECK(rep.selector_used == "kv_only");
    CHECK(rep.dropout_events == 0);
    CHECK(rep.start_step == 0);
    CHECK(rep.end_step == 20);
    REQUIRE(rep.log.size() == 20);
    CHECK(rep.log.front().step == 1);
    CHECK(rep.log.back().step == 20);
    for (const auto& row : rep.log) CHECK(std::isfinite(row.loss));

    std::set<std::string> kv_set(kv_names.begin(), kv_names.end());
    int kv_changed = 0;
    for (size_t i = 0; i < dn.params.size(); ++i) {
        bool same = bits_equal(before[i], dn.params.tensors[i].data());
        if (kv_set.count(dn.params.names[i])) {
            if (!same) ++kv_changed;
        } else {
            INFO("non-kv parameter changed: " << dn.params.names[i]);
            CHECK(same);
        }
    }
    CHECK(kv_changed == int(kv_names.size()));
}

TEST_CASE("text-blind denoiser makes stage 1 a no-op") {
    auto records = small_dataset(8, 41);
    auto student = frozen_student(42);
    auto codec = frozen_codec(43);
    auto dn = small_denoiser(2, 44, /*use_cross=*/false);
    auto [kv_names, other_names] = param_partition(dn.params);
    REQUIRE(kv_names.empty());

    auto before = snapshot(dn.params);
    StageConfig cfg = StageConfig::stage1_defaults();
    cfg.steps = 8;
    cfg.batch = 4;
    auto rep = train_stage1(cfg, records, student, codec, dn);

    for (size_t i = 0; i < dn.params.size(); ++i) CHECK(bits_equal(before[i], dn.params.tensors[i].data()));
    REQUIRE(rep.log.size() == 8);
    for (const auto& row : rep.log) {
        CHECK(std::isfinite(row.loss));
        CHECK(row.lr == 0.0);  // nothing trainable, optimizer never stepped
    }
}

TEST_CASE("frozen text encoder and codec are enforced and unchanged") {
    auto records = small_dataset(8, 51);
    auto codec = frozen_codec(53);
    auto dn = small_denoiser(1, 54);
    StageConfig cfg = StageConfig::stage1_defaults();
    cfg.steps = 4;
    cfg.batch = 4;

    auto live = StudentEncoder<float>::make(52);  // still trainable
    CHECK_THROWS_AS(train_stage1(cfg, records, live, codec, dn), ConfigError);

    auto student = frozen_student(52);
    auto live_codec = LatentCodec<float>::make(4, 4, 53);
    CHECK_THROWS_AS(train_stage1(cfg, records, student, live_codec, dn), ConfigError);

    uint64_t sh = params_hash(student.params);
    uint64_t ch = params_hash(codec.params);
    train_stage1(cfg, records, student, codec, dn);
    CHECK(params_hash(student.params) == sh);
    CHECK(params_hash(codec.params) == ch);
}

TEST_CASE("full stage 2 training reduces the smoothed loss") {
    auto records = small_dataset(24, 61);
    auto student = frozen_student(62);
    auto codec = frozen_codec(63);
    auto dn = small_denoiser(2, 64);

    StageConfig cfg = StageConfig::stage2_defaults();
    cfg.steps = 200;
    cfg.batch = 16;
    cfg.lr = 1e-3;
    cfg.warmup = 20;
    auto rep = train_stage2(cfg, records, student, codec, dn);

    double early = rep.smoothed_loss_at(40, 30);
    double late = rep.smoothed_loss_at(200, 30);
    INFO("early " << early << " late " << late);
    CHECK(late < early);
    CHECK(late < 1.0);  // below the ||eps||^2 baseline of a null predictor

    // EMA gap: positive once training moves, small, finite throughout
    for (const auto& row : rep.log) {
        CHECK(std::isfinite(row.ema_gap));
        CHECK(row.ema_gap >= 0.0);
    }
    CHECK(rep.log.back().ema_gap > 0.0);
    CHECK(rep.log.back().ema_gap < 0.1);  // lags the parameters, far from divergence
}

TEST_CASE("metrics csv round trip") {
    std::vector<StepLog> log{{1, 1.25, 1e-5, 0.0}, {2, 0.5, 2e-5, 1.5e-6}, {3, 0.25, 3e-5, 2e-6}};
    auto dir = temp_dir("csv");
    auto path = dir / "metrics.csv";
    save_metrics_csv(path, log);

    std::ifstream f(path);
    REQUIRE(f.good());
    std::string line;
    std::getline(f, line);
    CHECK(line == "step,loss,lr,ema_gap");
    int rows = 0;
    while (std::getline(f, line)) {
        long long step;
        double loss, lr, gap;
        REQUIRE(std::sscanf(line.c_str(), "%lld,%lf,%lf,%lf", &step, &loss, &lr, &gap) == 4);
        CHECK(step == log[rows].step);
        CHECK(loss == doctest::Approx(log[rows].loss));
        CHECK(lr == doctest::Approx(log[rows].lr));
        CHECK(gap == doctest::Approx(log[rows].ema_gap));
        ++rows;
    }
    CHECK(rows == 3);
    CHECK_THROWS_AS(save_metrics_csv(dir / "no_such_dir" / "m.csv", log), MissingFileError);
}

TEST_CASE("resume reproduces single-run training bitwise") {
    auto records = small_dataset(12, 71);
    auto student = frozen_student(72);
    auto codec = frozen_codec(73);
    auto dir = temp_dir("resume");

    StageConfig cfg = StageConfig::stage1_defaults();
    cfg.batch = 8;
    cfg.lr = 1e-3;
    cfg.warmup = 4;

    // one run of 12 steps
    auto dn_a = small_denoiser(1, 74);
    auto cfg_a = cfg;
    cfg_a.steps = 12;
    train_stage1(cfg_a, records, student, codec, dn_a, dir / "a.pdc");

    // 6 steps, save, resume for 6 more
    auto dn_b = small_denoiser(1, 74);
    auto cfg_b = cfg;
    cfg_b.steps = 6;
    train_stage1(cfg_b, records, student, codec, dn_b, dir / "b6.pdc");

    auto dn_c = small_denoiser(1, 74);
    auto cfg_c = cfg;
    cfg_c.steps = 12;
    auto rep_c = train_stage1(cfg_c, records, student, codec, dn_c, dir / "c.pdc", dir / "b6.pdc");
    CHECK(rep_c.resumed);
    CHECK_FALSE(rep_c.warm_start);
    CHECK(rep_c.start_step == 6);
    REQUIRE(rep_c.log.size() == 6);
    CHECK(rep_c.log.front().step == 7);

    for (size_t i = 0; i < dn_a.params.size(); ++i) {
        INFO("param " << dn_a.params.names[i]);
        CHECK(bits_equal(dn_a.params.tensors[i].data(), dn_c.params.tensors[i].data()));
    }

    // checkpoint files agree entry by entry, optimizer moments and EMA included
    auto sa = load_checkpoint<float>(dir / "a.pdc");
    auto sc = load_checkpoint<float>(dir / "c.pdc");
    CHECK(sa.manifest.step == 12);
    CHECK(sc.manifest.step == 12);
    CHECK(sa.manifest.config_hash == sc.manifest.config_hash);
    REQUIRE(sa.values.size() == sc.values.size());
    for (const auto& [key, val] : sa.values) {
        REQUIRE(sc.values.count(key));
        CHECK(bits_equal(val, sc.values.at(key)));
    }
}

TEST_CASE("zero-step resume round-trips the checkpoint exactly") {
    auto records = small_dataset(10, 81);
    auto student = frozen_student(82);
    auto codec = frozen_codec(83);
    auto dir = temp_dir("zerostep");

    StageConfig cfg = StageConfig::stage1_defaults();
    cfg.steps = 5;
    cfg.batch = 4;
    auto dn = small_denoiser(1, 84);
    train_stage1(cfg, records, student, codec, dn, dir / "k.pdc");

    auto dn2 = small_denoiser(1, 84);
    auto rep = train_stage1(cfg, records, student, codec, dn2, dir / "k2.pdc", dir / "k.pdc");
    CHECK(rep.resumed);
    CHECK(rep.log.empty());  // start step == configured steps: no iterations

    auto s1 = load_checkpoint<float>(dir / "k.pdc");
    auto s2 = load_checkpoint<float>(dir / "k2.pdc");
    CHECK(s1.manifest.step == s2.manifest.step);
    CHECK(s1.manifest.stage == s2.manifest.stage);
    CHECK(s1.manifest.config_hash == s2.manifest.config_hash);
    REQUIRE(s1.values.size() == s2.values.size());
    for (const auto& [key, val] : s1.values) {
        REQUIRE(s2.values.count(key));
        CHECK(bits_equal(val, s2.values.at(key)));
    }
}

TEST_CASE("stage-1 checkpoint warm-starts stage 2 with the full selector") {
    auto records = small_dataset(10, 91);
    auto student = frozen_student(92);
    auto codec = frozen_codec(93);
    auto dir = temp_dir("warmstart");

    StageConfig c1 = StageConfig::stage1_defaults();
    c1.steps = 6;
    c1.batch = 4;
    auto dn = small_denoiser(1, 94);
    train_stage1(c1, records, student, codec, dn, dir / "s1.pdc");

    StageConfig c2 = StageConfig::stage2_defaults();
    c2.steps = 3;
    c2.batch = 4;
    auto dn2 = small_denoiser(1, 94);
    auto rep = train_stage2(c2, records, student, codec, dn2, dir / "s2.pdc", dir / "s1.pdc");
    CHECK(rep.warm_start);
    CHECK_FALSE(rep.resumed);
    CHECK(rep.selector_used == "full_denoiser");
    CHECK(rep.start_step == 0);
    REQUIRE(rep.log.size() == 3);

    // the previously frozen parameters now move
    auto s1 = load_checkpoint<float>(dir / "s1.pdc");
    auto [kv_names, other_names] = param_partition(dn2.params);
    int moved = 0;
    for (const auto& name : other_names) {
        const auto* was = s1.find("param", name);
        REQUIRE(was != nullptr);
        if (!bits_equal(dn2.params.get(name).data(), *was)) ++moved;
    }
    CHECK(moved > 0);

    // going backwards is a stage mismatch
    auto dn3 = small_denoiser(1, 95);
    CHECK_THROWS_AS(train_stage1(c1, records, student, codec, dn3, "", dir / "s2.pdc"),
                    StageMismatchError);

    // a checkpoint for some other model is rejected outright
    save_checkpoint(dir / "stud.pdc", "student", 0, 0, "x", student.params);
    CHECK_THROWS_AS(train_stage1(c1, records, student, codec, dn3, "", dir / "stud.pdc"),
                    ConfigError);

    // wrapper guards: config stage must match the entry point
    CHECK_THROWS_AS(train_stage1(c2, records, student, codec, dn3), ConfigError);
    CHECK_THROWS_AS(train_stage2(c1, records, student, codec, dn3), ConfigError);
}

TEST_CASE("config hash guards same-stage resume") {
    auto records = small_dataset(10, 101);
    auto student = frozen_student(102);
    auto codec = frozen_codec(103);
    auto dir = temp_dir("cfghash");

    StageConfig cfg = StageConfig::stage1_defaults();
    cfg.steps = 4;
    cfg.batch = 4;
    auto dn = small_denoiser(1, 104);
    train_stage1(cfg, records, student, codec, dn, dir / "k.pdc");

    auto other = cfg;
    other.lr = 5e-4;
    other.steps = 8;
    auto dn2 = small_denoiser(1, 104);
    CHECK_THROWS_AS(train_stage1(other, records, student, codec, dn2, "", dir / "k.pdc"),
                    ConfigError);
    other.override_config_hash = true;
    CHECK_NOTHROW(train_stage1(other, records, student, codec, dn2, "", dir / "k.pdc"));

    // shrinking the horizon below the checkpointed step is an error
    auto shrunk = cfg;
    shrunk.steps = 2;
    auto dn3 = small_denoiser(1, 104);
    CHECK_THROWS_AS(train_stage1(shrunk, records, student, codec, dn3, "", dir / "k.pdc"),
                    ConfigError);
}

TEST_CASE("text dropout hits its configured rate") {
    auto records = small_dataset(10, 111);
    auto student = frozen_student(112);
    auto codec = frozen_codec(113);
    auto dn = small_denoiser(1, 114);

    StageConfig cfg = StageConfig::stage2_defaults();
    cfg.steps = 8;
    cfg.batch = 64;
    auto rep = train_stage2(cfg, records, student, codec, dn);
    CHECK(rep.dropout_draws == 8 * 64);
    CHECK(rep.dropout_events > 0);

    // replicate the in-loop decision stream and confirm the loop matches it
    int64_t manual = 0;
    for (int64_t step = 0; step < 8; ++step) {
        Rng drop = Rng::stream(cfg.seed, "text_dropout", uint64_t(step));
        for (int b = 0; b < cfg.batch; ++b)
            if (drop.uniform() < cfg.text_dropout) ++manual;
    }
    CHECK(rep.dropout_events == manual);

    // the same stream recipe over 10,000+ draws lands on the configured rate
    int64_t total = 0, draws = 0;
    for (int64_t step = 0; draws < 10000; ++step) {
        Rng drop = Rng::stream(cfg.seed, "text_dropout", uint64_t(step));
        for (int b = 0; b < cfg.batch; ++b) {
            if (drop.uniform() < cfg.text_dropout) ++total;
            ++draws;
        }
    }
    double rate = double(total) / double(draws);
    INFO("empirical dropout rate " << rate << " over " << draws << " draws");
    CHECK(rate >= 0.09);
    CHECK(rate <= 0.11);

    // stage-1 configs never touch the dropout stream
    CHECK(StageConfig::stage1_defaults().text_dropout == 0.0);
}
