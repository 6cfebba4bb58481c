// Metrics: FID oracles (zero / mean-shift / diagonal closed form / symmetry /
// guards), inception-score boundary cases, CLIP-sim aggregation, attribute
// classifier + accuracy, aesthetics scorer, and Eq. 3 human-eval totals.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "polydiff/classifier.hpp"
#include "polydiff/encoder_train.hpp"
#include "polydiff/metrics.hpp"
#include "polydiff/render.hpp"

using namespace polydiff;

namespace {

FeatureSet gaussian_set(const char* tag, int n, int d, const std::vector<double>& mean,
                        uint64_t seed) {
    FeatureSet fs(tag, d);
    Rng rng = Rng::stream(seed, tag, 0);
    for (int i = 0; i < n; ++i) {
        std::vector<double> row(d);
        for (int j = 0; j < d; ++j) row[j] = mean[j] + rng.normal();
        fs.add(row);
    }
    return fs;
}

// 2d points {mu +/- a_i e_i}: sample mean exactly mu, sample covariance
// exactly diagonal with v_i = 2 a_i^2 / (2d - 1)
FeatureSet diagonal_set(const char* tag, const std::vector<double>& mu,
                        const std::vector<double>& a) {
    int d = static_cast<int>(mu.size());
    FeatureSet fs(tag, d);
    for (int i = 0; i < d; ++i) {
        std::vector<double> hi = mu, lo = mu;
        hi[i] += a[i];
        lo[i] -= a[i];
        fs.add(hi);
        fs.add(lo);
    }
    // pad with copies of the +/- pattern scaled to keep cov diagonal and
    // satisfy n >= d+1: repeat the pattern once more
    for (int i = 0; i < d; ++i) {
        std::vector<double> hi = mu, lo = mu;
        hi[i] += a[i];
        lo[i] -= a[i];
        fs.add(hi);
        fs.add(lo);
    }
    return fs;
}

std::vector<Image> render_set(int n, uint64_t seed, const char* tag,
                              std::vector<SceneSpec>* scenes = nullptr) {
    std::vector<Image> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng::stream(seed, tag, i);
        SceneSpec s = random_scene(rng, 0.4);
        if (scenes) scenes->push_back(s);
        out.push_back(render(s));
    }
    return out;
}

std::vector<Image> noise_set(int n, uint64_t seed) {
    std::vector<Image> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng::stream(seed, "pure_noise", i);
        Image img(IMG_SIDE, IMG_SIDE);
        for (auto& v : img.data) v = float(rng.uniform(-1.0, 1.0));
        out.push_back(img);
    }
    return out;
}

AttrClassifierF& trained_classifier() {
    static AttrClassifierF clf = [] {
        auto c = AttrClassifierF::make(4);
        auto rep = train_classifier(c);
        REQUIRE(rep.heldout_joint >= 0.99);
        REQUIRE(rep.last_loss < rep.first_loss * 0.1);
        return c;
    }();
    return clf;
}

}  // namespace

// ---------------------------------------------------------------------------
// FID

TEST_CASE("fid: identical sets give zero") {
    auto a = gaussian_set("a", 200, 6, std::vector<double>(6, 0.0), 11);
    double self = fid(a, a);
    CHECK(self >= 0.0);
    CHECK(self < 1e-6);
}

TEST_CASE("fid: mean shift with unit covariance lands in the Monte-Carlo band") {
    // ||mu||^2 = 4 -> closed-form FID 4 with identical covariances
    std::vector<double> mu(8, 0.0);
    for (int j = 0; j < 8; ++j) mu[j] = std::sqrt(4.0 / 8.0);
    auto a = gaussian_set("a", 10000, 8, std::vector<double>(8, 0.0), 21);
    auto b = gaussian_set("b", 10000, 8, mu, 22);
    double v = fid(a, b);
    CHECK(v >= 3.6);
    CHECK(v <= 4.4);
}

TEST_CASE("fid: diagonal covariance matches the per-dimension closed form") {
    std::vector<double> mu1 = {0.5, -1.0, 2.0}, a1 = {1.0, 0.5, 2.0};
    std::vector<double> mu2 = {-0.5, 1.0, 0.0}, a2 = {2.0, 1.5, 0.25};
    auto fa = diagonal_set("a", mu1, a1);
    auto fb = diagonal_set("b", mu2, a2);
    int n = fa.n;
    double expect = 0;
    for (int i = 0; i < 3; ++i) {
        double v1 = 4.0 * a1[i] * a1[i] / double(n - 1);  // each +/- appears twice
        double v2 = 4.0 * a2[i] * a2[i] / double(n - 1);
        double dm = mu1[i] - mu2[i];
        expect += dm * dm + v1 + v2 - 2.0 * std::sqrt(v1 * v2);
    }
    // verify the sample covariance really is what the construction promises
    Eigen::MatrixXd ca = fa.cov();
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 3; ++c)
            if (r != c) CHECK(std::abs(ca(r, c)) < 1e-12);
    CHECK(fid(fa, fb) == doctest::Approx(expect).epsilon(1e-6));
}

TEST_CASE("fid: symmetry and strict growth under mean shift") {
    auto a = gaussian_set("a", 500, 5, std::vector<double>(5, 0.0), 31);
    double prev = -1.0;
    for (double shift : {0.5, 1.0, 2.0, 4.0}) {
        std::vector<double> mu(5, shift);
        auto b = gaussian_set("b", 500, 5, mu, 32);
        double ab = fid(a, b), ba = fid(b, a);
        CHECK(std::abs(ab - ba) < 1e-6);
        CHECK(ab > prev);
        prev = ab;
    }
}

TEST_CASE("fid: guards") {
    auto ok = gaussian_set("ok", 50, 4, std::vector<double>(4, 0.0), 41);
    // n < d+1
    FeatureSet small("small", 4);
    for (int i = 0; i < 4; ++i) small.add({double(i), 0.0, 1.0, -1.0});
    CHECK_THROWS_AS(fid(small, ok), NumericError);
    CHECK_THROWS_AS(fid(ok, small), NumericError);
    // dimension mismatch
    auto other = gaussian_set("other", 50, 5, std::vector<double>(5, 0.0), 42);
    CHECK_THROWS_AS(fid(ok, other), std::invalid_argument);
    // non-finite input
    auto bad = gaussian_set("bad", 50, 4, std::vector<double>(4, 0.0), 43);
    bad.data[7] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(fid(ok, bad), NumericError);
    // FeatureSet::add row width guard
    FeatureSet fs("x", 3);
    CHECK_THROWS_AS(fs.add({1.0, 2.0}), std::invalid_argument);
}

// ---------------------------------------------------------------------------
// inception score

TEST_CASE("inception score: boundary cases") {
    // uniform rows, power-of-two count so the marginal is bitwise the row
    std::vector<std::vector<double>> uni(4, std::vector<double>(4, 0.25));
    CHECK(inception_score(uni) == 1.0);

    // balanced one-hot over C=4
    std::vector<std::vector<double>> hot;
    for (int i = 0; i < 8; ++i) {
        std::vector<double> row(4, 0.0);
        row[i % 4] = 1.0;
        hot.push_back(row);
    }
    CHECK(inception_score(hot) == doctest::Approx(4.0).epsilon(1e-12));

    // hand-computed two-row case
    std::vector<std::vector<double>> two = {{0.9, 0.1}, {0.1, 0.9}};
    double kl = 0.9 * std::log(0.9 / 0.5) + 0.1 * std::log(0.1 / 0.5);
    CHECK(inception_score(two) == doctest::Approx(std::exp(kl)).epsilon(1e-6));
}

TEST_CASE("inception score: bounds and permutation invariance on random rows") {
    Rng rng = Rng::stream(7, "is_rand", 0);
    std::vector<std::vector<double>> probs;
    for (int i = 0; i < 64; ++i) {
        std::vector<double> row(5);
        double s = 0;
        for (auto& p : row) {
            p = rng.uniform() + 1e-3;
            s += p;
        }
        for (auto& p : row) p /= s;
        probs.push_back(row);
    }
    double v = inception_score(probs);
    CHECK(v >= 1.0);
    CHECK(v <= 5.0 + 1e-9);
    auto shuffled = probs;
    std::swap(shuffled[0], shuffled[63]);
    std::swap(shuffled[5], shuffled[40]);
    CHECK(inception_score(shuffled) == doctest::Approx(v).epsilon(1e-12));
}

TEST_CASE("inception score: invalid rows rejected") {
    CHECK_THROWS_AS(inception_score({}), std::invalid_argument);
    CHECK_THROWS_AS(inception_score({{0.5, 0.4}}), std::invalid_argument);    // sums to 0.9
    CHECK_THROWS_AS(inception_score({{0.5, 0.5}, {1.0}}), std::invalid_argument);  // ragged
    CHECK_THROWS_AS(inception_score({{1.5, -0.5}}), std::invalid_argument);   // negative
}

// ---------------------------------------------------------------------------
// clip_sim_eval

TEST_CASE("clip_sim_eval: aggregation with stub embedders") {
    auto img_of = [](int i) {
        Image img(IMG_SIDE, IMG_SIDE);
        for (size_t k = 0; k < img.data.size(); ++k)
            img.data[k] = float(((i * 131 + int(k) * 17) % 255) / 255.0 * 2 - 1);
        return img;
    };
    std::vector<Image> images;
    std::vector<std::string> texts;
    std::vector<int> langs;
    for (int i = 0; i < 6; ++i) {
        images.push_back(img_of(i));
        texts.push_back("t" + std::to_string(i));
        langs.push_back(i % 2);
    }
    // identical embeddings -> similarity exactly 1
    ImageEmbedFn ie = [](const Image& img) {
        return std::vector<float>{img.data[0], img.data[100], 1.0f};
    };
    TextEmbedFn te_same = [&](const std::string& t, int) {
        int i = t[1] - '0';
        Image img = img_of(i);
        return std::vector<float>{img.data[0], img.data[100], 1.0f};
    };
    auto rep = clip_sim_eval(images, texts, langs, ie, te_same);
    CHECK(rep.mean == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(rep.n == 6);
    CHECK(rep.per_language.size() == 2);
    CHECK(rep.per_language.at(0) == doctest::Approx(1.0).epsilon(1e-12));

    // per-language means combine to the overall mean
    TextEmbedFn te_lang = [](const std::string&, int lang) {
        return lang == 0 ? std::vector<float>{1.f, 0.f, 0.f} : std::vector<float>{0.f, 1.f, 0.f};
    };
    ImageEmbedFn ie_const = [](const Image&) { return std::vector<float>{1.f, 1.f, 0.f}; };
    auto rep2 = clip_sim_eval(images, texts, langs, ie_const, te_lang);
    double combined = 0;
    for (auto& [lang, m] : rep2.per_language) combined += m * 3;  // 3 pairs per language
    CHECK(rep2.mean == doctest::Approx(combined / 6).epsilon(1e-12));

    // contract errors
    CHECK_THROWS_AS(clip_sim_eval({}, {}, {}, ie, te_same), std::invalid_argument);
    CHECK_THROWS_AS(clip_sim_eval(images, {texts[0]}, {}, ie, te_same), std::invalid_argument);
    CHECK_THROWS_AS(clip_sim_eval(images, texts, {0, 1}, ie, te_same), std::invalid_argument);
}

TEST_CASE("clip_sim_eval: matched beats shuffled with a real teacher" * doctest::timeout(300)) {
    ClipTrainConfig cc;
    cc.steps = 700;
    cc.seed = 105;
    auto teacher = train_teacher<float>(cc);
    teacher.params.set_trainable([](const std::string&) { return false; });

    std::vector<SceneSpec> scenes;
    auto images = render_set(48, 900, "simeval", &scenes);
    std::vector<std::string> texts;
    for (auto& s : scenes) texts.push_back(caption(s, languages()[0]));

    ImageEmbedFn ie = [&](const Image& img) {
        auto p = images_to_patches<float>({img});
        auto v = teacher.image_pooled(p);
        return std::vector<float>(v.data().begin(), v.data().end());
    };
    TextEmbedFn te = [&](const std::string& t, int) {
        return encode_text_teacher(teacher, t).pooled;
    };
    auto matched = clip_sim_eval(images, texts, {}, ie, te);
    auto shuffled_texts = texts;
    std::rotate(shuffled_texts.begin(), shuffled_texts.begin() + 7, shuffled_texts.end());
    auto shuffled = clip_sim_eval(images, shuffled_texts, {}, ie, te);
    CHECK(matched.mean > shuffled.mean);
}

// ---------------------------------------------------------------------------
// attribute classifier + accuracy

TEST_CASE("classifier: untrained use is an error") {
    auto clf = AttrClassifierF::make(99);
    std::vector<Image> one{render(SceneSpec{0, 0, 1, 0, 4, -1})};
    CHECK_THROWS_AS(classify(clf, one), ConfigError);
    CHECK_THROWS_AS(classifier_features(clf, one), ConfigError);
    std::vector<SceneSpec> truth{SceneSpec{0, 0, 1, 0, 4, -1}};
    CHECK_THROWS_AS(attribute_accuracy(clf, one, truth), ConfigError);
    Image small(16, 16);
    CHECK_THROWS_AS(patch_mean_features(small), std::invalid_argument);
}

TEST_CASE("attribute accuracy: real renders near-perfect, noise near chance" *
          doctest::timeout(600)) {
    auto& clf = trained_classifier();

    std::vector<SceneSpec> scenes;
    auto imgs = render_set(400, 1200, "attr_real", &scenes);
    auto acc = attribute_accuracy(clf, imgs, scenes);
    CHECK(acc.joint >= 0.99);
    CHECK(acc.shape >= 0.99);
    CHECK(acc.fg >= 0.99);
    CHECK(acc.bg >= 0.99);
    CHECK(acc.n == 400);

    // degraded inputs the augmentations cover: 16->32 upsampled renders
    std::vector<Image> up;
    for (auto& im : imgs) up.push_back(upsample2x_nearest(downsample2x(im)));
    auto acc_up = attribute_accuracy(clf, up, scenes);
    CHECK(acc_up.joint >= 0.95);

    // pure noise: joint accuracy within 3x of chance 1/(4*6*5)
    std::vector<SceneSpec> noise_truth;
    render_set(3000, 1300, "attr_truth", &noise_truth);
    auto noise = noise_set(3000, 77);
    auto acc_n = attribute_accuracy(clf, noise, noise_truth);
    double chance = 1.0 / (4.0 * 6.0 * 5.0);
    CHECK(acc_n.joint <= 3.0 * chance);
    CHECK(acc_n.joint >= chance / 3.0 - 2e-3);  // MC slack: 3000 draws resolve ~1/360 coarsely

    // mismatch guard
    std::vector<SceneSpec> short_truth(scenes.begin(), scenes.begin() + 10);
    CHECK_THROWS_AS(attribute_accuracy(clf, imgs, short_truth), std::invalid_argument);
}

TEST_CASE("classifier features: FID separates real renders from noise" * doctest::timeout(600)) {
    auto& clf = trained_classifier();
    auto real_a = render_set(200, 1400, "fid_a");
    auto real_b = render_set(200, 1500, "fid_b");
    auto noise = noise_set(200, 1600);
    auto fa = FeatureSet::from_floats("real_a", CLS_FEAT_DIM, classifier_features(clf, real_a));
    auto fb = FeatureSet::from_floats("real_b", CLS_FEAT_DIM, classifier_features(clf, real_b));
    auto fn = FeatureSet::from_floats("noise", CLS_FEAT_DIM, classifier_features(clf, noise));
    double close = fid(fa, fb), far = fid(fa, fn);
    CHECK(close < far);
    CHECK(far > 5.0 * close);

    // shape posteriors feed the inception score and respect its bounds
    auto probs = shape_posteriors(clf, real_a);
    double is = inception_score(probs);
    CHECK(is >= 1.0);
    CHECK(is <= double(NUM_SHAPES) + 1e-9);
    CHECK(is > 2.0);  // near-one-hot over 4 balanced shape classes
}

TEST_CASE("aesthetics scorer: separates clean from degraded" * doctest::timeout(300)) {
    auto aes = AestheticsScorerF::make(8);
    CHECK_THROWS_AS(aes.score(render(SceneSpec{0, 0, 1, 0, 4, -1})), ConfigError);
    train_aesthetics(aes);
    double clean_sum = 0, bad_sum = 0;
    const int n = 60;
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng::stream(2000, "aes_eval", i);
        Image img = render(random_scene(rng, 0.4));
        double cs = aes.score(img);
        CHECK(cs >= 1.0);
        CHECK(cs <= 10.0);
        clean_sum += cs;
        Image deg = img;
        Rng dr = Rng::stream(2000, "aes_eval_deg", i);
        if (i % 2 == 0) {
            apply_noise(deg, dr, 0.7f);
        } else {
            int wc = 0;
            apply_overlay(deg, dr, wc);
        }
        bad_sum += aes.score(deg);
    }
    CHECK(clean_sum / n > 7.0);
    CHECK(bad_sum / n < 7.0);
}

// ---------------------------------------------------------------------------
// human eval

TEST_CASE("human_eval_totals: Eq. 3 substitution and invariants") {
    auto [a, b] = human_eval_totals({3, 1, 1});
    CHECK(a == doctest::Approx(0.7).epsilon(1e-12));
    CHECK(b == doctest::Approx(0.3).epsilon(1e-12));
    CHECK(a + b == 1.0);

    auto [e1, e2] = human_eval_totals({5, 5, 0});
    CHECK(e1 == 0.5);
    CHECK(e2 == 0.5);

    auto [t1, t2] = human_eval_totals({0, 0, 9});
    CHECK(t1 == 0.5);
    CHECK(t2 == 0.5);

    Rng rng = Rng::stream(1, "tally", 0);
    for (int i = 0; i < 50; ++i) {
        VoteTally t{int64_t(rng.below(40)), int64_t(rng.below(40)), int64_t(rng.below(40))};
        if (t.a + t.b + t.c == 0) continue;
        auto [x, y] = human_eval_totals(t);
        CHECK(x >= 0.0);
        CHECK(x <= 1.0);
        CHECK(x + y == 1.0);
    }

    CHECK_THROWS_AS(human_eval_totals({0, 0, 0}), ConfigError);
    CHECK_THROWS_AS(human_eval_totals({-1, 2, 0}), std::invalid_argument);
}

TEST_CASE("human eval csv: parsing and per-annotator aggregation") {
    std::string csv =
        "annotator_id,prompt_id,choice,culture_score,text_image_score\n"
        "ann1,p1,A,5,5\n"
        "ann1,p2,A,5,5\n"
        "ann2,p1,B,1,2\n"
        "ann3,p2,C,3,3\n";
    auto rows = parse_human_eval_csv(csv);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].annotator_id == "ann1");
    CHECK(rows[2].choice == 'B');
    CHECK(rows[3].culture_score == 3);

    auto rep = aggregate_human_eval(rows);
    CHECK(rep.tally.a == 2);
    CHECK(rep.tally.b == 1);
    CHECK(rep.tally.c == 1);
    CHECK(rep.n_annotators == 3);
    // per-annotator means averaged: (5 + 1 + 3)/3, not (5+5+1+3)/4
    CHECK(rep.culture_mean == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(rep.text_image_mean == doctest::Approx((5.0 + 2.0 + 3.0) / 3).epsilon(1e-12));
    CHECK(rep.total_a == doctest::Approx((2.0 + 0.5) / 4).epsilon(1e-12));

    CHECK_THROWS_AS(parse_human_eval_csv("a,b,c\n"), ConfigError);          // wrong field count
    CHECK_THROWS_AS(parse_human_eval_csv("a,p,A,x,3\n"), ConfigError);      // bad score
    CHECK_THROWS_AS(parse_human_eval_csv("a,p,AB,3,3\n"), ConfigError);     // bad choice
    auto bad_choice = parse_human_eval_csv("a,p,Z,3,3\n");
    CHECK_THROWS_AS(aggregate_human_eval(bad_choice), std::invalid_argument);
    auto bad_range = parse_human_eval_csv("a,p,A,6,3\n");
    CHECK_THROWS_AS(aggregate_human_eval(bad_range), std::invalid_argument);
    CHECK_THROWS_AS(aggregate_human_eval({}), ConfigError);
}
