#pragma once
// Evaluation metrics: Frechet distance between feature distributions (FID),
// inception score over class posteriors, CLIP similarity aggregation,
// attribute accuracy against scene ground truth, and human-eval preference
// totals. All distribution math runs in double.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "polydiff/classifier.hpp"
#include "polydiff/errors.hpp"
#include "polydiff/image.hpp"
#include "polydiff/scene.hpp"

namespace polydiff {

// ---------------------------------------------------------------------------
// feature sets + FID

struct FeatureSet {
    std::string tag;
    int n = 0, d = 0;
    std::vector<double> data;  // row-major [n, d]

    FeatureSet() = default;
    FeatureSet(std::string tag_, int d_) : tag(std::move(tag_)), d(d_) {}

    void add(const std::vector<double>& row) {
        if (static_cast<int>(row.size()) != d)
            throw std::invalid_argument("FeatureSet::add: row has " + std::to_string(row.size()) +
                                        " dims, expected " + std::to_string(d));
        data.insert(data.end(), row.begin(), row.end());
        ++n;
    }

    static FeatureSet from_floats(std::string tag, int d, const std::vector<float>& rows) {
        if (d <= 0 || rows.size() % static_cast<size_t>(d) != 0)
            throw std::invalid_argument("FeatureSet::from_floats: size not a multiple of d");
        FeatureSet fs(std::move(tag), d);
        fs.n = static_cast<int>(rows.size()) / d;
        fs.data.assign(rows.begin(), rows.end());
        return fs;
    }

    Eigen::VectorXd mean() const {
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
            data.data(), n, d);
        return m.colwise().mean();
    }

    // unbiased sample covariance (n - 1 normalization)
    Eigen::MatrixXd cov() const {
        Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
            data.data(), n, d);
        Eigen::MatrixXd centered = m.rowwise() - m.colwise().mean();
        return (centered.transpose() * centered) / double(n - 1);
    }
};

// Frechet distance ||mu_a - mu_b||^2 + Tr(Ca + Cb - 2 (Ca Cb)^{1/2}).
// Tr((Ca Cb)^{1/2}) is computed as Tr((sqrt(Ca) Cb sqrt(Ca))^{1/2}) so every
// eigendecomposition is of a symmetric matrix. Small negative eigenvalues from
// roundoff are clamped to zero; eigenvalues below -1e-8 (relative to the
// largest) indicate a genuinely broken input and raise NumericError.
inline double fid(const FeatureSet& a, const FeatureSet& b) {
    if (a.d != b.d)
        throw std::invalid_argument("fid: feature dims differ (" + std::to_string(a.d) + " vs " +
                                    std::to_string(b.d) + ")");
    if (a.n < a.d + 1 || b.n < b.d + 1)
        throw NumericError("fid: need at least d+1 = " + std::to_string(a.d + 1) +
                           " samples per set for a nondegenerate covariance (got " +
                           std::to_string(a.n) + " and " + std::to_string(b.n) + ")");
    for (double v : a.data)
        if (!std::isfinite(v)) throw NumericError("fid: non-finite value in feature set '" + a.tag + "'");
    for (double v : b.data)
        if (!std::isfinite(v)) throw NumericError("fid: non-finite value in feature set '" + b.tag + "'");

    Eigen::VectorXd ma = a.mean(), mb = b.mean();
    Eigen::MatrixXd ca = a.cov(), cb = b.cov();

    auto clamp_sqrt = [](const Eigen::MatrixXd& sym, const char* what) {
        Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
        if (es.info() != Eigen::Success)
            throw NumericError(std::string("fid: eigendecomposition failed for ") + what);
        Eigen::VectorXd ev = es.eigenvalues();
        double lmax = std::max(1.0, ev.maxCoeff());
        for (int i = 0; i < ev.size(); ++i) {
            if (ev[i] < -1e-8 * lmax)
                throw NumericError(std::string("fid: ") + what + " has eigenvalue " +
                                   std::to_string(ev[i]) + " below tolerance");
            if (ev[i] < 0) ev[i] = 0;
        }
        return std::pair<Eigen::MatrixXd, Eigen::VectorXd>(es.eigenvectors(), ev);
    };

    auto [va, eva] = clamp_sqrt(ca, "covariance A");
    Eigen::MatrixXd sqrt_ca =
        va * eva.cwiseSqrt().asDiagonal() * va.transpose();
    Eigen::MatrixXd inner = sqrt_ca * cb * sqrt_ca;
    inner = 0.5 * (inner + inner.transpose());  // symmetrize roundoff
    auto [vi, evi] = clamp_sqrt(inner, "product covariance");
    double tr_sqrt = evi.cwiseSqrt().sum();

    double val = (ma - mb).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    if (!std::isfinite(val)) throw NumericError("fid: non-finite result");
    // exact-match and roundoff cases can land epsilon-negative
    return std::max(0.0, val);
}

// ---------------------------------------------------------------------------
// inception score

// probs: row-major [n, c] class posteriors; every row must sum to 1 within
// 1e-6 with non-negative entries. Returns exp(mean_x KL(p(.|x) || p_bar)).
inline double inception_score(const std::vector<std::vector<double>>& probs) {
    if (probs.empty()) throw std::invalid_argument("inception_score: empty input");
    const size_t c = probs[0].size();
    if (c == 0) throw std::invalid_argument("inception_score: zero classes");
    for (const auto& row : probs) {
        if (row.size() != c)
            throw std::invalid_argument("inception_score: ragged rows");
        double s = 0;
        for (double p : row) {
            if (!(p >= 0.0) || !std::isfinite(p))
                throw std::invalid_argument("inception_score: negative or non-finite probability");
            s += p;
        }
        if (std::abs(s - 1.0) > 1e-6)
            throw std::invalid_argument("inception_score: row sums to " + std::to_string(s) +
                                        ", expected 1 within 1e-6");
    }
    std::vector<double> marginal(c, 0.0);
    for (const auto& row : probs)
        for (size_t j = 0; j < c; ++j) marginal[j] += row[j] / double(probs.size());
    double mean_kl = 0;
    for (const auto& row : probs) {
        double kl = 0;
        for (size_t j = 0; j < c; ++j)
            if (row[j] > 0) kl += row[j] * (std::log(row[j]) - std::log(marginal[j]));
        mean_kl += kl / double(probs.size());
    }
    return std::exp(mean_kl);
}

// ---------------------------------------------------------------------------
// CLIP similarity aggregation

using ImageEmbedFn = std::function<std::vector<float>(const Image&)>;
using TextEmbedFn = std::function<std::vector<float>(const std::string&, int lang)>;

struct SimReport {
    double mean = 0;
    std::map<int, double> per_language;  // lang id -> mean similarity
    int n = 0;
};

// langs may be empty (no per-language breakdown) or one id per pair
inline SimReport clip_sim_eval(const std::vector<Image>& images,
                               const std::vector<std::string>& texts,
                               const std::vector<int>& langs, const ImageEmbedFn& image_embed,
                               const TextEmbedFn& text_embed) {
    if (images.empty()) throw std::invalid_argument("clip_sim_eval: empty evaluation set");
    if (images.size() != texts.size())
        throw std::invalid_argument("clip_sim_eval: image/text count mismatch");
    if (!langs.empty() && langs.size() != images.size())
        throw std::invalid_argument("clip_sim_eval: language list length mismatch");
    SimReport rep;
    std::map<int, std::pair<double, int>> by_lang;
    for (size_t i = 0; i < images.size(); ++i) {
        int lang = langs.empty() ? 0 : langs[i];
        double s = cosine(image_embed(images[i]), text_embed(texts[i], lang));
        rep.mean += s;
        auto& acc = by_lang[lang];
        acc.first += s;
        acc.second += 1;
    }
    rep.n = static_cast<int>(images.size());
    rep.mean /= rep.n;
    if (!langs.empty())
        for (auto& [lang, acc] : by_lang) rep.per_language[lang] = acc.first / acc.second;
    return rep;
}

// ---------------------------------------------------------------------------
// attribute accuracy

struct AttrAccuracy {
    double shape = 0, fg = 0, bg = 0, motif = 0;
    double joint = 0;  // shape, fg and bg all correct
    int n = 0;
};

template <typename S>
AttrAccuracy attribute_accuracy(AttrClassifier<S>& clf, const std::vector<Image>& images,
                                const std::vector<SceneSpec>& truth) {
    clf.require_trained("attribute_accuracy");
    if (images.empty()) throw std::invalid_argument("attribute_accuracy: empty evaluation set");
    if (images.size() != truth.size())
        throw std::invalid_argument("attribute_accuracy: image/scene count mismatch");
    auto preds = classify(clf, images);
    AttrAccuracy acc;
    acc.n = static_cast<int>(images.size());
    for (size_t i = 0; i < images.size(); ++i) {
        bool s_ok = preds[i].shape == truth[i].shape;
        bool f_ok = preds[i].fg == truth[i].fg;
        bool b_ok = preds[i].bg == truth[i].bg;
        acc.shape += s_ok;
        acc.fg += f_ok;
        acc.bg += b_ok;
        acc.motif += preds[i].motif == truth[i].motif + 1;
        acc.joint += s_ok && f_ok && b_ok;
    }
    acc.shape /= acc.n;
    acc.fg /= acc.n;
    acc.bg /= acc.n;
    acc.motif /= acc.n;
    acc.joint /= acc.n;
    return acc;
}

// shape-head posteriors for a batch, for inception_score
template <typename S>
std::vector<std::vector<double>> shape_posteriors(AttrClassifier<S>& clf,
                                                  const std::vector<Image>& images) {
    auto preds = classify(clf, images);
    std::vector<std::vector<double>> probs(preds.size());
    for (size_t i = 0; i < preds.size(); ++i) {
        probs[i].assign(preds[i].shape_probs.begin(), preds[i].shape_probs.end());
        // renormalize float roundoff so inception_score's row check passes
        double s = 0;
        for (double p : probs[i]) s += p;
        for (double& p : probs[i]) p /= s;
    }
    return probs;
}

// ---------------------------------------------------------------------------
// human evaluation

struct VoteTally {
    int64_t a = 0, b = 0, c = 0;  // prefer A, prefer B, tie
};

// preference totals ((|A| + 0.5|C|)/N, (|B| + 0.5|C|)/N); the second is
// computed as 1 - first, which is algebraically identical and keeps the pair
// summing to exactly 1.
inline std::pair<double, double> human_eval_totals(const VoteTally& t) {
    int64_t n = t.a + t.b + t.c;
    if (n == 0) throw ConfigError("human_eval_totals: no votes");
    if (t.a < 0 || t.b < 0 || t.c < 0)
        throw std::invalid_argument("human_eval_totals: negative vote count");
    double ta = (double(t.a) + 0.5 * double(t.c)) / double(n);
    return {ta, 1.0 - ta};
}

struct HumanEvalRow {
    std::string annotator_id;
    std::string prompt_id;
    char choice = 'A';      // A, B, or C (tie)
    int culture_score = 0;  // 1..5
    int text_image_score = 0;
};

struct HumanEvalReport {
    VoteTally tally;
    double total_a = 0, total_b = 0;    // preference totals
    double culture_mean = 0;            // per-annotator means, averaged
    double text_image_mean = 0;
    int n_rows = 0, n_annotators = 0;
};

inline HumanEvalReport aggregate_human_eval(const std::vector<HumanEvalRow>& rows) {
    if (rows.empty()) throw ConfigError("aggregate_human_eval: no rows");
    HumanEvalReport rep;
    std::map<std::string, std::pair<double, double>> sums;  // annotator -> (culture, text_image)
    std::map<std::string, int> counts;
    for (const auto& r : rows) {
        if (r.choice == 'A')
            ++rep.tally.a;
        else if (r.choice == 'B')
            ++rep.tally.b;
        else if (r.choice == 'C')
            ++rep.tally.c;
        else
            throw std::invalid_argument("aggregate_human_eval: choice must be A, B or C");
        if (r.culture_score < 1 || r.culture_score > 5 || r.text_image_score < 1 ||
            r.text_image_score > 5)
            throw std::invalid_argument("aggregate_human_eval: scores must be in 1..5");
        sums[r.annotator_id].first += r.culture_score;
        sums[r.annotator_id].second += r.text_image_score;
        ++counts[r.annotator_id];
    }
    for (const auto& [id, s] : sums) {
        rep.culture_mean += s.first / counts[id];
        rep.text_image_mean += s.second / counts[id];
    }
    rep.n_annotators = static_cast<int>(sums.size());
    rep.culture_mean /= rep.n_annotators;
    rep.text_image_mean /= rep.n_annotators;
    std::tie(rep.total_a, rep.total_b) = human_eval_totals(rep.tally);
    rep.n_rows = static_cast<int>(rows.size());
    return rep;
}

// CSV format: header then rows "annotator_id,prompt_id,choice,culture_score,text_image_score"
inline std::vector<HumanEvalRow> parse_human_eval_csv(const std::string& text) {
    std::vector<HumanEvalRow> rows;
    size_t pos = 0;
    int line_no = 0;
    while (pos < text.size()) {
        size_t end = text.find('\n', pos);
        if (end == std::string::npos) end = text.size();
        std::string line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (line_no == 1 && line.rfind("annotator_id", 0) == 0) continue;  // header
        std::vector<std::string> fields;
        size_t f = 0;
        while (true) {
            size_t comma = line.find(',', f);
            if (comma == std::string::npos) {
                fields.push_back(line.substr(f));
                break;
            }
            fields.push_back(line.substr(f, comma - f));
            f = comma + 1;
        }
        if (fields.size() != 5)
            throw ConfigError("human eval csv line " + std::to_string(line_no) + ": expected 5 fields, got " +
                              std::to_string(fields.size()));
        HumanEvalRow r;
        r.annotator_id = fields[0];
        r.prompt_id = fields[1];
        if (fields[2].size() != 1)
            throw ConfigError("human eval csv line " + std::to_string(line_no) + ": bad choice '" +
                              fields[2] + "'");
        r.choice = fields[2][0];
        try {
            r.culture_score = std::stoi(fields[3]);
            r.text_image_score = std::stoi(fields[4]);
        } catch (const std::exception&) {
            throw ConfigError("human eval csv line " + std::to_string(line_no) + ": bad score field");
        }
        rows.push_back(std::move(r));
    }
    return rows;
}

}  // namespace polydiff
