#pragma once
// Corpus records, seeded corpus generation with exact degradation counts, the
// three-rule filtering pipeline (word count, similarity, aesthetics), and
// disk IO (PPM images + JSONL metadata + JSON filter report).

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "polydiff/errors.hpp"
#include "polydiff/image.hpp"
#include "polydiff/render.hpp"
#include "polydiff/rng.hpp"
#include "polydiff/scene.hpp"

namespace polydiff {

struct Record {
    SceneSpec scene;
    std::map<int, std::string> captions;  // language id -> caption text
    Degradation degradation = Degradation::none;
    int overlay_word_count = 0;
    float clip_sim = 0.f;   // filled by the filter
    float aesthetics = 0.f; // filled by the filter
    bool kept = false;
    Image image;
};

// Seeded corpus. Exactly round(degradation_rate * n) records are degraded
// (picked by a seeded shuffle), cycling through overlay / noise /
// caption_shuffle. caption_shuffle swaps the captions for those of a
// different scene, leaving the image intact — the mismatch the similarity
// rule exists to catch.
inline std::vector<Record> generate_corpus(int n, const std::vector<Language>& langs,
                                           uint64_t seed, double degradation_rate) {
    if (n < 1) throw ConfigError("generate_corpus: n must be >= 1");
    if (langs.empty()) throw ConfigError("generate_corpus: no languages");
    if (!(degradation_rate >= 0.0 && degradation_rate <= 1.0))
        throw ConfigError("generate_corpus: degradation_rate must be in [0, 1]");

    int n_deg = static_cast<int>(std::llround(degradation_rate * n));
    std::vector<int> order(n);
    for (int i = 0; i < n; ++i) order[i] = i;
    Rng pick = Rng::stream(seed, "corpus_degraded", 0);
    for (int i = n - 1; i > 0; --i)
        std::swap(order[i], order[static_cast<int>(pick.below(static_cast<uint64_t>(i) + 1))]);
    std::vector<Degradation> kind(n, Degradation::none);
    constexpr Degradation CYCLE[3] = {Degradation::overlay, Degradation::noise,
                                      Degradation::caption_shuffle};
    for (int k = 0; k < n_deg; ++k) kind[order[k]] = CYCLE[k % 3];

    std::vector<Record> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) {
        Rng rng = Rng::stream(seed, "corpus_scene", static_cast<uint64_t>(i));
        Record r;
        r.scene = random_scene(rng, 0.35);
        r.image = render(r.scene);
        r.degradation = kind[i];
        SceneSpec caption_scene = r.scene;
        if (r.degradation == Degradation::overlay) {
            Rng dr = Rng::stream(seed, "corpus_overlay", static_cast<uint64_t>(i));
            apply_overlay(r.image, dr, r.overlay_word_count);
        } else if (r.degradation == Degradation::noise) {
            Rng dr = Rng::stream(seed, "corpus_noise", static_cast<uint64_t>(i));
            apply_noise(r.image, dr);
        } else if (r.degradation == Degradation::caption_shuffle) {
            Rng dr = Rng::stream(seed, "corpus_shuffle", static_cast<uint64_t>(i));
            do {
                caption_scene = random_scene(dr, 0.35);
            } while (caption_scene == r.scene);
        }
        for (const auto& lang : langs) r.captions[lang.id] = caption(caption_scene, lang);
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<Record> generate_corpus(int n, uint64_t seed, double degradation_rate) {
    return generate_corpus(n, languages(), seed, degradation_rate);
}

// ---------------------------------------------------------------------------
// filtering

struct FilterConfig {
    int word_limit = 5;                 // keep iff overlay_word_count <= limit
    double sim_threshold = 0.2;         // keep iff clip_sim > threshold
    double aesthetics_threshold = 7.0;  // keep iff aesthetics > threshold
    // each rule independently toggleable (the paper leaves the MG-18
    // aesthetics pass unstated)
    bool use_word_rule = true;
    bool use_sim_rule = true;
    bool use_aesthetics_rule = true;
};

struct FilterReport {
    int64_t n_input = 0, n_kept = 0;
    // per-rule rejection counts; a record failing several rules counts in each
    int64_t rejected_word_limit = 0, rejected_clip_sim = 0, rejected_aesthetics = 0;
};

using SimScorerFn = std::function<double(const Record&)>;
using AestheticsFn = std::function<double(const Image&)>;

// Fills clip_sim / aesthetics / kept on every record (in place) and returns
// the report. Rules are pure predicates ANDed together, so the outcome is
// independent of record order and rule order.
inline FilterReport filter_pipeline(std::vector<Record>& records, const FilterConfig& cfg,
                                    const SimScorerFn& sim_fn, const AestheticsFn& aes_fn) {
    FilterReport rep;
    rep.n_input = static_cast<int64_t>(records.size());
    for (auto& r : records) {
        if (cfg.use_sim_rule) r.clip_sim = static_cast<float>(sim_fn(r));
        if (cfg.use_aesthetics_rule) r.aesthetics = static_cast<float>(aes_fn(r.image));
        bool word_ok = !cfg.use_word_rule || r.overlay_word_count <= cfg.word_limit;
        bool sim_ok = !cfg.use_sim_rule || double(r.clip_sim) > cfg.sim_threshold;
        bool aes_ok = !cfg.use_aesthetics_rule || double(r.aesthetics) > cfg.aesthetics_threshold;
        if (!word_ok) ++rep.rejected_word_limit;
        if (!sim_ok) ++rep.rejected_clip_sim;
        if (!aes_ok) ++rep.rejected_aesthetics;
        r.kept = word_ok && sim_ok && aes_ok;
        if (r.kept) ++rep.n_kept;
    }
    return rep;
}

inline std::vector<Record> kept_subset(const std::vector<Record>& records) {
    std::vector<Record> out;
    for (const auto& r : records)
        if (r.kept) out.push_back(r);
    return out;
}

// ---------------------------------------------------------------------------
// disk IO

inline void to_json(nlohmann::json& j, const SceneSpec& s) {
    j = {{"shape", s.shape}, {"fg", s.fg},   {"bg", s.bg},
         {"size", s.size},   {"pos", s.pos}, {"motif", s.motif}};
}

inline void from_json(const nlohmann::json& j, SceneSpec& s) {
    j.at("shape").get_to(s.shape);
    j.at("fg").get_to(s.fg);
    j.at("bg").get_to(s.bg);
    j.at("size").get_to(s.size);
    j.at("pos").get_to(s.pos);
    j.at("motif").get_to(s.motif);
}

inline void to_json(nlohmann::json& j, const FilterReport& r) {
    j = {{"n_input", r.n_input},
         {"n_kept", r.n_kept},
         {"rejected_word_limit", r.rejected_word_limit},
         {"rejected_clip_sim", r.rejected_clip_sim},
         {"rejected_aesthetics", r.rejected_aesthetics}};
}

inline void from_json(const nlohmann::json& j, FilterReport& r) {
    j.at("n_input").get_to(r.n_input);
    j.at("n_kept").get_to(r.n_kept);
    j.at("rejected_word_limit").get_to(r.rejected_word_limit);
    j.at("rejected_clip_sim").get_to(r.rejected_clip_sim);
    j.at("rejected_aesthetics").get_to(r.rejected_aesthetics);
}

inline std::string image_rel_path(size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "images/%06zu.ppm", index);
    return buf;
}

// dir/records.jsonl (one record per line) + dir/images/NNNNNN.ppm
inline void save_corpus(const std::filesystem::path& dir, const std::vector<Record>& records) {
    std::filesystem::create_directories(dir / "images");
    std::ofstream meta(dir / "records.jsonl", std::ios::binary);
    if (!meta) throw MissingFileError("save_corpus: cannot open " + (dir / "records.jsonl").string());
    for (size_t i = 0; i < records.size(); ++i) {
        const Record& r = records[i];
        write_ppm(dir / image_rel_path(i), r.image);
        nlohmann::json j;
        j["scene"] = r.scene;
        nlohmann::json caps = nlohmann::json::object();
        for (const auto& [lang, text] : r.captions) caps[std::to_string(lang)] = text;
        j["captions"] = caps;
        j["degradation"] = degradation_name(r.degradation);
        j["overlay_word_count"] = r.overlay_word_count;
        j["clip_sim"] = r.clip_sim;
        j["aesthetics"] = r.aesthetics;
        j["kept"] = r.kept;
        j["image"] = image_rel_path(i);
        meta << j.dump() << '\n';
    }
}

inline std::vector<Record> load_corpus(const std::filesystem::path& dir) {
    std::ifstream meta(dir / "records.jsonl", std::ios::binary);
    if (!meta)
        throw MissingFileError("load_corpus: missing " + (dir / "records.jsonl").string());
    std::vector<Record> out;
    std::string line;
    size_t line_no = 0;
    while (std::getline(meta, line)) {
        ++line_no;
        if (line.empty()) continue;
        nlohmann::json j;
        try {
            j = nlohmann::json::parse(line);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("load_corpus: bad JSON at records.jsonl:" + std::to_string(line_no) +
                              ": " + e.what());
        }
        Record r;
        try {
            r.scene = j.at("scene").get<SceneSpec>();
            for (const auto& [k, v] : j.at("captions").items())
                r.captions[std::stoi(k)] = v.get<std::string>();
            r.degradation = degradation_from_name(j.at("degradation").get<std::string>());
            r.overlay_word_count = j.at("overlay_word_count").get<int>();
            r.clip_sim = j.at("clip_sim").get<float>();
            r.aesthetics = j.at("aesthetics").get<float>();
            r.kept = j.at("kept").get<bool>();
            r.image = read_ppm(dir / j.at("image").get<std::string>());
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("load_corpus: bad record at records.jsonl:" +
                              std::to_string(line_no) + ": " + e.what());
        }
        out.push_back(std::move(r));
    }
    return out;
}

inline void save_filter_report(const std::filesystem::path& path, const FilterReport& rep) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw MissingFileError("save_filter_report: cannot open " + path.string());
    nlohmann::json j = rep;
    f << j.dump(2) << '\n';
}

}  // namespace polydiff
