#pragma once

#include <array>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "polydiff/errors.hpp"
#include "polydiff/rng.hpp"

// Scene model and the multilingual caption layer: four toy languages over a
// shared scene grammar, each a bijective re-lexicalization with its own word
// order. Non-English languages own two exclusive motif words apiece; a
// language captioning a motif it does not own falls back to its generic
// "decor" word (translation loss).

namespace polydiff {

constexpr int NUM_SHAPES = 4;   // circle square triangle cross
constexpr int NUM_COLORS = 6;   // red green blue yellow cyan magenta
constexpr int NUM_SIZES = 2;    // small large
constexpr int NUM_POSITIONS = 9;  // 3x3 grid
constexpr int NUM_MOTIFS = 6;
constexpr int NUM_LANGUAGES = 4;

// foreground/background palette: RGB cube corners minus black and white
inline constexpr float FG_COLORS[NUM_COLORS][3] = {
    {1, -1, -1},   // red
    {-1, 1, -1},   // green
    {-1, -1, 1},   // blue
    {1, 1, -1},    // yellow
    {-1, 1, 1},    // cyan
    {1, -1, 1},    // magenta
};

// motif palette: disjoint from FG_COLORS so a motif always changes pixels
inline constexpr float MOTIF_COLORS[NUM_MOTIFS][3] = {
    {-1, -1, -1},      // black
    {1, 1, 1},         // white
    {1, 0, -1},        // orange
    {-1, 0, 1},        // sky
    {1, -0.2f, 0.4f},  // rose
    {0, 0.4f, -1},     // olive
};

struct SceneSpec {
    int shape = 0;  // 0..3
    int fg = 0;     // 0..5
    int bg = 1;     // 0..5, != fg
    int size = 0;   // 0 small, 1 large
    int pos = 4;    // 0..8 row-major 3x3 cell
    int motif = -1; // -1 none, 0..5

    bool operator==(const SceneSpec&) const = default;

    void validate() const {
        if (shape < 0 || shape >= NUM_SHAPES || fg < 0 || fg >= NUM_COLORS || bg < 0 ||
            bg >= NUM_COLORS || size < 0 || size >= NUM_SIZES || pos < 0 || pos >= NUM_POSITIONS ||
            motif < -1 || motif >= NUM_MOTIFS)
            throw std::invalid_argument("SceneSpec field out of range");
        if (fg == bg) throw std::invalid_argument("SceneSpec: fg == bg");
    }
};

inline SceneSpec random_scene(Rng& rng, double motif_prob) {
    SceneSpec s;
    s.shape = rng.below_int(NUM_SHAPES);
    s.fg = rng.below_int(NUM_COLORS);
    int raw = rng.below_int(NUM_COLORS - 1);
    s.bg = raw + (raw >= s.fg ? 1 : 0);
    s.size = rng.below_int(NUM_SIZES);
    s.pos = rng.below_int(NUM_POSITIONS);
    s.motif = rng.uniform() < motif_prob ? rng.below_int(NUM_MOTIFS) : -1;
    return s;
}

// caption slots, in canonical order
enum Slot { SLOT_SIZE = 0, SLOT_FG, SLOT_SHAPE, SLOT_BG, SLOT_POS, SLOT_MOTIF, SLOT_COUNT };

struct Language {
    int id;
    std::string name;
    std::array<std::string, NUM_SHAPES> shapes;
    std::array<std::string, NUM_COLORS> fg;
    std::array<std::string, NUM_COLORS> bg;
    std::array<std::string, NUM_SIZES> sizes;
    std::array<std::string, NUM_POSITIONS> positions;
    std::map<int, std::string> motifs;  // motif id -> word, owned motifs only
    std::string decor;                  // generic word for non-owned motifs
    std::array<int, SLOT_COUNT> word_order;  // permutation of slots
};

inline const std::vector<Language>& languages() {
    static const std::vector<Language> langs = [] {
        std::vector<Language> v;
        v.push_back({0,
                     "en",
                     {"circle", "square", "triangle", "cross"},
                     {"red", "green", "blue", "yellow", "cyan", "magenta"},
                     {"redfield", "greenfield", "bluefield", "yellowfield", "cyanfield",
                      "magentafield"},
                     {"small", "large"},
                     {"topleft", "top", "topright", "left", "center", "right", "bottomleft",
                      "bottom", "bottomright"},
                     {},
                     "decor",
                     {SLOT_SIZE, SLOT_FG, SLOT_SHAPE, SLOT_BG, SLOT_POS, SLOT_MOTIF}});
        v.push_back({1,
                     "ka",
                     {"kiru", "kanu", "kepa", "kosu"},
                     {"akai", "kimido", "aoi", "kiiro", "kimizu", "beni"},
                     {"akano", "midono", "aono", "kirono", "mizuno", "benino"},
                     {"chibi", "ooki"},
                     {"uehi", "uena", "uemi", "hidari", "kanaka", "migite", "shihi", "shitana",
                      "shimi"},
                     {{0, "kuro"}, {1, "shiro"}},
                     "kazari",
                     {SLOT_SHAPE, SLOT_SIZE, SLOT_FG, SLOT_MOTIF, SLOT_BG, SLOT_POS}});
        v.push_back({2,
                     "zu",
                     {"zirk", "zquad", "zdrei", "zkrux"},
                     {"zrot", "zgrun", "zblau", "zgelb", "zcyan", "zmag"},
                     {"zrotf", "zgrunf", "zblauf", "zgelbf", "zcyanf", "zmagf"},
                     {"zklein", "zgross"},
                     {"zol", "zom", "zor", "zwl", "zwm", "zwr", "zul", "zum", "zur"},
                     {{2, "zolan"}, {3, "zikua"}},
                     "zodec",
                     {SLOT_POS, SLOT_BG, SLOT_SHAPE, SLOT_FG, SLOT_SIZE, SLOT_MOTIF}});
        v.push_back({3,
                     "mi",
                     {"mirou", "makau", "mitri", "mokru"},
                     {"mera", "maka", "moana", "mala", "mikili", "mapua"},
                     {"merapo", "makapo", "moanapo", "malapo", "mikipo", "mapuapo"},
                     {"miti", "manui"},
                     {"maru", "mane", "maro", "mele", "meso", "mero", "mulu", "mune", "muro"},
                     {{4, "miros"}, {5, "melov"}},
                     "madec",
                     {SLOT_FG, SLOT_SHAPE, SLOT_MOTIF, SLOT_SIZE, SLOT_POS, SLOT_BG}});
        return v;
    }();
    return langs;
}

inline const Language& language_by_name(const std::string& name) {
    for (const auto& l : languages())
        if (l.name == name) return l;
    throw ConfigError("unknown language: " + name);
}

inline int motif_owner(int motif) { return 1 + motif / 2; }  // ka owns 0,1; zu 2,3; mi 4,5

// surface word for one slot; empty means the slot is dropped from the caption
inline std::string slot_word(const Language& lang, const SceneSpec& s, int slot) {
    switch (slot) {
        case SLOT_SIZE: return lang.sizes[s.size];
        case SLOT_FG: return lang.fg[s.fg];
        case SLOT_SHAPE: return lang.shapes[s.shape];
        case SLOT_BG: return lang.bg[s.bg];
        case SLOT_POS: return lang.positions[s.pos];
        case SLOT_MOTIF: {
            if (s.motif < 0) return "";
            auto it = lang.motifs.find(s.motif);
            return it != lang.motifs.end() ? it->second : lang.decor;
        }
        default: throw std::logic_error("bad slot");
    }
}

inline std::string caption(const SceneSpec& s, const Language& lang) {
    s.validate();
    std::string out;
    for (int slot : lang.word_order) {
        std::string w = slot_word(lang, s, slot);
        if (w.empty()) continue;
        if (!out.empty()) out += ' ';
        out += w;
    }
    return out;
}

// ---------------------------------------------------------------------------
// tokenizer: one dense id space shared by all languages

constexpr int TOK_PAD = 0;
constexpr int TOK_CLS = 1;
constexpr int TOK_TOS = 2;
constexpr int TOK_NULL = 3;
constexpr int L_MAX = 12;  // max token positions incl. the leading [CLS]/[TOS]

struct WordInfo {
    int id;
    int lang;
    int slot;
    int value;  // index within the slot's value range; for SLOT_MOTIF: motif id, or -1 for decor
};

class Tokenizer {
public:
    Tokenizer() {
        int next_id = 4;
        auto add = [&](const std::string& w, int lang, int slot, int value) {
            if (words_.count(w))
                throw std::logic_error("tokenizer: duplicate surface form '" + w + "'");
            words_[w] = {next_id++, lang, slot, value};
        };
        for (const auto& l : languages()) {
            for (int i = 0; i < NUM_SIZES; ++i) add(l.sizes[i], l.id, SLOT_SIZE, i);
            for (int i = 0; i < NUM_COLORS; ++i) add(l.fg[i], l.id, SLOT_FG, i);
            for (int i = 0; i < NUM_SHAPES; ++i) add(l.shapes[i], l.id, SLOT_SHAPE, i);
            for (int i = 0; i < NUM_COLORS; ++i) add(l.bg[i], l.id, SLOT_BG, i);
            for (int i = 0; i < NUM_POSITIONS; ++i) add(l.positions[i], l.id, SLOT_POS, i);
            for (const auto& [motif, w] : l.motifs) add(w, l.id, SLOT_MOTIF, motif);
            add(l.decor, l.id, SLOT_MOTIF, -1);
        }
        vocab_size_ = next_id;
    }

    int vocab_size() const { return vocab_size_; }

    const WordInfo& lookup(const std::string& w) const {
        auto it = words_.find(w);
        if (it == words_.end()) throw ConfigError("unknown word: '" + w + "'");
        return it->second;
    }

    // split on single spaces; empty text -> no words
    static std::vector<std::string> split(const std::string& text) {
        std::vector<std::string> out;
        std::istringstream is(text);
        std::string w;
        while (is >> w) out.push_back(w);
        return out;
    }

    // token ids with `lead` at position 0, padded to L_MAX
    std::vector<int> encode(const std::string& text, int lead) const {
        auto ws = split(text);
        if (static_cast<int>(ws.size()) + 1 > L_MAX)
            throw ConfigError("text exceeds L_MAX tokens: '" + text + "'");
        std::vector<int> ids(L_MAX, TOK_PAD);
        ids[0] = lead;
        for (size_t i = 0; i < ws.size(); ++i) ids[i + 1] = lookup(ws[i]).id;
        return ids;
    }

private:
    std::map<std::string, WordInfo> words_;
    int vocab_size_ = 0;
};

inline const Tokenizer& tokenizer() {
    static const Tokenizer t;
    return t;
}

// Parsed caption: the scene plus whether a generic decor word stood in for an
// unknown motif (translation-lossy caption).
struct ParsedCaption {
    SceneSpec scene;
    bool generic_motif = false;
};

inline ParsedCaption parse_caption(const std::string& text) {
    const Tokenizer& tok = tokenizer();
    std::array<int, SLOT_COUNT> seen;
    seen.fill(0);
    ParsedCaption out;
    out.scene.motif = -1;
    for (const auto& w : Tokenizer::split(text)) {
        const WordInfo& info = tok.lookup(w);
        if (seen[info.slot]++)
            throw ConfigError("caption repeats slot " + std::to_string(info.slot) + ": '" + text + "'");
        switch (info.slot) {
            case SLOT_SIZE: out.scene.size = info.value; break;
            case SLOT_FG: out.scene.fg = info.value; break;
            case SLOT_SHAPE: out.scene.shape = info.value; break;
            case SLOT_BG: out.scene.bg = info.value; break;
            case SLOT_POS: out.scene.pos = info.value; break;
            case SLOT_MOTIF:
                if (info.value < 0)
                    out.generic_motif = true;
                else
                    out.scene.motif = info.value;
                break;
        }
    }
    for (int s = SLOT_SIZE; s < SLOT_MOTIF; ++s)
        if (!seen[s]) throw ConfigError("caption missing slot " + std::to_string(s) + ": '" + text + "'");
    out.scene.validate();
    return out;
}

// ---------------------------------------------------------------------------
// concept prompt sets (MC-18 analog)

struct ConceptPrompt {
    int lang;
    std::string text;
    SceneSpec scene;
    bool owned_concept;  // prompt contains a motif word owned by `lang`
};

// Per language, `per_language` prompts; for motif-owning languages at least
// half carry an owned exclusive concept. English owns none, so its prompts
// are motif-free.
inline std::vector<ConceptPrompt> make_concept_prompts(int per_language, uint64_t seed) {
    std::vector<ConceptPrompt> out;
    for (const auto& lang : languages()) {
        auto rng = Rng::stream(seed, "concept_prompts/" + lang.name);
        for (int i = 0; i < per_language; ++i) {
            bool owned = !lang.motifs.empty() && (i % 2 == 0);
            SceneSpec s = random_scene(rng, 0.0);
            if (owned) {
                auto it = lang.motifs.begin();
                std::advance(it, i / 2 % lang.motifs.size());
                s.motif = it->first;
            }
            out.push_back({lang.id, caption(s, lang), s, owned});
        }
    }
    return out;
}

}  // namespace polydiff
