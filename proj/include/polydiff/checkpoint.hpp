#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "polydiff/errors.hpp"
#include "polydiff/optim.hpp"
#include "polydiff/tensor.hpp"

// Single-file checkpoint container:
//   bytes 0..3   magic "PDC1"
//   bytes 4..11  u64 little-endian manifest byte length
//   manifest     JSON (schema_version, model, stage, step, config_hash,
//                optimizer hyperparameters, entries[])
//   payload      raw little-endian float32 arrays, in entries[] order
//
// Entry kinds: param, ema, opt_m, opt_v. Entries are emitted in parameter
// registration order (params first, then ema, then moments), and nlohmann's
// default object serialization sorts keys, so bytes are deterministic.

namespace polydiff {

namespace ckpt {

constexpr char MAGIC[4] = {'P', 'D', 'C', '1'};
constexpr int SCHEMA_VERSION = 1;

struct Entry {
    std::string name;
    Shape shape;
    std::string kind;  // param | ema | opt_m | opt_v
    bool trainable = true;
};

struct Manifest {
    int schema_version = SCHEMA_VERSION;
    std::string model;
    int stage = 0;
    int64_t step = 0;
    std::string config_hash;
    std::optional<AdamWConfig> opt;
    std::optional<double> ema_decay;
    std::vector<Entry> entries;
};

inline nlohmann::json to_json(const Manifest& m) {
    nlohmann::json j;
    j["schema_version"] = m.schema_version;
    j["model"] = m.model;
    j["stage"] = m.stage;
    j["step"] = m.step;
    j["config_hash"] = m.config_hash;
    if (m.opt) {
        j["optimizer"] = {{"lr", m.opt->lr},
                          {"beta1", m.opt->beta1},
                          {"beta2", m.opt->beta2},
                          {"eps", m.opt->eps},
                          {"weight_decay", m.opt->weight_decay},
                          {"warmup_steps", m.opt->warmup_steps},
                          {"total_steps", m.opt->total_steps},
                          {"final_lr_frac", m.opt->final_lr_frac}};
    }
    if (m.ema_decay) j["ema_decay"] = *m.ema_decay;
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& e : m.entries)
        arr.push_back({{"name", e.name}, {"shape", e.shape}, {"kind", e.kind}, {"trainable", e.trainable}});
    j["entries"] = arr;
    return j;
}

inline Manifest manifest_from_json(const nlohmann::json& j) {
    Manifest m;
    m.schema_version = j.at("schema_version").get<int>();
    if (m.schema_version != SCHEMA_VERSION)
        throw ConfigError("checkpoint schema_version " + std::to_string(m.schema_version) +
                          " unsupported (expected " + std::to_string(SCHEMA_VERSION) + ")");
    m.model = j.at("model").get<std::string>();
    m.stage = j.at("stage").get<int>();
    m.step = j.at("step").get<int64_t>();
    m.config_hash = j.at("config_hash").get<std::string>();
    if (j.contains("optimizer")) {
        AdamWConfig o;
        const auto& jo = j["optimizer"];
        o.lr = jo.at("lr").get<double>();
        o.beta1 = jo.at("beta1").get<double>();
        o.beta2 = jo.at("beta2").get<double>();
        o.eps = jo.at("eps").get<double>();
        o.weight_decay = jo.at("weight_decay").get<double>();
        o.warmup_steps = jo.at("warmup_steps").get<int64_t>();
        o.total_steps = jo.at("total_steps").get<int64_t>();
        o.final_lr_frac = jo.at("final_lr_frac").get<double>();
        m.opt = o;
    }
    if (j.contains("ema_decay")) m.ema_decay = j["ema_decay"].get<double>();
    for (const auto& je : j.at("entries")) {
        Entry e;
        e.name = je.at("name").get<std::string>();
        e.shape = je.at("shape").get<Shape>();
        e.kind = je.at("kind").get<std::string>();
        e.trainable = je.at("trainable").get<bool>();
        m.entries.push_back(std::move(e));
    }
    return m;
}

}  // namespace ckpt

namespace detail {

inline void write_f32(std::ostream& os, const float* p, int64_t n) {
    static_assert(sizeof(float) == 4);
    // assume little-endian host (x86); raw write is the LE encoding
    os.write(reinterpret_cast<const char*>(p), n * 4);
}

template <typename S>
inline void write_f32_from(std::ostream& os, const std::vector<S>& v) {
    if constexpr (std::is_same_v<S, float>) {
        write_f32(os, v.data(), static_cast<int64_t>(v.size()));
    } else {
        std::vector<float> tmp(v.begin(), v.end());
        write_f32(os, tmp.data(), static_cast<int64_t>(tmp.size()));
    }
}

template <typename S>
inline void read_f32_into(std::istream& is, std::vector<S>& v, int64_t n) {
    std::vector<float> tmp(static_cast<size_t>(n));
    is.read(reinterpret_cast<char*>(tmp.data()), n * 4);
    if (!is) throw ConfigError("checkpoint payload truncated");
    v.assign(tmp.begin(), tmp.end());
}

}  // namespace detail

// Full training state for one model. Optimizer/EMA slots may be empty
// (inference checkpoints carry params only).
template <typename S>
struct CheckpointState {
    ckpt::Manifest manifest;
    // values by (kind, name); param/ema/opt_m/opt_v
    std::map<std::pair<std::string, std::string>, std::vector<S>> values;

    const std::vector<S>* find(const std::string& kind, const std::string& name) const {
        auto it = values.find({kind, name});
        return it == values.end() ? nullptr : &it->second;
    }
};

template <typename S>
inline void save_checkpoint(const std::filesystem::path& path, const std::string& model, int stage,
                            int64_t step, const std::string& config_hash, const ParamSet<S>& params,
                            const AdamW<S>* opt = nullptr, const Ema<S>* ema = nullptr) {
    ckpt::Manifest m;
    m.model = model;
    m.stage = stage;
    m.step = step;
    m.config_hash = config_hash;
    if (opt) m.opt = opt->config();
    if (ema) m.ema_decay = ema->decay();
    for (size_t i = 0; i < params.size(); ++i)
        m.entries.push_back({params.names[i], params.tensors[i].shape(), "param",
                             params.tensors[i].requires_grad()});
    if (ema)
        for (size_t i = 0; i < params.size(); ++i)
            m.entries.push_back({params.names[i], params.tensors[i].shape(), "ema",
                                 params.tensors[i].requires_grad()});
    if (opt) {
        for (size_t i = 0; i < params.size(); ++i)
            m.entries.push_back({params.names[i], params.tensors[i].shape(), "opt_m",
                                 params.tensors[i].requires_grad()});
        for (size_t i = 0; i < params.size(); ++i)
            m.entries.push_back({params.names[i], params.tensors[i].shape(), "opt_v",
                                 params.tensors[i].requires_grad()});
    }

    std::string manifest_str = ckpt::to_json(m).dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw MissingFileError("cannot open checkpoint for write: " + path.string());
    os.write(ckpt::MAGIC, 4);
    uint64_t len = manifest_str.size();
    char lenbuf[8];
    for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((len >> (8 * i)) & 0xff);
    os.write(lenbuf, 8);
    os.write(manifest_str.data(), static_cast<std::streamsize>(manifest_str.size()));
    for (size_t i = 0; i < params.size(); ++i) detail::write_f32_from(os, params.tensors[i].data());
    if (ema)
        for (size_t i = 0; i < params.size(); ++i) detail::write_f32_from(os, ema->shadow()[i]);
    if (opt) {
        AdamW<S>* o = const_cast<AdamW<S>*>(opt);
        for (size_t i = 0; i < params.size(); ++i) detail::write_f32_from(os, o->moment1()[i]);
        for (size_t i = 0; i < params.size(); ++i) detail::write_f32_from(os, o->moment2()[i]);
    }
    os.flush();
    if (!os) throw NumericError("checkpoint write failed: " + path.string());
}

template <typename S>
inline CheckpointState<S> load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingFileError("checkpoint not found: " + path.string());
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, ckpt::MAGIC, 4) != 0)
        throw ConfigError("bad checkpoint magic in " + path.string());
    char lenbuf[8];
    is.read(lenbuf, 8);
    if (!is) throw ConfigError("checkpoint header truncated: " + path.string());
    uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= static_cast<uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
    if (len > (1ull << 30)) throw ConfigError("checkpoint manifest length implausible: " + std::to_string(len));
    std::string manifest_str(len, '\0');
    is.read(manifest_str.data(), static_cast<std::streamsize>(len));
    if (!is) throw ConfigError("checkpoint manifest truncated: " + path.string());
    nlohmann::json j = nlohmann::json::parse(manifest_str, nullptr, false);
    if (j.is_discarded()) throw ConfigError("checkpoint manifest is not valid JSON: " + path.string());

    CheckpointState<S> st;
    st.manifest = ckpt::manifest_from_json(j);
    for (const auto& e : st.manifest.entries) {
        std::vector<S> v;
        detail::read_f32_into(is, v, numel_of(e.shape));
        st.values[{e.kind, e.name}] = std::move(v);
    }
    return st;
}

// Copy "param" entries into an existing ParamSet (shape-checked).
template <typename S>
inline void apply_params(const CheckpointState<S>& st, ParamSet<S>& params) {
    for (size_t i = 0; i < params.size(); ++i) {
        const auto* v = st.find("param", params.names[i]);
        if (!v)
            throw ConfigError("checkpoint missing parameter '" + params.names[i] + "' for model " +
                              st.manifest.model);
        if (static_cast<int64_t>(v->size()) != params.tensors[i].numel())
            throw ConfigError("checkpoint shape mismatch for '" + params.names[i] + "'");
        params.tensors[i].data() = *v;
    }
}

template <typename S>
inline void apply_opt_state(const CheckpointState<S>& st, const ParamSet<S>& params, AdamW<S>& opt) {
    opt.set_step_count(st.manifest.step);
    for (size_t i = 0; i < params.size(); ++i) {
        const auto* m = st.find("opt_m", params.names[i]);
        const auto* v = st.find("opt_v", params.names[i]);
        if (!m || !v) throw ConfigError("checkpoint lacks optimizer state for '" + params.names[i] + "'");
        opt.moment1()[i] = *m;
        opt.moment2()[i] = *v;
    }
}

template <typename S>
inline void apply_ema(const CheckpointState<S>& st, const ParamSet<S>& params, Ema<S>& ema) {
    for (size_t i = 0; i < params.size(); ++i) {
        const auto* v = st.find("ema", params.names[i]);
        if (!v) throw ConfigError("checkpoint lacks EMA state for '" + params.names[i] + "'");
        ema.shadow()[i] = *v;
    }
}

}  // namespace polydiff
