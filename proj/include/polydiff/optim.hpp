#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "polydiff/tensor.hpp"

// Named parameter registry plus AdamW and EMA. Parameter order is the
// registration order; checkpoints serialize by name so order only matters
// for iteration determinism, which registration order provides.

namespace polydiff {

template <typename S>
struct ParamSet {
    std::vector<std::string> names;
    std::vector<Tensor<S>> tensors;
    std::map<std::string, size_t> index;

    Tensor<S> add(const std::string& name, Tensor<S> t) {
        if (index.count(name)) throw std::invalid_argument("ParamSet: duplicate name " + name);
        t.node().requires_grad = true;
        index[name] = names.size();
        names.push_back(name);
        tensors.push_back(t);
        return t;
    }

    bool has(const std::string& name) const { return index.count(name) != 0; }

    Tensor<S>& get(const std::string& name) {
        auto it = index.find(name);
        if (it == index.end()) throw std::out_of_range("ParamSet: no parameter " + name);
        return tensors[it->second];
    }
    const Tensor<S>& get(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw std::out_of_range("ParamSet: no parameter " + name);
        return tensors[it->second];
    }

    size_t size() const { return tensors.size(); }

    int64_t scalar_count() const {
        int64_t n = 0;
        for (const auto& t : tensors) n += t.numel();
        return n;
    }

    void zero_grad() {
        for (auto& t : tensors) t.zero_grad();
    }

    // trainable mask: true everywhere by default; freezing flips requires_grad
    // so frozen params neither collect grads nor get stepped
    void set_trainable(const std::function<bool(const std::string&)>& pred) {
        for (size_t i = 0; i < names.size(); ++i) tensors[i].node().requires_grad = pred(names[i]);
    }

    std::vector<std::string> trainable_names() const {
        std::vector<std::string> out;
        for (size_t i = 0; i < names.size(); ++i)
            if (tensors[i].requires_grad()) out.push_back(names[i]);
        return out;
    }
};

// FNV-1a over the raw bytes of all parameters in registration order; used by
// the freeze invariant checks (teacher/codec/encoder must not drift)
template <typename S>
uint64_t params_hash(const ParamSet<S>& ps) {
    uint64_t h = 1469598103934665603ull;
    for (const auto& t : ps.tensors) {
        const auto& d = t.data();
        const unsigned char* p = reinterpret_cast<const unsigned char*>(d.data());
        for (size_t i = 0; i < d.size() * sizeof(S); ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    }
    return h;
}

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    int64_t warmup_steps = 0;
    // optional cosine decay from lr to final_lr_frac*lr over total_steps
    // (after warmup); total_steps == 0 disables decay
    int64_t total_steps = 0;
    double final_lr_frac = 0.1;
};

// lr schedule: linear warmup then (optionally) cosine decay
inline double adamw_lr_at(const AdamWConfig& cfg, int64_t step) {
    double lr = cfg.lr;
    if (cfg.warmup_steps > 0)
        lr *= std::min(1.0, static_cast<double>(step) / static_cast<double>(cfg.warmup_steps));
    if (cfg.total_steps > 0 && step > cfg.warmup_steps) {
        double frac = static_cast<double>(step - cfg.warmup_steps) /
                      static_cast<double>(std::max<int64_t>(1, cfg.total_steps - cfg.warmup_steps));
        frac = std::min(1.0, frac);
        double lo = cfg.lr * cfg.final_lr_frac;
        double hi = cfg.lr;
        double cos = 0.5 * (1.0 + std::cos(frac * 3.14159265358979323846));
        lr = lr / cfg.lr * (lo + (hi - lo) * cos);
    }
    return lr;
}

template <typename S>
class AdamW {
public:
    AdamW(ParamSet<S>& params, AdamWConfig cfg) : params_(&params), cfg_(cfg) {
        m_.resize(params.size());
        v_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) {
            m_[i].assign(params.tensors[i].numel(), S(0));
            v_[i].assign(params.tensors[i].numel(), S(0));
        }
    }

    const AdamWConfig& config() const { return cfg_; }
    int64_t step_count() const { return step_; }
    void set_step_count(int64_t s) { step_ = s; }
    std::vector<std::vector<S>>& moment1() { return m_; }
    std::vector<std::vector<S>>& moment2() { return v_; }

    double last_lr() const { return last_lr_; }

    // one update from the grads currently stored on the params
    void step() {
        ++step_;
        double lr = adamw_lr_at(cfg_, step_);
        last_lr_ = lr;
        double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
        double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
        for (size_t i = 0; i < params_->size(); ++i) {
            Tensor<S>& t = params_->tensors[i];
            if (!t.requires_grad()) continue;
            if (!t.has_grad())
                throw std::runtime_error("adamw_step: trainable parameter '" + params_->names[i] +
                                         "' has no gradient");
            auto& data = t.data();
            const auto& grad = t.node().grad;
            auto& m = m_[i];
            auto& v = v_[i];
            for (size_t k = 0; k < data.size(); ++k) {
                double g = grad[k];
                double mk = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g;
                double vk = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g * g;
                m[k] = static_cast<S>(mk);
                v[k] = static_cast<S>(vk);
                double mhat = mk / bc1;
                double vhat = vk / bc2;
                double upd = lr * mhat / (std::sqrt(vhat) + cfg_.eps);
                double decayed = lr * cfg_.weight_decay * data[k];
                data[k] = static_cast<S>(data[k] - upd - decayed);
            }
        }
    }

private:
    ParamSet<S>* params_;
    AdamWConfig cfg_;
    int64_t step_ = 0;
    double last_lr_ = 0;
    std::vector<std::vector<S>> m_;
    std::vector<std::vector<S>> v_;
};

// shadow <- decay*shadow + (1-decay)*params, over all params (frozen included,
// which is a no-op drift-wise since frozen params never move)
template <typename S>
class Ema {
public:
    Ema(const ParamSet<S>& params, double decay) : decay_(decay) {
        shadow_.resize(params.size());
        for (size_t i = 0; i < params.size(); ++i) shadow_[i] = params.tensors[i].data();
    }

    double decay() const { return decay_; }
    std::vector<std::vector<S>>& shadow() { return shadow_; }
    const std::vector<std::vector<S>>& shadow() const { return shadow_; }

    void update(const ParamSet<S>& params) {
        for (size_t i = 0; i < params.size(); ++i) {
            const auto& d = params.tensors[i].data();
            auto& s = shadow_[i];
            for (size_t k = 0; k < d.size(); ++k)
                s[k] = static_cast<S>(decay_ * s[k] + (1.0 - decay_) * d[k]);
        }
    }

    // mean abs difference between shadow and live params
    double gap(const ParamSet<S>& params) const {
        double acc = 0;
        int64_t n = 0;
        for (size_t i = 0; i < params.size(); ++i) {
            const auto& d = params.tensors[i].data();
            const auto& s = shadow_[i];
            for (size_t k = 0; k < d.size(); ++k) acc += std::abs(static_cast<double>(d[k]) - s[k]);
            n += static_cast<int64_t>(d.size());
        }
        return n ? acc / n : 0.0;
    }

    // copy shadow into the params (e.g. for sampling with EMA weights)
    void copy_to(ParamSet<S>& params) const {
        for (size_t i = 0; i < params.size(); ++i) params.tensors[i].data() = shadow_[i];
    }

private:
    double decay_;
    std::vector<std::vector<S>> shadow_;
};

}  // namespace polydiff
