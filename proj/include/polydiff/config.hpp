#pragma once
// Flat key=value run configuration: parsed from a file, overridden by CLI
// flags, validated against a documented key set, and echoed verbatim into
// every output directory for provenance.

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "polydiff/errors.hpp"

namespace polydiff {

struct RunConfig {
    // insertion-ordered so the echo reads like the inputs that produced it
    std::vector<std::pair<std::string, std::string>> items;
    std::map<std::string, size_t> index;

    bool has(const std::string& key) const { return index.count(key) != 0; }

    void set(const std::string& key, const std::string& value) {
        auto it = index.find(key);
        if (it != index.end()) {
            items[it->second].second = value;
        } else {
            index[key] = items.size();
            items.emplace_back(key, value);
        }
    }

    const std::string& get(const std::string& key) const {
        auto it = index.find(key);
        if (it == index.end()) throw ConfigError("config: missing key '" + key + "'");
        return items[it->second].second;
    }

    std::string get_str(const std::string& key, const std::string& fallback) const {
        return has(key) ? get(key) : fallback;
    }

    int64_t get_int(const std::string& key, int64_t fallback) const {
        if (!has(key)) return fallback;
        const std::string& v = get(key);
        try {
            size_t pos = 0;
            int64_t r = std::stoll(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' is not an integer: '" + v + "'");
        }
    }

    double get_double(const std::string& key, double fallback) const {
        if (!has(key)) return fallback;
        const std::string& v = get(key);
        try {
            size_t pos = 0;
            double r = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' is not a number: '" + v + "'");
        }
    }

    uint64_t get_u64(const std::string& key, uint64_t fallback) const {
        if (!has(key)) return fallback;
        const std::string& v = get(key);
        try {
            size_t pos = 0;
            uint64_t r = std::stoull(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return r;
        } catch (const std::exception&) {
            throw ConfigError("config: key '" + key + "' is not an unsigned integer: '" + v + "'");
        }
    }

    bool get_bool(const std::string& key, bool fallback) const {
        if (!has(key)) return fallback;
        const std::string& v = get(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config: key '" + key + "' is not a boolean: '" + v + "'");
    }

    // one "key=value" pair, as in a --set override
    void set_pair(const std::string& pair) {
        auto eq = pair.find('=');
        if (eq == std::string::npos || eq == 0)
            throw ConfigError("config: override must be key=value, got '" + pair + "'");
        set(pair.substr(0, eq), pair.substr(eq + 1));
    }

    // every key must be documented; anything else is a typo we refuse to guess at
    void restrict_keys(const std::set<std::string>& allowed, const std::string& who) const {
        for (const auto& [k, v] : items)
            if (!allowed.count(k))
                throw ConfigError(who + ": unknown config key '" + k + "'");
    }

    std::string echo() const {
        std::string out;
        for (const auto& [k, v] : items) out += k + "=" + v + "\n";
        return out;
    }

    static RunConfig from_file(const std::filesystem::path& path) {
        std::ifstream f(path);
        if (!f) throw MissingFileError("config file not found: " + path.string());
        RunConfig rc;
        std::string line;
        int lineno = 0;
        while (std::getline(f, line)) {
            ++lineno;
            auto hash = line.find('#');
            if (hash != std::string::npos) line = line.substr(0, hash);
            // trim
            auto b = line.find_first_not_of(" \t\r");
            if (b == std::string::npos) continue;
            auto e = line.find_last_not_of(" \t\r");
            line = line.substr(b, e - b + 1);
            auto eq = line.find('=');
            if (eq == std::string::npos || eq == 0)
                throw ConfigError("config file " + path.string() + ":" + std::to_string(lineno) +
                                  ": expected key=value, got '" + line + "'");
            auto key_end = line.find_last_not_of(" \t", eq - 1);
            auto val_begin = line.find_first_not_of(" \t", eq + 1);
            std::string key = line.substr(0, key_end + 1);
            std::string val = val_begin == std::string::npos ? "" : line.substr(val_begin);
            rc.set(key, val);
        }
        return rc;
    }

    void write_echo(const std::filesystem::path& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw MissingFileError("cannot write config echo: " + path.string());
        f << echo();
        if (!f) throw NumericError("config echo write failed: " + path.string());
    }
};

}  // namespace polydiff
