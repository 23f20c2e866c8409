#pragma once

#include <CLI11.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <memory>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "pivotnmt/errors.hpp"

namespace pivotnmt::cli {

namespace fs = std::filesystem;
using nlohmann::json;

// Bad invocation: unknown config key, missing required value, malformed number.
// Maps to exit code 1; every other failure maps to 2.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

enum class ParamType { Int, Real, Text, Flag };

struct ParamSpec {
    std::string name;  // flag spelling without dashes, e.g. "max-tokens"
    ParamType type = ParamType::Text;
    json fallback;     // null means "no default"
    std::string help;
    bool required = false;
};

// Config-file and resolved-config key for a flag: dashes become underscores.
inline std::string config_key(const std::string& flag) {
    std::string k = flag;
    std::replace(k.begin(), k.end(), '-', '_');
    return k;
}

inline json parse_typed(const ParamSpec& p, const std::string& text) {
    try {
        std::size_t used = 0;
        switch (p.type) {
            case ParamType::Int: {
                if (!text.empty() && text[0] == '-') throw std::invalid_argument("negative");
                const unsigned long long v = std::stoull(text, &used);
                if (used != text.size()) throw std::invalid_argument("trailing characters");
                return json(static_cast<std::uint64_t>(v));
            }
            case ParamType::Real: {
                const double v = std::stod(text, &used);
                if (used != text.size()) throw std::invalid_argument("trailing characters");
                return json(v);
            }
            case ParamType::Flag: return json(text == "true" || text == "1");
            case ParamType::Text: return json(text);
        }
    } catch (const std::exception&) {
    }
    throw UsageError("--" + p.name + ": cannot parse '" + text + "'");
}

// A config-file value must have the parameter's type.
inline json check_typed(const ParamSpec& p, const json& v) {
    const bool ok = (p.type == ParamType::Int && v.is_number_unsigned()) ||
                    (p.type == ParamType::Real && v.is_number()) || (p.type == ParamType::Flag && v.is_boolean()) ||
                    (p.type == ParamType::Text && v.is_string());
    if (!ok) throw UsageError("config key '" + config_key(p.name) + "' has the wrong type: " + v.dump());
    return p.type == ParamType::Real ? json(v.get<double>()) : v;
}

// Holds the raw CLI11 captures for one subcommand and resolves them against a
// config file and the built-in defaults.
class ParamBinder {
public:
    void bind(CLI::App& app, const std::vector<ParamSpec>& specs) {
        for (const auto& p : specs) {
            auto& slot = raw_[p.name];
            CLI::Option* opt = nullptr;
            if (p.type == ParamType::Flag) {
                opt = app.add_flag("--" + p.name, p.help);
            } else {
                std::string help = p.help;
                if (!p.fallback.is_null()) help += " [default: " + (p.fallback.is_string() ? p.fallback.get<std::string>() : p.fallback.dump()) + "]";
                opt = app.add_option("--" + p.name, slot, help);
                opt->type_name(p.type == ParamType::Int ? "UINT" : p.type == ParamType::Real ? "REAL" : "TEXT");
            }
            options_[p.name] = opt;
            specs_.push_back(p);
        }
    }

    // CLI flag > `section` of the config file > top-level config key > default.
    json resolve(const json& config, const std::string& section) const {
        json out = json::object();
        const json* sec = config.contains(section) ? &config.at(section) : nullptr;
        if (sec) {
            if (!sec->is_object()) throw UsageError("config section '" + section + "' must be an object");
            for (const auto& [k, v] : sec->items()) {
                const bool known = std::any_of(specs_.begin(), specs_.end(),
                                               [&](const ParamSpec& p) { return config_key(p.name) == k; });
                if (!known) throw UsageError("config section '" + section + "': unknown key '" + k + "'");
            }
        }
        for (const auto& p : specs_) {
            const std::string key = config_key(p.name);
            json v = p.fallback;
            if (config.contains(key) && !config.at(key).is_object()) v = check_typed(p, config.at(key));
            if (sec && sec->contains(key)) v = check_typed(p, sec->at(key));
            const CLI::Option* opt = options_.at(p.name);
            if (opt->count() > 0) {
                v = p.type == ParamType::Flag ? json(true) : parse_typed(p, raw_.at(p.name));
            }
            if (v.is_null() && p.required) throw UsageError("missing required option --" + p.name);
            out[key] = v;
        }
        return out;
    }

private:
    std::vector<ParamSpec> specs_;
    std::map<std::string, std::string> raw_;
    std::map<std::string, CLI::Option*> options_;
};

// Output directory of one run: refuses to clobber, records what it writes,
// and persists the resolved configuration plus a MANIFEST at the end.
class RunContext {
public:
    RunContext(std::string command, json resolved, std::ostream& out, std::ostream& err)
        : command_(std::move(command)), cfg_(std::move(resolved)), out_(out), err_(err) {}

    const json& config() const { return cfg_; }
    std::ostream& out() { return out_; }
    std::ostream& log() { return err_; }

    bool has(const std::string& key) const { return cfg_.contains(key) && !cfg_.at(key).is_null(); }
    std::string text(const std::string& key) const { return get(key).get<std::string>(); }
    std::size_t count(const std::string& key) const { return get(key).get<std::size_t>(); }
    std::uint64_t u64(const std::string& key) const { return get(key).get<std::uint64_t>(); }
    double real(const std::string& key) const { return get(key).get<double>(); }
    bool flag(const std::string& key) const { return has(key) && get(key).get<bool>(); }

    // Creates the output directory. Without --overwrite a non-empty directory
    // is refused before any work is done.
    void open_output_dir(const std::string& dir, bool overwrite) {
        dir_ = dir;
        if (fs::exists(dir_)) {
            if (!fs::is_directory(dir_)) throw IoError("output path " + dir + " exists and is not a directory");
            if (!overwrite && !fs::is_empty(dir_)) {
                throw IoError("output directory " + dir + " is not empty; pass --overwrite to replace its contents");
            }
        }
        fs::create_directories(dir_);
    }

    const fs::path& dir() const { return dir_; }

    // Path for a produced file; it is listed in the MANIFEST.
    std::string output(const std::string& name) {
        produced_.push_back(name);
        return (dir_ / name).string();
    }

    void record_written(const std::string& full_path) {
        produced_.push_back(fs::path(full_path).lexically_relative(dir_).generic_string());
    }

    void finish() {
        json persisted = cfg_;
        persisted["command"] = command_;
        {
            std::ofstream f(dir_ / "config.resolved.json", std::ios::binary);
            f << persisted.dump(2) << '\n';
            if (!f) throw IoError("cannot write " + (dir_ / "config.resolved.json").string());
        }
        std::vector<std::string> files = produced_;
        files.push_back("config.resolved.json");
        std::sort(files.begin(), files.end());
        files.erase(std::unique(files.begin(), files.end()), files.end());
        std::ofstream m(dir_ / "MANIFEST", std::ios::binary);
        for (const auto& f : files) m << f << '\n';
        if (!m) throw IoError("cannot write " + (dir_ / "MANIFEST").string());
    }

private:
    const json& get(const std::string& key) const {
        if (!has(key)) throw UsageError("missing value for --" + key);
        return cfg_.at(key);
    }

    std::string command_;
    json cfg_;
    std::ostream& out_;
    std::ostream& err_;
    fs::path dir_;
    std::vector<std::string> produced_;
};

inline json load_config_file(const std::string& path) {
    if (path.empty()) return json::object();
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config file " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw UsageError("config file " + path + " is not valid JSON: " + e.what());
    }
    if (!j.is_object()) throw UsageError("config file " + path + " must hold a JSON object");
    return j;
}

}  // namespace pivotnmt::cli
