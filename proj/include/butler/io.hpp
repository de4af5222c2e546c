#pragma once

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "butler/metrics.hpp"
#include "butler/sha256.hpp"
#include "butler/trainer.hpp"

namespace butler {

using Json = nlohmann::json;

// -------- flat key = value config files --------------------------------------

inline std::map<std::string, std::string> parse_config_text(const std::string& text) {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        size_t first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#') continue;
        size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(lineno) + " is not 'key = value'");
        auto trim = [](std::string s) {
            size_t a = s.find_first_not_of(" \t");
            size_t b = s.find_last_not_of(" \t");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        std::string key = trim(line.substr(0, eq));
        std::string val = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError("empty key on line " + std::to_string(lineno));
        out[key] = val;
    }
    return out;
}

inline std::map<std::string, std::string> parse_config_file(const std::string& path) {
    return parse_config_text(read_text_file(path));
}

class ConfigView {
public:
    explicit ConfigView(std::map<std::string, std::string> kv) : kv_(std::move(kv)) {}

    int get_int(const std::string& key, int fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            return std::stoi(it->second);
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' is not an integer: " + it->second);
        }
    }

    double get_double(const std::string& key, double fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            return std::stod(it->second);
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' is not a number: " + it->second);
        }
    }

    uint64_t get_u64(const std::string& key, uint64_t fallback) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            return std::stoull(it->second);
        } catch (const std::exception&) {
            throw ConfigError("key '" + key + "' is not an integer: " + it->second);
        }
    }

    std::string get_str(const std::string& key, const std::string& fallback) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? fallback : it->second;
    }

    const std::map<std::string, std::string>& raw() const { return kv_; }

private:
    std::map<std::string, std::string> kv_;
};

// -------- run manifests --------------------------------------------------------

// Emitted alongside every output file; rerunning the recorded command with
// the same inputs reproduces the outputs byte for byte.
struct RunManifest {
    std::string command;
    Json config = Json::object();
    Json seeds = Json::object();
    Json input_digests = Json::object();
    std::vector<std::string> outputs;

    Json to_json() const {
        Json j;
        j["command"] = command;
        j["config"] = config;
        j["seeds"] = seeds;
        j["input_digests"] = input_digests;
        j["outputs"] = outputs;
        j["tool_version"] = kToolVersion;
        return j;
    }

    void write(const std::string& out_path) const {
        atomic_write_file(out_path, to_json().dump(2) + "\n");
    }
};

inline std::string file_sha256_hex(const std::string& path) {
    return Sha256::hex_of(read_text_file(path));
}

// -------- CSV / JSONL helpers ----------------------------------------------------

inline std::string csv_escape(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += "\"\"";
        else out.push_back(c);
    }
    out += "\"";
    return out;
}

inline std::string format_double(double v) {
    std::ostringstream os;
    os.precision(10);
    os << v;
    return os.str();
}

// long-format CSV from aggregated summary rows: one row per (group, metric)
inline std::string summary_to_csv(const std::vector<SummaryRow>& rows) {
    std::string out = "policy,sparsity,metric,mean,count\n";
    for (const auto& r : rows)
        for (const auto& [k, v] : r.means)
            out += csv_escape(r.policy) + "," + format_double(r.sparsity) + "," + k + "," +
                   format_double(v) + "," + std::to_string(r.count) + "\n";
    return out;
}

// glob with '*' wildcards (no directory recursion beyond the pattern's dir)
inline std::vector<std::string> glob_files(const std::string& pattern) {
    namespace fs = std::filesystem;
    fs::path pat(pattern);
    fs::path dir = pat.has_parent_path() ? pat.parent_path() : fs::path(".");
    std::string name_pat = pat.filename().string();
    auto match = [&](const std::string& name) {
        size_t ni = 0, pi = 0, star = std::string::npos, star_ni = 0;
        while (ni < name.size()) {
            if (pi < name_pat.size() && (name_pat[pi] == name[ni])) {
                ++ni;
                ++pi;
            } else if (pi < name_pat.size() && name_pat[pi] == '*') {
                star = pi++;
                star_ni = ni;
            } else if (star != std::string::npos) {
                pi = star + 1;
                ni = ++star_ni;
            } else {
                return false;
            }
        }
        while (pi < name_pat.size() && name_pat[pi] == '*') ++pi;
        return pi == name_pat.size();
    };
    std::vector<std::string> out;
    if (!fs::exists(dir)) return out;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file()) continue;
        if (match(entry.path().filename().string())) out.push_back(entry.path().string());
    }
    std::sort(out.begin(), out.end());
    return out;
}

// parse JSONL run records (as written by simulate/bench) for aggregation
inline std::vector<RunRecord> read_run_records(const std::vector<std::string>& paths) {
    std::vector<RunRecord> records;
    for (const auto& path : paths) {
        std::istringstream in(read_text_file(path));
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            Json j = Json::parse(line, nullptr, false);
            if (j.is_discarded())
                throw FormatError("bad JSON line in '" + path + "'");
            RunRecord r;
            r.policy = j.value("policy", std::string("?"));
            r.sparsity = j.value("sparsity", 0.0);
            for (auto& [k, v] : j.items()) {
                if (k == "policy" || k == "sparsity") continue;
                if (v.is_number()) r.metrics[k] = v.get<double>();
            }
            records.push_back(std::move(r));
        }
    }
    return records;
}

}  // namespace butler
