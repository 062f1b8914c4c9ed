#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "xfuse/hash.hpp"

namespace xfuse {

// Plain-text `key = value` configuration.  Keys are dotted paths; values are
// uninterpreted strings until typed accessors parse them.  Serialization is
// canonical (sorted keys), so hash() names the exact merged configuration.
class KvConfig {
  public:
    KvConfig() = default;

    static KvConfig parse(const std::string& text, const std::string& origin = "config") {
        KvConfig c;
        std::istringstream is(text);
        std::string line;
        int lineno = 0;
        while (std::getline(is, line)) {
            ++lineno;
            const std::string t = trim(line);
            if (t.empty() || t[0] == '#') continue;
            const size_t eq = t.find('=');
            if (eq == std::string::npos)
                throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                         ": expected 'key = value'");
            const std::string key = trim(t.substr(0, eq));
            if (key.empty())
                throw std::runtime_error(origin + ":" + std::to_string(lineno) +
                                         ": empty key");
            c.kv_[key] = trim(t.substr(eq + 1));
        }
        return c;
    }

    static KvConfig load(const std::string& path) {
        std::ifstream f(path);
        if (!f) throw std::runtime_error("config: cannot open " + path);
        std::stringstream ss;
        ss << f.rdbuf();
        return parse(ss.str(), path);
    }

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    void set(const std::string& key, const std::string& value) { kv_[key] = value; }
    void set(const std::string& key, int64_t value) { kv_[key] = std::to_string(value); }
    void set(const std::string& key, int value) { kv_[key] = std::to_string(value); }
    void set(const std::string& key, uint64_t value) { kv_[key] = std::to_string(value); }
    void set(const std::string& key, double value) {
        std::ostringstream os;
        os.precision(17);
        os << value;
        kv_[key] = os.str();
    }

    const std::string& str(const std::string& key) const {
        auto it = kv_.find(key);
        if (it == kv_.end()) throw std::runtime_error("config: missing key '" + key + "'");
        return it->second;
    }
    std::string str_or(const std::string& key, const std::string& dflt) const {
        auto it = kv_.find(key);
        return it == kv_.end() ? dflt : it->second;
    }

    int64_t integer(const std::string& key) const { return to_int(str(key), key); }
    int64_t int_or(const std::string& key, int64_t dflt) const {
        return has(key) ? integer(key) : dflt;
    }

    double real(const std::string& key) const { return to_double(str(key), key); }
    double real_or(const std::string& key, double dflt) const {
        return has(key) ? real(key) : dflt;
    }

    bool flag_or(const std::string& key, bool dflt) const {
        if (!has(key)) return dflt;
        const std::string& v = str(key);
        if (v == "true" || v == "1") return true;
        if (v == "false" || v == "0") return false;
        throw std::runtime_error("config: key '" + key + "' is not a boolean: " + v);
    }

    uint64_t hex(const std::string& key) const {
        const std::string& v = str(key);
        uint64_t x = 0;
        if (v.empty() || v.size() > 16)
            throw std::runtime_error("config: key '" + key + "' is not a hex hash");
        for (char c : v) {
            int d;
            if (c >= '0' && c <= '9') d = c - '0';
            else if (c >= 'a' && c <= 'f') d = c - 'a' + 10;
            else throw std::runtime_error("config: key '" + key + "' is not a hex hash");
            x = (x << 4) | static_cast<uint64_t>(d);
        }
        return x;
    }

    // Overlay `other` on top of this config (used for flag overrides).
    void merge(const KvConfig& other) {
        for (const auto& [k, v] : other.kv_) kv_[k] = v;
    }

    // All keys sharing a dotted prefix, e.g. "output.".
    std::vector<std::string> keys_with_prefix(const std::string& prefix) const {
        std::vector<std::string> out;
        for (const auto& [k, v] : kv_)
            if (k.rfind(prefix, 0) == 0) out.push_back(k);
        return out;
    }

    std::string serialize() const {
        std::ostringstream os;
        for (const auto& [k, v] : kv_) os << k << " = " << v << "\n";
        return os.str();
    }

    uint64_t hash() const {
        const std::string s = serialize();
        return fnv1a64(s.data(), s.size());
    }

  private:
    static std::string trim(const std::string& s) {
        size_t a = 0, b = s.size();
        while (a < b && (s[a] == ' ' || s[a] == '\t' || s[a] == '\r')) ++a;
        while (b > a && (s[b - 1] == ' ' || s[b - 1] == '\t' || s[b - 1] == '\r')) --b;
        return s.substr(a, b - a);
    }
    static int64_t to_int(const std::string& v, const std::string& key) {
        try {
            size_t pos = 0;
            const int64_t x = std::stoll(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return x;
        } catch (const std::exception&) {
            throw std::runtime_error("config: key '" + key + "' is not an integer: " + v);
        }
    }
    static double to_double(const std::string& v, const std::string& key) {
        try {
            size_t pos = 0;
            const double x = std::stod(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return x;
        } catch (const std::exception&) {
            throw std::runtime_error("config: key '" + key + "' is not a number: " + v);
        }
    }

    std::map<std::string, std::string> kv_;
};

// Writes via a temporary file and renames into place, so readers never see a
// partial file and failed runs leave no half-written artifact.
inline void atomic_write(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw std::runtime_error("write: cannot open " + tmp);
        f.write(content.data(), static_cast<std::streamsize>(content.size()));
        f.flush();
        if (!f) throw std::runtime_error("write: failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw std::runtime_error("write: cannot rename " + tmp + " to " + path);
}

inline std::string slurp_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("read: cannot open " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

inline uint64_t file_hash(const std::string& path) {
    const std::string s = slurp_file(path);
    return fnv1a64(s.data(), s.size());
}

}  // namespace xfuse
