#pragma once

#include <map>
#include <string>
#include <vector>

namespace gpl {

// Flat "key = value" text config. '#' starts a comment; blank lines ignored.
class KvConfig {
public:
    KvConfig() = default;

    static KvConfig parse(const std::string& text);
    static KvConfig load(const std::string& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, std::string value) { values_[key] = std::move(value); }

    std::string get_string(const std::string& key, const std::string& fallback) const;
    long long get_int(const std::string& key, long long fallback) const;
    double get_double(const std::string& key, double fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    std::vector<double> get_doubles(const std::string& key, const std::vector<double>& fallback) const;
    std::vector<int> get_ints(const std::string& key, const std::vector<int>& fallback) const;

    // Canonical serialization (sorted keys); stable input for hashing.
    std::string dump() const;
    const std::map<std::string, std::string>& entries() const { return values_; }

private:
    const std::string* find(const std::string& key) const;
    std::map<std::string, std::string> values_;
};

}  // namespace gpl
