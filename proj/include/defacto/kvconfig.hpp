#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <string_view>

namespace defacto {

/// Flat `key = value` config file. '#' starts a comment, blank lines ignored.
class KvConfig {
public:
    KvConfig() = default;

    static KvConfig parse(std::string_view text);
    static KvConfig load(const std::filesystem::path& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    std::string get_string(const std::string& key, std::string fallback) const;
    double get_double(const std::string& key, double fallback) const;
    long long get_int(const std::string& key, long long fallback) const;

    /// Throws std::runtime_error naming the first key outside `known`.
    void require_known(const std::set<std::string>& known) const;

    const std::map<std::string, std::string>& values() const { return values_; }

private:
    std::map<std::string, std::string> values_;
};

}  // namespace defacto
