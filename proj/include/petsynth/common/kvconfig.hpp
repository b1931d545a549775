#pragma once

#include <filesystem>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace petsynth {

// "key = value" text config. Blank lines and '#' comments are ignored.
// Every lookup records the resolved value, so the snapshot lists defaults too.
class KeyValueConfig {
public:
    KeyValueConfig() = default;
    static KeyValueConfig load(const std::filesystem::path &path);
    static KeyValueConfig parse(const std::string &text, const std::string &context = "config");

    void set(const std::string &key, const std::string &value);
    bool has(const std::string &key) const;

    std::string get_string(const std::string &key, const std::string &fallback);
    std::string require_string(const std::string &key);
    int get_int(const std::string &key, int fallback);
    double get_double(const std::string &key, double fallback);
    bool get_bool(const std::string &key, bool fallback);
    std::uint64_t get_u64(const std::string &key, std::uint64_t fallback);

    // Keys present in the file but never looked up; throws IoError listing them.
    void reject_unknown() const;

    const std::map<std::string, std::string> &resolved() const { return resolved_; }
    std::string snapshot() const;
    void write_snapshot(const std::filesystem::path &path) const;

private:
    std::string raw(const std::string &key) const;

    std::string context_ = "config";
    std::map<std::string, std::string> values_;
    std::map<std::string, std::string> resolved_;
    std::set<std::string> used_;
};

} // namespace petsynth
