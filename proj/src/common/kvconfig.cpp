#include "petsynth/common/kvconfig.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "petsynth/common/error.hpp"

namespace petsynth {

namespace {

std::string trim(const std::string &s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

} // namespace

KeyValueConfig KeyValueConfig::load(const std::filesystem::path &path) {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open config: " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path.string());
}

KeyValueConfig KeyValueConfig::parse(const std::string &text, const std::string &context) {
    KeyValueConfig c;
    c.context_ = context;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw IoError(context + ":" + std::to_string(lineno) + ": expected 'key = value'");
        const auto key = trim(line.substr(0, eq));
        if (key.empty()) throw IoError(context + ":" + std::to_string(lineno) + ": empty key");
        if (c.values_.count(key)) throw IoError(context + ":" + std::to_string(lineno) + ": duplicate key '" + key + "'");
        c.values_[key] = trim(line.substr(eq + 1));
    }
    return c;
}

void KeyValueConfig::set(const std::string &key, const std::string &value) { values_[key] = value; }

bool KeyValueConfig::has(const std::string &key) const { return values_.count(key) > 0; }

std::string KeyValueConfig::raw(const std::string &key) const { return values_.at(key); }

std::string KeyValueConfig::get_string(const std::string &key, const std::string &fallback) {
    used_.insert(key);
    const auto v = has(key) ? raw(key) : fallback;
    resolved_[key] = v;
    return v;
}

std::string KeyValueConfig::require_string(const std::string &key) {
    used_.insert(key);
    if (!has(key)) throw IoError(context_ + ": missing required key '" + key + "'");
    resolved_[key] = raw(key);
    return raw(key);
}

int KeyValueConfig::get_int(const std::string &key, int fallback) {
    const auto s = get_string(key, std::to_string(fallback));
    int v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw IoError(context_ + ": key '" + key + "' expects an integer, got '" + s + "'");
    return v;
}

std::uint64_t KeyValueConfig::get_u64(const std::string &key, std::uint64_t fallback) {
    const auto s = get_string(key, std::to_string(fallback));
    std::uint64_t v = 0;
    const auto r = std::from_chars(s.data(), s.data() + s.size(), v);
    if (r.ec != std::errc() || r.ptr != s.data() + s.size())
        throw IoError(context_ + ": key '" + key + "' expects an unsigned integer, got '" + s + "'");
    return v;
}

double KeyValueConfig::get_double(const std::string &key, double fallback) {
    char buf[32];
    const auto end = std::to_chars(buf, buf + sizeof buf, fallback).ptr; // shortest round-trip form
    const auto s = get_string(key, std::string(buf, end));
    try {
        size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception &) {
        throw IoError(context_ + ": key '" + key + "' expects a number, got '" + s + "'");
    }
}

bool KeyValueConfig::get_bool(const std::string &key, bool fallback) {
    const auto s = get_string(key, fallback ? "true" : "false");
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw IoError(context_ + ": key '" + key + "' expects true/false, got '" + s + "'");
}

void KeyValueConfig::reject_unknown() const {
    std::string bad;
    for (const auto &[k, v] : values_)
        if (!used_.count(k)) bad += (bad.empty() ? "" : ", ") + k;
    if (!bad.empty()) throw IoError(context_ + ": unknown key(s): " + bad);
}

std::string KeyValueConfig::snapshot() const {
    std::ostringstream os;
    for (const auto &[k, v] : resolved_) os << k << " = " << v << "\n";
    return os.str();
}

void KeyValueConfig::write_snapshot(const std::filesystem::path &path) const {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("cannot write config snapshot: " + path.string());
    os << snapshot();
}

} // namespace petsynth
