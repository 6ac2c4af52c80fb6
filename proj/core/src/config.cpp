#include "peftlab/config.hpp"

#include <cctype>
#include <cerrno>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "peftlab/tensor.hpp"

namespace peftlab {

namespace {

std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

bool valid_key(const std::string& k) {
    if (k.empty() || k.front() == '.' || k.back() == '.') return false;
    for (char c : k)
        if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '-')) return false;
    return k.find("..") == std::string::npos;
}

}  // namespace

ConfigFile ConfigFile::parse(std::string_view text, std::string source) {
    ConfigFile cf;
    cf.source_ = std::move(source);
    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const auto nl = text.find('\n', pos);
        std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
        pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
        ++line_no;
        if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
        const std::string body = trim(line);
        if (body.empty()) continue;
        const auto eq = body.find('=');
        const std::string where = cf.source_ + ":" + std::to_string(line_no);
        if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
        const std::string key = trim(std::string_view(body).substr(0, eq));
        const std::string value = trim(std::string_view(body).substr(eq + 1));
        if (!valid_key(key)) throw ConfigError(where + ": invalid key '" + key + "'");
        if (cf.entries_.count(key))
            throw ConfigError(where + ": key '" + key + "' already set on line " +
                              std::to_string(cf.entries_.at(key).line));
        cf.entries_.emplace(key, Entry{value, line_no});
        cf.order_.push_back(key);
    }
    return cf;
}

ConfigFile ConfigFile::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file '" + path + "'");
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str(), path);
}

bool ConfigFile::has(const std::string& key) const { return entries_.count(key) != 0; }

std::string ConfigFile::get(const std::string& key, const std::string& fallback) const {
    const auto it = entries_.find(key);
    if (it == entries_.end()) return fallback;
    used_.insert(key);
    return it->second.value;
}

std::string ConfigFile::require(const std::string& key) const {
    if (!has(key)) throw ConfigError(source_ + ": missing required key '" + key + "'");
    return get(key, {});
}

void ConfigFile::bad_value(const std::string& key, const std::string& what) const {
    const auto& e = entries_.at(key);
    throw ConfigError(source_ + ":" + std::to_string(e.line) + ": '" + key + "' expects " + what + ", got '" +
                      e.value + "'");
}

double ConfigFile::get_double(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get(key, {});
    char* end = nullptr;
    errno = 0;
    const double x = std::strtod(v.c_str(), &end);
    if (v.empty() || *end != '\0' || errno == ERANGE) bad_value(key, "a number");
    return x;
}

std::uint64_t ConfigFile::get_u64(const std::string& key, std::uint64_t fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get(key, {});
    std::uint64_t x = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (v.empty() || ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, "a non-negative integer");
    return x;
}

std::size_t ConfigFile::get_size(const std::string& key, std::size_t fallback) const {
    return static_cast<std::size_t>(get_u64(key, fallback));
}

bool ConfigFile::get_bool(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    const std::string v = get(key, {});
    if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
    if (v == "false" || v == "0" || v == "no" || v == "off") return false;
    bad_value(key, "true or false");
}

std::vector<std::string> ConfigFile::get_list(const std::string& key) const {
    std::vector<std::string> out;
    if (!has(key)) return out;
    const std::string v = get(key, {});
    std::size_t depth = 0, start = 0;
    // commas inside parentheses belong to the item, as in scaled_add(trainable,4)
    for (std::size_t i = 0; i <= v.size(); ++i) {
        if (i < v.size() && v[i] == '(') ++depth;
        if (i < v.size() && v[i] == ')' && depth > 0) --depth;
        if (i == v.size() || (v[i] == ',' && depth == 0)) {
            std::string item = trim(std::string_view(v).substr(start, i - start));
            if (item.empty()) bad_value(key, "a comma-separated list without empty items");
            out.push_back(std::move(item));
            start = i + 1;
        }
    }
    return out;
}

std::vector<std::string> ConfigFile::keys_with_prefix(const std::string& prefix) const {
    std::vector<std::string> out;
    for (const auto& k : order_)
        if (k.compare(0, prefix.size(), prefix) == 0) out.push_back(k);
    return out;
}

void ConfigFile::finish() const {
    for (const auto& k : order_)
        if (!used_.count(k))
            throw ConfigError(source_ + ":" + std::to_string(entries_.at(k).line) + ": unknown key '" + k + "'");
}

std::string fnv1a_hex(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace peftlab
