#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace peftlab {

/// Flat `key = value` text with `#` comments and dotted keys. Every read
/// marks its key used; finish() rejects keys nobody read.
class ConfigFile {
public:
    /// Throws ConfigError on a malformed line or a repeated key.
    static ConfigFile parse(std::string_view text, std::string source = "<string>");
    static ConfigFile load(const std::string& path);

    bool has(const std::string& key) const;
    std::string get(const std::string& key, const std::string& fallback) const;
    std::string require(const std::string& key) const;
    double get_double(const std::string& key, double fallback) const;
    std::size_t get_size(const std::string& key, std::size_t fallback) const;
    std::uint64_t get_u64(const std::string& key, std::uint64_t fallback) const;
    bool get_bool(const std::string& key, bool fallback) const;
    /// Comma-separated list with whitespace trimmed; empty when absent.
    std::vector<std::string> get_list(const std::string& key) const;

    /// Keys starting with `prefix`, in file order of first appearance.
    std::vector<std::string> keys_with_prefix(const std::string& prefix) const;

    /// Throws ConfigError naming the first key that was never read.
    void finish() const;

    const std::string& source() const { return source_; }

private:
    struct Entry {
        std::string value;
        std::size_t line = 0;
    };
    [[noreturn]] void bad_value(const std::string& key, const std::string& what) const;

    std::string source_;
    std::map<std::string, Entry> entries_;
    std::vector<std::string> order_;
    mutable std::set<std::string> used_;
};

/// FNV-1a 64-bit digest as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view text);

}  // namespace peftlab
