#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace dt {

// Plain-text `key = value` file. `#` starts a comment; blank lines are
// ignored; keys are unique. Readers mark what they consume so callers can
// reject unknown keys.
class KeyValues {
public:
    KeyValues() = default;

    static KeyValues parse(const std::string& text, const std::string& source = "<config>");
    static KeyValues load(const std::string& path);

    bool has(const std::string& key) const { return values_.count(key) != 0; }
    void set(const std::string& key, const std::string& value) { values_[key] = value; }

    std::string get_string(const std::string& key) const;
    std::int64_t get_int(const std::string& key) const;
    double get_double(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    std::string get_string(const std::string& key, const std::string& fallback) const;
    std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
    double get_double(const std::string& key, double fallback) const;

    std::vector<std::string> unused_keys() const;
    const std::map<std::string, std::string>& entries() const { return values_; }

    // Keys in sorted order, one `key = value` per line.
    std::string serialize() const;

private:
    const std::string& raw(const std::string& key) const;

    std::map<std::string, std::string> values_;
    mutable std::set<std::string> used_;
    std::string source_;
};

// Shortest round-trip decimal representation of a double.
std::string format_double(double v);

}  // namespace dt
