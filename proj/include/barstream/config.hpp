#pragma once
// Flat-namespaced key=value run configuration: '#' comments, blank lines,
// `include <relative path>` directives, later assignments override earlier
// ones. Chosen over a structured format so configs diff cleanly.

#include <map>
#include <string>
#include <vector>

#include "barstream/errors.hpp"

namespace barstream::config {

BARSTREAM_DEFINE_ERROR(ConfigInvalid);

class Config {
public:
    bool has(const std::string& key) const;
    const std::string& get(const std::string& key) const; // ConfigInvalid if absent
    std::string get_or(const std::string& key, const std::string& fallback) const;
    long get_int(const std::string& key) const;
    long get_int_or(const std::string& key, long fallback) const;
    double get_double(const std::string& key) const;
    double get_double_or(const std::string& key, double fallback) const;
    bool get_bool_or(const std::string& key, bool fallback) const;
    void set(const std::string& key, const std::string& value);

    std::vector<std::string> keys() const;    // sorted
    std::string render() const;               // sorted "key = value" lines

private:
    std::map<std::string, std::string> values_;
};

// Text only, `include` directives rejected.
Config parse_config(const std::string& text);
// Resolves `include` paths against the including file's directory;
// include cycles are an error.
Config load_config_file(const std::string& path);

} // namespace barstream::config
