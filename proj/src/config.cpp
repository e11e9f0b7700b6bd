#include "barstream/config.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <set>
#include <sstream>

#include "barstream/io.hpp"

namespace barstream::config {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = 0, b = s.size();
    while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
    while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
    return s.substr(a, b - a);
}

void parse_into(Config& cfg, const std::string& text, const std::string& origin,
                const std::string& base_dir, std::set<std::string>* active) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string stripped = trim(line);
        if (stripped.empty() || stripped[0] == '#') continue;
        const std::string where = origin + ":" + std::to_string(lineno);
        if (stripped.rfind("include ", 0) == 0) {
            if (!active)
                throw ConfigInvalid(where + ": include is only available when "
                                            "loading from a file");
            const std::string rel = trim(stripped.substr(8));
            if (rel.empty()) throw ConfigInvalid(where + ": empty include path");
            const std::string target =
                (std::filesystem::path(base_dir) / rel).lexically_normal().string();
            if (!active->insert(target).second)
                throw ConfigInvalid(where + ": include cycle through " + target);
            std::string included;
            try {
                included = io::read_text_file(target);
            } catch (const Error& e) {
                throw ConfigInvalid(where + ": " + e.what());
            }
            parse_into(cfg, included, target,
                       std::filesystem::path(target).parent_path().string(),
                       active);
            active->erase(target);
            continue;
        }
        const std::size_t eq = stripped.find('=');
        if (eq == std::string::npos)
            throw ConfigInvalid(where + ": expected key = value");
        const std::string key = trim(stripped.substr(0, eq));
        const std::string value = trim(stripped.substr(eq + 1));
        if (key.empty()) throw ConfigInvalid(where + ": empty key");
        cfg.set(key, value);
    }
}

} // namespace

bool Config::has(const std::string& key) const { return values_.count(key) > 0; }

const std::string& Config::get(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigInvalid("missing config key: " + key);
    return it->second;
}

std::string Config::get_or(const std::string& key,
                           const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
}

long Config::get_int(const std::string& key) const {
    const std::string& text = get(key);
    try {
        std::size_t used = 0;
        const long v = std::stol(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw ConfigInvalid(key + ": not an integer: " + text);
    }
}

long Config::get_int_or(const std::string& key, long fallback) const {
    return has(key) ? get_int(key) : fallback;
}

double Config::get_double(const std::string& key) const {
    const std::string& text = get(key);
    try {
        std::size_t used = 0;
        const double v = std::stod(text, &used);
        if (used != text.size()) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw ConfigInvalid(key + ": not a number: " + text);
    }
}

double Config::get_double_or(const std::string& key, double fallback) const {
    return has(key) ? get_double(key) : fallback;
}

bool Config::get_bool_or(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    std::string v = get(key);
    std::transform(v.begin(), v.end(), v.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    if (v == "true" || v == "yes" || v == "1") return true;
    if (v == "false" || v == "no" || v == "0") return false;
    throw ConfigInvalid(key + ": not a boolean: " + get(key));
}

void Config::set(const std::string& key, const std::string& value) {
    values_[key] = value;
}

std::vector<std::string> Config::keys() const {
    std::vector<std::string> out;
    out.reserve(values_.size());
    for (const auto& [k, v] : values_) out.push_back(k);
    return out;
}

std::string Config::render() const {
    std::ostringstream out;
    for (const auto& [k, v] : values_) out << k << " = " << v << "\n";
    return out.str();
}

Config parse_config(const std::string& text) {
    Config cfg;
    parse_into(cfg, text, "<config>", "", nullptr);
    return cfg;
}

Config load_config_file(const std::string& path) {
    Config cfg;
    const std::string normal =
        std::filesystem::path(path).lexically_normal().string();
    std::string text;
    try {
        text = io::read_text_file(normal);
    } catch (const Error& e) {
        throw ConfigInvalid(e.what());
    }
    std::set<std::string> active{normal};
    parse_into(cfg, text, normal,
               std::filesystem::path(normal).parent_path().string(), &active);
    return cfg;
}

} // namespace barstream::config
