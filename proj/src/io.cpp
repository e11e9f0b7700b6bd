#include "barstream/io.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace barstream::io {

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx",
                  static_cast<unsigned long long>(value));
    return buf;
}

std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_text_file(const std::string& path, std::string_view text) {
    const std::filesystem::path p(path);
    if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write " + path);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw Error("failed writing " + path);
}

std::uint64_t hash_file(const std::string& path) {
    return fnv1a64(read_text_file(path));
}

Manifest build_manifest(const std::vector<std::string>& relative_paths,
                        const std::string& base_dir) {
    Manifest out;
    for (const std::string& rel : relative_paths) {
        const std::string text =
            read_text_file((std::filesystem::path(base_dir) / rel).string());
        out.entries.push_back({rel, fnv1a64(text), text.size()});
    }
    return out;
}

void save_manifest(const std::string& path, const Manifest& manifest) {
    std::ostringstream out;
    for (const ManifestEntry& e : manifest.entries)
        out << hex64(e.hash) << " " << e.bytes << " " << e.path << "\n";
    write_text_file(path, out.str());
}

Manifest load_manifest(const std::string& path) {
    std::istringstream in(read_text_file(path));
    Manifest out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream row(line);
        std::string hash_text;
        ManifestEntry e;
        if (!(row >> hash_text >> e.bytes) || hash_text.size() != 16)
            throw BadManifest(path + ":" + std::to_string(lineno) +
                              ": expected \"<hash> <bytes> <path>\"");
        char* end = nullptr;
        e.hash = std::strtoull(hash_text.c_str(), &end, 16);
        if (end != hash_text.c_str() + 16)
            throw BadManifest(path + ":" + std::to_string(lineno) +
                              ": bad hash " + hash_text);
        std::getline(row, e.path);
        const std::size_t start = e.path.find_first_not_of(' ');
        if (start == std::string::npos)
            throw BadManifest(path + ":" + std::to_string(lineno) +
                              ": missing path");
        e.path.erase(0, start);
        out.entries.push_back(e);
    }
    return out;
}

std::vector<std::string> manifest_files(const std::string& manifest_path) {
    const Manifest manifest = load_manifest(manifest_path);
    const std::filesystem::path base =
        std::filesystem::path(manifest_path).parent_path();
    std::vector<std::string> out;
    out.reserve(manifest.entries.size());
    for (const ManifestEntry& e : manifest.entries)
        out.push_back((base / e.path).string());
    return out;
}

} // namespace barstream::io
