#pragma once
// File helpers, FNV-1a 64 content hashing, and the manifest format used to
// list corpus pieces and run artifacts.

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "barstream/errors.hpp"

namespace barstream::io {

BARSTREAM_DEFINE_ERROR(BadManifest);

std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t value); // sixteen lowercase hex digits

std::string read_text_file(const std::string& path); // Error when unreadable
// Creates missing parent directories.
void write_text_file(const std::string& path, std::string_view text);
std::uint64_t hash_file(const std::string& path);

// One line per file: "<hex hash> <byte count> <relative path>". Paths resolve
// against the directory holding the manifest file.
struct ManifestEntry {
    std::string path;
    std::uint64_t hash = 0;
    std::uint64_t bytes = 0;
    bool operator==(const ManifestEntry&) const = default;
};

struct Manifest {
    std::vector<ManifestEntry> entries;
    bool operator==(const Manifest&) const = default;
};

// Hashes base_dir/<path> for each relative path, in the given order.
Manifest build_manifest(const std::vector<std::string>& relative_paths,
                        const std::string& base_dir);
void save_manifest(const std::string& path, const Manifest& manifest);
Manifest load_manifest(const std::string& path);
// Entry paths joined onto the manifest's own directory.
std::vector<std::string> manifest_files(const std::string& manifest_path);

} // namespace barstream::io
