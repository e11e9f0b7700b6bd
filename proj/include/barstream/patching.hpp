#pragma once

// Bar-stream patch tokenization: texts split into header-line and bar units,
// units packed into fixed-length character patches over a byte vocabulary
// with PAD/BOS/EOS specials.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "barstream/errors.hpp"

namespace barstream::patching {

BARSTREAM_DEFINE_ERROR(MalformedPatch);
BARSTREAM_DEFINE_ERROR(CodeOutOfRange);

// Defaults: 16-char patches over raw bytes plus three specials.
inline constexpr std::size_t kPatchSize = 16;
inline constexpr std::size_t kVocab = 259;

inline constexpr std::uint16_t pad_code(std::size_t vocab) {
    return static_cast<std::uint16_t>(vocab - 3);
}
inline constexpr std::uint16_t bos_code(std::size_t vocab) {
    return static_cast<std::uint16_t>(vocab - 2);
}
inline constexpr std::uint16_t eos_code(std::size_t vocab) {
    return static_cast<std::uint16_t>(vocab - 1);
}

enum class PatchKind { Header, Bar, Special };

// One tokenization unit: a prompt/header line or a single bar (with its
// leading tags, trailing barline, and line break if it closes a line).
struct Unit {
    std::string text;
    PatchKind kind = PatchKind::Bar;

    friend bool operator==(const Unit&, const Unit&) = default;
};

struct Patch {
    std::vector<std::uint16_t> chars; // length S; PAD only as a trailing run
    PatchKind kind = PatchKind::Bar;

    friend bool operator==(const Patch&, const Patch&) = default;
};

// Origin of a patch: owning unit index and char offset within it. Special
// patches use unit == npos.
struct PatchSpan {
    static constexpr std::size_t npos = static_cast<std::size_t>(-1);
    std::size_t unit = npos;
    std::size_t offset = 0;

    friend bool operator==(const PatchSpan&, const PatchSpan&) = default;
};

struct PatchSequence {
    std::vector<Patch> patches;
    std::vector<PatchSpan> source_spans; // parallel to patches
    std::size_t patch_size = kPatchSize;
    std::size_t vocab = kVocab;
};

// Splits preprocessed text into units. Lines through K: (and any %% or field
// lines) are one unit each; afterwards each bar is a unit, leading [r:]/[V:]
// tags attach to the bar they precede, and the newline rides on the line's
// last bar. Concatenating unit texts reproduces the input.
std::vector<Unit> segment_units(std::string_view text);

// Packs each unit into ceil(len/S) patches, PAD-filling the last, and wraps
// the whole sequence in BOS/EOS special patches.
PatchSequence to_patches(const std::vector<Unit>& units, std::size_t patch_size = kPatchSize,
                         std::size_t vocab = kVocab);

// Inverse of to_patches on well-formed sequences. MalformedPatch on PAD in a
// patch interior or special codes inside content patches.
std::string detokenize(const PatchSequence& ps);

// Flattened one-hot encoding, length S*V. CodeOutOfRange if any code >= V.
std::vector<double> patch_one_hot(const Patch& p, std::size_t vocab = kVocab);

// Token-dump format: one patch per line, space-separated integer codes.
std::string format_patch_dump(const PatchSequence& ps);
PatchSequence parse_patch_dump(std::string_view text, std::size_t patch_size = kPatchSize,
                               std::size_t vocab = kVocab);
void save_patch_dump(const std::string& path, const PatchSequence& ps);
PatchSequence load_patch_dump(const std::string& path, std::size_t patch_size = kPatchSize,
                              std::size_t vocab = kVocab);

} // namespace barstream::patching
