#pragma once

// Corpus preprocessing: voice interleaving, rest-bar stripping, bar-index
// annotation, key transposition, segmentation, and prompt handling. All
// operations are pure; randomness comes in through an explicit Rng so corpus
// runs can be parallelized per file with derived seeds.

#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "barstream/abc.hpp"
#include "barstream/errors.hpp"
#include "barstream/rng.hpp"

namespace barstream::prep {

BARSTREAM_DEFINE_ERROR(VoiceLengthMismatch);
BARSTREAM_DEFINE_ERROR(UnsupportedKey);
BARSTREAM_DEFINE_ERROR(SegmentTooSmall);

// One voice's bar within a measure line.
struct VoiceFragment {
    std::string voice_id;
    abc::Bar bar;
};

// All voices' bars for one measure, in header voice order.
using Measure = std::vector<VoiceFragment>;

// A sheet rearranged so each measure holds every voice's bar for that measure.
// Rendered form puts one measure per line with [V:] tags in front of each
// fragment.
struct InterleavedSheet {
    abc::TuneHeader header;
    std::vector<Measure> measures;
    // remaining_chars / original_chars of the rendered body after
    // strip_rest_bars; 1 until then.
    Rational length_ratio_after_strip{1, 1};
};

// --- interleaving ------------------------------------------------------------

// Measure k of the result holds the k-th bar of every voice. Shorter voices
// are padded with full-rest bars sized to the meter when pad_short_voices is
// set; otherwise unequal bar counts raise VoiceLengthMismatch.
InterleavedSheet interleave(const abc::Sheet& sheet, bool pad_short_voices = true);

// Drops measures whose every fragment is rest-only and records the rendered
// body length ratio. Measures with any sounding note are always kept.
InterleavedSheet strip_rest_bars(InterleavedSheet isheet);

// "[V:id]" + bar text for each fragment, concatenated.
std::string measure_text(const Measure& m);

// Equivalent Sheet (interleaved layout) for serialization and re-parsing.
abc::Sheet to_sheet(const InterleavedSheet& isheet);

// Canonical header text followed by one unannotated measure line per measure.
std::string render_interleaved(const InterleavedSheet& isheet);

// --- bar-index annotation ----------------------------------------------------

// Body lines prefixed "[r:k/m]" where k is the 1-based measure index and m is
// the number of measures after this one; the last line reads [r:n/0], which is
// what inference watches for to stop.
std::vector<std::string> annotate_bar_indices(const InterleavedSheet& isheet);

// Header text followed by the annotated body lines.
std::string render_annotated(const InterleavedSheet& isheet);

// Removes [r:k/m] prefixes from line starts; inverse of annotation.
std::string strip_bar_annotations(std::string_view text);

// --- transposition -----------------------------------------------------------

// The 15 supported signatures span -7..+7 on the line of fifths.
inline constexpr int kMinFifths = -7;
inline constexpr int kMaxFifths = 7;
inline constexpr int kKeyCount = 15;

struct KeyChoice {
    abc::KeySig target_key;
    // Folded representative of the interval in [-7, +7]. The literal
    // line-of-fifths shift may differ by 12 (an enharmonic respelling) when
    // source and target sit at opposite ends of the signature range.
    int fifths_offset = 0;
};

enum class Stage { Pretrain, Finetune };

// Rewrites every pitch by the interval between source and target key and
// updates K:. Accidentals are re-spelled canonically against the target key,
// so transposing by a choice and then back is the identity on canonically
// spelled sheets. UnsupportedKey if either key has a mode outside
// major/minor, a signature outside -7..+7, or the offset does not match the
// key pair.
InterleavedSheet transpose(const InterleavedSheet& isheet, const KeyChoice& choice);

// Pretrain: target drawn uniformly from all 15 signatures, mode preserved.
// Finetune: offset d in [-3, +3] with weight (4 - |d|), restricted to offsets
// whose target stays within the supported signatures and renormalized.
KeyChoice choose_key(Stage stage, const abc::KeySig& original, Rng& rng);

// --- segmentation ------------------------------------------------------------

// Returns the text unchanged when it fits in max_chars. Otherwise keeps the
// header (everything through the K: line) and a contiguous run of body lines:
// the window size is the largest line count any start position can fit within
// the budget, and the start is drawn uniformly from the positions achieving
// it. Lines are never split, so bar annotations keep their original absolute
// indices. SegmentTooSmall when not even one body line fits.
std::string make_training_segment(const std::string& text, std::size_t max_chars,
                                  Rng& rng);

// --- prompts -----------------------------------------------------------------

// Conditional-generation prompt. Instrumentation may be empty, in which case
// the wire form carries two fields (used by the event-token corpus).
struct Prompt {
    std::string period;
    std::string composer;
    std::string instrumentation;

    friend bool operator==(const Prompt&, const Prompt&) = default;
};

const std::vector<std::string>& prompt_periods();
const std::vector<std::string>& prompt_instrumentations();
bool valid_prompt(const Prompt& p);

// "%%prompt <period>|<composer>[|<instrumentation>]" (no newline).
std::string prompt_line(const Prompt& p);
std::optional<Prompt> parse_prompt_line(std::string_view line);

// Prepends the prompt line; throws Error on invalid prompt fields.
std::string prepend_prompt(const std::string& text, const Prompt& p);

// Removes a leading prompt line if present, reporting it through *out.
std::string strip_prompt(const std::string& text, Prompt* out = nullptr);

// --- free-text cleanup -------------------------------------------------------

// Common tempo and expression terms retained by default.
const std::vector<std::string>& default_text_whitelist();

// Drops free-text header fields and % comments unless they contain a
// whitelisted term (whole-word, case-insensitive). Structural fields and %%
// directives always survive; lyric lines never reach the parsed sheet.
abc::Sheet clean_text_annotations(abc::Sheet sheet);
abc::Sheet clean_text_annotations(abc::Sheet sheet,
                                  const std::vector<std::string>& whitelist);

// --- corpus manifest ---------------------------------------------------------

// One corpus piece: tab-separated key=value fields on one line.
struct ManifestRecord {
    std::string path;
    std::string period;
    std::string composer;
    std::string instrumentation;
    std::string split;

    friend bool operator==(const ManifestRecord&, const ManifestRecord&) = default;
};

std::vector<ManifestRecord> load_manifest(const std::string& path);
std::vector<ManifestRecord> parse_manifest(std::string_view text);
std::string format_manifest(const std::vector<ManifestRecord>& records);
void save_manifest(const std::string& path, const std::vector<ManifestRecord>& records);

} // namespace barstream::prep
