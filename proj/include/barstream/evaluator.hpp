#pragma once

// Semantic features and prompt-conditioned scoring. The baseline extractor
// summarizes a sheet as a 64-dim vector of normalized histograms plus texture
// stats; scores are cosine similarity against a prompt's mean ground-truth
// feature. The feature-file format carries an extractor name and dimension so
// an external extractor can be swapped in without touching the scoring side.

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "barstream/errors.hpp"
#include "barstream/preprocess.hpp"

namespace barstream::evaluator {

BARSTREAM_DEFINE_ERROR(ZeroVector);
BARSTREAM_DEFINE_ERROR(EmptyGroundTruth);
BARSTREAM_DEFINE_ERROR(DimensionMismatch);
BARSTREAM_DEFINE_ERROR(BadFeatureTable);

inline constexpr std::size_t kFeatureDim = 64;
// Identifies the baseline extractor in feature files.
inline constexpr const char* kExtractorName = "hist64.v1";

struct SemanticFeature {
    std::vector<double> values;

    friend bool operator==(const SemanticFeature&, const SemanticFeature&) = default;
};

// Feature layout (all histogram blocks sum to 1 when non-empty, the whole
// vector is L2-normalized at the end):
//   [0,12)   pitch-class histogram over every sounding pitch
//   [12,28)  log2-duration histogram, bin = clamp(8 + round(log2 d), 0, 15)
//            with d in whole notes, note and chord events only
//   [28,40)  melodic-interval histogram per voice, bin = min(|semitones|, 11),
//            rests skipped, chords represented by their top pitch
//   [40,48)  texture stats scaled to [0,1]: voice count /16, mean note events
//            per voice-bar /32, rest fraction, chord fraction, pitch range
//            /127, meter numerator /16, meter denominator /16, bar count /64
//   [48,64)  bar-density histogram, bin = min(note events in a voice-bar, 15)
SemanticFeature extract_features(const std::string& sheet_text);

// Component-wise arithmetic mean, deliberately not re-normalized.
SemanticFeature prompt_mean(const std::vector<SemanticFeature>& features);

// Cosine similarity in [-1, 1]. ZeroVector when either argument has zero
// norm, DimensionMismatch when lengths differ.
double clamp2_score(const SemanticFeature& z, const SemanticFeature& zbar);

struct PromptProfile {
    prep::Prompt prompt;
    SemanticFeature mean_feature;
    std::size_t ground_truth_count = 0;
};

struct LabeledFeature {
    prep::Prompt prompt;
    SemanticFeature feature;
};

// Profiles for prompts with strictly more than min_count ground-truth pieces,
// in first-appearance order.
std::vector<PromptProfile> build_prompt_set(const std::vector<LabeledFeature>& labeled,
                                            std::size_t min_count = 10);

// --- feature files -----------------------------------------------------------

// Text table:
//   #features <extractor-name> <dim>
//   <piece-id>\t<v0> <v1> ... <v{dim-1}>
struct FeatureRecord {
    std::string id;
    SemanticFeature feature;
};

struct FeatureTable {
    std::string extractor;
    std::size_t dim = 0;
    std::vector<FeatureRecord> records;
};

std::string format_feature_table(const FeatureTable& table);
FeatureTable parse_feature_table(const std::string& text);
void save_feature_table(const std::string& path, const FeatureTable& table);
FeatureTable load_feature_table(const std::string& path);

} // namespace barstream::evaluator
