#pragma once
// Synthetic corpora: a two-style prompt-separable dataset for end-to-end
// training runs, and a uniform-bar-length corpus with an exact all-rest
// measure fraction for preprocessing checks.

#include <cstdint>
#include <string>
#include <vector>

#include "barstream/errors.hpp"
#include "barstream/preprocess.hpp"

namespace barstream::synth {

struct SynthPiece {
    std::string file_name;
    prep::Prompt prompt;
    std::string text; // raw sheet, no prompt line
};

// Style A: Baroque/Bach/Keyboard, one voice in 2/4 over a pentatonic set.
// Style B: Romantic/Chopin/Chamber, two voices in 3/4 over a flat-heavy set.
// The styles separate in the baseline feature space on pitch classes,
// durations, and texture.
struct TwoStyleConfig {
    std::size_t pieces_per_style = 200;
    int min_bars = 6;
    int max_bars = 10;
    std::uint64_t seed = 1;
};

std::vector<SynthPiece> two_style_corpus(const TwoStyleConfig& cfg);

// Single voice in 4/4; every bar renders to the same character count and
// every rest_period-th bar is all-rest, so rest stripping keeps exactly
// (rest_period - 1) / rest_period of the body text.
struct RestCorpusConfig {
    std::size_t pieces = 50;
    int bars = 10;       // multiple of rest_period
    int rest_period = 5;
    std::uint64_t seed = 1;
};

std::vector<SynthPiece> rest_corpus(const RestCorpusConfig& cfg);

// Writes each piece plus a labeled manifest.tsv into dir; returns the
// manifest path.
std::string write_corpus(const std::vector<SynthPiece>& pieces,
                         const std::string& dir);

} // namespace barstream::synth
