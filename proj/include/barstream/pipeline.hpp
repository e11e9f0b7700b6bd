#pragma once

// Stage orchestration: one RunConfig drives ingest, preprocessing, training,
// generation, preference optimization, evaluation, and the MIDI codec from a
// flat key=value config. Every stage leaves a resolved config dump and a
// content-hash manifest in its output directory.

#include <cstdint>
#include <string>
#include <vector>

#include "barstream/config.hpp"
#include "barstream/dpo.hpp"
#include "barstream/evaluator.hpp"
#include "barstream/model.hpp"
#include "barstream/preprocess.hpp"
#include "barstream/synth.hpp"

namespace barstream::pipeline {

enum class Stage {
    Ingest,
    Preprocess,
    Tokenize,
    Train,
    Generate,
    Dpo,
    Eval,
    Report,
    SynthCorpus,
    MidiEncode,
    MidiDecode,
};

const char* stage_name(Stage stage);

// One validation failure: the offending config field and what is wrong.
struct Diagnostic {
    std::string field;
    std::string reason;
};

struct RunConfig {
    Stage stage = Stage::Ingest;

    // paths.*
    std::string corpus_manifest; // labeled corpus manifest (tab-separated)
    std::string out_dir;
    std::string checkpoint;      // input checkpoint for generate/dpo/eval
    std::string pieces_dir;      // generated pieces consumed by eval
    std::string reports_dir;     // tree scanned by report
    std::string midi_in;
    std::string midi_out;

    model::ModelConfig model = model::ModelConfig::desk();
    model::OptimizerConfig opt;
    model::SamplingConfig sampling;
    dpo::DpoConfig dpo;

    // train.*
    prep::Stage train_stage = prep::Stage::Pretrain;
    long train_steps = 200;
    std::size_t batch_size = 4;
    std::size_t max_segment_chars = 1024;
    long log_every = 10;

    // generate.*
    std::size_t generate_count = 8;
    std::string generate_prompt; // "Period|Composer[|Instrumentation]", empty = none

    // eval.*
    std::size_t min_ground_truth = 10; // profile threshold, strictly-more-than
    std::string tag = "run";           // row label in metric CSVs

    // synth.*
    std::string synth_kind = "two_style"; // or "rest"
    synth::TwoStyleConfig two_style;
    synth::RestCorpusConfig rest;

    // midi.* prompt token indices, -1 leaves the prompt out
    int midi_period = -1;
    int midi_composer = -1;

    int workers = 1;
    std::uint64_t seed = 1;
    std::string extractor = evaluator::kExtractorName;

    config::Config source; // resolved key=value view, dumped for audit
};

// Maps config keys onto a RunConfig. Unknown keys are ignored; malformed
// values throw ConfigInvalid naming the key. Environment variables of the
// form BARSTREAM_PATHS_<KEY> override the corresponding paths.* entry.
RunConfig make_run_config(Stage stage, const config::Config& cfg);

// Structural checks only; empty result means the config is runnable.
std::vector<Diagnostic> validate(const RunConfig& rc);

// Runs the stage. Throws ConfigInvalid listing every diagnostic if validate
// fails; stage errors surface as the module exceptions. On success out_dir
// holds the stage artifacts plus config.txt and manifest.txt.
void run(const RunConfig& rc);

} // namespace barstream::pipeline
