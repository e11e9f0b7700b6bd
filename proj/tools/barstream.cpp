// Command-line front end: one subcommand per pipeline stage, configured from
// an optional key=value file plus repeatable --set overrides.

#include <cstdio>
#include <exception>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"

#include "barstream/io.hpp"
#include "barstream/pipeline.hpp"

namespace {

using namespace barstream;

config::Config assemble_config(const std::string& config_path,
                               const std::vector<std::string>& sets) {
    config::Config cfg;
    if (!config_path.empty()) cfg = config::load_config_file(config_path);
    for (const std::string& s : sets) {
        std::size_t eq = s.find('=');
        if (eq == std::string::npos || eq == 0)
            throw config::ConfigInvalid("--set expects key=value, got " + s);
        cfg.set(s.substr(0, eq), s.substr(eq + 1));
    }
    return cfg;
}

// Stage reports worth echoing after a successful run.
const char* report_file(pipeline::Stage stage) {
    switch (stage) {
        case pipeline::Stage::Ingest: return "ingest_report.txt";
        case pipeline::Stage::Preprocess: return "preprocess_report.txt";
        case pipeline::Stage::Tokenize: return "token_report.txt";
        case pipeline::Stage::Train: return "train_report.txt";
        case pipeline::Stage::Generate: return "generation_report.txt";
        case pipeline::Stage::Dpo: return "dpo_report.txt";
        case pipeline::Stage::Eval: return "metric_report.txt";
        case pipeline::Stage::Report: return "summary.txt";
        case pipeline::Stage::SynthCorpus: return "synth_report.txt";
        case pipeline::Stage::MidiEncode: return "midi_report.txt";
        case pipeline::Stage::MidiDecode: return nullptr;
    }
    return nullptr;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"bar-stream: training pipeline for sheet music generation"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::vector<std::string> sets;
    app.add_option("-c,--config", config_path, "key=value config file");
    app.add_option("-s,--set", sets, "config override key=value (repeatable)");

    const std::pair<pipeline::Stage, const char*> stages[] = {
        {pipeline::Stage::Ingest, "parse the corpus and report per-piece health"},
        {pipeline::Stage::Preprocess, "interleave voices, strip rest measures, annotate"},
        {pipeline::Stage::Tokenize, "patch-tokenize the corpus and report statistics"},
        {pipeline::Stage::Train, "train the decoder with key augmentation"},
        {pipeline::Stage::Generate, "sample pieces from a checkpoint"},
        {pipeline::Stage::Dpo, "preference-optimize a checkpoint against the corpus"},
        {pipeline::Stage::Eval, "score generated pieces against the corpus"},
        {pipeline::Stage::Report, "aggregate metric reports into one table"},
        {pipeline::Stage::SynthCorpus, "emit a synthetic corpus with labels"},
        {pipeline::Stage::MidiEncode, "encode a MIDI file into event tokens"},
        {pipeline::Stage::MidiDecode, "decode an event token stream to text"},
    };
    for (const auto& [stage, desc] : stages)
        app.add_subcommand(pipeline::stage_name(stage), desc);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code ? 1 : 0;
    }

    try {
        CLI::App* sub = app.get_subcommands().front();
        pipeline::Stage stage = pipeline::Stage::Ingest;
        for (const auto& [st, desc] : stages)
            if (sub->get_name() == pipeline::stage_name(st)) stage = st;

        pipeline::RunConfig rc =
            pipeline::make_run_config(stage, assemble_config(config_path, sets));
        pipeline::run(rc);

        std::printf("%s done", pipeline::stage_name(stage));
        if (!rc.out_dir.empty()) std::printf(", artifacts in %s", rc.out_dir.c_str());
        std::printf("\n");
        if (const char* rf = report_file(stage); rf && !rc.out_dir.empty()) {
            std::string path = rc.out_dir + "/" + rf;
            try {
                std::printf("%s", io::read_text_file(path).c_str());
            } catch (const Error&) {
            }
        }
        return 0;
    } catch (const config::ConfigInvalid& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 1;
    } catch (const model::NonFiniteGradient& e) {
        std::fprintf(stderr, "numeric failure: %s\n", e.what());
        return 3;
    } catch (const Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "unexpected error: %s\n", e.what());
        return 2;
    }
}
