#include "doctest.h"

#include "barstream/evaluator.hpp"
#include "barstream/io.hpp"
#include "barstream/metrics.hpp"
#include "barstream/model.hpp"
#include "barstream/pipeline.hpp"
#include "barstream/preprocess.hpp"

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

using namespace barstream;
namespace fs = std::filesystem;

namespace {

config::Config make_cfg(const std::vector<std::pair<std::string, std::string>>& kv) {
    config::Config cfg;
    for (const auto& [k, v] : kv) cfg.set(k, v);
    return cfg;
}

void run_stage(pipeline::Stage stage,
               const std::vector<std::pair<std::string, std::string>>& kv) {
    pipeline::run(pipeline::make_run_config(stage, make_cfg(kv)));
}

std::vector<std::string> diagnostic_fields(const pipeline::RunConfig& rc) {
    std::vector<std::string> fields;
    for (const pipeline::Diagnostic& d : pipeline::validate(rc)) fields.push_back(d.field);
    return fields;
}

bool has_field(const std::vector<std::string>& fields, const std::string& f) {
    return std::find(fields.begin(), fields.end(), f) != fields.end();
}

} // namespace

TEST_SUITE("pipeline.config") {

TEST_CASE("defaults survive an empty config") {
    pipeline::RunConfig rc =
        pipeline::make_run_config(pipeline::Stage::Train, config::Config{});
    CHECK(rc.stage == pipeline::Stage::Train);
    CHECK(rc.model.hidden == model::ModelConfig::desk().hidden);
    CHECK(rc.train_stage == prep::Stage::Pretrain);
    CHECK(rc.train_steps == 200);
    CHECK(rc.workers == 1);
    CHECK(rc.seed == 1);
    CHECK(rc.extractor == evaluator::kExtractorName);
    CHECK(rc.dpo.iterations == 2);
}

TEST_CASE("config keys land in the right fields") {
    pipeline::RunConfig rc = pipeline::make_run_config(
        pipeline::Stage::Dpo,
        make_cfg({{"paths.corpus_manifest", "/x/m.tsv"},
                  {"paths.out_dir", "/x/out"},
                  {"model.hidden", "32"},
                  {"model.context_patches", "48"},
                  {"opt.lr", "0.002"},
                  {"sampling.temperature", "0.7"},
                  {"dpo.iterations", "3"},
                  {"dpo.steps_per_iteration", "17"},
                  {"train.stage", "finetune"},
                  {"train.steps", "55"},
                  {"generate.prompt", "Baroque|Bach"},
                  {"eval.min_ground_truth", "4"},
                  {"synth.kind", "rest"},
                  {"midi.period", "2"},
                  {"workers", "3"},
                  {"seed", "77"},
                  {"unknown.key", "ignored"}}));
    CHECK(rc.corpus_manifest == "/x/m.tsv");
    CHECK(rc.out_dir == "/x/out");
    CHECK(rc.model.hidden == 32);
    CHECK(rc.model.context_patches == 48);
    CHECK(rc.opt.lr == 0.002);
    CHECK(rc.sampling.temperature == 0.7);
    CHECK(rc.dpo.iterations == 3);
    CHECK(rc.dpo.steps_per_iteration == 17);
    CHECK(rc.train_stage == prep::Stage::Finetune);
    CHECK(rc.train_steps == 55);
    CHECK(rc.generate_prompt == "Baroque|Bach");
    CHECK(rc.min_ground_truth == 4);
    CHECK(rc.synth_kind == "rest");
    CHECK(rc.midi_period == 2);
    CHECK(rc.workers == 3);
    CHECK(rc.seed == 77);
    CHECK(rc.two_style.seed == 77); // synth seed follows the run seed
}

TEST_CASE("malformed values name the key") {
    try {
        pipeline::make_run_config(pipeline::Stage::Train,
                                  make_cfg({{"train.steps", "many"}}));
        FAIL("expected ConfigInvalid");
    } catch (const config::ConfigInvalid& e) {
        CHECK(std::string(e.what()).find("train.steps") != std::string::npos);
    }
    CHECK_THROWS_AS(pipeline::make_run_config(pipeline::Stage::Train,
                                              make_cfg({{"train.stage", "warmup"}})),
                    config::ConfigInvalid);
}

TEST_CASE("environment variables override path keys only") {
    setenv("BARSTREAM_PATHS_OUT_DIR", "/env/out", 1);
    setenv("BARSTREAM_PATHS_CHECKPOINT", "/env/model.ckpt", 1);
    pipeline::RunConfig rc = pipeline::make_run_config(
        pipeline::Stage::Generate,
        make_cfg({{"paths.out_dir", "/file/out"}, {"train.steps", "5"}}));
    unsetenv("BARSTREAM_PATHS_OUT_DIR");
    unsetenv("BARSTREAM_PATHS_CHECKPOINT");
    CHECK(rc.out_dir == "/env/out");
    CHECK(rc.checkpoint == "/env/model.ckpt");
    CHECK(rc.train_steps == 5);
    // the audit view reflects the effective value
    CHECK(rc.source.get("paths.out_dir") == "/env/out");
}

TEST_CASE("stage names round-trip") {
    CHECK(std::string(pipeline::stage_name(pipeline::Stage::SynthCorpus)) ==
          "synth-corpus");
    CHECK(std::string(pipeline::stage_name(pipeline::Stage::MidiEncode)) == "midi-encode");
    CHECK(std::string(pipeline::stage_name(pipeline::Stage::Dpo)) == "dpo");
}

} // TEST_SUITE pipeline.config

TEST_SUITE("pipeline.validate") {

TEST_CASE("missing stage inputs are reported by field") {
    pipeline::RunConfig rc =
        pipeline::make_run_config(pipeline::Stage::Eval, config::Config{});
    std::vector<std::string> fields = diagnostic_fields(rc);
    CHECK(has_field(fields, "paths.corpus_manifest"));
    CHECK(has_field(fields, "paths.checkpoint"));
    CHECK(has_field(fields, "paths.pieces_dir"));
    CHECK(has_field(fields, "paths.out_dir"));
}

TEST_CASE("nonexistent inputs are distinguished from missing ones") {
    pipeline::RunConfig rc = pipeline::make_run_config(
        pipeline::Stage::Ingest,
        make_cfg({{"paths.corpus_manifest", "/nonexistent/m.tsv"},
                  {"paths.out_dir", "/tmp/bs_never"}}));
    std::vector<pipeline::Diagnostic> d = pipeline::validate(rc);
    REQUIRE(d.size() == 1);
    CHECK(d[0].field == "paths.corpus_manifest");
    CHECK(d[0].reason.find("not found") != std::string::npos);
}

TEST_CASE("value range checks") {
    pipeline::RunConfig rc =
        pipeline::make_run_config(pipeline::Stage::Train, config::Config{});
    rc.sampling.top_p = 1.5;
    rc.opt.lr = 0;
    rc.workers = 0;
    rc.batch_size = 0;
    std::vector<std::string> fields = diagnostic_fields(rc);
    CHECK(has_field(fields, "sampling.top_p"));
    CHECK(has_field(fields, "opt.lr"));
    CHECK(has_field(fields, "workers"));
    CHECK(has_field(fields, "train.batch_size"));
}

TEST_CASE("prompt spec and synth kind are checked") {
    pipeline::RunConfig rc =
        pipeline::make_run_config(pipeline::Stage::Generate, config::Config{});
    rc.generate_prompt = "Medieval|Bach";
    CHECK(has_field(diagnostic_fields(rc), "generate.prompt"));
    rc.generate_prompt = "Baroque|Bach|Keyboard";
    CHECK_FALSE(has_field(diagnostic_fields(rc), "generate.prompt"));

    pipeline::RunConfig sc =
        pipeline::make_run_config(pipeline::Stage::SynthCorpus, config::Config{});
    sc.synth_kind = "chorale";
    CHECK(has_field(diagnostic_fields(sc), "synth.kind"));

    pipeline::RunConfig mc =
        pipeline::make_run_config(pipeline::Stage::MidiEncode, config::Config{});
    mc.midi_period = 5;
    mc.midi_composer = 99;
    std::vector<std::string> fields = diagnostic_fields(mc);
    CHECK(has_field(fields, "midi.period"));
    CHECK(has_field(fields, "midi.composer"));
}

TEST_CASE("run refuses an invalid config and lists every field") {
    try {
        run_stage(pipeline::Stage::Eval, {});
        FAIL("expected ConfigInvalid");
    } catch (const config::ConfigInvalid& e) {
        std::string msg = e.what();
        CHECK(msg.find("paths.corpus_manifest") != std::string::npos);
        CHECK(msg.find("paths.checkpoint") != std::string::npos);
        CHECK(msg.find("eval") != std::string::npos);
    }
}

} // TEST_SUITE pipeline.validate

TEST_SUITE("pipeline.stages") {

TEST_CASE("stage chain on a tiny synthetic corpus") {
    fs::path root = fs::temp_directory_path() / "bs_pipe_chain";
    fs::remove_all(root);
    fs::create_directories(root);
    auto at = [&](const char* leaf) { return (root / leaf).string(); };

    // synth-corpus
    run_stage(pipeline::Stage::SynthCorpus, {{"paths.out_dir", at("corpus")},
                                             {"synth.pieces_per_style", "3"},
                                             {"synth.min_bars", "3"},
                                             {"synth.max_bars", "4"}});
    std::string corpus_manifest = at("corpus") + "/manifest.tsv";
    CHECK(prep::load_manifest(corpus_manifest).size() == 6);
    CHECK(fs::exists(root / "corpus" / "config.txt"));
    CHECK(fs::exists(root / "corpus" / "manifest.txt"));

    // the artifact manifest hashes verify against the files on disk
    io::Manifest am = io::load_manifest(at("corpus") + "/manifest.txt");
    CHECK(am.entries.size() >= 8); // 6 pieces + manifest.tsv + config + report
    for (const io::ManifestEntry& e : am.entries)
        CHECK(io::hash_file(at("corpus") + "/" + e.path) == e.hash);

    // ingest
    run_stage(pipeline::Stage::Ingest, {{"paths.corpus_manifest", corpus_manifest},
                                        {"paths.out_dir", at("ingest")}});
    std::string ingest_report = io::read_text_file(at("ingest") + "/ingest_report.txt");
    CHECK(ingest_report.find("pieces: 6") != std::string::npos);
    CHECK(ingest_report.find("parsed: 6") != std::string::npos);

    // preprocess
    run_stage(pipeline::Stage::Preprocess,
              {{"paths.corpus_manifest", corpus_manifest}, {"paths.out_dir", at("prep")}});
    std::string processed_manifest = at("prep") + "/processed/manifest.tsv";
    std::vector<prep::ManifestRecord> processed = prep::load_manifest(processed_manifest);
    CHECK(processed.size() == 6);
    CHECK(processed[0].period == "Baroque");
    std::string piece0 =
        io::read_text_file(at("prep") + "/processed/" + processed[0].path);
    CHECK(piece0.find("[r:1/") != std::string::npos);

    // tokenize
    run_stage(pipeline::Stage::Tokenize, {{"paths.corpus_manifest", processed_manifest},
                                          {"paths.out_dir", at("tok")}});
    CHECK(io::read_text_file(at("tok") + "/token_report.txt")
              .find("round_trip_failures: 0") != std::string::npos);

    // train
    run_stage(pipeline::Stage::Train, {{"paths.corpus_manifest", processed_manifest},
                                       {"paths.out_dir", at("train")},
                                       {"train.stage", "finetune"},
                                       {"train.steps", "400"},
                                       {"train.batch_size", "2"},
                                       {"model.hidden", "16"},
                                       {"model.context_patches", "48"},
                                       {"opt.lr", "3e-3"}});
    std::string ckpt = at("train") + "/model.ckpt";
    REQUIRE(fs::exists(ckpt));
    CHECK(fs::exists(root / "train" / "train_log.tsv"));
    std::string train_report = io::read_text_file(at("train") + "/train_report.txt");
    CHECK(train_report.find("steps: 400") != std::string::npos);
    CHECK(train_report.find("augment_failures: 0") != std::string::npos);

    // generate
    run_stage(pipeline::Stage::Generate, {{"paths.checkpoint", ckpt},
                                          {"paths.out_dir", at("gen")},
                                          {"generate.count", "4"},
                                          {"generate.prompt", "Baroque|Bach|Keyboard"},
                                          {"sampling.max_new_patches", "300"},
                                          {"sampling.temperature", "0.9"}});
    std::vector<prep::ManifestRecord> gen_records =
        prep::load_manifest(at("gen") + "/pieces/manifest.tsv");
    REQUIRE(!gen_records.empty());
    CHECK(gen_records[0].split == "generated");
    CHECK(gen_records[0].period == "Baroque");
    std::string gen0 = io::read_text_file(at("gen") + "/pieces/" + gen_records[0].path);
    CHECK(gen0.rfind("%%prompt Baroque|Bach|Keyboard\n", 0) == 0);

    // eval
    run_stage(pipeline::Stage::Eval, {{"paths.corpus_manifest", processed_manifest},
                                      {"paths.checkpoint", ckpt},
                                      {"paths.pieces_dir", at("gen") + "/pieces"},
                                      {"paths.out_dir", at("eval")},
                                      {"eval.min_ground_truth", "2"},
                                      {"eval.tag", "chain"}});
    metrics::MetricReport mr =
        metrics::load_metric_report(at("eval") + "/metric_report.txt");
    CHECK(mr.pieces == gen_records.size());
    CHECK(mr.ppl > 1.0);
    CHECK(std::isfinite(mr.ppl));
    CHECK(mr.bars > 0);
    std::string notes = io::read_text_file(at("eval") + "/eval_notes.txt");
    CHECK(notes.find("profiles: 2") != std::string::npos);

    // dpo, one short iteration
    run_stage(pipeline::Stage::Dpo, {{"paths.corpus_manifest", processed_manifest},
                                     {"paths.checkpoint", ckpt},
                                     {"paths.out_dir", at("dpo")},
                                     {"dpo.iterations", "1"},
                                     {"dpo.steps_per_iteration", "4"},
                                     {"dpo.generations_per_prompt", "6"},
                                     {"sampling.max_new_patches", "300"},
                                     {"sampling.temperature", "0.9"},
                                     {"eval.min_ground_truth", "2"},
                                     {"workers", "2"}});
    CHECK(fs::exists(root / "dpo" / "model.ckpt"));
    CHECK(fs::exists(root / "dpo" / "policy_0.ckpt"));
    CHECK(fs::exists(root / "dpo" / "pool_0" / "report.txt"));
    std::string csv = io::read_text_file(at("dpo") + "/iterations.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 3); // header + K+1 reports

    // report over everything produced so far
    run_stage(pipeline::Stage::Report,
              {{"paths.reports_dir", root.string()}, {"paths.out_dir", at("rollup")}});
    std::string summary = io::read_text_file(at("rollup") + "/summary.csv");
    CHECK(summary.find("eval") != std::string::npos);
    CHECK(std::count(summary.begin(), summary.end(), '\n') >= 2);

    fs::remove_all(root);
}

TEST_CASE("tokenize and train are bit-reproducible") {
    fs::path root = fs::temp_directory_path() / "bs_pipe_repro";
    fs::remove_all(root);
    fs::create_directories(root);
    auto at = [&](const char* leaf) { return (root / leaf).string(); };

    run_stage(pipeline::Stage::SynthCorpus, {{"paths.out_dir", at("corpus")},
                                             {"synth.pieces_per_style", "2"},
                                             {"synth.min_bars", "3"},
                                             {"synth.max_bars", "3"}});
    std::string manifest = at("corpus") + "/manifest.tsv";

    for (const char* dir : {"a", "b"}) {
        run_stage(pipeline::Stage::Train, {{"paths.corpus_manifest", manifest},
                                           {"paths.out_dir", at(dir)},
                                           {"train.steps", "12"},
                                           {"train.batch_size", "2"},
                                           {"model.hidden", "16"},
                                           {"model.context_patches", "48"}});
    }
    CHECK(io::hash_file(at("a") + "/model.ckpt") == io::hash_file(at("b") + "/model.ckpt"));
    CHECK(io::hash_file(at("a") + "/train_log.tsv") ==
          io::hash_file(at("b") + "/train_log.tsv"));
    fs::remove_all(root);
}

TEST_CASE("ingest keeps going past corrupt pieces") {
    fs::path root = fs::temp_directory_path() / "bs_pipe_corrupt";
    fs::remove_all(root);
    fs::create_directories(root);

    io::write_text_file((root / "good.abc").string(), "X:1\nL:1/8\nM:2/4\nK:C\nC2D2|\n");
    io::write_text_file((root / "bad.abc").string(), "not music\n");
    prep::save_manifest((root / "manifest.tsv").string(),
                        {{"good.abc", "Baroque", "Bach", "Keyboard", "train"},
                         {"bad.abc", "Baroque", "Bach", "Keyboard", "train"}});
    run_stage(pipeline::Stage::Ingest,
              {{"paths.corpus_manifest", (root / "manifest.tsv").string()},
               {"paths.out_dir", (root / "out").string()}});
    std::string report = io::read_text_file((root / "out" / "ingest_report.txt").string());
    CHECK(report.find("parsed: 1") != std::string::npos);
    CHECK(report.find("failed: 1") != std::string::npos);
    CHECK(report.find("fail bad.abc") != std::string::npos);
    fs::remove_all(root);
}

} // TEST_SUITE pipeline.stages

TEST_SUITE("pipeline.midi") {

TEST_CASE("midi stages round-trip a small file") {
    fs::path root = fs::temp_directory_path() / "bs_pipe_midi";
    fs::remove_all(root);
    fs::create_directories(root);

    // format 0, one track: two quarter notes a beat apart at 480 tpb
    auto u32 = [](std::string& s, std::uint32_t v) {
        for (int i = 3; i >= 0; --i) s.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
    };
    auto u16 = [](std::string& s, std::uint16_t v) {
        s.push_back(static_cast<char>(v >> 8));
        s.push_back(static_cast<char>(v & 0xff));
    };
    std::string body;
    auto push = [&](std::initializer_list<int> bytes) {
        for (int b : bytes) body.push_back(static_cast<char>(b));
    };
    push({0x00, 0x90, 60, 100});
    push({0x83, 0x60, 0x80, 60, 0}); // delta 480
    push({0x00, 0x90, 64, 90});
    push({0x81, 0x70, 0x80, 64, 0}); // delta 240
    push({0x00, 0xff, 0x2f, 0x00});
    std::string smf = "MThd";
    u32(smf, 6);
    u16(smf, 0);
    u16(smf, 1);
    u16(smf, 480);
    smf += "MTrk";
    u32(smf, static_cast<std::uint32_t>(body.size()));
    smf += body;
    io::write_text_file((root / "in.mid").string(), smf);

    run_stage(pipeline::Stage::MidiEncode,
              {{"paths.midi_in", (root / "in.mid").string()},
               {"paths.midi_out", (root / "tokens.txt").string()},
               {"paths.out_dir", (root / "enc").string()},
               {"midi.period", "1"},
               {"midi.composer", "3"}});
    CHECK(io::read_text_file((root / "enc" / "midi_report.txt").string())
              .find("token_rows: 6") != std::string::npos);

    run_stage(pipeline::Stage::MidiDecode,
              {{"paths.midi_in", (root / "tokens.txt").string()},
               {"paths.midi_out", (root / "events.txt").string()}});
    std::string events = io::read_text_file((root / "events.txt").string());
    CHECK(events.find("period_prompt index=1\n") != std::string::npos);
    CHECK(events.find("composer_prompt index=3\n") != std::string::npos);
    CHECK(events.find("bos\n") != std::string::npos);
    CHECK(events.find("pitch=60 velocity=100 duration=16") != std::string::npos);
    CHECK(events.find("time1=1 time2=0 track=0 channel=0 pitch=64 velocity=90 duration=8") !=
          std::string::npos);
    CHECK(events.find("eos\n") != std::string::npos);
    fs::remove_all(root);
}

} // TEST_SUITE pipeline.midi
