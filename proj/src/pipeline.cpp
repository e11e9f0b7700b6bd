#include "barstream/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "barstream/abc.hpp"
#include "barstream/io.hpp"
#include "barstream/metrics.hpp"
#include "barstream/midi.hpp"
#include "barstream/patching.hpp"
#include "barstream/rng.hpp"

namespace barstream::pipeline {

namespace fs = std::filesystem;

const char* stage_name(Stage stage) {
    switch (stage) {
        case Stage::Ingest: return "ingest";
        case Stage::Preprocess: return "preprocess";
        case Stage::Tokenize: return "tokenize";
        case Stage::Train: return "train";
        case Stage::Generate: return "generate";
        case Stage::Dpo: return "dpo";
        case Stage::Eval: return "eval";
        case Stage::Report: return "report";
        case Stage::SynthCorpus: return "synth-corpus";
        case Stage::MidiEncode: return "midi-encode";
        case Stage::MidiDecode: return "midi-decode";
    }
    return "unknown";
}

namespace {

struct CorpusPiece {
    std::string file_name;
    prep::Prompt prompt;
    std::string split;
    std::string text;
};

std::vector<CorpusPiece> load_corpus(const std::string& manifest_path) {
    std::vector<prep::ManifestRecord> records = prep::load_manifest(manifest_path);
    fs::path base = fs::path(manifest_path).parent_path();
    std::vector<CorpusPiece> out;
    out.reserve(records.size());
    for (const prep::ManifestRecord& r : records) {
        CorpusPiece p;
        p.file_name = r.path;
        p.prompt = {r.period, r.composer, r.instrumentation};
        p.split = r.split;
        p.text = io::read_text_file((base / r.path).string());
        out.push_back(std::move(p));
    }
    if (out.empty()) throw Error("empty corpus manifest: " + manifest_path);
    return out;
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

std::optional<prep::Prompt> parse_prompt_spec(const std::string& spec) {
    if (spec.empty()) return std::nullopt;
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (true) {
        std::size_t bar = spec.find('|', start);
        parts.push_back(spec.substr(start, bar - start));
        if (bar == std::string::npos) break;
        start = bar + 1;
    }
    if (parts.size() < 2 || parts.size() > 3) return std::nullopt;
    prep::Prompt p;
    p.period = parts[0];
    p.composer = parts[1];
    if (parts.size() == 3) p.instrumentation = parts[2];
    if (!prep::valid_prompt(p)) return std::nullopt;
    return p;
}

// Every file under out_dir, hashed, except the manifest itself.
void write_artifact_manifest(const std::string& out_dir) {
    std::vector<std::string> rel;
    for (const fs::directory_entry& e : fs::recursive_directory_iterator(out_dir)) {
        if (!e.is_regular_file()) continue;
        std::string r = fs::relative(e.path(), out_dir).generic_string();
        if (r == "manifest.txt") continue;
        rel.push_back(std::move(r));
    }
    std::sort(rel.begin(), rel.end());
    io::save_manifest((fs::path(out_dir) / "manifest.txt").string(),
                      io::build_manifest(rel, out_dir));
}

// --- stage: ingest ------------------------------------------------------------

void run_ingest(const RunConfig& rc) {
    std::vector<CorpusPiece> corpus = load_corpus(rc.corpus_manifest);
    std::size_t ok = 0;
    std::vector<std::string> lines;
    for (const CorpusPiece& p : corpus) {
        try {
            abc::Sheet sheet =
                abc::parse_sheet(prep::strip_bar_annotations(prep::strip_prompt(p.text)));
            prep::InterleavedSheet isheet = prep::interleave(sheet);
            lines.push_back("ok " + p.file_name + " voices=" + std::to_string(sheet.body.size()) +
                            " measures=" + std::to_string(isheet.measures.size()));
            ++ok;
        } catch (const Error& e) {
            lines.push_back("fail " + p.file_name + ": " + e.what());
        }
    }
    if (ok == 0) throw Error("no piece in " + rc.corpus_manifest + " parses");
    std::string report = "pieces: " + std::to_string(corpus.size()) +
                         "\nparsed: " + std::to_string(ok) +
                         "\nfailed: " + std::to_string(corpus.size() - ok) + "\n\n";
    for (const std::string& l : lines) report += l + "\n";
    io::write_text_file((fs::path(rc.out_dir) / "ingest_report.txt").string(), report);
}

// --- stage: preprocess --------------------------------------------------------

void run_preprocess(const RunConfig& rc) {
    std::vector<CorpusPiece> corpus = load_corpus(rc.corpus_manifest);
    fs::path processed = fs::path(rc.out_dir) / "processed";
    fs::create_directories(processed);

    std::vector<prep::ManifestRecord> records;
    std::vector<std::string> fail_lines;
    std::size_t measures_before = 0, measures_after = 0;
    double ratio_sum = 0, ratio_min = std::numeric_limits<double>::infinity(), ratio_max = 0;
    for (const CorpusPiece& p : corpus) {
        try {
            abc::Sheet sheet =
                abc::parse_sheet(prep::strip_bar_annotations(prep::strip_prompt(p.text)));
            sheet = prep::clean_text_annotations(std::move(sheet));
            prep::InterleavedSheet isheet = prep::interleave(sheet);
            measures_before += isheet.measures.size();
            isheet = prep::strip_rest_bars(std::move(isheet));
            measures_after += isheet.measures.size();
            double ratio = isheet.length_ratio_after_strip.to_double();
            ratio_sum += ratio;
            ratio_min = std::min(ratio_min, ratio);
            ratio_max = std::max(ratio_max, ratio);
            io::write_text_file((processed / p.file_name).string(),
                                prep::render_annotated(isheet));
            records.push_back({p.file_name, p.prompt.period, p.prompt.composer,
                               p.prompt.instrumentation, p.split});
        } catch (const Error& e) {
            fail_lines.push_back("fail " + p.file_name + ": " + e.what());
        }
    }
    if (records.empty()) throw Error("preprocess kept no piece from " + rc.corpus_manifest);
    prep::save_manifest((processed / "manifest.tsv").string(), records);

    std::string report =
        "pieces_in: " + std::to_string(corpus.size()) +
        "\npieces_out: " + std::to_string(records.size()) +
        "\nfailed: " + std::to_string(fail_lines.size()) +
        "\nmeasures_before_strip: " + std::to_string(measures_before) +
        "\nmeasures_after_strip: " + std::to_string(measures_after) +
        "\nmean_length_ratio: " + fmt(ratio_sum / static_cast<double>(records.size())) +
        "\nmin_length_ratio: " + fmt(ratio_min) +
        "\nmax_length_ratio: " + fmt(ratio_max) + "\n";
    for (const std::string& l : fail_lines) report += l + "\n";
    io::write_text_file((fs::path(rc.out_dir) / "preprocess_report.txt").string(), report);
}

// --- stage: tokenize ----------------------------------------------------------

void run_tokenize(const RunConfig& rc) {
    std::vector<CorpusPiece> corpus = load_corpus(rc.corpus_manifest);
    std::size_t units_total = 0, patches_total = 0, chars_total = 0, patches_max = 0;
    std::size_t round_trip_failures = 0;
    for (const CorpusPiece& p : corpus) {
        std::vector<patching::Unit> units = patching::segment_units(p.text);
        patching::PatchSequence ps =
            patching::to_patches(units, rc.model.patch_size, rc.model.vocab);
        units_total += units.size();
        patches_total += ps.patches.size();
        chars_total += p.text.size();
        patches_max = std::max(patches_max, ps.patches.size());
        if (patching::detokenize(ps) != p.text) ++round_trip_failures;
    }
    std::string report =
        "pieces: " + std::to_string(corpus.size()) +
        "\nchars: " + std::to_string(chars_total) +
        "\nunits: " + std::to_string(units_total) +
        "\npatches: " + std::to_string(patches_total) +
        "\nmean_patches_per_piece: " +
        fmt(static_cast<double>(patches_total) / static_cast<double>(corpus.size())) +
        "\nmax_patches_per_piece: " + std::to_string(patches_max) +
        "\nround_trip_failures: " + std::to_string(round_trip_failures) + "\n";
    io::write_text_file((fs::path(rc.out_dir) / "token_report.txt").string(), report);
    if (round_trip_failures) throw Error("tokenizer round trip failed on the corpus");
}

// --- stage: train -------------------------------------------------------------

std::string augment_piece(const CorpusPiece& p, const RunConfig& rc, Rng& rng) {
    abc::Sheet sheet =
        abc::parse_sheet(prep::strip_bar_annotations(prep::strip_prompt(p.text)));
    prep::InterleavedSheet isheet = prep::interleave(sheet);
    prep::KeyChoice choice = prep::choose_key(rc.train_stage, sheet.header.key, rng);
    isheet = prep::transpose(isheet, choice);
    std::string text = prep::render_annotated(isheet);
    if (rc.train_stage == prep::Stage::Finetune && prep::valid_prompt(p.prompt))
        text = prep::prepend_prompt(text, p.prompt);
    return text;
}

// Windows the text to the char budget, then drops trailing units until the
// patch sequence fits the model context.
patching::PatchSequence segment_to_patches(const std::string& text, const RunConfig& rc,
                                           Rng& rng) {
    std::string seg;
    try {
        seg = prep::make_training_segment(text, rc.max_segment_chars, rng);
    } catch (const Error&) {
        seg = text;
    }
    std::vector<patching::Unit> units = patching::segment_units(seg);
    while (!units.empty()) {
        patching::PatchSequence ps =
            patching::to_patches(units, rc.model.patch_size, rc.model.vocab);
        if (ps.patches.size() <= static_cast<std::size_t>(rc.model.context_patches))
            return ps;
        units.pop_back();
    }
    throw Error("piece has no unit that fits the model context");
}

void run_train(const RunConfig& rc) {
    std::vector<CorpusPiece> corpus = load_corpus(rc.corpus_manifest);
    model::Policy policy;
    model::AdamState state;
    if (!rc.checkpoint.empty())
        policy = model::load_checkpoint(rc.checkpoint, &state);
    else
        policy = model::init_policy(rc.model);

    std::vector<model::TrainLogRow> log;
    std::size_t augment_failures = 0;
    double last_loss = 0;
    for (long step = 0; step < rc.train_steps; ++step) {
        Rng rng(mix_seed(rc.seed, {0x7EULL, static_cast<std::uint64_t>(step)}));
        std::vector<patching::PatchSequence> batch;
        batch.reserve(rc.batch_size);
        for (std::size_t b = 0; b < rc.batch_size; ++b) {
            const CorpusPiece& p = corpus[rand_index(rng, static_cast<int>(corpus.size()))];
            std::string text;
            try {
                text = augment_piece(p, rc, rng);
            } catch (const Error&) {
                ++augment_failures;
                text = p.text;
            }
            batch.push_back(segment_to_patches(text, rc, rng));
        }
        last_loss = model::train_step(policy, batch, state, rc.opt);
        if (step % rc.log_every == 0 || step + 1 == rc.train_steps) {
            double lr = rc.opt.lr;
            if (rc.opt.warmup_steps > 0)
                lr *= std::min(1.0, static_cast<double>(state.step) /
                                        static_cast<double>(rc.opt.warmup_steps));
            log.push_back({step, last_loss, lr});
        }
    }

    fs::path out(rc.out_dir);
    model::save_checkpoint((out / "model.ckpt").string(), policy, &state);
    model::save_train_log((out / "train_log.tsv").string(), log);
    std::string report = "steps: " + std::to_string(rc.train_steps) +
                         "\nbatch_size: " + std::to_string(rc.batch_size) +
                         "\ncorpus_pieces: " + std::to_string(corpus.size()) +
                         "\naugment_failures: " + std::to_string(augment_failures) +
                         "\nfinal_loss: " + fmt(last_loss) + "\n";
    io::write_text_file((out / "train_report.txt").string(), report);
}

// --- stage: generate ----------------------------------------------------------

void run_generate(const RunConfig& rc) {
    model::Policy policy = model::load_checkpoint(rc.checkpoint);
    std::optional<prep::Prompt> prompt = parse_prompt_spec(rc.generate_prompt);
    std::string prompt_text;
    if (prompt) prompt_text = prep::prompt_line(*prompt) + "\n";

    fs::path pieces_dir = fs::path(rc.out_dir) / "pieces";
    fs::create_directories(pieces_dir);
    std::vector<prep::ManifestRecord> records;
    std::size_t failed = 0, parse_ok = 0, by_countdown = 0, by_eos = 0;
    std::size_t reseeds = 0, new_patches = 0;
    for (std::size_t i = 0; i < rc.generate_count; ++i) {
        model::SamplingConfig s = rc.sampling;
        s.seed = mix_seed(rc.seed, {0x6EULL, i});
        model::GenerateStats gs;
        std::string text;
        try {
            text = model::generate(policy, prompt_text, s, &gs);
        } catch (const Error&) {
            ++failed;
            continue;
        }
        by_countdown += gs.ended_by_countdown ? 1 : 0;
        by_eos += gs.ended_by_eos ? 1 : 0;
        reseeds += gs.reseeds;
        new_patches += gs.new_patches;
        try {
            abc::parse_sheet(prep::strip_bar_annotations(prep::strip_prompt(text)));
            ++parse_ok;
        } catch (const Error&) {
        }
        char name[32];
        std::snprintf(name, sizeof name, "gen_%04zu.abc", i);
        io::write_text_file((pieces_dir / name).string(), text);
        prep::Prompt label = prompt.value_or(prep::Prompt{});
        records.push_back(
            {name, label.period, label.composer, label.instrumentation, "generated"});
    }
    if (records.empty()) throw Error("generation produced no piece");
    prep::save_manifest((pieces_dir / "manifest.tsv").string(), records);

    double n = static_cast<double>(records.size());
    std::string report = "requested: " + std::to_string(rc.generate_count) +
                         "\ngenerated: " + std::to_string(records.size()) +
                         "\nfailed: " + std::to_string(failed) +
                         "\nparse_ok: " + std::to_string(parse_ok) +
                         "\nended_by_countdown: " + std::to_string(by_countdown) +
                         "\nended_by_eos: " + std::to_string(by_eos) +
                         "\nmean_reseeds: " + fmt(static_cast<double>(reseeds) / n) +
                         "\nmean_new_patches: " + fmt(static_cast<double>(new_patches) / n) +
                         "\n";
    io::write_text_file((fs::path(rc.out_dir) / "generation_report.txt").string(), report);
}

// --- stage: dpo ---------------------------------------------------------------

std::vector<evaluator::LabeledFeature> corpus_features(const std::vector<CorpusPiece>& corpus,
                                                       std::size_t* failures) {
    std::vector<evaluator::LabeledFeature> labeled;
    for (const CorpusPiece& p : corpus) {
        if (!prep::valid_prompt(p.prompt)) continue;
        try {
            labeled.push_back({p.prompt, evaluator::extract_features(p.text)});
        } catch (const Error&) {
            if (failures) ++*failures;
        }
    }
    return labeled;
}

void run_dpo(const RunConfig& rc) {
    std::vector<CorpusPiece> corpus = load_corpus(rc.corpus_manifest);
    std::size_t feature_failures = 0;
    std::vector<evaluator::LabeledFeature> labeled = corpus_features(corpus, &feature_failures);
    std::vector<evaluator::PromptProfile> profiles =
        evaluator::build_prompt_set(labeled, rc.min_ground_truth);
    if (profiles.empty())
        throw Error("no prompt in " + rc.corpus_manifest + " has more than " +
                    std::to_string(rc.min_ground_truth) + " usable pieces");

    std::vector<std::string> ground_truth;
    ground_truth.reserve(corpus.size());
    for (const CorpusPiece& p : corpus) ground_truth.push_back(p.text);

    dpo::DpoConfig dc = rc.dpo;
    dc.opt = rc.opt;
    dc.sampling = rc.sampling;
    dc.threads = rc.workers;
    dc.seed = rc.seed;
    dc.artifact_dir = rc.out_dir;

    model::Policy policy = model::load_checkpoint(rc.checkpoint);
    dpo::ClampDpoResult result = dpo::clamp_dpo(policy, profiles, ground_truth, dc);

    fs::path out(rc.out_dir);
    model::save_checkpoint((out / "model.ckpt").string(), result.policy);
    std::string report = "profiles: " + std::to_string(profiles.size()) +
                         "\nfeature_failures: " + std::to_string(feature_failures) + "\n";
    std::string csv = "policy,acs,bae,generated,scored,pairs,steps,mean_dpop_start,"
                      "mean_dpop_end,skipped_prompts\n";
    for (const dpo::IterationReport& r : result.reports) {
        report += "\n" + dpo::format_iteration_report(r);
        csv += std::to_string(r.policy_index) + "," + fmt(r.acs) + "," + fmt(r.bae) + "," +
               std::to_string(r.generated) + "," + std::to_string(r.scored) + "," +
               std::to_string(r.pairs) + "," + std::to_string(r.steps) + "," +
               fmt(r.mean_dpop_start) + "," + fmt(r.mean_dpop_end) + "," +
               std::to_string(r.skipped_prompts) + "\n";
    }
    io::write_text_file((out / "dpo_report.txt").string(), report);
    io::write_text_file((out / "iterations.csv").string(), csv);
}

// --- stage: eval --------------------------------------------------------------

void run_eval(const RunConfig& rc) {
    model::Policy policy = model::load_checkpoint(rc.checkpoint);
    std::vector<CorpusPiece> corpus = load_corpus(rc.corpus_manifest);
    std::size_t gt_failures = 0;
    std::vector<evaluator::LabeledFeature> labeled = corpus_features(corpus, &gt_failures);
    if (labeled.empty()) throw Error("no ground-truth piece yields features");
    std::vector<evaluator::PromptProfile> profiles =
        evaluator::build_prompt_set(labeled, rc.min_ground_truth);

    std::vector<evaluator::SemanticFeature> gt_feats;
    std::vector<std::string> gt_period, gt_instr;
    for (const evaluator::LabeledFeature& lf : labeled) {
        gt_feats.push_back(lf.feature);
        gt_period.push_back(lf.prompt.period);
        gt_instr.push_back(lf.prompt.instrumentation);
    }

    // Generated pieces: labels from the manifest when present, otherwise from
    // embedded prompt lines.
    std::vector<CorpusPiece> gen;
    fs::path gen_manifest = fs::path(rc.pieces_dir) / "manifest.tsv";
    if (fs::exists(gen_manifest)) {
        gen = load_corpus(gen_manifest.string());
    } else {
        std::vector<std::string> names;
        for (const fs::directory_entry& e : fs::directory_iterator(rc.pieces_dir))
            if (e.is_regular_file() && e.path().extension() == ".abc")
                names.push_back(e.path().filename().string());
        std::sort(names.begin(), names.end());
        for (const std::string& name : names) {
            CorpusPiece p;
            p.file_name = name;
            p.text = io::read_text_file((fs::path(rc.pieces_dir) / name).string());
            prep::strip_prompt(p.text, &p.prompt);
            gen.push_back(std::move(p));
        }
    }
    if (gen.empty()) throw Error("no generated piece under " + rc.pieces_dir);

    std::size_t gen_failures = 0;
    std::vector<evaluator::SemanticFeature> gen_feats;
    std::vector<std::string> gen_period, gen_instr;
    std::vector<double> scores;
    evaluator::FeatureTable table;
    table.extractor = rc.extractor;
    table.dim = evaluator::kFeatureDim;
    for (const CorpusPiece& p : gen) {
        evaluator::SemanticFeature f;
        try {
            f = evaluator::extract_features(p.text);
        } catch (const Error&) {
            ++gen_failures;
            continue;
        }
        table.records.push_back({p.file_name, f});
        gen_feats.push_back(f);
        gen_period.push_back(p.prompt.period);
        gen_instr.push_back(p.prompt.instrumentation);
        for (const evaluator::PromptProfile& prof : profiles)
            if (prof.prompt == p.prompt) {
                scores.push_back(evaluator::clamp2_score(f, prof.mean_feature));
                break;
            }
    }

    double nan = std::numeric_limits<double>::quiet_NaN();
    metrics::MetricReport r;
    r.acs = scores.empty() ? nan : metrics::acs(scores);
    auto probe = [&](const std::vector<std::string>& gt_labels,
                     const std::vector<std::string>& gen_labels) {
        try {
            metrics::ProbeFit fit = metrics::train_label_classifier(gt_feats, gt_labels);
            return metrics::label_accuracy(fit.clf, gen_feats, gen_labels);
        } catch (const Error&) {
            return nan;
        }
    };
    r.la_period = probe(gt_period, gen_period);
    r.la_instrumentation = probe(gt_instr, gen_instr);

    std::vector<std::string> gen_sheets;
    for (const CorpusPiece& p : gen)
        gen_sheets.push_back(prep::strip_bar_annotations(prep::strip_prompt(p.text)));
    metrics::BarAlignment ba = metrics::bar_alignment(gen_sheets);
    r.bae = ba.error();
    r.bars = ba.total;
    std::vector<std::string> gen_texts;
    for (const CorpusPiece& p : gen) gen_texts.push_back(p.text);
    r.ppl = metrics::perplexity(policy, gen_texts);
    r.pieces = gen.size();

    fs::path out(rc.out_dir);
    metrics::save_metric_report((out / "metric_report.txt").string(), r);
    io::write_text_file((out / "metrics.csv").string(),
                        metrics::metric_report_csv_header() +
                            metrics::metric_report_csv_row(rc.tag, r));
    evaluator::save_feature_table((out / "features.tsv").string(), table);
    std::string notes = "ground_truth_pieces: " + std::to_string(corpus.size()) +
                        "\nground_truth_feature_failures: " + std::to_string(gt_failures) +
                        "\nprofiles: " + std::to_string(profiles.size()) +
                        "\ngenerated_pieces: " + std::to_string(gen.size()) +
                        "\ngenerated_feature_failures: " + std::to_string(gen_failures) +
                        "\nscored_against_profiles: " + std::to_string(scores.size()) + "\n";
    io::write_text_file((out / "eval_notes.txt").string(), notes);
}

// --- stage: report ------------------------------------------------------------

void run_report(const RunConfig& rc) {
    std::vector<fs::path> found;
    for (const fs::directory_entry& e : fs::recursive_directory_iterator(rc.reports_dir))
        if (e.is_regular_file() && e.path().filename() == "metric_report.txt")
            found.push_back(e.path());
    std::sort(found.begin(), found.end());
    if (found.empty())
        throw Error("no metric_report.txt under " + rc.reports_dir);

    std::string csv = metrics::metric_report_csv_header();
    std::string table = "tag            acs      la_period la_instr  bae      ppl      "
                        "pieces bars\n";
    for (const fs::path& p : found) {
        std::string tag = fs::relative(p.parent_path(), rc.reports_dir).generic_string();
        if (tag == ".") tag = p.parent_path().filename().string();
        metrics::MetricReport r = metrics::load_metric_report(p.string());
        csv += metrics::metric_report_csv_row(tag, r);
        char row[256];
        std::snprintf(row, sizeof row, "%-14s %-8.4f %-9.4f %-9.4f %-8.4f %-8.4f %-6zu %zu\n",
                      tag.c_str(), r.acs, r.la_period, r.la_instrumentation, r.bae, r.ppl,
                      r.pieces, r.bars);
        table += row;
    }
    fs::path out(rc.out_dir);
    io::write_text_file((out / "summary.csv").string(), csv);
    io::write_text_file((out / "summary.txt").string(), table);
}

// --- stage: synth-corpus ------------------------------------------------------

void run_synth_corpus(const RunConfig& rc) {
    std::vector<synth::SynthPiece> pieces;
    if (rc.synth_kind == "two_style")
        pieces = synth::two_style_corpus(rc.two_style);
    else
        pieces = synth::rest_corpus(rc.rest);
    std::string manifest = synth::write_corpus(pieces, rc.out_dir);
    std::string report = "kind: " + rc.synth_kind +
                         "\npieces: " + std::to_string(pieces.size()) +
                         "\nmanifest: " + fs::path(manifest).filename().string() + "\n";
    io::write_text_file((fs::path(rc.out_dir) / "synth_report.txt").string(), report);
}

// --- stages: midi codec -------------------------------------------------------

void run_midi_encode(const RunConfig& rc) {
    midi::MidiFile file = midi::read_midi_file(rc.midi_in);
    std::vector<midi::TimedEvent> events;
    auto untimed = [&](midi::EventType type, int prompt_index, long tick) {
        midi::MidiEvent e;
        e.type = type;
        e.prompt_index = prompt_index;
        events.push_back({tick, 0, e});
    };
    if (rc.midi_period >= 0) untimed(midi::EventType::PeriodPrompt, rc.midi_period, 0);
    if (rc.midi_composer >= 0) untimed(midi::EventType::ComposerPrompt, rc.midi_composer, 0);
    untimed(midi::EventType::Bos, 0, 0);
    events.insert(events.end(), file.events.begin(), file.events.end());
    untimed(midi::EventType::Eos, 0, file.events.empty() ? 0 : file.events.back().tick);

    midi::TimelineStats stats;
    std::vector<midi::EventTokenSeq> seqs =
        midi::encode_timeline(events, file.ticks_per_beat, &stats);
    midi::save_token_stream(rc.midi_out, seqs);

    if (!rc.out_dir.empty()) {
        std::string report = "source_events: " + std::to_string(file.events.size()) +
                             "\nskipped_midi_events: " + std::to_string(file.skipped) +
                             "\ntoken_rows: " + std::to_string(seqs.size()) +
                             "\nclamped_time1: " + std::to_string(stats.clamped_time1) +
                             "\nclamped_duration: " + std::to_string(stats.clamped_duration) +
                             "\n";
        io::write_text_file((fs::path(rc.out_dir) / "midi_report.txt").string(), report);
    }
}

void run_midi_decode(const RunConfig& rc) {
    std::vector<midi::EventTokenSeq> seqs = midi::load_token_stream(rc.midi_in);
    std::string text;
    for (const midi::EventTokenSeq& s : seqs)
        text += midi::describe_event(midi::decode_seq(s)) + "\n";
    io::write_text_file(rc.midi_out, text);
}

} // namespace

// --- config mapping -----------------------------------------------------------

RunConfig make_run_config(Stage stage, const config::Config& cfg) {
    RunConfig rc;
    rc.stage = stage;
    rc.source = cfg;

    rc.corpus_manifest = cfg.get_or("paths.corpus_manifest", "");
    rc.out_dir = cfg.get_or("paths.out_dir", "");
    rc.checkpoint = cfg.get_or("paths.checkpoint", "");
    rc.pieces_dir = cfg.get_or("paths.pieces_dir", "");
    rc.reports_dir = cfg.get_or("paths.reports_dir", "");
    rc.midi_in = cfg.get_or("paths.midi_in", "");
    rc.midi_out = cfg.get_or("paths.midi_out", "");
    struct PathKey {
        const char* env;
        const char* key;
        std::string* field;
    };
    PathKey path_keys[] = {
        {"BARSTREAM_PATHS_CORPUS_MANIFEST", "paths.corpus_manifest", &rc.corpus_manifest},
        {"BARSTREAM_PATHS_OUT_DIR", "paths.out_dir", &rc.out_dir},
        {"BARSTREAM_PATHS_CHECKPOINT", "paths.checkpoint", &rc.checkpoint},
        {"BARSTREAM_PATHS_PIECES_DIR", "paths.pieces_dir", &rc.pieces_dir},
        {"BARSTREAM_PATHS_REPORTS_DIR", "paths.reports_dir", &rc.reports_dir},
        {"BARSTREAM_PATHS_MIDI_IN", "paths.midi_in", &rc.midi_in},
        {"BARSTREAM_PATHS_MIDI_OUT", "paths.midi_out", &rc.midi_out},
    };
    for (const PathKey& pk : path_keys)
        if (const char* v = std::getenv(pk.env)) {
            *pk.field = v;
            rc.source.set(pk.key, v);
        }

    rc.workers = static_cast<int>(cfg.get_int_or("workers", rc.workers));
    rc.seed = static_cast<std::uint64_t>(cfg.get_int_or("seed", 1));
    rc.extractor = cfg.get_or("extractor", rc.extractor);

    model::ModelConfig& m = rc.model;
    m.patch_layers = static_cast<int>(cfg.get_int_or("model.patch_layers", m.patch_layers));
    m.char_layers = static_cast<int>(cfg.get_int_or("model.char_layers", m.char_layers));
    m.hidden = static_cast<int>(cfg.get_int_or("model.hidden", m.hidden));
    m.heads = static_cast<int>(cfg.get_int_or("model.heads", m.heads));
    m.context_patches =
        static_cast<int>(cfg.get_int_or("model.context_patches", m.context_patches));
    m.seed = static_cast<std::uint64_t>(cfg.get_int_or("model.seed",
                                                       static_cast<long>(rc.seed)));

    model::OptimizerConfig& o = rc.opt;
    o.lr = cfg.get_double_or("opt.lr", o.lr);
    o.beta1 = cfg.get_double_or("opt.beta1", o.beta1);
    o.beta2 = cfg.get_double_or("opt.beta2", o.beta2);
    o.eps = cfg.get_double_or("opt.eps", o.eps);
    o.weight_decay = cfg.get_double_or("opt.weight_decay", o.weight_decay);
    o.warmup_steps = static_cast<int>(cfg.get_int_or("opt.warmup_steps", o.warmup_steps));

    model::SamplingConfig& s = rc.sampling;
    s.temperature = cfg.get_double_or("sampling.temperature", s.temperature);
    s.top_p = cfg.get_double_or("sampling.top_p", s.top_p);
    s.max_new_patches = static_cast<std::size_t>(
        cfg.get_int_or("sampling.max_new_patches", static_cast<long>(s.max_new_patches)));

    dpo::DpoConfig& d = rc.dpo;
    d.beta = cfg.get_double_or("dpo.beta", d.beta);
    d.lambda = cfg.get_double_or("dpo.lambda", d.lambda);
    d.iterations = static_cast<int>(cfg.get_int_or("dpo.iterations", d.iterations));
    d.steps_per_iteration =
        static_cast<int>(cfg.get_int_or("dpo.steps_per_iteration", d.steps_per_iteration));
    d.generations_per_prompt = static_cast<int>(
        cfg.get_int_or("dpo.generations_per_prompt", d.generations_per_prompt));
    d.select_fraction = cfg.get_double_or("dpo.select_fraction", d.select_fraction);

    std::string stage_text = cfg.get_or("train.stage", "pretrain");
    if (stage_text == "pretrain")
        rc.train_stage = prep::Stage::Pretrain;
    else if (stage_text == "finetune")
        rc.train_stage = prep::Stage::Finetune;
    else
        throw config::ConfigInvalid("train.stage must be pretrain or finetune, got " +
                                    stage_text);
    rc.train_steps = cfg.get_int_or("train.steps", rc.train_steps);
    rc.batch_size = static_cast<std::size_t>(
        cfg.get_int_or("train.batch_size", static_cast<long>(rc.batch_size)));
    rc.max_segment_chars = static_cast<std::size_t>(cfg.get_int_or(
        "train.max_segment_chars", static_cast<long>(rc.max_segment_chars)));
    rc.log_every = cfg.get_int_or("train.log_every", rc.log_every);

    rc.generate_count = static_cast<std::size_t>(
        cfg.get_int_or("generate.count", static_cast<long>(rc.generate_count)));
    rc.generate_prompt = cfg.get_or("generate.prompt", "");

    rc.min_ground_truth = static_cast<std::size_t>(cfg.get_int_or(
        "eval.min_ground_truth", static_cast<long>(rc.min_ground_truth)));
    rc.tag = cfg.get_or("eval.tag", rc.tag);

    rc.synth_kind = cfg.get_or("synth.kind", rc.synth_kind);
    rc.two_style.pieces_per_style = static_cast<std::size_t>(cfg.get_int_or(
        "synth.pieces_per_style", static_cast<long>(rc.two_style.pieces_per_style)));
    rc.two_style.min_bars = static_cast<std::size_t>(
        cfg.get_int_or("synth.min_bars", static_cast<long>(rc.two_style.min_bars)));
    rc.two_style.max_bars = static_cast<std::size_t>(
        cfg.get_int_or("synth.max_bars", static_cast<long>(rc.two_style.max_bars)));
    rc.two_style.seed = static_cast<std::uint64_t>(
        cfg.get_int_or("synth.seed", static_cast<long>(rc.seed)));
    rc.rest.pieces = static_cast<std::size_t>(
        cfg.get_int_or("synth.rest_pieces", static_cast<long>(rc.rest.pieces)));
    rc.rest.bars = static_cast<int>(cfg.get_int_or("synth.rest_bars", rc.rest.bars));
    rc.rest.rest_period =
        static_cast<int>(cfg.get_int_or("synth.rest_period", rc.rest.rest_period));
    rc.rest.seed = rc.two_style.seed;

    rc.midi_period = static_cast<int>(cfg.get_int_or("midi.period", rc.midi_period));
    rc.midi_composer = static_cast<int>(cfg.get_int_or("midi.composer", rc.midi_composer));
    return rc;
}

// --- validation ---------------------------------------------------------------

std::vector<Diagnostic> validate(const RunConfig& rc) {
    std::vector<Diagnostic> d;
    auto bad = [&](const char* field, std::string reason) {
        d.push_back({field, std::move(reason)});
    };

    if (rc.workers < 1) bad("workers", "must be >= 1");
    if (rc.extractor != evaluator::kExtractorName)
        bad("extractor", "unknown extractor " + rc.extractor + ", expected " +
                             evaluator::kExtractorName);
    try {
        rc.model.validate();
    } catch (const Error& e) {
        bad("model", e.what());
    }
    if (rc.opt.lr <= 0) bad("opt.lr", "must be positive");
    if (rc.opt.warmup_steps < 0) bad("opt.warmup_steps", "must be >= 0");
    if (rc.sampling.temperature < 0) bad("sampling.temperature", "must be >= 0");
    if (rc.sampling.top_p <= 0 || rc.sampling.top_p > 1)
        bad("sampling.top_p", "must be in (0, 1]");
    if (rc.train_steps < 0) bad("train.steps", "must be >= 0");
    if (rc.batch_size < 1) bad("train.batch_size", "must be >= 1");
    if (rc.max_segment_chars < 64)
        bad("train.max_segment_chars", "too small to hold a header");
    if (rc.log_every < 1) bad("train.log_every", "must be >= 1");
    try {
        rc.dpo.validate();
    } catch (const Error& e) {
        bad("dpo", e.what());
    }

    auto need_file = [&](const char* field, const std::string& value) {
        if (value.empty())
            bad(field, "required for stage " + std::string(stage_name(rc.stage)));
        else if (!fs::exists(value))
            bad(field, "not found: " + value);
    };
    auto need_out = [&] {
        if (rc.out_dir.empty())
            bad("paths.out_dir", "required for stage " + std::string(stage_name(rc.stage)));
    };
    switch (rc.stage) {
        case Stage::Ingest:
        case Stage::Preprocess:
        case Stage::Tokenize:
            need_file("paths.corpus_manifest", rc.corpus_manifest);
            need_out();
            break;
        case Stage::Train:
            need_file("paths.corpus_manifest", rc.corpus_manifest);
            need_out();
            if (!rc.checkpoint.empty()) need_file("paths.checkpoint", rc.checkpoint);
            break;
        case Stage::Generate:
            need_file("paths.checkpoint", rc.checkpoint);
            need_out();
            if (!rc.generate_prompt.empty() && !parse_prompt_spec(rc.generate_prompt))
                bad("generate.prompt",
                    "expected Period|Composer[|Instrumentation] with known fields");
            break;
        case Stage::Dpo:
            need_file("paths.corpus_manifest", rc.corpus_manifest);
            need_file("paths.checkpoint", rc.checkpoint);
            need_out();
            break;
        case Stage::Eval:
            need_file("paths.corpus_manifest", rc.corpus_manifest);
            need_file("paths.checkpoint", rc.checkpoint);
            need_file("paths.pieces_dir", rc.pieces_dir);
            need_out();
            break;
        case Stage::Report:
            need_file("paths.reports_dir", rc.reports_dir);
            need_out();
            break;
        case Stage::SynthCorpus:
            need_out();
            if (rc.synth_kind != "two_style" && rc.synth_kind != "rest")
                bad("synth.kind", "must be two_style or rest, got " + rc.synth_kind);
            if (rc.synth_kind == "two_style") {
                if (rc.two_style.pieces_per_style < 1)
                    bad("synth.pieces_per_style", "must be >= 1");
                if (rc.two_style.min_bars < 1 ||
                    rc.two_style.max_bars < rc.two_style.min_bars)
                    bad("synth.min_bars", "need 1 <= min_bars <= max_bars");
            }
            if (rc.synth_kind == "rest") {
                if (rc.rest.rest_period < 2) bad("synth.rest_period", "must be >= 2");
                else if (rc.rest.bars < rc.rest.rest_period ||
                         rc.rest.bars % rc.rest.rest_period != 0)
                    bad("synth.rest_bars", "must be a positive multiple of the period");
            }
            break;
        case Stage::MidiEncode:
            need_file("paths.midi_in", rc.midi_in);
            if (rc.midi_out.empty()) bad("paths.midi_out", "required for stage midi-encode");
            if (rc.midi_period < -1 || rc.midi_period > 2)
                bad("midi.period", "must be -1 (none) or a period index 0..2");
            if (rc.midi_composer < -1 || rc.midi_composer > 35)
                bad("midi.composer", "must be -1 (none) or a composer index 0..35");
            break;
        case Stage::MidiDecode:
            need_file("paths.midi_in", rc.midi_in);
            if (rc.midi_out.empty()) bad("paths.midi_out", "required for stage midi-decode");
            break;
    }
    return d;
}

// --- driver -------------------------------------------------------------------

void run(const RunConfig& rc) {
    std::vector<Diagnostic> diags = validate(rc);
    if (!diags.empty()) {
        std::string msg = "invalid run config for stage " +
                          std::string(stage_name(rc.stage)) + ":";
        for (const Diagnostic& di : diags) msg += "\n  " + di.field + ": " + di.reason;
        throw config::ConfigInvalid(msg);
    }
    bool has_out = !rc.out_dir.empty();
    if (has_out) {
        fs::create_directories(rc.out_dir);
        io::write_text_file((fs::path(rc.out_dir) / "config.txt").string(),
                            rc.source.render());
    }
    switch (rc.stage) {
        case Stage::Ingest: run_ingest(rc); break;
        case Stage::Preprocess: run_preprocess(rc); break;
        case Stage::Tokenize: run_tokenize(rc); break;
        case Stage::Train: run_train(rc); break;
        case Stage::Generate: run_generate(rc); break;
        case Stage::Dpo: run_dpo(rc); break;
        case Stage::Eval: run_eval(rc); break;
        case Stage::Report: run_report(rc); break;
        case Stage::SynthCorpus: run_synth_corpus(rc); break;
        case Stage::MidiEncode: run_midi_encode(rc); break;
        case Stage::MidiDecode: run_midi_decode(rc); break;
    }
    if (has_out) write_artifact_manifest(rc.out_dir);
}

} // namespace barstream::pipeline
