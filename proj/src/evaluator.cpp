#include "barstream/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

#include "barstream/abc.hpp"

namespace barstream::evaluator {

namespace {

void normalize_sum(double* block, std::size_t n) {
    double sum = 0;
    for (std::size_t i = 0; i < n; ++i) sum += block[i];
    if (sum > 0)
        for (std::size_t i = 0; i < n; ++i) block[i] /= sum;
}

int top_pitch(const abc::Token& t, const abc::KeySig& key) {
    if (t.kind == abc::TokenKind::Note && t.pitch) return abc::midi_pitch(*t.pitch, key);
    int best = std::numeric_limits<int>::min();
    for (const abc::Token& sub : t.sub)
        if (sub.kind == abc::TokenKind::Note && sub.pitch)
            best = std::max(best, abc::midi_pitch(*sub.pitch, key));
    return best;
}

} // namespace

SemanticFeature extract_features(const std::string& sheet_text) {
    std::string clean = prep::strip_bar_annotations(prep::strip_prompt(sheet_text));
    abc::Sheet sheet = abc::parse_sheet(clean);
    const abc::KeySig& key = sheet.header.key;
    Rational L = sheet.header.unit_note_length();

    SemanticFeature out;
    out.values.assign(kFeatureDim, 0.0);
    double* pitch_hist = out.values.data();       // [0,12)
    double* dur_hist = out.values.data() + 12;    // [12,28)
    double* ivl_hist = out.values.data() + 28;    // [28,40)
    double* texture = out.values.data() + 40;     // [40,48)
    double* density_hist = out.values.data() + 48; // [48,64)

    std::size_t note_events = 0, chord_events = 0, rest_events = 0, voice_bars = 0;
    int min_midi = std::numeric_limits<int>::max();
    int max_midi = std::numeric_limits<int>::min();
    std::size_t pitches_seen = 0;
    std::size_t bar_count = 0;

    for (const auto& voice : sheet.body) {
        bar_count = std::max(bar_count, voice.size());
        int prev_pitch = -1;
        for (const abc::Bar& bar : voice) {
            ++voice_bars;
            std::size_t bar_notes = 0;
            for (const abc::Token& t : bar.tokens) {
                bool is_note = t.kind == abc::TokenKind::Note && t.pitch.has_value();
                bool is_chord = t.kind == abc::TokenKind::Chord;
                if (t.kind == abc::TokenKind::Rest) {
                    ++rest_events;
                    continue;
                }
                if (!is_note && !is_chord) continue;
                ++note_events;
                ++bar_notes;
                if (is_chord) ++chord_events;

                // pitch classes and range over every sounding pitch
                auto touch_pitch = [&](const abc::NotePitch& p) {
                    int midi = abc::midi_pitch(p, key);
                    pitch_hist[((midi % 12) + 12) % 12] += 1;
                    min_midi = std::min(min_midi, midi);
                    max_midi = std::max(max_midi, midi);
                    ++pitches_seen;
                };
                if (is_note) {
                    touch_pitch(*t.pitch);
                } else {
                    for (const abc::Token& sub : t.sub)
                        if (sub.kind == abc::TokenKind::Note && sub.pitch)
                            touch_pitch(*sub.pitch);
                }

                // one duration per event
                double dd = (t.dur * L).to_double();
                if (dd > 0) {
                    long bin = 8 + std::llround(std::log2(dd));
                    dur_hist[std::clamp<long>(bin, 0, 15)] += 1;
                }

                // melodic interval from the previous event in this voice
                int rep = top_pitch(t, key);
                if (rep != std::numeric_limits<int>::min()) {
                    if (prev_pitch >= 0)
                        ivl_hist[std::min(std::abs(rep - prev_pitch), 11)] += 1;
                    prev_pitch = rep;
                }
            }
            density_hist[std::min<std::size_t>(bar_notes, 15)] += 1;
        }
    }

    normalize_sum(pitch_hist, 12);
    normalize_sum(dur_hist, 16);
    normalize_sum(ivl_hist, 12);
    normalize_sum(density_hist, 16);

    double voices = static_cast<double>(sheet.body.size());
    texture[0] = std::min(voices, 16.0) / 16.0;
    double mean_notes =
        voice_bars > 0 ? static_cast<double>(note_events) / static_cast<double>(voice_bars)
                       : 0.0;
    texture[1] = std::min(mean_notes, 32.0) / 32.0;
    std::size_t events = note_events + rest_events;
    texture[2] = events > 0 ? static_cast<double>(rest_events) / static_cast<double>(events)
                            : 0.0;
    texture[3] = note_events > 0
                     ? static_cast<double>(chord_events) / static_cast<double>(note_events)
                     : 0.0;
    texture[4] = pitches_seen >= 2
                     ? std::clamp(static_cast<double>(max_midi - min_midi) / 127.0, 0.0, 1.0)
                     : 0.0;
    texture[5] = std::min(static_cast<double>(sheet.header.meter.num), 16.0) / 16.0;
    texture[6] = std::min(static_cast<double>(sheet.header.meter.den), 16.0) / 16.0;
    texture[7] = std::min(static_cast<double>(bar_count), 64.0) / 64.0;

    double norm = 0;
    for (double v : out.values) norm += v * v;
    norm = std::sqrt(norm);
    if (norm > 0)
        for (double& v : out.values) v /= norm;
    return out;
}

SemanticFeature prompt_mean(const std::vector<SemanticFeature>& features) {
    if (features.empty()) throw EmptyGroundTruth("prompt has no ground-truth features");
    std::size_t dim = features.front().values.size();
    SemanticFeature mean;
    mean.values.assign(dim, 0.0);
    for (const SemanticFeature& f : features) {
        if (f.values.size() != dim)
            throw DimensionMismatch("feature dimensions differ within one prompt");
        for (std::size_t i = 0; i < dim; ++i) mean.values[i] += f.values[i];
    }
    for (double& v : mean.values) v /= static_cast<double>(features.size());
    return mean;
}

double clamp2_score(const SemanticFeature& z, const SemanticFeature& zbar) {
    if (z.values.size() != zbar.values.size())
        throw DimensionMismatch("cosine over vectors of different dimension");
    double dot = 0, na = 0, nb = 0;
    for (std::size_t i = 0; i < z.values.size(); ++i) {
        dot += z.values[i] * zbar.values[i];
        na += z.values[i] * z.values[i];
        nb += zbar.values[i] * zbar.values[i];
    }
    if (na == 0 || nb == 0) throw ZeroVector("cosine of a zero vector");
    return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

std::vector<PromptProfile> build_prompt_set(const std::vector<LabeledFeature>& labeled,
                                            std::size_t min_count) {
    std::vector<PromptProfile> out;
    std::vector<std::vector<SemanticFeature>> groups;
    for (const LabeledFeature& lf : labeled) {
        std::size_t g = 0;
        for (; g < out.size(); ++g)
            if (out[g].prompt == lf.prompt) break;
        if (g == out.size()) {
            out.push_back({lf.prompt, {}, 0});
            groups.emplace_back();
        }
        groups[g].push_back(lf.feature);
    }
    std::vector<PromptProfile> kept;
    for (std::size_t g = 0; g < out.size(); ++g) {
        if (groups[g].size() <= min_count) continue;
        out[g].mean_feature = prompt_mean(groups[g]);
        out[g].ground_truth_count = groups[g].size();
        kept.push_back(std::move(out[g]));
    }
    return kept;
}

// --- feature files -----------------------------------------------------------

std::string format_feature_table(const FeatureTable& table) {
    std::string out = "#features " + table.extractor + " " + std::to_string(table.dim) + "\n";
    char buf[32];
    for (const FeatureRecord& r : table.records) {
        if (r.feature.values.size() != table.dim)
            throw DimensionMismatch("record '" + r.id + "' does not match the table dimension");
        out += r.id;
        out += '\t';
        for (std::size_t i = 0; i < r.feature.values.size(); ++i) {
            if (i) out += ' ';
            std::snprintf(buf, sizeof buf, "%.17g", r.feature.values[i]);
            out += buf;
        }
        out += '\n';
    }
    return out;
}

FeatureTable parse_feature_table(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || line.rfind("#features ", 0) != 0)
        throw BadFeatureTable("missing #features header");
    std::istringstream head(line.substr(10));
    FeatureTable table;
    if (!(head >> table.extractor >> table.dim))
        throw BadFeatureTable("feature header needs a name and a dimension");
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t tab = line.find('\t');
        if (tab == std::string::npos)
            throw BadFeatureTable("feature row without a tab separator");
        FeatureRecord rec;
        rec.id = line.substr(0, tab);
        std::istringstream vals(line.substr(tab + 1));
        double v;
        while (vals >> v) rec.feature.values.push_back(v);
        if (rec.feature.values.size() != table.dim)
            throw DimensionMismatch("row '" + rec.id + "' has " +
                                    std::to_string(rec.feature.values.size()) +
                                    " values, expected " + std::to_string(table.dim));
        table.records.push_back(std::move(rec));
    }
    return table;
}

void save_feature_table(const std::string& path, const FeatureTable& table) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write feature table: " + path);
    out << format_feature_table(table);
}

FeatureTable load_feature_table(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open feature table: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_feature_table(ss.str());
}

} // namespace barstream::evaluator
