#include "barstream/synth.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>

#include "barstream/io.hpp"
#include "barstream/rng.hpp"

namespace barstream::synth {

namespace {

// Bounded random walk over a scale; steps of up to two degrees.
struct Walk {
    const std::vector<std::string>& scale;
    int pos;

    const std::string& next(Rng& rng) {
        const int step = rand_index(rng, 5) - 2;
        pos = std::clamp(pos + step, 0, static_cast<int>(scale.size()) - 1);
        return scale[static_cast<std::size_t>(pos)];
    }
};

// One 2/4 bar, four eighths of melody in one of a few rhythm shapes.
std::string style_a_bar(Walk& walk, Rng& rng) {
    switch (rand_index(rng, 4)) {
    case 0: return walk.next(rng) + walk.next(rng) + walk.next(rng) + walk.next(rng);
    case 1: return walk.next(rng) + "2" + walk.next(rng) + walk.next(rng);
    case 2: return walk.next(rng) + walk.next(rng) + walk.next(rng) + "2";
    default: return walk.next(rng) + "2" + walk.next(rng) + "2";
    }
}

// One 3/4 bar, six eighths in longer values.
std::string style_b_bar(Walk& walk, Rng& rng) {
    switch (rand_index(rng, 4)) {
    case 0: return walk.next(rng) + "2" + walk.next(rng) + "2" + walk.next(rng) + "2";
    case 1: return walk.next(rng) + "3" + walk.next(rng) + "3";
    case 2: return walk.next(rng) + "4" + walk.next(rng) + "2";
    default: return walk.next(rng) + "2" + walk.next(rng) + "4";
    }
}

std::string join_bars(const std::vector<std::string>& bars, int per_line) {
    std::string out;
    for (std::size_t i = 0; i < bars.size(); ++i) {
        out += bars[i];
        out += '|';
        if ((i + 1) % static_cast<std::size_t>(per_line) == 0 ||
            i + 1 == bars.size())
            out += '\n';
    }
    return out;
}

std::string file_name(const char* stem, std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%s_%03zu.abc", stem, index);
    return buf;
}

} // namespace

std::vector<SynthPiece> two_style_corpus(const TwoStyleConfig& cfg) {
    static const std::vector<std::string> pentatonic{"C", "D", "E", "G",
                                                     "A", "c", "d", "e"};
    static const std::vector<std::string> flats_high{"F", "_A", "_B", "c", "_e"};
    static const std::vector<std::string> flats_low{"F,", "_A,", "_B,", "C", "_E"};

    std::vector<SynthPiece> out;
    const int spread = std::max(cfg.max_bars - cfg.min_bars + 1, 1);

    for (std::size_t i = 0; i < cfg.pieces_per_style; ++i) {
        Rng rng(mix_seed(cfg.seed, {0xA5ULL, i}));
        const int bars = cfg.min_bars + rand_index(rng, spread);
        Walk walk{pentatonic, rand_index(rng, 4)};
        std::vector<std::string> body;
        for (int b = 0; b < bars; ++b) body.push_back(style_a_bar(walk, rng));
        SynthPiece piece;
        piece.file_name = file_name("a", i);
        piece.prompt = {"Baroque", "Bach", "Keyboard"};
        piece.text = "X:" + std::to_string(i + 1) +
                     "\nL:1/8\nM:2/4\nK:C\n" + join_bars(body, 4);
        out.push_back(std::move(piece));
    }

    for (std::size_t i = 0; i < cfg.pieces_per_style; ++i) {
        Rng rng(mix_seed(cfg.seed, {0xB5ULL, i}));
        const int bars = cfg.min_bars + rand_index(rng, spread);
        Walk high{flats_high, rand_index(rng, 3)};
        Walk low{flats_low, rand_index(rng, 3)};
        std::vector<std::string> v1, v2;
        for (int b = 0; b < bars; ++b) {
            v1.push_back(style_b_bar(high, rng));
            v2.push_back(style_b_bar(low, rng));
        }
        SynthPiece piece;
        piece.file_name = file_name("b", i);
        piece.prompt = {"Romantic", "Chopin", "Chamber"};
        piece.text = "X:" + std::to_string(cfg.pieces_per_style + i + 1) +
                     "\nL:1/8\nM:3/4\nV:1 name=\"Violin\"\nV:2 name=\"Cello\"\nK:C\n" +
                     "V:1\n" + join_bars(v1, 4) + "V:2\n" + join_bars(v2, 4);
        out.push_back(std::move(piece));
    }
    return out;
}

std::vector<SynthPiece> rest_corpus(const RestCorpusConfig& cfg) {
    static const std::vector<std::string> diatonic{"C", "D", "E", "F",
                                                   "G", "A", "B", "c"};
    if (cfg.rest_period < 2 || cfg.bars % cfg.rest_period != 0)
        throw Error("rest corpus needs bars divisible by rest_period");

    std::vector<SynthPiece> out;
    for (std::size_t i = 0; i < cfg.pieces; ++i) {
        Rng rng(mix_seed(cfg.seed, {0xE5ULL, i}));
        Walk walk{diatonic, rand_index(rng, 8)};
        std::vector<std::string> body;
        for (int b = 0; b < cfg.bars; ++b) {
            if (b % cfg.rest_period == cfg.rest_period - 1) {
                body.push_back("z2z2z2z2"); // same width as eight melody notes
                continue;
            }
            std::string bar;
            for (int n = 0; n < 8; ++n) bar += walk.next(rng);
            body.push_back(bar);
        }
        SynthPiece piece;
        piece.file_name = file_name("r", i);
        piece.prompt = {"Baroque", "Bach", "Keyboard"};
        piece.text = "X:" + std::to_string(i + 1) + "\nL:1/8\nM:4/4\nK:C\n" +
                     join_bars(body, 5);
        out.push_back(std::move(piece));
    }
    return out;
}

std::string write_corpus(const std::vector<SynthPiece>& pieces,
                         const std::string& dir) {
    std::vector<prep::ManifestRecord> records;
    for (const SynthPiece& piece : pieces) {
        io::write_text_file(
            (std::filesystem::path(dir) / piece.file_name).string(), piece.text);
        records.push_back({piece.file_name, piece.prompt.period,
                           piece.prompt.composer, piece.prompt.instrumentation,
                           "train"});
    }
    const std::string manifest_path =
        (std::filesystem::path(dir) / "manifest.tsv").string();
    prep::save_manifest(manifest_path, records);
    return manifest_path;
}

} // namespace barstream::synth
