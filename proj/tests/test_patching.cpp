#include "barstream/patching.hpp"

#include <numeric>

#include "barstream/abc.hpp"
#include "barstream/preprocess.hpp"
#include "doctest.h"

using namespace barstream;
using namespace barstream::patching;

namespace {

std::string concat_units(const std::vector<Unit>& units) {
    std::string out;
    for (const Unit& u : units) out += u.text;
    return out;
}

std::string pipeline_text(const std::string& raw) {
    auto is = prep::strip_rest_bars(prep::interleave(abc::parse_sheet(raw)));
    return prep::render_annotated(is);
}

} // namespace

TEST_CASE("segment_units splits header lines and bars") {
    std::vector<Unit> units = segment_units("K:C\n[r:1/0][V:1]CD|EF|\n");
    REQUIRE(units.size() == 3);
    CHECK(units[0] == Unit{"K:C\n", PatchKind::Header});
    CHECK(units[1] == Unit{"[r:1/0][V:1]CD|", PatchKind::Bar});
    CHECK(units[2] == Unit{"EF|\n", PatchKind::Bar});
}

TEST_CASE("segment_units on header-only text is one unit per line") {
    std::vector<Unit> units = segment_units("%%prompt Baroque|Bach, Johann Sebastian|Keyboard\nX:1\nL:1/8\nK:C\n");
    REQUIRE(units.size() == 4);
    for (const Unit& u : units) CHECK(u.kind == PatchKind::Header);
    CHECK(units[0].text == "%%prompt Baroque|Bach, Johann Sebastian|Keyboard\n");
    CHECK(units[3].text == "K:C\n");
}

TEST_CASE("segment_units attaches line breaks to line-final bars") {
    std::string text = "X:1\nK:C\nCD|EF|GA|\ncB|AG|FE|\n";
    std::vector<Unit> units = segment_units(text);
    REQUIRE(units.size() == 8);
    CHECK(units[2] == Unit{"CD|", PatchKind::Bar});
    CHECK(units[3] == Unit{"EF|", PatchKind::Bar});
    CHECK(units[4] == Unit{"GA|\n", PatchKind::Bar});
    CHECK(units[5] == Unit{"cB|", PatchKind::Bar});
    CHECK(units[7] == Unit{"FE|\n", PatchKind::Bar});
    CHECK(concat_units(units) == text);
}

TEST_CASE("segment_units keeps voice tags with the following bar") {
    std::vector<Unit> units =
        segment_units("K:C\n[r:1/1][V:1]CD|[V:2]EF|\n[r:2/0][V:1]GA|[V:2]Bc|\n");
    REQUIRE(units.size() == 5);
    CHECK(units[1].text == "[r:1/1][V:1]CD|");
    CHECK(units[2].text == "[V:2]EF|\n");
    CHECK(units[3].text == "[r:2/0][V:1]GA|");
    CHECK(units[4].text == "[V:2]Bc|\n");
}

TEST_CASE("to_patches pads the final patch of each unit") {
    std::vector<Unit> units = {{"0123456", PatchKind::Bar}};
    PatchSequence ps = to_patches(units, 16);
    REQUIRE(ps.patches.size() == 3); // BOS, content, EOS
    const Patch& p = ps.patches[1];
    CHECK(p.chars[6] == '6');
    for (std::size_t i = 7; i < 16; ++i) CHECK(p.chars[i] == pad_code(kVocab));
    CHECK(ps.patches.front().kind == PatchKind::Special);
    CHECK(ps.patches.back().kind == PatchKind::Special);
    CHECK(ps.source_spans[1].unit == 0);
    CHECK(ps.source_spans[1].offset == 0);
    CHECK(ps.source_spans[0].unit == PatchSpan::npos);
}

TEST_CASE("to_patches splits oversize units left to right") {
    std::string text(23, 'a');
    PatchSequence ps = to_patches({{text, PatchKind::Bar}}, 16);
    REQUIRE(ps.patches.size() == 4);
    for (std::size_t i = 0; i < 16; ++i) CHECK(ps.patches[1].chars[i] == 'a');
    for (std::size_t i = 0; i < 7; ++i) CHECK(ps.patches[2].chars[i] == 'a');
    for (std::size_t i = 7; i < 16; ++i) CHECK(ps.patches[2].chars[i] == pad_code(kVocab));
    CHECK(ps.source_spans[2].offset == 16);
}

TEST_CASE("empty unit list produces BOS and EOS only") {
    PatchSequence ps = to_patches({}, 16);
    REQUIRE(ps.patches.size() == 2);
    CHECK(ps.patches[0].chars[0] == bos_code(kVocab));
    CHECK(ps.patches[1].chars[0] == eos_code(kVocab));
    CHECK(detokenize(ps).empty());
}

TEST_CASE("detokenize inverts tokenization on pipeline texts") {
    std::vector<std::string> raws = {
        "X:1\nL:1/8\nM:2/4\nK:C\nCDEF|GABc|ceGE|\n",
        "X:2\nL:1/8\nM:4/4\nV:1\nV:2\nK:G\nV:1\nGABc d4|z8|g8|\nV:2\nB,4 D4|z8|d8|\n",
        "X:3\nL:1/16\nM:3/4\nK:Eb\nE3F G2A2 B2c2|[EGB]4 z8|\n",
    };
    for (const std::string& raw : raws) {
        std::string text = pipeline_text(raw);
        PatchSequence ps = to_patches(segment_units(text));
        CHECK(detokenize(ps) == text);
    }
}

TEST_CASE("detokenize rejects interior PAD") {
    PatchSequence ps = to_patches({{"abcdef", PatchKind::Bar}}, 8);
    ps.patches[1].chars[2] = pad_code(kVocab);
    CHECK_THROWS_AS((void)detokenize(ps), MalformedPatch);
}

TEST_CASE("detokenize rejects stray special codes") {
    PatchSequence ps = to_patches({{"abcdef", PatchKind::Bar}}, 8);
    ps.patches[1].chars[1] = bos_code(kVocab);
    CHECK_THROWS_AS((void)detokenize(ps), MalformedPatch);
}

TEST_CASE("patch_one_hot lays out one V-block per position") {
    Patch p;
    p.chars = {1, 3};
    std::vector<double> v = patch_one_hot(p, 4);
    CHECK(v == std::vector<double>{0, 1, 0, 0, 0, 0, 0, 1});

    Patch pad;
    pad.chars.assign(16, pad_code(kVocab));
    std::vector<double> w = patch_one_hot(pad, kVocab);
    CHECK(std::accumulate(w.begin(), w.end(), 0.0) == 16.0);
    for (std::size_t i = 0; i < 16; ++i)
        CHECK(w[i * kVocab + pad_code(kVocab)] == 1.0);

    Patch bad;
    bad.chars = {4};
    CHECK_THROWS_AS((void)patch_one_hot(bad, 4), CodeOutOfRange);
}

TEST_CASE("adding a bar never decreases the patch count") {
    std::string base = "X:1\nL:1/8\nM:2/4\nK:C\n";
    std::string body;
    std::size_t prev = to_patches(segment_units(base + body)).patches.size();
    for (int i = 0; i < 8; ++i) {
        body += "CDEF|";
        std::size_t cur = to_patches(segment_units(base + body + "\n")).patches.size();
        CHECK(cur >= prev);
        prev = to_patches(segment_units(base + body)).patches.size();
    }
}

TEST_CASE("patch dumps round-trip") {
    std::string text = pipeline_text("X:1\nL:1/8\nM:2/4\nK:C\nCDEF|GABc|\n");
    PatchSequence ps = to_patches(segment_units(text));
    PatchSequence back = parse_patch_dump(format_patch_dump(ps));
    REQUIRE(back.patches.size() == ps.patches.size());
    for (std::size_t i = 0; i < ps.patches.size(); ++i)
        CHECK(back.patches[i].chars == ps.patches[i].chars);
    CHECK(detokenize(back) == text);
    CHECK_THROWS_AS((void)parse_patch_dump("1 2 3\n"), MalformedPatch);
    CHECK_THROWS_AS((void)parse_patch_dump(std::string("999 ") + "0 0 0 0 0 0 0 0 0 0 0 0 0 0 0\n"),
                    CodeOutOfRange);
}
