#include "barstream/abc.hpp"

#include <algorithm>
#include <array>
#include <cassert>
#include <cctype>
#include <sstream>

namespace barstream::abc {

namespace {

// Line-of-fifths value of each natural letter, C..B.
constexpr std::array<int, 7> kLof = {0, 2, 4, -1, 1, 3, 5};
// Pitch class of each natural letter, C..B.
constexpr std::array<int, 7> kPc = {0, 2, 4, 5, 7, 9, 11};
constexpr const char* kLetters = "CDEFGAB";

int floordiv(int a, int b) {
    int q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

int letter_from_lof_base(int base) {
    // base in [-1, 5]: F C G D A E B
    static constexpr std::array<int, 7> order = {3, 0, 4, 1, 5, 2, 6};
    return order[base + 1];
}

bool is_note_letter(char c) {
    return (c >= 'A' && c <= 'G') || (c >= 'a' && c <= 'g');
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t')) s.remove_suffix(1);
    return s;
}

} // namespace

int key_fifths(const KeySig& k) {
    int lof = kLof[k.tonic_letter] + 7 * k.tonic_acc;
    return k.mode == Mode::Minor ? lof - 3 : lof;
}

KeySig key_from_fifths(int fifths, Mode mode) {
    int lof = mode == Mode::Minor ? fifths + 3 : fifths;
    int acc = floordiv(lof + 1, 7);
    int base = lof - 7 * acc;
    KeySig k;
    k.tonic_letter = letter_from_lof_base(base);
    k.tonic_acc = acc;
    k.mode = mode;
    return k;
}

std::string key_name(const KeySig& k) {
    if (k.mode == Mode::Other) return k.raw_other;
    std::string s(1, kLetters[k.tonic_letter]);
    if (k.tonic_acc == 1) s += '#';
    else if (k.tonic_acc == -1) s += 'b';
    else if (k.tonic_acc != 0) throw Error("key tonic accidental out of range");
    if (k.mode == Mode::Minor) s += 'm';
    return s;
}

KeySig parse_key(std::string_view text) {
    std::string_view t = trim(text);
    KeySig k;
    if (t.empty() || t[0] < 'A' || t[0] > 'G') {
        k.mode = Mode::Other;
        k.raw_other = std::string(t);
        return k;
    }
    k.tonic_letter = static_cast<int>(std::string_view(kLetters).find(t[0]));
    size_t i = 1;
    if (i < t.size() && (t[i] == '#' || t[i] == 'b')) {
        k.tonic_acc = t[i] == '#' ? 1 : -1;
        ++i;
    }
    std::string mode;
    for (char c : t.substr(i)) mode += static_cast<char>(std::tolower(c));
    mode = std::string(trim(mode));
    if (mode.empty() || mode == "maj" || mode == "major") {
        k.mode = Mode::Major;
    } else if (mode == "m" || mode == "min" || mode == "minor") {
        k.mode = Mode::Minor;
    } else {
        k.mode = Mode::Other;
        k.raw_other = std::string(t);
    }
    return k;
}

std::string Meter::str() const {
    switch (kind) {
        case Kind::Common: return "C";
        case Kind::Cut: return "C|";
        case Kind::Fraction: return std::to_string(num) + "/" + std::to_string(den);
        case Kind::None: return "";
    }
    return "";
}

Meter parse_meter(std::string_view text) {
    std::string_view t = trim(text);
    Meter m;
    if (t == "C") { m.kind = Meter::Kind::Common; m.num = 4; m.den = 4; return m; }
    if (t == "C|") { m.kind = Meter::Kind::Cut; m.num = 2; m.den = 2; return m; }
    size_t slash = t.find('/');
    if (slash == std::string_view::npos) throw ParseFailure("bad meter: " + std::string(text));
    int num = 0, den = 0;
    try {
        num = std::stoi(std::string(t.substr(0, slash)));
        den = std::stoi(std::string(t.substr(slash + 1)));
    } catch (...) {
        throw ParseFailure("bad meter: " + std::string(text));
    }
    if (num < 1 || den < 1) throw ParseFailure("bad meter: " + std::string(text));
    m.kind = Meter::Kind::Fraction;
    m.num = num;
    m.den = den;
    return m;
}

Rational TuneHeader::unit_note_length() const {
    if (unit_length) return *unit_length;
    if (meter.kind == Meter::Kind::None) return {1, 8};
    return meter.value() < Rational{3, 4} ? Rational{1, 8} : Rational{1, 4};
}

int key_alteration(const KeySig& key, int letter) {
    int s = key_fifths(key);
    return floordiv(s - kLof[letter] + 5, 7);
}

int effective_alteration(const NotePitch& p, const KeySig& key) {
    return p.acc ? *p.acc : key_alteration(key, p.letter);
}

int midi_pitch(const NotePitch& p, const KeySig& key) {
    return 60 + 12 * p.octave + kPc[p.letter] + effective_alteration(p, key);
}

NotePitch transpose_pitch(const NotePitch& p, const KeySig& from, const KeySig& to,
                          int fifths_delta) {
    int alt = effective_alteration(p, from);
    int lof = kLof[p.letter] + 7 * alt + fifths_delta;
    int alt2 = floordiv(lof + 1, 7);
    if (alt2 < -2 || alt2 > 2) throw Error("transposition needs triple accidental");
    int letter2 = letter_from_lof_base(lof - 7 * alt2);
    // Chromatic shift chosen as the smallest interval congruent to the
    // fifths offset.
    int delta = ((7 * fifths_delta) % 12 + 12 + 6) % 12 - 6;
    int target = midi_pitch(p, from) + delta;
    int pc2 = kPc[letter2] + alt2;
    int octave2 = (target - 60 - pc2) / 12;
    assert(60 + 12 * octave2 + pc2 == target);
    NotePitch out;
    out.letter = letter2;
    out.octave = octave2;
    if (alt2 != key_alteration(to, letter2)) out.acc = alt2;
    return out;
}

bool Bar::has_barline() const {
    return std::any_of(tokens.begin(), tokens.end(),
                       [](const Token& t) { return t.kind == TokenKind::Barline; });
}

// --- line splitting ----------------------------------------------------------

namespace {

// Length of a barline run starting at i, or 0. Accepts |, ||, |], |:, :|, ::,
// [| and colon-decorated combinations like :|| or |::.
size_t barline_run(std::string_view s, size_t i) {
    size_t j = i;
    if (s[j] == '[') {
        if (j + 1 < s.size() && s[j + 1] == '|') j += 1;
        else return 0;
    }
    if (s[j] == ':') {
        size_t k = j;
        while (k < s.size() && s[k] == ':') ++k;
        if (k - j >= 2 && (k >= s.size() || s[k] != '|')) return k - i; // "::"
        if (k >= s.size() || s[k] != '|') return 0;
        j = k;
    }
    if (j >= s.size() || s[j] != '|') return 0;
    while (j < s.size() && s[j] == '|') ++j;
    if (j < s.size() && s[j] == ']') return j + 1 - i;
    while (j < s.size() && s[j] == ':') ++j;
    return j - i;
}

bool skip_group(std::string_view s, size_t& i, char open, char close, const char* what) {
    size_t j = s.find(close, i + 1);
    if (j == std::string_view::npos)
        throw UnbalancedBarline(std::string("line ends inside ") + what +
                                " (missing '" + close + "')");
    (void)open;
    i = j + 1;
    return true;
}

} // namespace

std::vector<std::string> split_line_into_bars(std::string_view line) {
    std::vector<std::string> slices;
    std::vector<bool> content; // slice has non-barline, non-space text
    size_t start = 0, i = 0;
    bool saw_content = false;
    auto close_slice = [&](size_t end) {
        if (end > start) {
            slices.emplace_back(line.substr(start, end - start));
            content.push_back(saw_content);
        }
        start = end;
        saw_content = false;
    };
    while (i < line.size()) {
        char c = line[i];
        if (c == '"') {
            saw_content = true;
            skip_group(line, i, '"', '"', "annotation");
            continue;
        }
        if (c == '!') {
            saw_content = true;
            skip_group(line, i, '!', '!', "decoration");
            continue;
        }
        if (c == '{') {
            saw_content = true;
            skip_group(line, i, '{', '}', "grace group");
            continue;
        }
        size_t run = (c == '|' || c == ':' || c == '[') ? barline_run(line, i) : 0;
        if (run > 0) {
            i += run;
            // trailing whitespace at end of line stays with the closing bar
            size_t j = i;
            while (j < line.size() && (line[j] == ' ' || line[j] == '\t')) ++j;
            if (j == line.size()) i = j;
            close_slice(i);
            continue;
        }
        if (c == '[') {
            if (i + 1 < line.size() && std::isdigit(static_cast<unsigned char>(line[i + 1]))) {
                saw_content = true;
                i += 2; // ending marker "[1"
                continue;
            }
            saw_content = true;
            skip_group(line, i, '[', ']', "bracket group");
            continue;
        }
        if (c != ' ' && c != '\t') saw_content = true;
        ++i;
    }
    close_slice(line.size());

    // Fold slices that carry no content (a lone barline, e.g. a leading "|:")
    // into their neighbour so every Bar owns real text.
    std::vector<std::string> out;
    for (size_t k = 0; k < slices.size(); ++k) {
        if (!content[k]) {
            if (k + 1 < slices.size()) {
                slices[k + 1] = slices[k] + slices[k + 1];
                content[k + 1] = content[k + 1] || false;
            } else if (!out.empty()) {
                out.back() += slices[k];
            } else {
                out.push_back(slices[k]); // line holds only a barline
            }
            continue;
        }
        out.push_back(slices[k]);
    }
    return out;
}

// --- lexer -------------------------------------------------------------------

namespace {

struct TupletState {
    int remaining = 0;
    Rational scale{1, 1};
};

Rational parse_multiplier(std::string_view s, size_t& i, std::string& text) {
    size_t start = i;
    std::int64_t num = 1, den = 1;
    if (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) {
        num = 0;
        while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i])))
            num = num * 10 + (s[i++] - '0');
        if (num == 0) throw BadDuration("zero duration multiplier");
    }
    while (i < s.size() && s[i] == '/') {
        ++i;
        if (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]))) {
            std::int64_t d = 0;
            while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i])))
                d = d * 10 + (s[i++] - '0');
            if (d == 0) throw BadDuration("zero duration divisor");
            den *= d;
        } else {
            den *= 2;
        }
    }
    text = std::string(s.substr(start, i - start));
    return {num, den};
}

// Parses accidental + letter + octave marks + multiplier at s[i].
Token parse_note(std::string_view s, size_t& i) {
    size_t start = i;
    Token tok;
    tok.kind = TokenKind::Note;
    NotePitch p;
    if (s[i] == '^') {
        ++i;
        if (i < s.size() && s[i] == '^') { p.acc = 2; ++i; } else p.acc = 1;
    } else if (s[i] == '_') {
        ++i;
        if (i < s.size() && s[i] == '_') { p.acc = -2; ++i; } else p.acc = -1;
    } else if (s[i] == '=') {
        p.acc = 0;
        ++i;
    }
    if (i >= s.size() || !is_note_letter(s[i]))
        throw ParseFailure("accidental not followed by a note letter");
    char letter = s[i];
    bool lower = std::islower(static_cast<unsigned char>(letter));
    p.letter = static_cast<int>(std::string_view(kLetters).find(
        static_cast<char>(std::toupper(static_cast<unsigned char>(letter)))));
    p.octave = lower ? 1 : 0;
    ++i;
    while (i < s.size() && (s[i] == '\'' || s[i] == ',')) {
        p.octave += s[i] == '\'' ? 1 : -1;
        ++i;
    }
    tok.dur = parse_multiplier(s, i, tok.mult_text);
    tok.pitch = p;
    tok.text = std::string(s.substr(start, i - start));
    return tok;
}

int tuplet_default_q(int p, const Meter& meter) {
    switch (p) {
        case 3: case 6: return 2;
        case 2: case 4: case 8: return 3;
        case 5: case 7: case 9: return meter.compound() ? 3 : 2;
        default: throw ParseFailure("unsupported tuplet (" + std::to_string(p));
    }
}

} // namespace

std::vector<Token> lex_bar(std::string_view s, const std::string& voice_id,
                           const Meter& meter) {
    (void)voice_id;
    std::vector<Token> tokens;
    TupletState tuplet;
    auto apply_tuplet = [&](Rational d) {
        if (tuplet.remaining > 0) {
            d = d * tuplet.scale;
            if (--tuplet.remaining == 0) tuplet.scale = {1, 1};
        }
        return d;
    };
    size_t i = 0;
    while (i < s.size()) {
        char c = s[i];
        size_t start = i;
        if (c == ' ' || c == '\t') {
            while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
            tokens.push_back({TokenKind::Space, std::string(s.substr(start, i - start))});
            continue;
        }
        size_t run = (c == '|' || c == ':' || c == '[') ? barline_run(s, i) : 0;
        if (run > 0) {
            i += run;
            tokens.push_back({TokenKind::Barline, std::string(s.substr(start, run))});
            continue;
        }
        if (c == '[') {
            if (i + 1 < s.size() && std::isdigit(static_cast<unsigned char>(s[i + 1]))) {
                i += 2;
                tokens.push_back({TokenKind::Ending, std::string(s.substr(start, 2))});
                continue;
            }
            size_t close = s.find(']', i + 1);
            if (close == std::string_view::npos)
                throw UnbalancedBarline("line ends inside '[' group");
            if (i + 2 < s.size() && std::isalpha(static_cast<unsigned char>(s[i + 1])) &&
                s[i + 2] == ':') {
                char letter = s[i + 1];
                std::string value(s.substr(i + 3, close - (i + 3)));
                if (letter != 'M' && letter != 'Q')
                    throw ParseFailure(std::string("inline field [") + letter +
                                       ":] not supported here");
                if (letter == 'M') parse_meter(value); // validate
                Token tok;
                tok.kind = TokenKind::InlineField;
                tok.field_letter = letter;
                tok.field_value = value;
                tok.text = std::string(s.substr(start, close + 1 - start));
                tokens.push_back(std::move(tok));
                i = close + 1;
                continue;
            }
            // chord
            Token tok;
            tok.kind = TokenKind::Chord;
            ++i;
            while (i < s.size() && s[i] != ']') {
                if (s[i] == '^' || s[i] == '_' || s[i] == '=' || is_note_letter(s[i])) {
                    tok.sub.push_back(parse_note(s, i));
                } else {
                    throw ParseFailure(std::string("unexpected character '") + s[i] +
                                       "' inside chord");
                }
            }
            if (i >= s.size()) throw UnbalancedBarline("line ends inside chord bracket");
            if (tok.sub.empty()) throw ParseFailure("empty chord");
            ++i; // ']'
            Rational outer = parse_multiplier(s, i, tok.mult_text);
            tok.dur = apply_tuplet(tok.sub.front().dur * outer);
            tok.text = std::string(s.substr(start, i - start));
            tokens.push_back(std::move(tok));
            continue;
        }
        if (c == '{') {
            size_t close = s.find('}', i + 1);
            if (close == std::string_view::npos)
                throw UnbalancedBarline("line ends inside grace group");
            Token tok;
            tok.kind = TokenKind::Grace;
            size_t j = i + 1;
            while (j < close) {
                if (s[j] == '/') {
                    tok.sub.push_back({TokenKind::Decoration, "/"});
                    ++j;
                } else if (s[j] == '^' || s[j] == '_' || s[j] == '=' || is_note_letter(s[j])) {
                    Token n = parse_note(s.substr(0, close), j);
                    n.dur = {0, 1}; // grace notes never count toward the bar
                    tok.sub.push_back(std::move(n));
                } else {
                    throw ParseFailure(std::string("unexpected character '") + s[j] +
                                       "' inside grace group");
                }
            }
            tok.text = std::string(s.substr(start, close + 1 - start));
            tokens.push_back(std::move(tok));
            i = close + 1;
            continue;
        }
        if (c == '"') {
            size_t close = s.find('"', i + 1);
            if (close == std::string_view::npos)
                throw UnbalancedBarline("line ends inside quoted annotation");
            tokens.push_back({TokenKind::Annotation,
                              std::string(s.substr(start, close + 1 - start))});
            i = close + 1;
            continue;
        }
        if (c == '!') {
            size_t close = s.find('!', i + 1);
            if (close == std::string_view::npos)
                throw UnbalancedBarline("line ends inside !decoration!");
            tokens.push_back({TokenKind::Decoration,
                              std::string(s.substr(start, close + 1 - start))});
            i = close + 1;
            continue;
        }
        if (c == '(') {
            if (i + 1 < s.size() && std::isdigit(static_cast<unsigned char>(s[i + 1]))) {
                ++i;
                int p = 0;
                while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i])))
                    p = p * 10 + (s[i++] - '0');
                int q = 0, r = 0;
                if (i < s.size() && s[i] == ':') {
                    ++i;
                    while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i])))
                        q = q * 10 + (s[i++] - '0');
                    if (i < s.size() && s[i] == ':') {
                        ++i;
                        while (i < s.size() && std::isdigit(static_cast<unsigned char>(s[i])))
                            r = r * 10 + (s[i++] - '0');
                    }
                }
                if (q == 0) q = tuplet_default_q(p, meter);
                if (r == 0) r = p;
                tuplet.remaining = r;
                tuplet.scale = {q, p};
                tokens.push_back({TokenKind::Tuplet, std::string(s.substr(start, i - start))});
                continue;
            }
            tokens.push_back({TokenKind::Slur, "("});
            ++i;
            continue;
        }
        if (c == ')') {
            tokens.push_back({TokenKind::Slur, ")"});
            ++i;
            continue;
        }
        if (c == '-') {
            tokens.push_back({TokenKind::Tie, "-"});
            ++i;
            continue;
        }
        if (c == '>' || c == '<') {
            while (i < s.size() && s[i] == c) ++i;
            // totals across the dotted pair are unchanged, so bar durations
            // ignore the marker
            tokens.push_back({TokenKind::BrokenRhythm, std::string(s.substr(start, i - start))});
            continue;
        }
        if (c == 'z' || c == 'x') {
            Token tok;
            tok.kind = TokenKind::Rest;
            ++i;
            Rational m = parse_multiplier(s, i, tok.mult_text);
            tok.dur = apply_tuplet(m);
            tok.text = std::string(s.substr(start, i - start));
            tokens.push_back(std::move(tok));
            continue;
        }
        if (c == '^' || c == '_' || c == '=' || is_note_letter(c)) {
            Token tok = parse_note(s, i);
            tok.dur = apply_tuplet(tok.dur);
            tokens.push_back(std::move(tok));
            continue;
        }
        if (std::string_view(".~HLMOPSTuvy").find(c) != std::string_view::npos) {
            tokens.push_back({TokenKind::Decoration, std::string(1, c)});
            ++i;
            continue;
        }
        throw ParseFailure(std::string("unexpected character '") + c + "' in bar");
    }
    return tokens;
}

// --- parsing -----------------------------------------------------------------

namespace {

struct LineReader {
    std::string_view text;
    size_t pos = 0;
    bool done() const { return pos >= text.size(); }
    std::string_view next() {
        size_t nl = text.find('\n', pos);
        std::string_view line;
        if (nl == std::string_view::npos) {
            line = text.substr(pos);
            pos = text.size();
        } else {
            line = text.substr(pos, nl - pos);
            pos = nl + 1;
        }
        return line;
    }
};

// Finds the next top-level "[V:" marker at or after `from`, skipping quoted
// text and bracket groups.
size_t find_voice_tag(std::string_view line, size_t from) {
    size_t i = from;
    while (i < line.size()) {
        char c = line[i];
        if (c == '"') { skip_group(line, i, '"', '"', "annotation"); continue; }
        if (c == '!') { skip_group(line, i, '!', '!', "decoration"); continue; }
        if (c == '{') { skip_group(line, i, '{', '}', "grace group"); continue; }
        if (c == '[') {
            if (line.compare(i, 3, "[V:") == 0) return i;
            if (i + 1 < line.size() && line[i + 1] == '|') { i += 2; continue; }
            if (i + 1 < line.size() && std::isdigit(static_cast<unsigned char>(line[i + 1]))) {
                i += 2;
                continue;
            }
            skip_group(line, i, '[', ']', "bracket group");
            continue;
        }
        ++i;
    }
    return std::string_view::npos;
}

struct VoiceOf {
    Sheet& sheet;
    int find(std::string_view id) const {
        for (size_t i = 0; i < sheet.header.voices.size(); ++i)
            if (sheet.header.voices[i].id == id) return static_cast<int>(i);
        return -1;
    }
    int ensure(std::string_view id, bool declared_in_body, std::string tail = "",
               bool implicit = false) {
        int idx = find(id);
        if (idx >= 0) return idx;
        VoiceDecl d;
        d.id = std::string(id);
        d.raw_tail = std::move(tail);
        d.declared_in_body = declared_in_body;
        d.implicit = implicit;
        sheet.header.voices.push_back(std::move(d));
        sheet.body.emplace_back();
        return static_cast<int>(sheet.header.voices.size() - 1);
    }
};

std::optional<std::string> voice_instrument(std::string_view tail) {
    for (std::string_view keyword : {"name=", "nm="}) {
        size_t p = tail.find(keyword);
        if (p == std::string_view::npos) continue;
        size_t v = p + keyword.size();
        if (v < tail.size() && tail[v] == '"') {
            size_t close = tail.find('"', v + 1);
            if (close == std::string_view::npos) return std::nullopt;
            return std::string(tail.substr(v + 1, close - v - 1));
        }
        size_t end = v;
        while (end < tail.size() && tail[end] != ' ' && tail[end] != '\t') ++end;
        return std::string(tail.substr(v, end - v));
    }
    return std::nullopt;
}

void apply_score_groups(TuneHeader& header) {
    if (!header.score_directive) return;
    std::istringstream in(*header.score_directive);
    std::string tok;
    int group = 0;
    bool in_group = false;
    auto assign = [&](const std::string& id, std::optional<int> g) {
        for (auto& v : header.voices)
            if (v.id == id) v.stave_group = g;
    };
    while (in >> tok) {
        while (!tok.empty() && tok.front() == '{') {
            in_group = true;
            tok.erase(tok.begin());
        }
        bool closes = false;
        while (!tok.empty() && (tok.back() == '}' )) {
            closes = true;
            tok.pop_back();
        }
        if (!tok.empty() && tok != "|")
            assign(tok, in_group ? std::optional<int>(group) : std::nullopt);
        if (closes) {
            in_group = false;
            ++group;
        }
    }
}

void skip_position_tag(std::string_view line, size_t& i) {
    // "[r:k/m]" with 1-based k and non-negative m
    size_t close = line.find(']', i);
    if (close == std::string_view::npos) throw ParseFailure("unterminated [r: tag");
    std::string_view body = line.substr(i + 3, close - (i + 3));
    size_t slash = body.find('/');
    if (slash == std::string_view::npos) throw ParseFailure("bad [r: tag");
    auto all_digits = [](std::string_view s) {
        return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
            return std::isdigit(static_cast<unsigned char>(c));
        });
    };
    if (!all_digits(body.substr(0, slash)) || !all_digits(body.substr(slash + 1)))
        throw ParseFailure("bad [r: tag");
    i = close + 1;
}

} // namespace

Sheet parse_sheet(std::string_view text) {
    Sheet sheet;
    sheet.trailing_newline = !text.empty() && text.back() == '\n';
    LineReader reader{text};
    bool saw_x = false, saw_k = false;

    // header
    while (!reader.done()) {
        std::string_view line = reader.next();
        if (trim(line).empty()) continue;
        if (line.rfind("%%score", 0) == 0) {
            std::string_view rest = line.substr(7);
            if (!rest.empty() && rest.front() == ' ') rest.remove_prefix(1);
            sheet.header.score_directive = std::string(rest);
            continue;
        }
        if (line[0] == '%') {
            sheet.header.extra_fields.emplace_back('%', std::string(line));
            continue;
        }
        if (line.size() >= 2 && line[1] == ':' &&
            std::isalpha(static_cast<unsigned char>(line[0]))) {
            char letter = line[0];
            std::string value(line.substr(2));
            switch (letter) {
                case 'X': {
                    try {
                        sheet.header.reference_number = std::stoi(std::string(trim(value)));
                    } catch (...) {
                        throw ParseFailure("bad X: field");
                    }
                    saw_x = true;
                    break;
                }
                case 'L': {
                    std::string_view v = trim(value);
                    size_t slash = v.find('/');
                    try {
                        std::int64_t n = std::stoll(std::string(
                            slash == std::string_view::npos ? v : v.substr(0, slash)));
                        std::int64_t d = slash == std::string_view::npos
                                             ? 1
                                             : std::stoll(std::string(v.substr(slash + 1)));
                        if (n <= 0 || d <= 0) throw BadDuration("non-positive unit length");
                        sheet.header.unit_length = Rational{n, d};
                    } catch (const BadDuration&) {
                        throw;
                    } catch (...) {
                        throw BadDuration("bad L: field");
                    }
                    break;
                }
                case 'M': sheet.header.meter = parse_meter(value); break;
                case 'Q': sheet.header.tempo = value; break;
                case 'V': {
                    std::string_view v(value);
                    size_t sp = v.find_first_of(" \t");
                    std::string id(trim(sp == std::string_view::npos ? v : v.substr(0, sp)));
                    std::string tail(sp == std::string_view::npos ? "" : v.substr(sp));
                    if (id.empty()) throw ParseFailure("V: without a voice id");
                    VoiceOf vo{sheet};
                    int idx = vo.ensure(id, false, tail);
                    sheet.header.voices[idx].instrument = voice_instrument(tail);
                    break;
                }
                case 'K': {
                    sheet.header.key = parse_key(value);
                    saw_k = true;
                    break;
                }
                default:
                    sheet.header.extra_fields.emplace_back(letter, value);
            }
            if (saw_k) break;
            continue;
        }
        throw ParseFailure("unexpected line in header: " + std::string(line));
    }
    if (!saw_x) throw MissingHeaderField("missing X: field");
    if (!saw_k) throw MissingHeaderField("missing K: field");

    // body
    VoiceOf voices{sheet};
    int current = -1;
    while (!reader.done()) {
        std::string_view line = reader.next();
        if (trim(line).empty()) break; // blank line ends the tune
        if (line.rfind("w:", 0) == 0) continue; // lyrics are out of dialect
        if (line.rfind("V:", 0) == 0) {
            std::string_view v = line.substr(2);
            size_t sp = v.find_first_of(" \t");
            std::string id(trim(sp == std::string_view::npos ? v : v.substr(0, sp)));
            std::string tail(sp == std::string_view::npos ? "" : v.substr(sp));
            if (id.empty()) throw ParseFailure("V: without a voice id");
            int idx = voices.find(id);
            if (idx < 0) {
                idx = voices.ensure(id, true, tail);
                sheet.header.voices[idx].instrument = voice_instrument(tail);
            } else {
                sheet.header.voices[idx].body_switch = tail;
            }
            current = idx;
            continue;
        }

        size_t i = 0;
        if (line.rfind("[r:", 0) == 0) {
            sheet.interleaved = true;
            skip_position_tag(line, i);
        }
        std::vector<std::pair<int, std::string>> fragments; // voice index, text
        size_t tag = find_voice_tag(line, i);
        if (tag == std::string_view::npos) {
            if (current < 0) current = voices.ensure("1", true, "", true);
            fragments.emplace_back(current, std::string(line.substr(i)));
        } else {
            if (tag > i) {
                if (current < 0) current = voices.ensure("1", true, "", true);
                fragments.emplace_back(current, std::string(line.substr(i, tag - i)));
            }
            while (tag != std::string_view::npos) {
                sheet.interleaved = true;
                size_t close = line.find(']', tag);
                if (close == std::string_view::npos)
                    throw ParseFailure("unterminated [V: tag");
                std::string id(trim(line.substr(tag + 3, close - (tag + 3))));
                if (id.empty()) throw ParseFailure("[V:] without a voice id");
                int idx = voices.ensure(id, false);
                size_t next = find_voice_tag(line, close + 1);
                size_t end = next == std::string_view::npos ? line.size() : next;
                fragments.emplace_back(idx, std::string(line.substr(close + 1, end - close - 1)));
                current = idx;
                tag = next;
            }
        }
        Bar* last_bar = nullptr;
        for (auto& [idx, frag] : fragments) {
            for (const std::string& slice : split_line_into_bars(frag)) {
                Bar bar;
                bar.voice_id = sheet.header.voices[idx].id;
                bar.raw_text = slice;
                bar.tokens = lex_bar(slice, bar.voice_id, sheet.header.meter);
                sheet.body[idx].push_back(std::move(bar));
                last_bar = &sheet.body[idx].back();
            }
        }
        if (last_bar) last_bar->ends_line = true;
    }

    apply_score_groups(sheet.header);
    return sheet;
}

// --- serialization -----------------------------------------------------------

std::string serialize_sheet(const Sheet& s) {
    std::string out;
    out += "X:" + std::to_string(s.header.reference_number) + "\n";
    for (const auto& [letter, value] : s.header.extra_fields) {
        if (letter == '%') out += value + "\n";
        else out += std::string(1, letter) + ":" + value + "\n";
    }
    if (s.header.unit_length) out += "L:" + s.header.unit_length->str() + "\n";
    if (s.header.meter.kind != Meter::Kind::None) out += "M:" + s.header.meter.str() + "\n";
    if (s.header.tempo) out += "Q:" + *s.header.tempo + "\n";
    if (s.header.score_directive) out += "%%score " + *s.header.score_directive + "\n";
    for (const auto& v : s.header.voices)
        if (!v.declared_in_body) out += "V:" + v.id + v.raw_tail + "\n";
    out += "K:" + key_name(s.header.key) + "\n";

    if (s.interleaved) {
        size_t measures = 0;
        for (const auto& bars : s.body) measures = std::max(measures, bars.size());
        for (size_t k = 0; k < measures; ++k) {
            for (size_t v = 0; v < s.body.size(); ++v) {
                if (k >= s.body[v].size()) continue;
                out += "[V:" + s.header.voices[v].id + "]" + s.body[v][k].raw_text;
            }
            out += "\n";
        }
    } else {
        for (size_t v = 0; v < s.body.size(); ++v) {
            const VoiceDecl& decl = s.header.voices[v];
            if (decl.declared_in_body && !decl.implicit)
                out += "V:" + decl.id + decl.raw_tail + "\n";
            else if (decl.body_switch) out += "V:" + decl.id + *decl.body_switch + "\n";
            std::string block;
            for (const Bar& bar : s.body[v]) {
                block += bar.raw_text;
                if (bar.ends_line) block += "\n";
            }
            if (!block.empty() && block.back() != '\n') block += "\n";
            out += block;
        }
    }
    if (!s.trailing_newline && !out.empty() && out.back() == '\n') out.pop_back();
    return out;
}

// --- measure-level queries ---------------------------------------------------

Duration bar_duration(const Bar& bar, const Rational& unit_length) {
    Rational total{0, 1};
    for (const Token& t : bar.tokens) total += t.dur;
    return total * unit_length;
}

bool is_rest_bar(const Bar& bar) {
    for (const Token& t : bar.tokens) {
        if (t.kind == TokenKind::Note || t.kind == TokenKind::Chord ||
            t.kind == TokenKind::Grace)
            return false;
    }
    return true;
}

bool is_rest_bar(const std::vector<const Bar*>& fragments) {
    return std::all_of(fragments.begin(), fragments.end(),
                       [](const Bar* b) { return is_rest_bar(*b); });
}

const std::vector<Bar>* Sheet::bars_of(std::string_view voice_id) const {
    for (size_t i = 0; i < header.voices.size(); ++i)
        if (header.voices[i].id == voice_id) return &body[i];
    return nullptr;
}

// --- rendering ---------------------------------------------------------------

namespace {

std::string render_note(const Token& t) {
    std::string out;
    const NotePitch& p = *t.pitch;
    if (p.acc) {
        switch (*p.acc) {
            case 2: out += "^^"; break;
            case 1: out += "^"; break;
            case 0: out += "="; break;
            case -1: out += "_"; break;
            case -2: out += "__"; break;
            default: throw Error("accidental out of range");
        }
    }
    char letter = kLetters[p.letter];
    if (p.octave >= 1) {
        out += static_cast<char>(std::tolower(static_cast<unsigned char>(letter)));
        out.append(static_cast<size_t>(p.octave - 1), '\'');
    } else {
        out += letter;
        out.append(static_cast<size_t>(-p.octave), ',');
    }
    out += t.mult_text;
    return out;
}

} // namespace

std::string render_tokens(const std::vector<Token>& tokens) {
    std::string out;
    for (const Token& t : tokens) {
        switch (t.kind) {
            case TokenKind::Note:
                out += render_note(t);
                break;
            case TokenKind::Chord: {
                out += '[';
                for (const Token& n : t.sub) out += render_note(n);
                out += ']';
                out += t.mult_text;
                break;
            }
            case TokenKind::Grace: {
                out += '{';
                for (const Token& n : t.sub)
                    out += n.kind == TokenKind::Note ? render_note(n) : n.text;
                out += '}';
                break;
            }
            default:
                out += t.text;
        }
    }
    return out;
}

} // namespace barstream::abc
