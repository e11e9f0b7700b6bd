#include "barstream/preprocess.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace barstream::prep {

namespace {

std::string multiplier_text(const Rational& mult) {
    if (mult == Rational{1, 1}) return "";
    if (mult.den == 1) return std::to_string(mult.num);
    if (mult.num == 1) return "/" + std::to_string(mult.den);
    return std::to_string(mult.num) + "/" + std::to_string(mult.den);
}

// Full-rest bar matching the prevailing meter, used to pad short voices.
abc::Bar make_rest_bar(const abc::TuneHeader& header, const std::string& voice_id) {
    std::string text = "z";
    if (header.meter.kind != abc::Meter::Kind::None)
        text += multiplier_text(header.meter.value() / header.unit_note_length());
    text += "|";
    abc::Bar bar;
    bar.voice_id = voice_id;
    bar.raw_text = text;
    bar.tokens = abc::lex_bar(text, voice_id, header.meter);
    return bar;
}

std::string header_text(const abc::TuneHeader& header) {
    abc::Sheet shell;
    shell.header = header;
    shell.body.resize(header.voices.size());
    shell.interleaved = true;
    shell.trailing_newline = true;
    return abc::serialize_sheet(shell);
}

// Length of a "[r:k/m]" prefix, 0 if the line does not start with one.
std::size_t r_tag_length(std::string_view line) {
    if (line.rfind("[r:", 0) != 0) return 0;
    std::size_t close = line.find(']');
    if (close == std::string_view::npos) return 0;
    std::string_view body = line.substr(3, close - 3);
    std::size_t slash = body.find('/');
    if (slash == std::string_view::npos || slash == 0 || slash + 1 == body.size())
        return 0;
    auto digits = [](std::string_view s) {
        return std::all_of(s.begin(), s.end(),
                           [](unsigned char c) { return std::isdigit(c); });
    };
    if (!digits(body.substr(0, slash)) || !digits(body.substr(slash + 1))) return 0;
    return close + 1;
}

std::vector<std::string_view> split_lines(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        if (nl == std::string_view::npos) {
            lines.push_back(text.substr(pos));
            break;
        }
        lines.push_back(text.substr(pos, nl - pos));
        pos = nl + 1;
    }
    return lines;
}

void check_supported(const abc::KeySig& k) {
    if (k.mode == abc::Mode::Other)
        throw UnsupportedKey("cannot transpose mode: " + k.raw_other);
    int f = abc::key_fifths(k);
    if (f < kMinFifths || f > kMaxFifths)
        throw UnsupportedKey("key signature outside supported range: " + abc::key_name(k));
}

void transpose_token(abc::Token& t, const abc::KeySig& from, const abc::KeySig& to,
                     int lof_delta) {
    switch (t.kind) {
        case abc::TokenKind::Note:
            t.pitch = abc::transpose_pitch(*t.pitch, from, to, lof_delta);
            t.text = abc::render_tokens({t});
            break;
        case abc::TokenKind::Chord:
        case abc::TokenKind::Grace:
            for (abc::Token& sub : t.sub)
                if (sub.kind == abc::TokenKind::Note)
                    sub.pitch = abc::transpose_pitch(*sub.pitch, from, to, lof_delta);
            t.text = abc::render_tokens({t});
            break;
        default:
            break;
    }
}

bool contains_word(const std::string& lower_text, const std::string& lower_term) {
    std::size_t pos = 0;
    auto alpha = [](unsigned char c) { return std::isalpha(c) != 0; };
    while ((pos = lower_text.find(lower_term, pos)) != std::string::npos) {
        bool left_ok = pos == 0 || !alpha(lower_text[pos - 1]);
        std::size_t end = pos + lower_term.size();
        bool right_ok = end == lower_text.size() || !alpha(lower_text[end]);
        if (left_ok && right_ok) return true;
        ++pos;
    }
    return false;
}

std::string to_lower(std::string_view s) {
    std::string out(s);
    std::transform(out.begin(), out.end(), out.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return out;
}

} // namespace

// --- interleaving ------------------------------------------------------------

InterleavedSheet interleave(const abc::Sheet& sheet, bool pad_short_voices) {
    InterleavedSheet out;
    out.header = sheet.header;

    std::size_t measure_count = 0;
    for (const auto& bars : sheet.body)
        measure_count = std::max(measure_count, bars.size());
    if (!pad_short_voices) {
        for (const auto& bars : sheet.body)
            if (bars.size() != measure_count)
                throw VoiceLengthMismatch("voice bar counts differ and padding is off");
    }

    out.measures.resize(measure_count);
    for (std::size_t k = 0; k < measure_count; ++k) {
        Measure& m = out.measures[k];
        for (std::size_t v = 0; v < sheet.body.size(); ++v) {
            const std::string& id = sheet.header.voices[v].id;
            abc::Bar bar = k < sheet.body[v].size() ? sheet.body[v][k]
                                                    : make_rest_bar(sheet.header, id);
            bar.ends_line = false;
            m.push_back({id, std::move(bar)});
        }
        if (!m.empty()) m.back().bar.ends_line = true;
    }
    return out;
}

std::string measure_text(const Measure& m) {
    std::string out;
    for (const VoiceFragment& f : m) out += "[V:" + f.voice_id + "]" + f.bar.raw_text;
    return out;
}

InterleavedSheet strip_rest_bars(InterleavedSheet isheet) {
    std::size_t before = 0;
    std::size_t after = 0;
    std::vector<Measure> kept;
    kept.reserve(isheet.measures.size());
    for (Measure& m : isheet.measures) {
        std::size_t chars = measure_text(m).size() + 1;
        before += chars;
        bool all_rest = std::all_of(m.begin(), m.end(), [](const VoiceFragment& f) {
            return abc::is_rest_bar(f.bar);
        });
        if (!all_rest) {
            after += chars;
            kept.push_back(std::move(m));
        }
    }
    isheet.measures = std::move(kept);
    isheet.length_ratio_after_strip =
        before == 0 ? Rational{1, 1}
                    : Rational{static_cast<std::int64_t>(after),
                               static_cast<std::int64_t>(before)};
    return isheet;
}

abc::Sheet to_sheet(const InterleavedSheet& isheet) {
    abc::Sheet sheet;
    sheet.header = isheet.header;
    sheet.interleaved = true;
    sheet.trailing_newline = true;
    sheet.body.resize(isheet.header.voices.size());
    for (const Measure& m : isheet.measures) {
        for (std::size_t v = 0; v < m.size(); ++v) {
            for (std::size_t i = 0; i < isheet.header.voices.size(); ++i) {
                if (isheet.header.voices[i].id != m[v].voice_id) continue;
                sheet.body[i].push_back(m[v].bar);
                sheet.body[i].back().ends_line = v + 1 == m.size();
                break;
            }
        }
    }
    return sheet;
}

std::string render_interleaved(const InterleavedSheet& isheet) {
    return abc::serialize_sheet(to_sheet(isheet));
}

// --- bar-index annotation ----------------------------------------------------

std::vector<std::string> annotate_bar_indices(const InterleavedSheet& isheet) {
    std::vector<std::string> lines;
    std::size_t n = isheet.measures.size();
    lines.reserve(n);
    for (std::size_t k = 1; k <= n; ++k) {
        lines.push_back("[r:" + std::to_string(k) + "/" + std::to_string(n - k) + "]" +
                        measure_text(isheet.measures[k - 1]));
    }
    return lines;
}

std::string render_annotated(const InterleavedSheet& isheet) {
    std::string out = header_text(isheet.header);
    for (const std::string& line : annotate_bar_indices(isheet)) out += line + "\n";
    return out;
}

std::string strip_bar_annotations(std::string_view text) {
    std::string out;
    out.reserve(text.size());
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t nl = text.find('\n', pos);
        std::string_view line = nl == std::string_view::npos
                                    ? text.substr(pos)
                                    : text.substr(pos, nl - pos);
        line.remove_prefix(r_tag_length(line));
        out += line;
        if (nl == std::string_view::npos) break;
        out += '\n';
        pos = nl + 1;
    }
    return out;
}

// --- transposition -----------------------------------------------------------

InterleavedSheet transpose(const InterleavedSheet& isheet, const KeyChoice& choice) {
    const abc::KeySig& src = isheet.header.key;
    const abc::KeySig& dst = choice.target_key;
    check_supported(src);
    check_supported(dst);
    if (choice.fifths_offset < kMinFifths || choice.fifths_offset > kMaxFifths)
        throw UnsupportedKey("fifths offset out of range");
    int lof_delta = abc::key_fifths(dst) - abc::key_fifths(src);
    if (((lof_delta - choice.fifths_offset) % 12 + 12) % 12 != 0)
        throw UnsupportedKey("offset does not match the key pair");
    if (lof_delta == 0 && src == dst) return isheet;

    InterleavedSheet out = isheet;
    out.header.key = dst;
    for (Measure& m : out.measures) {
        for (VoiceFragment& f : m) {
            for (abc::Token& t : f.bar.tokens) transpose_token(t, src, dst, lof_delta);
            f.bar.raw_text = abc::render_tokens(f.bar.tokens);
        }
    }
    return out;
}

KeyChoice choose_key(Stage stage, const abc::KeySig& original, Rng& rng) {
    check_supported(original);
    int f0 = abc::key_fifths(original);
    abc::Mode mode = original.mode;

    if (stage == Stage::Pretrain) {
        int target = kMinFifths + rand_index(rng, kKeyCount);
        int d = target - f0;
        if (d > kMaxFifths) d -= 12;
        if (d < kMinFifths) d += 12;
        return {abc::key_from_fifths(target, mode), d};
    }

    // Triangular weights over d in [-3, 3], restricted to targets that stay
    // within the signature range.
    std::vector<int> offsets;
    std::vector<double> weights;
    double total = 0;
    for (int d = -3; d <= 3; ++d) {
        int target = f0 + d;
        if (target < kMinFifths || target > kMaxFifths) continue;
        offsets.push_back(d);
        weights.push_back(4.0 - std::abs(d));
        total += weights.back();
    }
    double u = rand_unit(rng) * total;
    std::size_t pick = 0;
    for (; pick + 1 < offsets.size(); ++pick) {
        if (u < weights[pick]) break;
        u -= weights[pick];
    }
    int d = offsets[pick];
    return {abc::key_from_fifths(f0 + d, mode), d};
}

// --- segmentation ------------------------------------------------------------

std::string make_training_segment(const std::string& text, std::size_t max_chars,
                                  Rng& rng) {
    if (text.size() <= max_chars) return text;

    std::vector<std::string_view> lines = split_lines(text);
    std::size_t body_start = lines.size();
    std::size_t header_len = 0;
    for (std::size_t i = 0; i < lines.size(); ++i) {
        header_len += lines[i].size() + 1;
        if (lines[i].rfind("K:", 0) == 0) {
            body_start = i + 1;
            break;
        }
    }
    if (body_start >= lines.size() || header_len >= max_chars)
        throw SegmentTooSmall("budget does not cover the header and one line");
    std::size_t budget = max_chars - header_len;

    // Window size = lines a start position can fit; keep the starts that
    // reach the maximum.
    std::size_t best = 0;
    std::vector<std::size_t> starts;
    for (std::size_t s = body_start; s < lines.size(); ++s) {
        std::size_t used = 0;
        std::size_t count = 0;
        for (std::size_t i = s; i < lines.size(); ++i) {
            std::size_t len = lines[i].size() + 1;
            if (used + len > budget) break;
            used += len;
            ++count;
        }
        if (count > best) {
            best = count;
            starts.clear();
        }
        if (count == best && count > 0) starts.push_back(s);
    }
    if (best == 0) throw SegmentTooSmall("no body line fits in the budget");

    std::size_t start = starts[static_cast<std::size_t>(
        rand_index(rng, static_cast<int>(starts.size())))];
    std::string out;
    for (std::size_t i = 0; i < body_start; ++i) out += std::string(lines[i]) + "\n";
    for (std::size_t i = start; i < start + best; ++i)
        out += std::string(lines[i]) + "\n";
    return out;
}

// --- prompts -----------------------------------------------------------------

const std::vector<std::string>& prompt_periods() {
    static const std::vector<std::string> v = {"Baroque", "Classical", "Romantic"};
    return v;
}

const std::vector<std::string>& prompt_instrumentations() {
    static const std::vector<std::string> v = {"Keyboard",  "Chamber", "Orchestral",
                                               "Art Song", "Choral",  "Vocal-Orchestral"};
    return v;
}

bool valid_prompt(const Prompt& p) {
    auto in = [](const std::vector<std::string>& set, const std::string& s) {
        return std::find(set.begin(), set.end(), s) != set.end();
    };
    if (!in(prompt_periods(), p.period)) return false;
    if (!p.instrumentation.empty() && !in(prompt_instrumentations(), p.instrumentation))
        return false;
    if (p.composer.empty()) return false;
    return p.composer.find('|') == std::string::npos &&
           p.composer.find('\n') == std::string::npos;
}

std::string prompt_line(const Prompt& p) {
    std::string out = "%%prompt " + p.period + "|" + p.composer;
    if (!p.instrumentation.empty()) out += "|" + p.instrumentation;
    return out;
}

std::optional<Prompt> parse_prompt_line(std::string_view line) {
    constexpr std::string_view kTag = "%%prompt ";
    if (line.rfind(kTag, 0) != 0) return std::nullopt;
    std::string_view rest = line.substr(kTag.size());
    std::vector<std::string> fields;
    std::size_t pos = 0;
    while (true) {
        std::size_t bar = rest.find('|', pos);
        if (bar == std::string_view::npos) {
            fields.emplace_back(rest.substr(pos));
            break;
        }
        fields.emplace_back(rest.substr(pos, bar - pos));
        pos = bar + 1;
    }
    if (fields.size() < 2 || fields.size() > 3) return std::nullopt;
    Prompt p;
    p.period = fields[0];
    p.composer = fields[1];
    if (fields.size() == 3) p.instrumentation = fields[2];
    return p;
}

std::string prepend_prompt(const std::string& text, const Prompt& p) {
    if (!valid_prompt(p)) throw Error("invalid prompt: " + prompt_line(p));
    return prompt_line(p) + "\n" + text;
}

std::string strip_prompt(const std::string& text, Prompt* out) {
    std::size_t nl = text.find('\n');
    std::string_view first = nl == std::string::npos
                                 ? std::string_view(text)
                                 : std::string_view(text).substr(0, nl);
    std::optional<Prompt> p = parse_prompt_line(first);
    if (!p) return text;
    if (out) *out = *p;
    return nl == std::string::npos ? std::string() : text.substr(nl + 1);
}

// --- free-text cleanup -------------------------------------------------------

const std::vector<std::string>& default_text_whitelist() {
    static const std::vector<std::string> v = {
        "adagio",     "agitato",    "allegretto", "allegro",   "andante",
        "andantino",  "animato",    "brio",       "cantabile", "dolce",
        "espressivo", "grave",      "grazioso",   "largo",     "larghetto",
        "legato",     "lento",      "maestoso",   "marcato",   "moderato",
        "presto",     "prestissimo", "rubato",    "scherzando", "sostenuto",
        "staccato",   "tempo",      "tranquillo", "vivace"};
    return v;
}

abc::Sheet clean_text_annotations(abc::Sheet sheet) {
    return clean_text_annotations(std::move(sheet), default_text_whitelist());
}

abc::Sheet clean_text_annotations(abc::Sheet sheet,
                                  const std::vector<std::string>& whitelist) {
    std::vector<std::string> lower;
    lower.reserve(whitelist.size());
    for (const std::string& term : whitelist) lower.push_back(to_lower(term));

    auto keep = [&](const std::pair<char, std::string>& field) {
        if (field.first == '%' && field.second.rfind("%%", 0) == 0) return true;
        std::string text = to_lower(field.second);
        return std::any_of(lower.begin(), lower.end(), [&](const std::string& term) {
            return contains_word(text, term);
        });
    };
    auto& fields = sheet.header.extra_fields;
    fields.erase(std::remove_if(fields.begin(), fields.end(),
                                [&](const auto& f) { return !keep(f); }),
                 fields.end());
    return sheet;
}

// --- corpus manifest ---------------------------------------------------------

std::vector<ManifestRecord> parse_manifest(std::string_view text) {
    std::vector<ManifestRecord> records;
    for (std::string_view line : split_lines(text)) {
        if (line.empty() || line[0] == '#') continue;
        ManifestRecord rec;
        std::size_t pos = 0;
        while (pos <= line.size()) {
            std::size_t tab = line.find('\t', pos);
            std::string_view field =
                tab == std::string_view::npos ? line.substr(pos) : line.substr(pos, tab - pos);
            std::size_t eq = field.find('=');
            if (eq == std::string_view::npos)
                throw Error("manifest field without '=': " + std::string(field));
            std::string key(field.substr(0, eq));
            std::string value(field.substr(eq + 1));
            if (key == "path") rec.path = value;
            else if (key == "period") rec.period = value;
            else if (key == "composer") rec.composer = value;
            else if (key == "instrumentation") rec.instrumentation = value;
            else if (key == "split") rec.split = value;
            else throw Error("unknown manifest key: " + key);
            if (tab == std::string_view::npos) break;
            pos = tab + 1;
        }
        if (rec.path.empty()) throw Error("manifest record without path");
        records.push_back(std::move(rec));
    }
    return records;
}

std::string format_manifest(const std::vector<ManifestRecord>& records) {
    std::string out;
    for (const ManifestRecord& r : records) {
        out += "path=" + r.path + "\tperiod=" + r.period + "\tcomposer=" + r.composer +
               "\tinstrumentation=" + r.instrumentation + "\tsplit=" + r.split + "\n";
    }
    return out;
}

std::vector<ManifestRecord> load_manifest(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open manifest: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_manifest(buf.str());
}

void save_manifest(const std::string& path, const std::vector<ManifestRecord>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write manifest: " + path);
    out << format_manifest(records);
}

} // namespace barstream::prep
