#pragma once

#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "barstream/errors.hpp"
#include "barstream/rational.hpp"

// Parser and serializer for the ABC dialect used throughout the pipeline.
//
// The dialect is deliberately a subset of common ABC practice:
//  - single tune per file, no macros, no lyrics (w: lines are dropped)
//  - bars never span line breaks
//  - accidentals are taken from the key signature or an explicit mark on the
//    note itself; within-bar accidental memory is not modelled, so
//    serialization restates accidentals wherever they differ from the key
//  - inline fields inside the body are limited to [M:...] and [Q:...]
// Both the classic one-voice-per-block layout (V: lines) and the interleaved
// layout ([V:id] fragments on shared measure lines, optionally prefixed by
// [r:k/m] position tags) are accepted.

namespace barstream::abc {

BARSTREAM_DEFINE_ERROR(MissingHeaderField);
BARSTREAM_DEFINE_ERROR(UnbalancedBarline);
BARSTREAM_DEFINE_ERROR(BadDuration);

enum class Mode { Major, Minor, Other };

// Key signature. Letters are 0..6 for C..B. For Mode::Other the raw K: text is
// kept verbatim and transposition refuses the sheet.
struct KeySig {
    int tonic_letter = 0;
    int tonic_acc = 0; // -1 flat, 0 natural, +1 sharp
    Mode mode = Mode::Major;
    std::string raw_other; // original text when mode == Other

    friend bool operator==(const KeySig&, const KeySig&) = default;
};

// Position of a key on the line of fifths; C major / A minor = 0.
int key_fifths(const KeySig& k);
// Key with the given signature count (-7..+7) and mode (Major or Minor).
KeySig key_from_fifths(int fifths, Mode mode);
std::string key_name(const KeySig& k);
KeySig parse_key(std::string_view text);

struct Meter {
    enum class Kind { Fraction, Common, Cut, None };
    Kind kind = Kind::None;
    int num = 4;
    int den = 4;

    Rational value() const { return {num, den}; }
    bool compound() const { return num > 3 && num % 3 == 0; }
    std::string str() const;
    friend bool operator==(const Meter&, const Meter&) = default;
};

Meter parse_meter(std::string_view text);

struct VoiceDecl {
    std::string id;
    std::optional<std::string> instrument; // from name="..." / nm="..."
    std::optional<int> stave_group;        // brace group index in %%score
    std::string raw_tail;                  // everything after the id, verbatim
    bool declared_in_body = false;         // voice first appeared after K:
    bool implicit = false;                 // created for untagged music lines
    // tail of a body V: switch line for a voice that was declared earlier
    std::optional<std::string> body_switch;

    friend bool operator==(const VoiceDecl&, const VoiceDecl&) = default;
};

struct TuneHeader {
    int reference_number = 1;                // X:
    std::optional<Rational> unit_length;     // L: as written, if present
    Meter meter;                             // M:
    KeySig key;                              // K:
    std::optional<std::string> tempo;        // Q:, verbatim
    std::vector<VoiceDecl> voices;
    std::optional<std::string> score_directive; // text after "%%score "
    // Other header lines in original order. first = field letter, or '%' for
    // passthrough %%directives (second then holds the whole line).
    std::vector<std::pair<char, std::string>> extra_fields;

    // Effective unit note length: the L: field when present, else 1/16-style
    // defaults collapsed to the project rule: 1/8 when the meter value is
    // below 3/4, else 1/4. A missing meter defaults to 1/8.
    Rational unit_note_length() const;

    friend bool operator==(const TuneHeader&, const TuneHeader&) = default;
};

enum class TokenKind {
    Note,
    Rest,
    Chord,
    Grace,
    Decoration,
    Annotation,   // "quoted text"
    Slur,
    Tie,
    Tuplet,
    BrokenRhythm,
    Space,
    InlineField,  // [M:...] or [Q:...]
    Ending,       // [1 / [2 variant markers
    Barline,
};

struct NotePitch {
    int letter = 0;              // 0..6 = C..B
    std::optional<int> acc;      // explicit accidental: -2..+2; nullopt = from key
    int octave = 0;              // 0 = uppercase octave (C..B), +1 = lowercase

    friend bool operator==(const NotePitch&, const NotePitch&) = default;
};

struct Token {
    TokenKind kind = TokenKind::Space;
    std::string text;            // exact source slice
    Rational dur{0, 1};          // duration multiplier in units of L (tuplet-scaled)
    std::optional<NotePitch> pitch;  // Note
    std::string mult_text;       // multiplier as written (Note / Chord outer / Rest)
    std::vector<Token> sub;      // Chord and Grace contents
    char field_letter = 0;       // InlineField
    std::string field_value;
};

struct Bar {
    std::string voice_id;
    std::vector<Token> tokens;   // concatenation of token texts == raw_text
    std::string raw_text;        // authoritative, includes trailing barline
    bool ends_line = false;

    bool has_barline() const;
};

struct Sheet {
    TuneHeader header;
    // body[i] holds the bars of header.voices[i], in order.
    std::vector<std::vector<Bar>> body;
    bool interleaved = false;    // body used [V:id] fragment markers
    bool trailing_newline = true;

    const std::vector<Bar>* bars_of(std::string_view voice_id) const;
};

// --- operations -------------------------------------------------------------

// Parses one tune. Requires X: and K:; throws MissingHeaderField otherwise.
// [r:k/m] tags and %%prompt lines are not part of the sheet model; strip them
// first (see preprocess) or rely on measure-line tags being skipped.
Sheet parse_sheet(std::string_view text);

// Canonical text form. parse_sheet(serialize_sheet(s)) == s for any s that
// came out of parse_sheet, and serialize . parse is a fixpoint on text.
std::string serialize_sheet(const Sheet& s);

// Total sounding duration of a bar in whole notes: sum of note/rest/chord
// multipliers times the unit note length. Grace notes, decorations and
// annotations contribute zero.
Duration bar_duration(const Bar& bar, const Rational& unit_length);

// True when every fragment of a measure contains only rests (z / x) and no
// note or chord. Empty fragments count as rests.
bool is_rest_bar(const std::vector<const Bar*>& fragments);
bool is_rest_bar(const Bar& bar);

// Splits one music line into bar slices. A slice runs up to and including its
// barline (plus trailing whitespace at end of line); barline characters inside
// [..] groups or "..." annotations do not split. Concatenating the slices
// yields the input line.
std::vector<std::string> split_line_into_bars(std::string_view line);

// Lexes one bar slice (as produced by split_line_into_bars) into tokens.
std::vector<Token> lex_bar(std::string_view slice, const std::string& voice_id,
                           const Meter& meter);

// Renders tokens back to text; used after transposition rewrites pitches.
std::string render_tokens(const std::vector<Token>& tokens);

// --- pitch helpers ----------------------------------------------------------

// Default alteration of a letter under a key signature (-1/0/+1).
int key_alteration(const KeySig& key, int letter);
// Effective alteration of a written note (explicit accidental wins).
int effective_alteration(const NotePitch& p, const KeySig& key);
// MIDI number of a written note under a key; octave 0 C = 60.
int midi_pitch(const NotePitch& p, const KeySig& key);

// Transposes a spelled pitch by a line-of-fifths offset, choosing the octave
// that moves the sounding pitch by the smallest interval, and re-spelling the
// accidental canonically against the target key.
NotePitch transpose_pitch(const NotePitch& p, const KeySig& from, const KeySig& to,
                          int fifths_delta);

} // namespace barstream::abc
