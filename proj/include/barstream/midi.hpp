#pragma once
// Fixed-length-8 event token codec over a 3406-id vocabulary, a prompt
// extension (3 period ids, 36 composer ids), a beat-delta timeline encoder,
// and a minimal standard MIDI file reader.

#include <array>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "barstream/errors.hpp"

namespace barstream::midi {

BARSTREAM_DEFINE_ERROR(BadEventType);
BARSTREAM_DEFINE_ERROR(TokenFamilyMismatch);
BARSTREAM_DEFINE_ERROR(BadPadding);
BARSTREAM_DEFINE_ERROR(ParamOutOfRange);
BARSTREAM_DEFINE_ERROR(NegativeDelta);

// Base event types in token-id order; the prompt pseudo-events encode as one
// extension id repeated and own no event-type id.
enum class EventType {
    Note = 0,
    ProgramChange = 1,
    ControlChange = 2,
    SetTempo = 3,
    TimeSignature = 4,
    KeySignature = 5,
    Bos = 6,
    Eos = 7,
    PeriodPrompt,
    ComposerPrompt,
};

// Flat parameter record; only the fields of the active variant are meaningful,
// and equality compares exactly those.
struct MidiEvent {
    EventType type = EventType::Bos;
    int time1 = 0;        // whole-beat delta to the previous timed event, 0..127
    int time2 = 0;        // sixteenth-of-a-beat position inside the beat, 0..15
    int track = 0;        // 0..127
    int channel = 0;      // 0..15
    int pitch = 60;       // 0..127
    int velocity = 64;    // 0..127
    int duration = 1;     // sixty-fourth notes, 1..2048
    int program = 0;      // 0..127
    int controller = 0;   // 0..127
    int value = 0;        // 0..127
    int bpm = 120;        // 1..384
    int numerator = 1;    // 1..16
    int denominator = 4;  // one of 2, 4, 8, 16
    int accidentals = 0;  // -7..7
    int mode = 0;         // 0 major, 1 minor
    int prompt_index = 0; // PeriodPrompt 0..2, ComposerPrompt 0..35
};

bool operator==(const MidiEvent& a, const MidiEvent& b);
bool operator!=(const MidiEvent& a, const MidiEvent& b);

struct EventTokenSeq {
    std::array<int, 8> tokens{};
    bool operator==(const EventTokenSeq&) const = default;
};

struct TokenFamily {
    std::string name;
    int offset = 0;
    int size = 0;
    bool contains(int id) const { return id >= offset && id < offset + size; }
};

// Contiguous disjoint id ranges, one per family, in the fixed order
// event, time1, time2, track, channel, pitch, velocity, duration, program,
// controller, value, bpm, numerator, denominator, accidentals, mode, pad,
// then the prompt extension period, composer.
struct Vocab {
    std::vector<TokenFamily> families;
    int base_total = 0; // without the prompt extension
    int total = 0;      // with it

    const TokenFamily& family(const std::string& name) const; // Error on unknown
    const TokenFamily* family_of(int id) const;               // nullptr outside
    int pad_id() const;
};

const Vocab& vocab();

// Eight tokens, event type first, parameters in table order, PAD trailing.
// Prompt events yield their extension id repeated eight times.
EventTokenSeq encode_event(const MidiEvent& e);

// Exact inverse of encode_event on valid sequences.
MidiEvent decode_seq(const EventTokenSeq& s);

// One event at an absolute tick; time1/time2/duration on `event` are ignored
// and recomputed by encode_timeline.
struct TimedEvent {
    long tick = 0;
    long duration_ticks = 0; // Note events only
    MidiEvent event;
};

struct TimelineStats {
    std::size_t events = 0;
    std::size_t clamped_time1 = 0;   // beat gaps beyond 127
    std::size_t clamped_duration = 0;
};

// Converts absolute ticks into per-event beat deltas: time1 is the difference
// of whole-beat positions against the previous timed event, time2 the
// sixteenth-of-a-beat subdivision, durations round to sixty-fourth notes and
// clamp to [1, 2048]. Bos/Eos/prompt events pass through without touching the
// time base. Ticks must be non-decreasing and non-negative.
std::vector<EventTokenSeq> encode_timeline(const std::vector<TimedEvent>& events,
                                           int ticks_per_beat,
                                           TimelineStats* stats = nullptr);

// Minimal standard MIDI file reader, formats 0 and 1, tick division only.
// Note-on/off pairs merge into Note events (earliest open note first);
// unsupported channel and meta events are counted in `skipped`.
struct MidiFile {
    int format = 0;
    int ticks_per_beat = 480;
    std::vector<TimedEvent> events; // stable-sorted by tick
    std::size_t skipped = 0;
};

MidiFile parse_midi(const std::vector<std::uint8_t>& bytes);
MidiFile read_midi_file(const std::string& path);

// Token stream files: one sequence per line, eight decimal ids.
void save_token_stream(const std::string& path,
                       const std::vector<EventTokenSeq>& seqs);
std::vector<EventTokenSeq> load_token_stream(const std::string& path);

// One-line human-readable rendering, for dumps and logs.
std::string describe_event(const MidiEvent& e);

} // namespace barstream::midi
