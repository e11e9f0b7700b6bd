#include "barstream/midi.hpp"

#include <algorithm>
#include <cstdio>
#include <deque>
#include <fstream>
#include <map>
#include <sstream>

namespace barstream::midi {

namespace {

enum class Field {
    Time1,
    Time2,
    Track,
    Channel,
    Pitch,
    Velocity,
    Duration,
    Program,
    Controller,
    Value,
    Bpm,
    Numerator,
    Denominator,
    Accidentals,
    Mode,
};

// Parameter layout per event type, in token order after the type id.
const std::vector<Field>& fields_of(EventType t) {
    static const std::vector<Field> note{Field::Time1,    Field::Time2,
                                         Field::Track,    Field::Channel,
                                         Field::Pitch,    Field::Velocity,
                                         Field::Duration};
    static const std::vector<Field> program{Field::Time1, Field::Time2,
                                            Field::Track, Field::Channel,
                                            Field::Program};
    static const std::vector<Field> control{Field::Time1,      Field::Time2,
                                            Field::Track,      Field::Channel,
                                            Field::Controller, Field::Value};
    static const std::vector<Field> tempo{Field::Time1, Field::Time2,
                                          Field::Track, Field::Bpm};
    static const std::vector<Field> timesig{Field::Time1,     Field::Time2,
                                            Field::Track,     Field::Numerator,
                                            Field::Denominator};
    static const std::vector<Field> keysig{Field::Time1,       Field::Time2,
                                           Field::Track,       Field::Accidentals,
                                           Field::Mode};
    static const std::vector<Field> none{};
    switch (t) {
    case EventType::Note: return note;
    case EventType::ProgramChange: return program;
    case EventType::ControlChange: return control;
    case EventType::SetTempo: return tempo;
    case EventType::TimeSignature: return timesig;
    case EventType::KeySignature: return keysig;
    default: return none;
    }
}

struct FieldSpec {
    const char* name;        // token family holding this field
    int lo;                  // lowest legal value, mapped to the family offset
    int hi;
    int MidiEvent::*member;
};

const FieldSpec& spec_of(Field f) {
    static const FieldSpec table[] = {
        {"time1", 0, 127, &MidiEvent::time1},
        {"time2", 0, 15, &MidiEvent::time2},
        {"track", 0, 127, &MidiEvent::track},
        {"channel", 0, 15, &MidiEvent::channel},
        {"pitch", 0, 127, &MidiEvent::pitch},
        {"velocity", 0, 127, &MidiEvent::velocity},
        {"duration", 1, 2048, &MidiEvent::duration},
        {"program", 0, 127, &MidiEvent::program},
        {"controller", 0, 127, &MidiEvent::controller},
        {"value", 0, 127, &MidiEvent::value},
        {"bpm", 1, 384, &MidiEvent::bpm},
        {"numerator", 1, 16, &MidiEvent::numerator},
        {"denominator", 0, 3, &MidiEvent::denominator},
        {"accidentals", -7, 7, &MidiEvent::accidentals},
        {"mode", 0, 1, &MidiEvent::mode},
    };
    return table[static_cast<int>(f)];
}

[[noreturn]] void out_of_range(const char* field, int value) {
    std::ostringstream msg;
    msg << field << " " << value << " out of range";
    throw ParamOutOfRange(msg.str());
}

// Denominators {2,4,8,16} map onto family indices 0..3.
int denominator_index(int den) {
    switch (den) {
    case 2: return 0;
    case 4: return 1;
    case 8: return 2;
    case 16: return 3;
    default: out_of_range("denominator", den);
    }
}

int field_token(const Vocab& v, const MidiEvent& e, Field f) {
    const FieldSpec& fs = spec_of(f);
    int value = e.*fs.member;
    if (f == Field::Denominator) value = denominator_index(value);
    if (value < fs.lo || value > fs.hi) out_of_range(fs.name, e.*fs.member);
    return v.family(fs.name).offset + (value - fs.lo);
}

void set_field(const Vocab& v, MidiEvent& e, Field f, int id) {
    const FieldSpec& fs = spec_of(f);
    int value = fs.lo + (id - v.family(fs.name).offset);
    if (f == Field::Denominator) value = 2 << value;
    e.*fs.member = value;
}

const char* type_name(EventType t) {
    switch (t) {
    case EventType::Note: return "note";
    case EventType::ProgramChange: return "program_change";
    case EventType::ControlChange: return "control_change";
    case EventType::SetTempo: return "set_tempo";
    case EventType::TimeSignature: return "time_signature";
    case EventType::KeySignature: return "key_signature";
    case EventType::Bos: return "bos";
    case EventType::Eos: return "eos";
    case EventType::PeriodPrompt: return "period_prompt";
    case EventType::ComposerPrompt: return "composer_prompt";
    }
    return "?";
}

bool timed_type(EventType t) {
    switch (t) {
    case EventType::Note:
    case EventType::ProgramChange:
    case EventType::ControlChange:
    case EventType::SetTempo:
    case EventType::TimeSignature:
    case EventType::KeySignature: return true;
    default: return false;
    }
}

} // namespace

bool operator==(const MidiEvent& a, const MidiEvent& b) {
    if (a.type != b.type) return false;
    switch (a.type) {
    case EventType::Bos:
    case EventType::Eos: return true;
    case EventType::PeriodPrompt:
    case EventType::ComposerPrompt: return a.prompt_index == b.prompt_index;
    default: break;
    }
    for (Field f : fields_of(a.type)) {
        const FieldSpec& fs = spec_of(f);
        if (a.*fs.member != b.*fs.member) return false;
    }
    return true;
}

bool operator!=(const MidiEvent& a, const MidiEvent& b) { return !(a == b); }

const Vocab& vocab() {
    static const Vocab v = [] {
        Vocab out;
        auto add = [&out](const char* name, int size) {
            out.families.push_back({name, out.total, size});
            out.total += size;
        };
        add("event", 8);
        add("time1", 128);
        add("time2", 16);
        add("track", 128);
        add("channel", 16);
        add("pitch", 128);
        add("velocity", 128);
        add("duration", 2048);
        add("program", 128);
        add("controller", 128);
        add("value", 128);
        add("bpm", 384);
        add("numerator", 16);
        add("denominator", 4);
        add("accidentals", 15);
        add("mode", 2);
        add("pad", 1);
        out.base_total = out.total;
        add("period", 3);
        add("composer", 36);
        return out;
    }();
    return v;
}

const TokenFamily& Vocab::family(const std::string& name) const {
    for (const TokenFamily& f : families)
        if (f.name == name) return f;
    throw Error("unknown token family: " + name);
}

const TokenFamily* Vocab::family_of(int id) const {
    for (const TokenFamily& f : families)
        if (f.contains(id)) return &f;
    return nullptr;
}

int Vocab::pad_id() const { return family("pad").offset; }

EventTokenSeq encode_event(const MidiEvent& e) {
    const Vocab& v = vocab();
    EventTokenSeq seq;
    if (e.type == EventType::PeriodPrompt || e.type == EventType::ComposerPrompt) {
        const TokenFamily& f =
            v.family(e.type == EventType::PeriodPrompt ? "period" : "composer");
        if (e.prompt_index < 0 || e.prompt_index >= f.size)
            out_of_range("prompt_index", e.prompt_index);
        seq.tokens.fill(f.offset + e.prompt_index);
        return seq;
    }
    seq.tokens[0] = static_cast<int>(e.type);
    std::size_t slot = 1;
    for (Field f : fields_of(e.type)) seq.tokens[slot++] = field_token(v, e, f);
    while (slot < seq.tokens.size()) seq.tokens[slot++] = v.pad_id();
    return seq;
}

MidiEvent decode_seq(const EventTokenSeq& s) {
    const Vocab& v = vocab();
    const int first = s.tokens[0];
    MidiEvent e;

    const TokenFamily& period = v.family("period");
    const TokenFamily& composer = v.family("composer");
    if (period.contains(first) || composer.contains(first)) {
        for (int id : s.tokens)
            if (id != first)
                throw TokenFamilyMismatch("prompt sequences repeat a single id");
        const bool is_period = period.contains(first);
        e.type = is_period ? EventType::PeriodPrompt : EventType::ComposerPrompt;
        e.prompt_index = first - (is_period ? period : composer).offset;
        return e;
    }

    if (!v.family("event").contains(first))
        throw BadEventType("first token " + std::to_string(first) +
                           " is not an event type");
    e.type = static_cast<EventType>(first);

    const std::vector<Field>& fields = fields_of(e.type);
    std::size_t slot = 1;
    for (Field f : fields) {
        const int id = s.tokens[slot];
        const FieldSpec& fs = spec_of(f);
        if (id == v.pad_id()) {
            std::ostringstream msg;
            msg << "slot " << slot << " of " << type_name(e.type)
                << " is padding, expected " << fs.name;
            throw BadPadding(msg.str());
        }
        if (!v.family(fs.name).contains(id)) {
            const TokenFamily* got = v.family_of(id);
            std::ostringstream msg;
            msg << "slot " << slot << " of " << type_name(e.type) << " holds "
                << (got ? got->name : "an out-of-vocabulary id") << ", expected "
                << fs.name;
            throw TokenFamilyMismatch(msg.str());
        }
        set_field(v, e, f, id);
        ++slot;
    }
    for (; slot < s.tokens.size(); ++slot)
        if (s.tokens[slot] != v.pad_id())
            throw BadPadding("slot " + std::to_string(slot) + " of " +
                             type_name(e.type) + " must be padding");
    return e;
}

std::vector<EventTokenSeq> encode_timeline(const std::vector<TimedEvent>& events,
                                           int ticks_per_beat,
                                           TimelineStats* stats) {
    if (ticks_per_beat < 1) out_of_range("ticks_per_beat", ticks_per_beat);
    TimelineStats local;
    std::vector<EventTokenSeq> out;
    out.reserve(events.size());
    long prev_floor = 0;
    long prev_tick = 0;
    for (std::size_t i = 0; i < events.size(); ++i) {
        const TimedEvent& te = events[i];
        if (te.tick < 0)
            throw NegativeDelta("event " + std::to_string(i) +
                                " has a negative tick");
        if (te.tick < prev_tick)
            throw NegativeDelta("event " + std::to_string(i) +
                                " runs backwards in time");
        prev_tick = te.tick;
        MidiEvent e = te.event;
        if (!timed_type(e.type)) {
            out.push_back(encode_event(e));
            ++local.events;
            continue;
        }
        const long floor_beat = te.tick / ticks_per_beat;
        long delta = floor_beat - prev_floor;
        if (delta > 127) {
            delta = 127;
            ++local.clamped_time1;
        }
        e.time1 = static_cast<int>(delta);
        e.time2 = static_cast<int>(te.tick % ticks_per_beat * 16 / ticks_per_beat);
        if (e.type == EventType::Note) {
            // round half up to sixty-fourth notes
            long q = (2 * te.duration_ticks * 16 + ticks_per_beat) /
                     (2 * ticks_per_beat);
            if (q < 1) q = 1;
            if (q > 2048) {
                q = 2048;
                ++local.clamped_duration;
            }
            e.duration = static_cast<int>(q);
        }
        out.push_back(encode_event(e));
        prev_floor = floor_beat;
        ++local.events;
    }
    if (stats) *stats = local;
    return out;
}

namespace {

struct ByteReader {
    const std::vector<std::uint8_t>& bytes;
    std::size_t pos = 0;

    void need(std::size_t n) const {
        if (pos + n > bytes.size()) throw ParseFailure("truncated midi data");
    }
    std::uint8_t u8() {
        need(1);
        return bytes[pos++];
    }
    std::uint16_t u16() {
        need(2);
        std::uint16_t v = static_cast<std::uint16_t>(bytes[pos] << 8 | bytes[pos + 1]);
        pos += 2;
        return v;
    }
    std::uint32_t u32() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = v << 8 | bytes[pos + i];
        pos += 4;
        return v;
    }
    std::uint32_t varint() {
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            std::uint8_t b = u8();
            v = v << 7 | (b & 0x7f);
            if (!(b & 0x80)) return v;
        }
        throw ParseFailure("variable-length quantity exceeds four bytes");
    }
    void skip(std::size_t n) {
        need(n);
        pos += n;
    }
    bool magic(const char* tag) {
        need(4);
        bool ok = std::equal(tag, tag + 4, bytes.begin() + static_cast<long>(pos));
        pos += 4;
        return ok;
    }
};

struct OpenNote {
    long tick;
    int velocity;
};

} // namespace

MidiFile parse_midi(const std::vector<std::uint8_t>& bytes) {
    ByteReader r{bytes};
    if (!r.magic("MThd")) throw ParseFailure("missing MThd header");
    const std::uint32_t header_len = r.u32();
    if (header_len < 6) throw ParseFailure("short MThd header");
    MidiFile file;
    file.format = r.u16();
    if (file.format != 0 && file.format != 1)
        throw ParseFailure("unsupported midi format " +
                           std::to_string(file.format));
    const int ntrks = r.u16();
    const std::uint16_t division = r.u16();
    if (division & 0x8000) throw ParseFailure("SMPTE time division is not supported");
    if (division == 0) throw ParseFailure("zero ticks per beat");
    file.ticks_per_beat = division;
    r.skip(header_len - 6);

    for (int trk = 0; trk < ntrks; ++trk) {
        if (trk > 127) throw ParamOutOfRange("track " + std::to_string(trk) +
                                             " out of range");
        if (!r.magic("MTrk")) throw ParseFailure("missing MTrk chunk");
        const std::uint32_t len = r.u32();
        r.need(len);
        const std::size_t end = r.pos + len;
        long tick = 0;
        int running = -1;
        // key = channel << 7 | pitch; note-offs close the earliest open note
        std::map<int, std::deque<OpenNote>> open;
        bool ended = false;

        auto emit = [&](EventType type) {
            TimedEvent te;
            te.tick = tick;
            te.event.type = type;
            te.event.track = trk;
            return te;
        };

        while (r.pos < end && !ended) {
            tick += r.varint();
            int status = r.u8();
            if (status < 0x80) {
                if (running < 0) throw ParseFailure("data byte without status");
                --r.pos;
                status = running;
            }
            if (status == 0xff) {
                const int meta = r.u8();
                const std::uint32_t mlen = r.varint();
                r.need(mlen);
                const std::size_t mstart = r.pos;
                switch (meta) {
                case 0x51: {
                    if (mlen < 3) throw ParseFailure("short tempo meta event");
                    long uspq = 0;
                    for (int i = 0; i < 3; ++i) uspq = uspq << 8 | r.u8();
                    if (uspq <= 0) uspq = 1;
                    long bpm = (2 * 60000000L + uspq) / (2 * uspq);
                    TimedEvent te = emit(EventType::SetTempo);
                    te.event.bpm = static_cast<int>(std::clamp(bpm, 1L, 384L));
                    file.events.push_back(te);
                    break;
                }
                case 0x58: {
                    if (mlen < 2) throw ParseFailure("short time signature meta event");
                    const int num = r.u8();
                    const int den = 1 << r.u8();
                    if (num < 1 || num > 16 || (den != 2 && den != 4 && den != 8 && den != 16)) {
                        ++file.skipped;
                        break;
                    }
                    TimedEvent te = emit(EventType::TimeSignature);
                    te.event.numerator = num;
                    te.event.denominator = den;
                    file.events.push_back(te);
                    break;
                }
                case 0x59: {
                    if (mlen < 2) throw ParseFailure("short key signature meta event");
                    const int sf = static_cast<std::int8_t>(r.u8());
                    const int mode = r.u8();
                    if (sf < -7 || sf > 7 || mode > 1) {
                        ++file.skipped;
                        break;
                    }
                    TimedEvent te = emit(EventType::KeySignature);
                    te.event.accidentals = sf;
                    te.event.mode = mode;
                    file.events.push_back(te);
                    break;
                }
                case 0x2f: ended = true; break;
                default: ++file.skipped; break;
                }
                r.pos = mstart + mlen;
                running = -1;
                continue;
            }
            if (status == 0xf0 || status == 0xf7) {
                r.skip(r.varint());
                ++file.skipped;
                running = -1;
                continue;
            }
            running = status;
            const int kind = status >> 4;
            const int channel = status & 0x0f;
            switch (kind) {
            case 0x9:
            case 0x8: {
                const int pitch = r.u8() & 0x7f;
                const int velocity = r.u8() & 0x7f;
                const int key = channel << 7 | pitch;
                if (kind == 0x9 && velocity > 0) {
                    open[key].push_back({tick, velocity});
                    break;
                }
                auto it = open.find(key);
                if (it == open.end() || it->second.empty()) {
                    ++file.skipped; // stray note-off
                    break;
                }
                const OpenNote began = it->second.front();
                it->second.pop_front();
                TimedEvent te = emit(EventType::Note);
                te.tick = began.tick;
                te.duration_ticks = tick - began.tick;
                te.event.channel = channel;
                te.event.pitch = pitch;
                te.event.velocity = began.velocity;
                file.events.push_back(te);
                break;
            }
            case 0xc: {
                TimedEvent te = emit(EventType::ProgramChange);
                te.event.channel = channel;
                te.event.program = r.u8() & 0x7f;
                file.events.push_back(te);
                break;
            }
            case 0xb: {
                TimedEvent te = emit(EventType::ControlChange);
                te.event.channel = channel;
                te.event.controller = r.u8() & 0x7f;
                te.event.value = r.u8() & 0x7f;
                file.events.push_back(te);
                break;
            }
            case 0xa:
            case 0xe:
                r.skip(2);
                ++file.skipped;
                break;
            case 0xd:
                r.skip(1);
                ++file.skipped;
                break;
            default: throw ParseFailure("unexpected status byte");
            }
        }
        // notes still open at the end of the track close there
        for (auto& [key, queue] : open) {
            for (const OpenNote& began : queue) {
                TimedEvent te;
                te.tick = began.tick;
                te.duration_ticks = std::max(tick - began.tick, 1L);
                te.event.type = EventType::Note;
                te.event.track = trk;
                te.event.channel = key >> 7;
                te.event.pitch = key & 0x7f;
                te.event.velocity = began.velocity;
                file.events.push_back(te);
            }
        }
        r.pos = end;
    }

    std::stable_sort(file.events.begin(), file.events.end(),
                     [](const TimedEvent& a, const TimedEvent& b) {
                         return a.tick < b.tick;
                     });
    return file;
}

MidiFile read_midi_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot read " + path);
    std::vector<std::uint8_t> bytes{std::istreambuf_iterator<char>(in),
                                    std::istreambuf_iterator<char>()};
    return parse_midi(bytes);
}

void save_token_stream(const std::string& path,
                       const std::vector<EventTokenSeq>& seqs) {
    std::ofstream out(path);
    if (!out) throw Error("cannot write " + path);
    for (const EventTokenSeq& s : seqs) {
        for (std::size_t i = 0; i < s.tokens.size(); ++i)
            out << (i ? " " : "") << s.tokens[i];
        out << "\n";
    }
    if (!out) throw Error("failed writing " + path);
}

std::vector<EventTokenSeq> load_token_stream(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot read " + path);
    std::vector<EventTokenSeq> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream row(line);
        EventTokenSeq seq;
        for (int& id : seq.tokens) {
            if (!(row >> id) || id < 0 || id >= vocab().total)
                throw Error(path + ":" + std::to_string(lineno) +
                            ": expected eight token ids");
        }
        int extra;
        if (row >> extra)
            throw Error(path + ":" + std::to_string(lineno) +
                        ": expected eight token ids");
        out.push_back(seq);
    }
    return out;
}

std::string describe_event(const MidiEvent& e) {
    std::ostringstream out;
    out << type_name(e.type);
    if (e.type == EventType::PeriodPrompt || e.type == EventType::ComposerPrompt) {
        out << " index=" << e.prompt_index;
        return out.str();
    }
    for (Field f : fields_of(e.type)) {
        const FieldSpec& fs = spec_of(f);
        out << " " << fs.name << "=" << e.*fs.member;
    }
    return out.str();
}

} // namespace barstream::midi
