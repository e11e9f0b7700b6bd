#include "barstream/patching.hpp"

#include <cctype>
#include <fstream>
#include <sstream>

#include "barstream/abc.hpp"

namespace barstream::patching {

namespace {

bool all_code(const Patch& p, std::uint16_t code) {
    for (std::uint16_t c : p.chars)
        if (c != code) return false;
    return !p.chars.empty();
}

bool field_like(std::string_view line) {
    if (line.empty()) return true;
    if (line[0] == '%') return true;
    return line.size() >= 2 && std::isalpha(static_cast<unsigned char>(line[0])) &&
           line[1] == ':';
}

} // namespace

std::vector<Unit> segment_units(std::string_view text) {
    std::vector<Unit> units;
    bool in_body = false;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        bool has_nl = nl != std::string_view::npos;
        std::string_view line = text.substr(pos, (has_nl ? nl : text.size()) - pos);
        std::string tail = has_nl ? "\n" : "";

        if (!in_body || field_like(line)) {
            units.push_back({std::string(line) + tail, PatchKind::Header});
            if (line.rfind("K:", 0) == 0) in_body = true;
        } else {
            std::vector<std::string> slices = abc::split_line_into_bars(line);
            for (std::size_t i = 0; i < slices.size(); ++i) {
                std::string t = std::move(slices[i]);
                if (i + 1 == slices.size()) t += tail;
                units.push_back({std::move(t), PatchKind::Bar});
            }
        }
        pos = has_nl ? nl + 1 : text.size();
    }
    return units;
}

PatchSequence to_patches(const std::vector<Unit>& units, std::size_t patch_size,
                         std::size_t vocab) {
    PatchSequence ps;
    ps.patch_size = patch_size;
    ps.vocab = vocab;

    auto special = [&](std::uint16_t code) {
        Patch p;
        p.chars.assign(patch_size, code);
        p.kind = PatchKind::Special;
        ps.patches.push_back(std::move(p));
        ps.source_spans.push_back({});
    };

    special(bos_code(vocab));
    for (std::size_t u = 0; u < units.size(); ++u) {
        const std::string& text = units[u].text;
        for (std::size_t off = 0; off < text.size(); off += patch_size) {
            Patch p;
            p.kind = units[u].kind;
            p.chars.reserve(patch_size);
            std::size_t end = std::min(off + patch_size, text.size());
            for (std::size_t i = off; i < end; ++i)
                p.chars.push_back(static_cast<unsigned char>(text[i]));
            p.chars.resize(patch_size, pad_code(vocab));
            ps.patches.push_back(std::move(p));
            ps.source_spans.push_back({u, off});
        }
    }
    special(eos_code(vocab));
    return ps;
}

std::string detokenize(const PatchSequence& ps) {
    std::string out;
    for (const Patch& p : ps.patches) {
        if (all_code(p, bos_code(ps.vocab)) || all_code(p, eos_code(ps.vocab))) continue;
        bool padded = false;
        for (std::uint16_t c : p.chars) {
            if (c == pad_code(ps.vocab)) {
                padded = true;
                continue;
            }
            if (padded) throw MalformedPatch("PAD in patch interior");
            if (c > 255) throw MalformedPatch("special code inside a content patch");
            out += static_cast<char>(static_cast<unsigned char>(c));
        }
    }
    return out;
}

std::vector<double> patch_one_hot(const Patch& p, std::size_t vocab) {
    std::vector<double> v(p.chars.size() * vocab, 0.0);
    for (std::size_t i = 0; i < p.chars.size(); ++i) {
        if (p.chars[i] >= vocab) throw CodeOutOfRange("char code >= vocab size");
        v[i * vocab + p.chars[i]] = 1.0;
    }
    return v;
}

std::string format_patch_dump(const PatchSequence& ps) {
    std::string out;
    for (const Patch& p : ps.patches) {
        for (std::size_t i = 0; i < p.chars.size(); ++i) {
            if (i) out += ' ';
            out += std::to_string(p.chars[i]);
        }
        out += '\n';
    }
    return out;
}

PatchSequence parse_patch_dump(std::string_view text, std::size_t patch_size,
                               std::size_t vocab) {
    PatchSequence ps;
    ps.patch_size = patch_size;
    ps.vocab = vocab;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t nl = text.find('\n', pos);
        std::string line(text.substr(pos, (nl == std::string_view::npos ? text.size() : nl) - pos));
        pos = nl == std::string_view::npos ? text.size() : nl + 1;
        if (line.empty()) continue;
        Patch p;
        std::istringstream in(line);
        unsigned code;
        while (in >> code) {
            if (code >= vocab) throw CodeOutOfRange("dump code >= vocab size");
            p.chars.push_back(static_cast<std::uint16_t>(code));
        }
        if (p.chars.size() != patch_size)
            throw MalformedPatch("dump line is not one patch of " +
                                 std::to_string(patch_size) + " codes");
        if (all_code(p, bos_code(vocab)) || all_code(p, eos_code(vocab)))
            p.kind = PatchKind::Special;
        ps.patches.push_back(std::move(p));
        ps.source_spans.push_back({});
    }
    return ps;
}

void save_patch_dump(const std::string& path, const PatchSequence& ps) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write patch dump: " + path);
    out << format_patch_dump(ps);
}

PatchSequence load_patch_dump(const std::string& path, std::size_t patch_size,
                              std::size_t vocab) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open patch dump: " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_patch_dump(buf.str(), patch_size, vocab);
}

} // namespace barstream::patching
