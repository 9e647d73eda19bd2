#include "stone/keys.hpp"

#include <array>
#include <stdexcept>

namespace stone {

namespace {

constexpr std::array<const char*, kNumChroma> kChromaNames = {
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B"};

int natural_chroma(char letter)
{
    switch (letter) {
    case 'C': return 0;
    case 'D': return 2;
    case 'E': return 4;
    case 'F': return 5;
    case 'G': return 7;
    case 'A': return 9;
    case 'B': return 11;
    default: return -1;
    }
}

}  // namespace

int KeyLabel::key_signature() const
{
    return mode == Mode::Major ? tonic : wrap_chroma(tonic + 3);
}

KeyLabel KeyLabel::from_index24(int index)
{
    if (index < 0 || index >= 2 * kNumChroma) {
        throw std::out_of_range("key index out of range: " + std::to_string(index));
    }
    return {index % kNumChroma, index < kNumChroma ? Mode::Major : Mode::Minor};
}

KeyLabel KeyLabel::from_signature(int signature, Mode mode)
{
    const int q = wrap_chroma(signature);
    return {mode == Mode::Major ? q : wrap_chroma(q - 3), mode};
}

KeyLabel relative_key(const KeyLabel& key)
{
    return KeyLabel::from_signature(key.key_signature(),
                                    key.mode == Mode::Major ? Mode::Minor : Mode::Major);
}

KeyLabel parallel_key(const KeyLabel& key)
{
    return {key.tonic, key.mode == Mode::Major ? Mode::Minor : Mode::Major};
}

KeyLabel parse_key(std::string_view text)
{
    const auto fail = [&]() -> KeyLabel {
        throw std::invalid_argument("unknown key string '" + std::string(text) + "'");
    };
    if (text.size() < 5) {
        return fail();
    }
    int chroma = natural_chroma(text[0]);
    if (chroma < 0) {
        return fail();
    }
    std::size_t pos = 1;
    if (text[pos] == '#') {
        ++chroma;
        ++pos;
    } else if (text[pos] == 'b') {
        --chroma;
        ++pos;
    }
    if (text[pos] != ':') {
        return fail();
    }
    const std::string_view mode = text.substr(pos + 1);
    KeyLabel key;
    key.tonic = wrap_chroma(chroma);
    if (mode == "maj") {
        key.mode = Mode::Major;
    } else if (mode == "min") {
        key.mode = Mode::Minor;
    } else {
        return fail();
    }
    return key;
}

std::string format_key(const KeyLabel& key)
{
    return std::string(kChromaNames[wrap_chroma(key.tonic)]) +
           (key.mode == Mode::Major ? ":maj" : ":min");
}

const char* chroma_name(int chroma)
{
    return kChromaNames[wrap_chroma(chroma)];
}

}  // namespace stone
