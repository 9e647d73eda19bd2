#pragma once

#include <cstdint>
#include <string>
#include <string_view>

namespace stone {

inline constexpr int kNumChroma = 12;

enum class Mode : std::uint8_t { Major = 0, Minor = 1 };

/// A major or minor key. Chroma 0 is C.
///
/// The key-signature index identifies a signature with the tonic of its
/// major key, so C:maj and A:min both map to signature 0.
struct KeyLabel {
    int tonic = 0;
    Mode mode = Mode::Major;

    int key_signature() const;

    /// 0..23; majors first, then minors, each in chroma order.
    int index24() const { return tonic + (mode == Mode::Minor ? kNumChroma : 0); }
    static KeyLabel from_index24(int index);

    /// Key whose signature chroma is `signature` with the given mode.
    static KeyLabel from_signature(int signature, Mode mode);

    friend bool operator==(const KeyLabel&, const KeyLabel&) = default;
};

inline int wrap_chroma(int q) { return ((q % kNumChroma) + kNumChroma) % kNumChroma; }

KeyLabel relative_key(const KeyLabel& key);
KeyLabel parallel_key(const KeyLabel& key);

/// Parses "<A-G>[#|b]:<maj|min>". Throws std::invalid_argument on anything else.
KeyLabel parse_key(std::string_view text);

/// Canonical form, sharps only ("F#:min").
std::string format_key(const KeyLabel& key);

const char* chroma_name(int chroma);

}  // namespace stone
