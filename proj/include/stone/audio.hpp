#pragma once

#include <filesystem>
#include <span>
#include <vector>

namespace stone {

inline constexpr double kCanonicalSampleRate = 22050.0;

/// Mono waveform.
struct AudioClip {
    std::vector<float> samples;
    double sample_rate = kCanonicalSampleRate;

    double duration() const
    {
        return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
    }
};

/// Decodes WAV or FLAC, mixes down to mono and resamples to `sample_rate`.
/// Throws DataError if the file cannot be opened or decoded.
AudioClip load_audio(const std::filesystem::path& path,
                     double sample_rate = kCanonicalSampleRate);

/// Writes 16-bit PCM mono WAV.
void write_wav(const std::filesystem::path& path, const AudioClip& clip);

}  // namespace stone
