#pragma once

#include "stone/audio.hpp"
#include "stone/chromanet.hpp"
#include "stone/profiles.hpp"
#include "stone/random.hpp"

#include <cmath>
#include <numbers>
#include <vector>

namespace stone::test {

inline AudioClip sine(double freq, double seconds, double sample_rate = kCanonicalSampleRate, double amp = 0.5)
{
    AudioClip clip;
    clip.sample_rate = sample_rate;
    clip.samples.resize(static_cast<std::size_t>(seconds * sample_rate));
    for (std::size_t n = 0; n < clip.samples.size(); ++n) {
        clip.samples[n] = static_cast<float>(amp * std::sin(2.0 * std::numbers::pi * freq * n / sample_rate));
    }
    return clip;
}

/// Sum of sines with a few harmonics for each MIDI-style pitch (A0 = 0).
inline AudioClip chord(const std::vector<int>& semitones_above_a0, double seconds)
{
    AudioClip clip;
    clip.samples.assign(static_cast<std::size_t>(seconds * clip.sample_rate), 0.0f);
    for (int p : semitones_above_a0) {
        const double f0 = 27.5 * std::pow(2.0, p / 12.0);
        for (int h = 1; h <= 4; ++h) {
            for (std::size_t n = 0; n < clip.samples.size(); ++n) {
                clip.samples[n] += static_cast<float>(
                    0.1 / h * std::sin(2.0 * std::numbers::pi * f0 * h * n / clip.sample_rate));
            }
        }
    }
    return clip;
}

inline Ksp random_ksp(RandomSource& rng, double spread = 3.0)
{
    std::array<double, kNumChroma> logits{};
    for (double& l : logits) {
        l = spread * normal(rng);
    }
    return Ksp::from_logits(logits);
}

inline ModeVector random_mode(RandomSource& rng)
{
    const double p = uniform_real(rng, 0.01, 0.99);
    ModeVector m;
    m[0] = p;
    m[1] = 1.0 - p;
    return m;
}

/// Small network for fast tests; frequency handling is the full 84 rows.
inline ChromaNetConfig tiny_config(int out_channels = 1)
{
    ChromaNetConfig c;
    c.n_blocks = 2;
    c.channels = {3, 4};
    c.time_downsample = {2, 2};
    c.kernel_rows = 3;
    c.kernel_frames = 3;
    c.expansion = 2;
    c.out_channels = out_channels;
    return c;
}

template <int Rows>
Spectrogram<Rows> random_spectrogram(RandomSource& rng, int frames)
{
    Spectrogram<Rows> x(frames);
    for (float& v : x.data) {
        v = static_cast<float>(uniform_real(rng));
    }
    return x;
}

inline CroppedCqt random_crop(RandomSource& rng, int frames)
{
    CroppedCqt x;
    static_cast<Spectrogram<kCropBins>&>(x) = random_spectrogram<kCropBins>(rng, frames);
    return x;
}

}  // namespace stone::test
