#pragma once

#include "stone/audio.hpp"
#include "stone/random.hpp"

#include <complex>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace stone {

inline constexpr int kCqtBins = 99;
inline constexpr int kBinsPerOctave = 12;
inline constexpr int kCropBins = 84;  // 7 octaves
inline constexpr int kMaxCrop = kCqtBins - kCropBins;
inline constexpr double kMinFrequency = 27.5;

struct CqtParams {
    double sample_rate = kCanonicalSampleRate;
    int hop = 1024;
    /// Magnitudes are stored as log1p(log_gain * |X|); a full-scale sine at
    /// a bin centre has |X| = 1.
    double log_gain = 10.0;
    /// Spectral kernel entries below this fraction of the bin's peak are dropped.
    double kernel_threshold = 0.0054;

    friend bool operator==(const CqtParams&, const CqtParams&) = default;
};

/// Frequency rows x time frames, log-compressed magnitudes. Storage is
/// frame-major so that one frame is contiguous.
template <int Rows>
struct Spectrogram {
    static constexpr int kRows = Rows;

    int frames = 0;
    std::vector<float> data;

    Spectrogram() = default;
    explicit Spectrogram(int n_frames)
        : frames(n_frames), data(static_cast<std::size_t>(n_frames) * Rows, 0.0f)
    {
    }

    int rows() const { return Rows; }
    float& at(int row, int frame) { return data[static_cast<std::size_t>(frame) * Rows + row]; }
    float at(int row, int frame) const
    {
        return data[static_cast<std::size_t>(frame) * Rows + row];
    }
    std::span<const float> frame(int t) const
    {
        return {data.data() + static_cast<std::size_t>(t) * Rows, static_cast<std::size_t>(Rows)};
    }

    /// Frames [begin, begin + count).
    Spectrogram slice_frames(int begin, int count) const;

    friend bool operator==(const Spectrogram&, const Spectrogram&) = default;
};

using CqtMatrix = Spectrogram<kCqtBins>;

/// 84-row crop of a CqtMatrix.
struct CroppedCqt : Spectrogram<kCropBins> {
    int crop_offset = 0;
};

double cqt_center_frequency(int bin);

/// Constant-Q filterbank (12 bins/octave from 27.5 Hz, 99 bins) evaluated
/// through sparse spectral kernels. Construction is the expensive part;
/// compute() is const and safe to call concurrently.
class ConstantQTransform {
public:
    explicit ConstantQTransform(const CqtParams& params = {});

    const CqtParams& params() const { return params_; }
    std::size_t fft_size() const { return fft_size_; }
    /// Longest temporal kernel, in samples.
    std::size_t window_length() const { return window_length_; }

    /// Frames are centred at multiples of the hop; the signal is zero-padded.
    CqtMatrix compute(std::span<const float> samples) const;

private:
    struct SparseKernel {
        std::size_t first = 0;
        std::vector<std::complex<double>> weights;
    };

    CqtParams params_;
    std::size_t fft_size_ = 0;
    std::size_t window_length_ = 0;
    std::vector<SparseKernel> kernels_;
};

/// Throws std::invalid_argument "insufficient bandwidth" when the sample rate
/// cannot represent the top bin and "clip too short" when the clip is shorter
/// than the longest analysis window.
CqtMatrix compute_cqt(const AudioClip& clip, const CqtParams& params = {});

/// Trims the c lowest and (15 - c) highest rows: output row p is input row p + c.
CroppedCqt transpose_crop(const CqtMatrix& x, int c);

/// Crop in which content sits `semitones` rows higher than in the crop for 0,
/// i.e. transpose_crop(x, 15 - semitones). Training uses this so that a larger
/// interval is an upward transposition.
CroppedCqt pitch_transpose(const CqtMatrix& x, int semitones);

struct SegmentPair {
    CqtMatrix xa;
    CqtMatrix xb;
    std::string source_id;
    double start_a = 0.0;  // seconds
    double start_b = 0.0;
};

int frames_for_duration(double seconds, const CqtParams& params);

/// Draws two disjoint, equally long frame windows from a whole-track CQT.
SegmentPair sample_segment_pair(const CqtMatrix& track, int segment_frames, RandomSource& rng,
                                const CqtParams& params = {}, std::string source_id = {});

/// compute_cqt followed by sample_segment_pair. Throws if the clip is shorter
/// than two segments.
SegmentPair extract_segment_pair(const AudioClip& clip, double segment_seconds, RandomSource& rng,
                                 const CqtParams& params = {}, std::string source_id = {});

}  // namespace stone
