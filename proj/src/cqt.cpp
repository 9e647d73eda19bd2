#include "stone/cqt.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <memory>
#include <mutex>
#include <numbers>
#include <stdexcept>

namespace stone {

namespace {

// FFTW's planner is not reentrant.
std::mutex& fftw_planner_mutex()
{
    static std::mutex m;
    return m;
}

struct FftwFree {
    void operator()(void* p) const { fftw_free(p); }
};

template <typename T>
using FftwBuffer = std::unique_ptr<T[], FftwFree>;

template <typename T>
FftwBuffer<T> fftw_alloc(std::size_t n)
{
    return FftwBuffer<T>(static_cast<T*>(fftw_malloc(sizeof(T) * n)));
}

double quality_factor()
{
    return 1.0 / (std::pow(2.0, 1.0 / kBinsPerOctave) - 1.0);
}

std::size_t kernel_length(int bin, double sample_rate)
{
    return static_cast<std::size_t>(std::ceil(quality_factor() * sample_rate / cqt_center_frequency(bin)));
}

void check_bandwidth(double sample_rate)
{
    const double top = kMinFrequency * std::pow(2.0, static_cast<double>(kCqtBins) / kBinsPerOctave);
    if (sample_rate < 2.0 * top) {
        throw std::invalid_argument("insufficient bandwidth: sample rate " +
                                    std::to_string(sample_rate) + " Hz cannot represent " +
                                    std::to_string(top) + " Hz");
    }
}

}  // namespace

template <int Rows>
Spectrogram<Rows> Spectrogram<Rows>::slice_frames(int begin, int count) const
{
    if (begin < 0 || count < 0 || begin + count > frames) {
        throw std::out_of_range("frame slice out of range");
    }
    Spectrogram out(count);
    std::copy_n(data.begin() + static_cast<std::ptrdiff_t>(begin) * Rows,
                static_cast<std::size_t>(count) * Rows, out.data.begin());
    return out;
}

template struct Spectrogram<kCqtBins>;
template struct Spectrogram<kCropBins>;

double cqt_center_frequency(int bin)
{
    return kMinFrequency * std::pow(2.0, static_cast<double>(bin) / kBinsPerOctave);
}

ConstantQTransform::ConstantQTransform(const CqtParams& params) : params_(params)
{
    check_bandwidth(params_.sample_rate);
    if (params_.hop <= 0) {
        throw std::invalid_argument("CQT hop must be positive");
    }
    window_length_ = kernel_length(0, params_.sample_rate);
    fft_size_ = 1;
    while (fft_size_ < window_length_) {
        fft_size_ *= 2;
    }

    const std::size_t n = fft_size_;
    auto time = fftw_alloc<fftw_complex>(n);
    auto spectrum = fftw_alloc<fftw_complex>(n);
    fftw_plan plan;
    {
        std::lock_guard lock(fftw_planner_mutex());
        plan = fftw_plan_dft_1d(static_cast<int>(n), time.get(), spectrum.get(), FFTW_FORWARD,
                                FFTW_ESTIMATE);
    }

    kernels_.resize(kCqtBins);
    for (int bin = 0; bin < kCqtBins; ++bin) {
        const std::size_t len = kernel_length(bin, params_.sample_rate);
        const double freq = cqt_center_frequency(bin);
        std::fill_n(&time[0][0], 2 * n, 0.0);

        // Hann window scaled so that a unit sine at the centre frequency
        // yields magnitude 1.
        double window_sum = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            window_sum += 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (i + 0.5) / len);
        }
        const double scale = 2.0 / window_sum;
        const std::size_t origin = n / 2 - len / 2;
        for (std::size_t i = 0; i < len; ++i) {
            const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (i + 0.5) / len);
            const double rel = static_cast<double>(origin + i) - static_cast<double>(n / 2);
            const double phase = 2.0 * std::numbers::pi * freq * rel / params_.sample_rate;
            time[origin + i][0] = scale * w * std::cos(phase);
            time[origin + i][1] = scale * w * std::sin(phase);
        }
        fftw_execute(plan);

        // Keep only non-negative frequencies: the input is real, so the
        // negative half mirrors the positive one and the kernel is analytic
        // up to the threshold.
        const std::size_t half = n / 2 + 1;
        double peak = 0.0;
        for (std::size_t j = 0; j < half; ++j) {
            peak = std::max(peak, std::hypot(spectrum[j][0], spectrum[j][1]));
        }
        const double floor = params_.kernel_threshold * peak;
        std::size_t first = half;
        std::size_t last = 0;
        for (std::size_t j = 0; j < half; ++j) {
            if (std::hypot(spectrum[j][0], spectrum[j][1]) >= floor) {
                first = std::min(first, j);
                last = j;
            }
        }
        SparseKernel& k = kernels_[bin];
        k.first = first;
        for (std::size_t j = first; j <= last; ++j) {
            // conj(K) / N, folded once here so compute() is a plain dot product.
            k.weights.emplace_back(spectrum[j][0] / n, -spectrum[j][1] / n);
        }
    }

    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
}

CqtMatrix ConstantQTransform::compute(std::span<const float> samples) const
{
    const std::size_t n = fft_size_;
    const std::size_t half = n / 2 + 1;
    const int frames = 1 + static_cast<int>(samples.size() / static_cast<std::size_t>(params_.hop));

    auto frame = fftw_alloc<double>(n);
    auto spectrum = fftw_alloc<fftw_complex>(half);
    fftw_plan plan;
    {
        std::lock_guard lock(fftw_planner_mutex());
        plan = fftw_plan_dft_r2c_1d(static_cast<int>(n), frame.get(), spectrum.get(), FFTW_ESTIMATE);
    }

    CqtMatrix out(frames);
    const auto total = static_cast<std::ptrdiff_t>(samples.size());
    for (int t = 0; t < frames; ++t) {
        const std::ptrdiff_t start =
            static_cast<std::ptrdiff_t>(t) * params_.hop - static_cast<std::ptrdiff_t>(n / 2);
        for (std::size_t i = 0; i < n; ++i) {
            const std::ptrdiff_t s = start + static_cast<std::ptrdiff_t>(i);
            frame[i] = (s >= 0 && s < total) ? samples[static_cast<std::size_t>(s)] : 0.0;
        }
        fftw_execute(plan);
        for (int bin = 0; bin < kCqtBins; ++bin) {
            const SparseKernel& k = kernels_[bin];
            std::complex<double> acc = 0.0;
            for (std::size_t j = 0; j < k.weights.size(); ++j) {
                const fftw_complex& x = spectrum[k.first + j];
                acc += std::complex<double>(x[0], x[1]) * k.weights[j];
            }
            out.at(bin, t) = static_cast<float>(std::log1p(params_.log_gain * std::abs(acc)));
        }
    }

    std::lock_guard lock(fftw_planner_mutex());
    fftw_destroy_plan(plan);
    return out;
}

CqtMatrix compute_cqt(const AudioClip& clip, const CqtParams& params)
{
    check_bandwidth(clip.sample_rate);
    CqtParams effective = params;
    effective.sample_rate = clip.sample_rate;

    thread_local std::unique_ptr<ConstantQTransform> cached;
    if (!cached || !(cached->params() == effective)) {
        cached = std::make_unique<ConstantQTransform>(effective);
    }
    if (clip.samples.size() < cached->window_length()) {
        throw std::invalid_argument("clip too short: " + std::to_string(clip.samples.size()) +
                                    " samples, need at least " +
                                    std::to_string(cached->window_length()));
    }
    return cached->compute(clip.samples);
}

CroppedCqt transpose_crop(const CqtMatrix& x, int c)
{
    if (c < 0 || c > kMaxCrop) {
        throw std::invalid_argument("crop out of range: " + std::to_string(c));
    }
    CroppedCqt out;
    out.frames = x.frames;
    out.crop_offset = c;
    out.data.resize(static_cast<std::size_t>(x.frames) * kCropBins);
    for (int t = 0; t < x.frames; ++t) {
        const auto src = x.frame(t).subspan(static_cast<std::size_t>(c), kCropBins);
        std::copy(src.begin(), src.end(), out.data.begin() + static_cast<std::ptrdiff_t>(t) * kCropBins);
    }
    return out;
}

CroppedCqt pitch_transpose(const CqtMatrix& x, int semitones)
{
    if (semitones < 0 || semitones > kMaxCrop) {
        throw std::invalid_argument("crop out of range: " + std::to_string(semitones));
    }
    return transpose_crop(x, kMaxCrop - semitones);
}

int frames_for_duration(double seconds, const CqtParams& params)
{
    return static_cast<int>(std::lround(seconds * params.sample_rate / params.hop));
}

SegmentPair sample_segment_pair(const CqtMatrix& track, int segment_frames, RandomSource& rng,
                                const CqtParams& params, std::string source_id)
{
    const int slack = track.frames - 2 * segment_frames;
    if (segment_frames <= 0 || slack < 0) {
        throw std::invalid_argument("clip too short: need two disjoint windows of " +
                                    std::to_string(segment_frames) + " frames, have " +
                                    std::to_string(track.frames));
    }
    const int first = static_cast<int>(uniform_int(rng, 0, slack));
    const int second = first + segment_frames + static_cast<int>(uniform_int(rng, 0, slack - first));
    const bool swap = uniform_int(rng, 0, 1) == 1;
    const int start_a = swap ? second : first;
    const int start_b = swap ? first : second;

    SegmentPair pair;
    pair.xa = track.slice_frames(start_a, segment_frames);
    pair.xb = track.slice_frames(start_b, segment_frames);
    pair.source_id = std::move(source_id);
    pair.start_a = static_cast<double>(start_a) * params.hop / params.sample_rate;
    pair.start_b = static_cast<double>(start_b) * params.hop / params.sample_rate;
    return pair;
}

SegmentPair extract_segment_pair(const AudioClip& clip, double segment_seconds, RandomSource& rng,
                                 const CqtParams& params, std::string source_id)
{
    if (clip.duration() < 2.0 * segment_seconds) {
        throw std::invalid_argument("clip too short: " + std::to_string(clip.duration()) +
                                    " s, need at least " + std::to_string(2.0 * segment_seconds) +
                                    " s");
    }
    CqtParams effective = params;
    effective.sample_rate = clip.sample_rate;
    return sample_segment_pair(compute_cqt(clip, effective),
                               frames_for_duration(segment_seconds, effective), rng, effective,
                               std::move(source_id));
}

}  // namespace stone
