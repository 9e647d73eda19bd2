#pragma once

#include "stone/cqt.hpp"
#include "stone/profiles.hpp"
#include "stone/random.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace stone {

inline constexpr int kOctaves = kCropBins / kNumChroma;

/// Relative spread between the two mode channels of the final projection at
/// initialisation.
inline constexpr double kModeSplitInit = 0.01;

/// Architecture of the fully convolutional backbone. Every block is a
/// ConvNeXt block (depthwise conv, layer norm, pointwise expansion, GELU,
/// pointwise projection, residual) followed by layer norm and a time-only
/// strided convolution. Frequency resolution is never reduced.
struct ChromaNetConfig {
    int n_blocks = 7;
    std::vector<int> channels = {8, 16, 32, 32, 64, 64, 64};
    std::vector<int> time_downsample = {2, 2, 2, 2, 2, 2, 2};
    double width_multiplier = 1.0;
    int kernel_rows = 7;
    int kernel_frames = 7;
    int expansion = 4;
    /// Average pooling over time applied to the input before the stem.
    int input_time_pool = 1;
    /// 1: key signature profile; 2: key x mode matrix.
    int out_channels = 1;
    /// Replace the octave-equivalence operator by a trainable 84 -> 12 layer.
    bool ablation_fc_head = false;

    /// Channel counts after the width multiplier.
    std::vector<int> widths() const;
    /// Throws ConfigError.
    void validate() const;

    friend bool operator==(const ChromaNetConfig&, const ChromaNetConfig&) = default;
};

/// Width-reduced network used for desk-scale runs: 4 blocks, channels
/// {8, 16, 16, 32}, input pooled over 4 frames.
ChromaNetConfig desk_chromanet_config(int out_channels = 2);
/// Network by preset name ("desk" or "paper"). Throws ConfigError.
ChromaNetConfig chromanet_preset(const std::string& name, int out_channels = 2);

/// Named view into the flat parameter vector.
struct ParameterSlice {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
};

/// Running per-mode-channel statistics of the structured head. There are no
/// learnable affine terms.
struct NormState {
    std::array<double, 2> mean{0.0, 0.0};
    std::array<double, 2> var{1.0, 1.0};
    std::uint64_t updates = 0;
    double momentum = 0.1;
    double eps = 1e-5;

    friend bool operator==(const NormState&, const NormState&) = default;
};

template <typename S>
class BasicChromaNet {
public:
    /// Intermediate activations kept for backpropagation.
    struct Trace;

    explicit BasicChromaNet(ChromaNetConfig config);
    ~BasicChromaNet();
    BasicChromaNet(const BasicChromaNet&);
    BasicChromaNet& operator=(const BasicChromaNet&);
    BasicChromaNet(BasicChromaNet&&) noexcept;
    BasicChromaNet& operator=(BasicChromaNet&&) noexcept;

    const ChromaNetConfig& config() const { return config_; }

    std::span<S> parameters() { return params_; }
    std::span<const S> parameters() const { return params_; }
    const std::vector<ParameterSlice>& layout() const { return layout_; }
    std::size_t parameter_count() const { return params_.size(); }

    /// Random initialisation; the final projection starts small.
    void initialize(RandomSource& rng);
    /// Zeroes the projection feeding the time pooling.
    void zero_final_projection();

    /// Backbone output: out_channels x 84 values after global time pooling.
    /// Throws std::invalid_argument "bad frequency span" if x does not have
    /// 84 rows. The trace, when given, is filled for backward().
    std::vector<S> forward(const Spectrogram<kCropBins>& x, Trace* trace = nullptr) const;

    /// Accumulates d(loss)/d(parameters) into grad given d(loss)/d(output).
    void backward(const Trace& trace, std::span<const S> d_output, std::span<S> grad) const;

    /// Trainable dense 84 -> 12 layer plus softmax (ablation only).
    Ksp fc_head(std::span<const S> features) const;
    /// Accumulates the head's parameter gradient; returns d(loss)/d(features).
    std::vector<double> fc_head_backward(std::span<const S> features, const Ksp& d_logits, std::span<S> grad) const;

    /// Row counts of every intermediate activation on the last forward pass
    /// through a trace; used to check frequency preservation.
    static std::vector<int> activation_rows(const Trace& trace);

private:
    struct Layers;

    ChromaNetConfig config_;
    std::vector<S> params_;
    std::vector<ParameterSlice> layout_;
    std::unique_ptr<Layers> layers_;
};

extern template class BasicChromaNet<float>;
extern template class BasicChromaNet<double>;

using ChromaNet = BasicChromaNet<float>;

template <typename S>
struct BasicChromaNet<S>::Trace {
    struct Impl;
    std::unique_ptr<Impl> impl;

    Trace();
    ~Trace();
    Trace(Trace&&) noexcept;
    Trace& operator=(Trace&&) noexcept;
};

/// Sums the 84 coefficients across octaves for each chroma.
std::array<double, kNumChroma> octave_sum(std::span<const double> v);

/// g: octave sums followed by a softmax. Throws on length != 84.
Ksp octave_pool_g(std::span<const double> v);

/// Backpropagates d(loss)/d(Ksp) through g to the 84 inputs.
std::vector<double> octave_pool_g_backward(const Ksp& y, const Ksp& d_y);

/// Structured head at inference: per-channel octave sums, normalisation with
/// frozen statistics, softmax over all 24 logits. Throws std::logic_error
/// "normalization statistics missing" if the statistics were never set.
KeyModeMatrix structured_head(std::span<const double> v, const NormState& norm);

/// Structured head in training mode over a batch: statistics come from the
/// batch (all items x 12 chromas per channel) and the running statistics are
/// updated.
class StructuredHeadBatch {
public:
    std::vector<KeyModeMatrix> forward(const std::vector<std::vector<double>>& features,
                                       NormState& norm);
    /// d(loss)/d(Y) per item -> d(loss)/d(features) per item.
    std::vector<std::vector<double>> backward(const std::vector<KeyModeMatrix>& d_y) const;

private:
    std::vector<KeyModeMatrix> outputs_;
    std::vector<std::array<double, 24>> normalized_;
    std::array<double, 2> inv_std_{};
};

/// d(loss)/d(logits) of a softmax given its output and d(loss)/d(output).
template <std::size_t N>
std::array<double, N> softmax_backward(const std::array<double, N>& y, const std::array<double, N>& d_y)
{
    double dot = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
        dot += y[i] * d_y[i];
    }
    std::array<double, N> d_logits{};
    for (std::size_t i = 0; i < N; ++i) {
        d_logits[i] = y[i] * (d_y[i] - dot);
    }
    return d_logits;
}

}  // namespace stone
