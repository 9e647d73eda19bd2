#pragma once

#include "stone/keys.hpp"

#include <array>
#include <cstddef>
#include <span>

namespace stone {

/// Key signature profile: a distribution over the 12 chromas.
struct Ksp {
    std::array<double, kNumChroma> values{};

    double& operator[](std::size_t q) { return values[q]; }
    double operator[](std::size_t q) const { return values[q]; }

    static Ksp uniform();
    static Ksp one_hot(int q);
    /// Softmax of 12 logits.
    static Ksp from_logits(std::span<const double> logits);

    double sum() const;
    /// Lowest index wins ties.
    int argmax() const;
    /// Shifts content towards higher indices: result[q] = values[q - k].
    Ksp rolled(int k) const;
};

/// Distribution over {major, minor}; index 0 is major.
struct ModeVector {
    std::array<double, 2> values{};

    double& operator[](std::size_t m) { return values[m]; }
    double operator[](std::size_t m) const { return values[m]; }

    static ModeVector one_hot(Mode mode);
    double sum() const { return values[0] + values[1]; }
};

/// Joint distribution over 12 key signatures x 2 modes, stored row-major
/// (q * 2 + m).
struct KeyModeMatrix {
    std::array<double, 2 * kNumChroma> values{};

    double& at(int q, int m) { return values[static_cast<std::size_t>(q * 2 + m)]; }
    double at(int q, int m) const { return values[static_cast<std::size_t>(q * 2 + m)]; }

    static KeyModeMatrix uniform();
    static KeyModeMatrix one_hot(int q, int m);

    double sum() const;
    /// Rows shifted towards higher chroma indices by k.
    KeyModeMatrix rolled(int k) const;
    /// Swaps the two mode columns.
    KeyModeMatrix mode_swapped() const;
};

/// Row sums: the key-signature marginal.
Ksp lambda_of(const KeyModeMatrix& y);
/// Column sums: the mode marginal, invariant to row shifts.
ModeVector mu_of(const KeyModeMatrix& y);

/// Shannon entropy in bits of a histogram of class counts.
double histogram_entropy_bits(std::span<const std::size_t> counts);

}  // namespace stone
