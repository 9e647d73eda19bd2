#include "stone/profiles.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace stone {

Ksp Ksp::uniform()
{
    Ksp y;
    y.values.fill(1.0 / kNumChroma);
    return y;
}

Ksp Ksp::one_hot(int q)
{
    Ksp y;
    y.values[static_cast<std::size_t>(wrap_chroma(q))] = 1.0;
    return y;
}

Ksp Ksp::from_logits(std::span<const double> logits)
{
    if (logits.size() != kNumChroma) {
        throw std::invalid_argument("expected 12 logits");
    }
    const double top = *std::max_element(logits.begin(), logits.end());
    Ksp y;
    double total = 0.0;
    for (std::size_t q = 0; q < kNumChroma; ++q) {
        y.values[q] = std::exp(logits[q] - top);
        total += y.values[q];
    }
    for (double& v : y.values) {
        v /= total;
    }
    return y;
}

double Ksp::sum() const
{
    return std::accumulate(values.begin(), values.end(), 0.0);
}

int Ksp::argmax() const
{
    return static_cast<int>(std::max_element(values.begin(), values.end()) - values.begin());
}

Ksp Ksp::rolled(int k) const
{
    Ksp out;
    for (int q = 0; q < kNumChroma; ++q) {
        out.values[static_cast<std::size_t>(q)] = values[static_cast<std::size_t>(wrap_chroma(q - k))];
    }
    return out;
}

ModeVector ModeVector::one_hot(Mode mode)
{
    ModeVector mu;
    mu.values[static_cast<std::size_t>(mode)] = 1.0;
    return mu;
}

KeyModeMatrix KeyModeMatrix::uniform()
{
    KeyModeMatrix y;
    y.values.fill(1.0 / (2 * kNumChroma));
    return y;
}

KeyModeMatrix KeyModeMatrix::one_hot(int q, int m)
{
    KeyModeMatrix y;
    y.at(wrap_chroma(q), m) = 1.0;
    return y;
}

double KeyModeMatrix::sum() const
{
    return std::accumulate(values.begin(), values.end(), 0.0);
}

KeyModeMatrix KeyModeMatrix::rolled(int k) const
{
    KeyModeMatrix out;
    for (int q = 0; q < kNumChroma; ++q) {
        for (int m = 0; m < 2; ++m) {
            out.at(q, m) = at(wrap_chroma(q - k), m);
        }
    }
    return out;
}

KeyModeMatrix KeyModeMatrix::mode_swapped() const
{
    KeyModeMatrix out;
    for (int q = 0; q < kNumChroma; ++q) {
        out.at(q, 0) = at(q, 1);
        out.at(q, 1) = at(q, 0);
    }
    return out;
}

Ksp lambda_of(const KeyModeMatrix& y)
{
    Ksp lambda;
    for (int q = 0; q < kNumChroma; ++q) {
        lambda[static_cast<std::size_t>(q)] = y.at(q, 0) + y.at(q, 1);
    }
    return lambda;
}

ModeVector mu_of(const KeyModeMatrix& y)
{
    ModeVector mu;
    for (int q = 0; q < kNumChroma; ++q) {
        mu[0] += y.at(q, 0);
        mu[1] += y.at(q, 1);
    }
    return mu;
}

double histogram_entropy_bits(std::span<const std::size_t> counts)
{
    const double total = static_cast<double>(std::accumulate(counts.begin(), counts.end(), std::size_t{0}));
    if (total == 0.0) {
        return 0.0;
    }
    double h = 0.0;
    for (std::size_t c : counts) {
        if (c > 0) {
            const double p = static_cast<double>(c) / total;
            h -= p * std::log2(p);
        }
    }
    return h;
}

}  // namespace stone
