#pragma once

#include "stone/profiles.hpp"

#include <array>
#include <complex>

namespace stone {

using Phasor = std::complex<double>;

/// Throws std::invalid_argument "degenerate CoF frequency" unless gcd(omega, 12) == 1.
void check_cof_frequency(int omega);

/// sum_q y[q] exp(-2 pi i omega q / 12).
Phasor ksp_dft(const Ksp& y, int omega);

/// Circular cross-correlation R[k] = sum_q a[q] b[(q + k) mod 12].
std::array<double, kNumChroma> circular_cross_correlation(const Ksp& a, const Ksp& b);

/// Cross-power spectral density: ksp_dft(a) * conj(ksp_dft(b)).
Phasor cpsd(const Ksp& a, const Ksp& b, int omega);

/// Unit phasor the CPSD of a pair takes when b is a rolled by k.
Phasor cof_target(int k, int omega);

/// Gradient of a scalar loss w.r.t. the two profiles it compares.
struct PairGradient {
    Ksp d_first;
    Ksp d_second;
};

/// Half squared distance on the complex plane between the CPSD of (a, b) and
/// the phasor of interval k. Zero exactly when a and b are one-hot and b is
/// a rolled by k (mod 12). Requires -12 <= k <= 12.
double cof_distance(const Ksp& a, const Ksp& b, int k, int omega, PairGradient* grad = nullptr);

/// Same-crop responses of the two segments.
double loss_invariance(const Ksp& a_c, const Ksp& b_c, int omega, PairGradient* grad = nullptr);
/// Segment A under crops c and c + k.
double loss_equivariance(const Ksp& a_c, const Ksp& a_ck, int k, int omega,
                         PairGradient* grad = nullptr);
/// Segment B under crop c against segment A under crop c + k.
double loss_combined(const Ksp& b_c, const Ksp& a_ck, int k, int omega,
                     PairGradient* grad = nullptr);

/// The three forward passes of one training item.
template <typename Profile>
struct Responses {
    Profile a_c;   // T_c x_A
    Profile b_c;   // T_c x_B
    Profile a_ck;  // T_{c+k} x_A
};

struct LossBreakdown {
    double l_ab = 0.0;
    double l_aa = 0.0;
    double l_ba = 0.0;
    std::array<double, 3> bce{};
    double total = 0.0;

    double cpsd_total() const { return l_ab + l_aa + l_ba; }
    double bce_total() const { return bce[0] + bce[1] + bce[2]; }

    LossBreakdown& operator+=(const LossBreakdown& other);
    LossBreakdown& operator*=(double scale);
};

/// Sum of the invariance, equivariance and combined terms.
LossBreakdown cpsd_loss(const Responses<Ksp>& y, int k, int omega,
                        Responses<Ksp>* grad = nullptr);

inline constexpr double kBceEpsilon = 1e-7;

/// -sum_m target[m] log(clamp(prediction[m], eps, 1 - eps)).
double bce(const ModeVector& target, const ModeVector& prediction,
           ModeVector* d_target = nullptr, ModeVector* d_prediction = nullptr);

/// BCE(mu_B_c, mu_A_c) + BCE(mu_A_c, mu_A_ck) + BCE(mu_B_c, mu_A_ck); the
/// breakdown's cpsd fields are left at zero.
LossBreakdown bce_loss(const Responses<ModeVector>& mu, Responses<ModeVector>* grad = nullptr);

struct SupervisedOracles {
    Ksp lambda_ref;
    ModeVector mu_ref;
};

/// One-hot targets standing in for the B-segment responses: lambda_ref peaks
/// at (key signature + c) mod 12, mu_ref at the label's mode.
SupervisedOracles supervised_oracles(const KeyLabel& label, int c);

/// Ablation: each pairwise CPSD term replaced by a 12-class cross-entropy
/// whose target is the one-hot argmax of the first profile rolled by the
/// pair's interval. Gradients flow into the second profile only.
LossBreakdown crossentropy_loss(const Responses<Ksp>& y, int k, Responses<Ksp>* grad = nullptr);

}  // namespace stone
