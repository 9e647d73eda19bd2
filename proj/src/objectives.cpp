#include "stone/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace stone {

namespace {

Phasor basis(int q, int omega)
{
    const double angle = -2.0 * std::numbers::pi * omega * q / kNumChroma;
    return std::polar(1.0, angle);
}

void add_scaled(Ksp& into, const Ksp& from, double scale = 1.0)
{
    for (std::size_t q = 0; q < kNumChroma; ++q) {
        into[q] += scale * from[q];
    }
}

double clamp_probability(double p)
{
    return std::clamp(p, kBceEpsilon, 1.0 - kBceEpsilon);
}

}  // namespace

void check_cof_frequency(int omega)
{
    if (std::gcd(omega, kNumChroma) != 1) {
        throw std::invalid_argument("degenerate CoF frequency: omega=" + std::to_string(omega) +
                                    " is not coprime with 12");
    }
}

Phasor ksp_dft(const Ksp& y, int omega)
{
    check_cof_frequency(omega);
    Phasor acc = 0.0;
    for (int q = 0; q < kNumChroma; ++q) {
        acc += y[static_cast<std::size_t>(q)] * basis(q, omega);
    }
    return acc;
}

std::array<double, kNumChroma> circular_cross_correlation(const Ksp& a, const Ksp& b)
{
    std::array<double, kNumChroma> r{};
    for (int k = 0; k < kNumChroma; ++k) {
        for (int q = 0; q < kNumChroma; ++q) {
            r[static_cast<std::size_t>(k)] +=
                a[static_cast<std::size_t>(q)] * b[static_cast<std::size_t>(wrap_chroma(q + k))];
        }
    }
    return r;
}

Phasor cpsd(const Ksp& a, const Ksp& b, int omega)
{
    return ksp_dft(a, omega) * std::conj(ksp_dft(b, omega));
}

Phasor cof_target(int k, int omega)
{
    // cpsd(y, y.rolled(k)) = exp(+2 pi i omega k / 12) for one-hot y.
    return std::polar(1.0, 2.0 * std::numbers::pi * omega * k / kNumChroma);
}

double cof_distance(const Ksp& a, const Ksp& b, int k, int omega, PairGradient* grad)
{
    if (k < -kNumChroma || k > kNumChroma) {
        throw std::invalid_argument("interval out of range: " + std::to_string(k));
    }
    const Phasor fa = ksp_dft(a, omega);
    const Phasor fb = ksp_dft(b, omega);
    const Phasor residual = fa * std::conj(fb) - cof_target(k, omega);
    if (grad != nullptr) {
        // dD/dx = Re(conj(residual) * dz/dx) for z = fa * conj(fb).
        const Phasor r = std::conj(residual);
        for (int q = 0; q < kNumChroma; ++q) {
            const Phasor e = basis(q, omega);
            grad->d_first[static_cast<std::size_t>(q)] = std::real(r * e * std::conj(fb));
            grad->d_second[static_cast<std::size_t>(q)] = std::real(r * fa * std::conj(e));
        }
    }
    return 0.5 * std::norm(residual);
}

double loss_invariance(const Ksp& a_c, const Ksp& b_c, int omega, PairGradient* grad)
{
    return cof_distance(a_c, b_c, 0, omega, grad);
}

double loss_equivariance(const Ksp& a_c, const Ksp& a_ck, int k, int omega, PairGradient* grad)
{
    return cof_distance(a_c, a_ck, k, omega, grad);
}

double loss_combined(const Ksp& b_c, const Ksp& a_ck, int k, int omega, PairGradient* grad)
{
    return cof_distance(b_c, a_ck, k, omega, grad);
}

LossBreakdown& LossBreakdown::operator+=(const LossBreakdown& other)
{
    l_ab += other.l_ab;
    l_aa += other.l_aa;
    l_ba += other.l_ba;
    for (std::size_t i = 0; i < bce.size(); ++i) {
        bce[i] += other.bce[i];
    }
    total += other.total;
    return *this;
}

LossBreakdown& LossBreakdown::operator*=(double scale)
{
    l_ab *= scale;
    l_aa *= scale;
    l_ba *= scale;
    for (double& b : bce) {
        b *= scale;
    }
    total *= scale;
    return *this;
}

LossBreakdown cpsd_loss(const Responses<Ksp>& y, int k, int omega, Responses<Ksp>* grad)
{
    LossBreakdown out;
    PairGradient ab, aa, ba;
    const bool want = grad != nullptr;
    out.l_ab = loss_invariance(y.a_c, y.b_c, omega, want ? &ab : nullptr);
    out.l_aa = loss_equivariance(y.a_c, y.a_ck, k, omega, want ? &aa : nullptr);
    out.l_ba = loss_combined(y.b_c, y.a_ck, k, omega, want ? &ba : nullptr);
    out.total = out.l_ab + out.l_aa + out.l_ba;
    if (want) {
        *grad = {};
        add_scaled(grad->a_c, ab.d_first);
        add_scaled(grad->b_c, ab.d_second);
        add_scaled(grad->a_c, aa.d_first);
        add_scaled(grad->a_ck, aa.d_second);
        add_scaled(grad->b_c, ba.d_first);
        add_scaled(grad->a_ck, ba.d_second);
    }
    return out;
}

double bce(const ModeVector& target, const ModeVector& prediction, ModeVector* d_target,
           ModeVector* d_prediction)
{
    double loss = 0.0;
    for (std::size_t m = 0; m < 2; ++m) {
        const double p = clamp_probability(prediction[m]);
        loss -= target[m] * std::log(p);
        if (d_target != nullptr) {
            (*d_target)[m] = -std::log(p);
        }
        if (d_prediction != nullptr) {
            const bool clamped = p != prediction[m];
            (*d_prediction)[m] = clamped ? 0.0 : -target[m] / p;
        }
    }
    return loss;
}

LossBreakdown bce_loss(const Responses<ModeVector>& mu, Responses<ModeVector>* grad)
{
    LossBreakdown out;
    ModeVector t0, p0, t1, p1, t2, p2;
    const bool want = grad != nullptr;
    out.bce[0] = bce(mu.b_c, mu.a_c, want ? &t0 : nullptr, want ? &p0 : nullptr);
    out.bce[1] = bce(mu.a_c, mu.a_ck, want ? &t1 : nullptr, want ? &p1 : nullptr);
    out.bce[2] = bce(mu.b_c, mu.a_ck, want ? &t2 : nullptr, want ? &p2 : nullptr);
    out.total = out.bce_total();
    if (want) {
        for (std::size_t m = 0; m < 2; ++m) {
            grad->b_c[m] = t0[m] + t2[m];
            grad->a_c[m] = p0[m] + t1[m];
            grad->a_ck[m] = p1[m] + p2[m];
        }
    }
    return out;
}

SupervisedOracles supervised_oracles(const KeyLabel& label, int c)
{
    return {Ksp::one_hot(label.key_signature() + c), ModeVector::one_hot(label.mode)};
}

LossBreakdown crossentropy_loss(const Responses<Ksp>& y, int k, Responses<Ksp>* grad)
{
    const auto term = [](const Ksp& first, const Ksp& second, int interval, Ksp* d_second) {
        const auto target = static_cast<std::size_t>(wrap_chroma(first.argmax() + interval));
        const double p = std::max(second[target], kBceEpsilon);
        if (d_second != nullptr) {
            (*d_second)[target] += p == second[target] ? -1.0 / p : 0.0;
        }
        return -std::log(p);
    };
    if (grad != nullptr) {
        *grad = {};
    }
    LossBreakdown out;
    out.l_ab = term(y.a_c, y.b_c, 0, grad ? &grad->b_c : nullptr);
    out.l_aa = term(y.a_c, y.a_ck, k, grad ? &grad->a_ck : nullptr);
    out.l_ba = term(y.b_c, y.a_ck, k, grad ? &grad->a_ck : nullptr);
    out.total = out.l_ab + out.l_aa + out.l_ba;
    return out;
}

}  // namespace stone
