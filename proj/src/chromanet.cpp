#include "stone/chromanet.hpp"

#include "stone/error.hpp"

#include <Eigen/Dense>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace stone {

namespace {

/// Activation storage. Eigen peels reductions up to the first packet-aligned
/// element, so fixed alignment keeps the summation order, and hence the
/// results, independent of where the heap places a buffer.
template <typename S>
using Buffer = std::vector<S, Eigen::aligned_allocator<S>>;

constexpr int F = kCropBins;
constexpr double kLayerNormEps = 1e-6;

/// Activation of one item: channels x frames x 84 rows, rows contiguous.
template <typename S>
struct Act {
    int channels = 0;
    int frames = 0;
    Buffer<S> v;

    void reset(int c, int t)
    {
        channels = c;
        frames = t;
        v.assign(static_cast<std::size_t>(c) * t * F, S(0));
    }
    std::size_t plane() const { return static_cast<std::size_t>(frames) * F; }
    S* ch(int c) { return v.data() + c * plane(); }
    const S* ch(int c) const { return v.data() + c * plane(); }
};

template <typename S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

/// Zero-padded copy of one plane: (frames + kt - 1) rows of (F + kf - 1).
template <typename S>
void pad_plane(const S* in, int frames, int kt, int kf, Buffer<S>& padded)
{
    const int width = F + kf - 1;
    padded.assign(static_cast<std::size_t>(frames + kt - 1) * width, S(0));
    for (int t = 0; t < frames; ++t) {
        std::copy_n(in + static_cast<std::size_t>(t) * F, F,
                    padded.data() + static_cast<std::size_t>(t + kt / 2) * width + kf / 2);
    }
}

/// out (+)= 2-D "same" correlation of one plane with a kt x kf kernel.
template <typename S>
void conv_same(const S* in, int frames, const S* w, int kt, int kf, S* out, Buffer<S>& scratch)
{
    pad_plane(in, frames, kt, kf, scratch);
    const int width = F + kf - 1;
    for (int t = 0; t < frames; ++t) {
        S* out_row = out + static_cast<std::size_t>(t) * F;
        for (int dt = 0; dt < kt; ++dt) {
            const S* in_row = scratch.data() + static_cast<std::size_t>(t + dt) * width;
            for (int df = 0; df < kf; ++df) {
                const S weight = w[dt * kf + df];
                const S* src = in_row + df;
                for (int f = 0; f < F; ++f) {
                    out_row[f] += weight * src[f];
                }
            }
        }
    }
}

template <typename S>
void conv_same_backward(const S* in, const S* d_out, int frames, const S* w, int kt, int kf,
                        S* d_in, S* d_w, Buffer<S>& scratch, Buffer<S>& d_padded)
{
    pad_plane(in, frames, kt, kf, scratch);
    const int width = F + kf - 1;
    d_padded.assign(scratch.size(), S(0));
    for (int t = 0; t < frames; ++t) {
        const S* d_row = d_out + static_cast<std::size_t>(t) * F;
        for (int dt = 0; dt < kt; ++dt) {
            const S* in_row = scratch.data() + static_cast<std::size_t>(t + dt) * width;
            S* d_in_row = d_padded.data() + static_cast<std::size_t>(t + dt) * width;
            for (int df = 0; df < kf; ++df) {
                const S weight = w[dt * kf + df];
                const S* src = in_row + df;
                S* dst = d_in_row + df;
                for (int f = 0; f < F; ++f) {
                    dst[f] += weight * d_row[f];
                }
                d_w[dt * kf + df] += Eigen::Map<const Vec<S>>(d_row, F).dot(Eigen::Map<const Vec<S>>(src, F));
            }
        }
    }
    for (int t = 0; t < frames; ++t) {
        const S* src = d_padded.data() + static_cast<std::size_t>(t + kt / 2) * width + kf / 2;
        S* dst = d_in + static_cast<std::size_t>(t) * F;
        for (int f = 0; f < F; ++f) {
            dst[f] += src[f];
        }
    }
}

/// Patch matrix of a single plane: channel dt * kf + df holds the input
/// shifted as conv_same would read it, zero outside.
template <typename S>
void im2col(const S* in, int frames, int kt, int kf, Act<S>& cols)
{
    const int pt = kt / 2;
    const int pf = kf / 2;
    cols.reset(kt * kf, frames);
    for (int dt = 0; dt < kt; ++dt) {
        for (int df = 0; df < kf; ++df) {
            S* plane = cols.ch(dt * kf + df);
            const int off = df - pf;
            const int lo = std::max(0, -off);
            const int hi = std::min(F, F - off);
            for (int t = 0; t < frames; ++t) {
                const int src_t = t + dt - pt;
                if (src_t < 0 || src_t >= frames) {
                    continue;
                }
                const S* in_row = in + static_cast<std::size_t>(src_t) * F;
                S* out_row = plane + static_cast<std::size_t>(t) * F;
                for (int f = lo; f < hi; ++f) {
                    out_row[f] = in_row[f + off];
                }
            }
        }
    }
}

template <typename S>
void pointwise(const Act<S>& in, const S* w, const S* b, int out_channels, Act<S>& out)
{
    out.reset(out_channels, in.frames);
    const auto n = static_cast<Eigen::Index>(in.plane());
    Eigen::Map<const RowMat<S>> x(in.v.data(), in.channels, n);
    Eigen::Map<const RowMat<S>> weight(w, out_channels, in.channels);
    Eigen::Map<RowMat<S>> y(out.v.data(), out_channels, n);
    y.noalias() = weight * x;
    if (b != nullptr) {
        y.colwise() += Eigen::Map<const Vec<S>>(b, out_channels);
    }
}

template <typename S>
void pointwise_backward(const Act<S>& in, const Act<S>& d_out, const S* w, S* g_w, S* g_b,
                        Act<S>* d_in)
{
    const auto n = static_cast<Eigen::Index>(in.plane());
    Eigen::Map<const RowMat<S>> x(in.v.data(), in.channels, n);
    Eigen::Map<const RowMat<S>> dy(d_out.v.data(), d_out.channels, n);
    Eigen::Map<const RowMat<S>> weight(w, d_out.channels, in.channels);
    Eigen::Map<RowMat<S>>(g_w, d_out.channels, in.channels).noalias() += dy * x.transpose();
    if (g_b != nullptr) {
        Eigen::Map<Vec<S>>(g_b, d_out.channels) += dy.rowwise().sum();
    }
    if (d_in != nullptr) {
        d_in->reset(in.channels, in.frames);
        Eigen::Map<RowMat<S>>(d_in->v.data(), in.channels, n).noalias() = weight.transpose() * dy;
    }
}

template <typename S>
struct NormCache {
    Buffer<S> xhat;
    Buffer<S> rstd;
};

/// Layer norm across channels at every (frame, row) position.
template <typename S>
void layer_norm(const Act<S>& in, const S* gamma, const S* beta, Act<S>& out, NormCache<S>& cache)
{
    const std::size_t n = in.plane();
    const int c_count = in.channels;
    out.reset(c_count, in.frames);
    Buffer<S> mean(n, S(0));
    Buffer<S> var(n, S(0));
    for (int c = 0; c < c_count; ++c) {
        const S* x = in.ch(c);
        for (std::size_t p = 0; p < n; ++p) {
            mean[p] += x[p];
        }
    }
    const S inv_c = S(1) / static_cast<S>(c_count);
    for (auto& m : mean) {
        m *= inv_c;
    }
    for (int c = 0; c < c_count; ++c) {
        const S* x = in.ch(c);
        for (std::size_t p = 0; p < n; ++p) {
            const S d = x[p] - mean[p];
            var[p] += d * d;
        }
    }
    cache.rstd.resize(n);
    for (std::size_t p = 0; p < n; ++p) {
        cache.rstd[p] = S(1) / std::sqrt(var[p] * inv_c + static_cast<S>(kLayerNormEps));
    }
    cache.xhat.resize(in.v.size());
    for (int c = 0; c < c_count; ++c) {
        const S* x = in.ch(c);
        S* xh = cache.xhat.data() + c * n;
        S* y = out.ch(c);
        for (std::size_t p = 0; p < n; ++p) {
            xh[p] = (x[p] - mean[p]) * cache.rstd[p];
            y[p] = gamma[c] * xh[p] + beta[c];
        }
    }
}

template <typename S>
void layer_norm_backward(const Act<S>& d_out, const NormCache<S>& cache, const S* gamma, S* g_gamma,
                         S* g_beta, Act<S>& d_in)
{
    using Arr = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    const auto n = static_cast<Eigen::Index>(d_out.plane());
    const int c_count = d_out.channels;
    d_in.reset(c_count, d_out.frames);
    Eigen::Map<const Arr> dy(d_out.v.data(), c_count, n);
    Eigen::Map<const Arr> xh(cache.xhat.data(), c_count, n);
    Eigen::Map<const Eigen::Array<S, 1, Eigen::Dynamic>> rstd(cache.rstd.data(), n);
    Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> g(gamma, c_count);
    Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(g_gamma, c_count) += (dy * xh).rowwise().sum();
    Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>(g_beta, c_count) += dy.rowwise().sum();
    const Arr dxh = dy.colwise() * g;
    const S inv_c = S(1) / static_cast<S>(c_count);
    const Eigen::Array<S, 1, Eigen::Dynamic> a = dxh.colwise().sum() * inv_c;
    const Eigen::Array<S, 1, Eigen::Dynamic> b = (dxh * xh).colwise().sum() * inv_c;
    Eigen::Map<Arr> dx(d_in.v.data(), c_count, n);
    dx = ((dxh.rowwise() - a) - xh.rowwise() * b).rowwise() * rstd;
}

/// Exact (erf) GELU over a buffer.
template <typename S>
void gelu(const Buffer<S>& x, Buffer<S>& y)
{
    const auto n = static_cast<Eigen::Index>(x.size());
    y.resize(x.size());
    Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> in(x.data(), n);
    Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> out(y.data(), n);
    out = S(0.5) * in * (S(1) + (in * static_cast<S>(1.0 / std::numbers::sqrt2)).erf());
}

/// d_x = d_y * GELU'(x).
template <typename S>
void gelu_backward(const Buffer<S>& x, const Buffer<S>& d_y, Buffer<S>& d_x)
{
    const auto n = static_cast<Eigen::Index>(x.size());
    d_x.resize(x.size());
    Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> in(x.data(), n);
    Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>> dy(d_y.data(), n);
    Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>> dx(d_x.data(), n);
    const S pdf_scale = static_cast<S>(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    dx = dy * (S(0.5) * (S(1) + (in * static_cast<S>(1.0 / std::numbers::sqrt2)).erf()) +
               in * pdf_scale * (S(-0.5) * in.square()).exp());
}

/// Kernel-s, stride-s convolution over time only; weights laid out [s][out][in].
template <typename S>
void time_downsample(const Act<S>& in, const S* w, const S* b, int out_channels, int stride,
                     Act<S>& out)
{
    const int out_frames = (in.frames + stride - 1) / stride;
    out.reset(out_channels, out_frames);
    const auto n = static_cast<Eigen::Index>(out.plane());
    Eigen::Map<RowMat<S>> y(out.v.data(), out_channels, n);
    RowMat<S> gathered(in.channels, n);
    for (int j = 0; j < stride; ++j) {
        gathered.setZero();
        for (int c = 0; c < in.channels; ++c) {
            for (int t = 0; t < out_frames; ++t) {
                const int src = t * stride + j;
                if (src < in.frames) {
                    std::copy_n(in.ch(c) + static_cast<std::size_t>(src) * F, F,
                                gathered.data() + c * n + static_cast<Eigen::Index>(t) * F);
                }
            }
        }
        Eigen::Map<const RowMat<S>> weight(w + static_cast<std::size_t>(j) * out_channels * in.channels,
                                           out_channels, in.channels);
        y.noalias() += weight * gathered;
    }
    y.colwise() += Eigen::Map<const Vec<S>>(b, out_channels);
}

template <typename S>
void time_downsample_backward(const Act<S>& in, const Act<S>& d_out, const S* w, int stride, S* g_w,
                              S* g_b, Act<S>& d_in)
{
    const int out_frames = d_out.frames;
    const int out_channels = d_out.channels;
    const auto n = static_cast<Eigen::Index>(d_out.plane());
    Eigen::Map<const RowMat<S>> dy(d_out.v.data(), out_channels, n);
    Eigen::Map<Vec<S>>(g_b, out_channels) += dy.rowwise().sum();
    d_in.reset(in.channels, in.frames);
    RowMat<S> gathered(in.channels, n);
    RowMat<S> d_gathered(in.channels, n);
    for (int j = 0; j < stride; ++j) {
        gathered.setZero();
        for (int c = 0; c < in.channels; ++c) {
            for (int t = 0; t < out_frames; ++t) {
                const int src = t * stride + j;
                if (src < in.frames) {
                    std::copy_n(in.ch(c) + static_cast<std::size_t>(src) * F, F,
                                gathered.data() + c * n + static_cast<Eigen::Index>(t) * F);
                }
            }
        }
        const std::size_t w_off = static_cast<std::size_t>(j) * out_channels * in.channels;
        Eigen::Map<const RowMat<S>> weight(w + w_off, out_channels, in.channels);
        Eigen::Map<RowMat<S>>(g_w + w_off, out_channels, in.channels).noalias() +=
            dy * gathered.transpose();
        d_gathered.noalias() = weight.transpose() * dy;
        for (int c = 0; c < in.channels; ++c) {
            for (int t = 0; t < out_frames; ++t) {
                const int src = t * stride + j;
                if (src < in.frames) {
                    S* dst = d_in.ch(c) + static_cast<std::size_t>(src) * F;
                    const S* from = d_gathered.data() + c * n + static_cast<Eigen::Index>(t) * F;
                    for (int f = 0; f < F; ++f) {
                        dst[f] += from[f];
                    }
                }
            }
        }
    }
}

}  // namespace

std::vector<int> ChromaNetConfig::widths() const
{
    std::vector<int> out;
    out.reserve(channels.size());
    for (int c : channels) {
        out.push_back(std::max(1, static_cast<int>(std::lround(c * width_multiplier))));
    }
    return out;
}

void ChromaNetConfig::validate() const
{
    if (n_blocks < 1) {
        throw ConfigError("n_blocks must be at least 1");
    }
    if (static_cast<int>(channels.size()) != n_blocks ||
        static_cast<int>(time_downsample.size()) != n_blocks) {
        throw ConfigError("channels and time_downsample need one entry per block");
    }
    for (int c : channels) {
        if (c < 1) {
            throw ConfigError("channel counts must be positive");
        }
    }
    for (int s : time_downsample) {
        if (s < 1) {
            throw ConfigError("time downsampling factors must be positive");
        }
    }
    if (width_multiplier <= 0.0) {
        throw ConfigError("width_multiplier must be positive");
    }
    if (kernel_rows < 1 || kernel_frames < 1 || expansion < 1 || input_time_pool < 1) {
        throw ConfigError("kernel sizes, expansion and input_time_pool must be positive");
    }
    if (out_channels != 1 && out_channels != 2) {
        throw ConfigError("out_channels must be 1 or 2");
    }
    if (ablation_fc_head && out_channels != 1) {
        throw ConfigError("the fully connected ablation head requires out_channels = 1");
    }
}

ChromaNetConfig desk_chromanet_config(int out_channels)
{
    ChromaNetConfig c;
    c.n_blocks = 4;
    c.channels = {8, 16, 16, 32};
    c.time_downsample = {2, 2, 2, 2};
    c.input_time_pool = 4;
    c.out_channels = out_channels;
    return c;
}

ChromaNetConfig chromanet_preset(const std::string& name, int out_channels)
{
    if (name == "desk") {
        return desk_chromanet_config(out_channels);
    }
    if (name == "paper") {
        ChromaNetConfig c;
        c.out_channels = out_channels;
        return c;
    }
    throw ConfigError("unknown chromanet preset '" + name + "' (expected desk or paper)");
}

// ---------------------------------------------------------------------------

template <typename S>
struct BasicChromaNet<S>::Layers {
    struct Block {
        int width = 0;
        int next_width = 0;
        int stride = 1;
        std::size_t dw_w, dw_b, ln1_g, ln1_b, pw1_w, pw1_b, pw2_w, pw2_b, ln2_g, ln2_b, ds_w, ds_b;
    };
    std::size_t stem_w = 0, stem_b = 0;
    std::vector<Block> blocks;
    std::size_t lnf_g = 0, lnf_b = 0, proj_w = 0;
    std::size_t fc_w = 0, fc_b = 0;
    int kt = 7, kf = 7, expansion = 4, out_channels = 1, pool = 1;
    bool fc = false;
};

template <typename S>
struct BasicChromaNet<S>::Trace::Impl {
    struct Block {
        Act<S> in, dw, ln1, hidden, act, sum, ln2, out;
        NormCache<S> ln1_cache, ln2_cache;
    };
    Act<S> input;
    Act<S> patches;
    Act<S> stem;
    std::vector<Block> blocks;
    Act<S> lnf;
    NormCache<S> lnf_cache;
    Act<S> proj;
};

template <typename S>
BasicChromaNet<S>::Trace::Trace() : impl(std::make_unique<Impl>())
{
}
template <typename S>
BasicChromaNet<S>::Trace::~Trace() = default;
template <typename S>
BasicChromaNet<S>::Trace::Trace(Trace&&) noexcept = default;
template <typename S>
typename BasicChromaNet<S>::Trace& BasicChromaNet<S>::Trace::operator=(Trace&&) noexcept = default;

template <typename S>
BasicChromaNet<S>::BasicChromaNet(ChromaNetConfig config)
    : config_(std::move(config)), layers_(std::make_unique<Layers>())
{
    config_.validate();
    Layers& l = *layers_;
    l.kt = config_.kernel_frames;
    l.kf = config_.kernel_rows;
    l.expansion = config_.expansion;
    l.out_channels = config_.out_channels;
    l.pool = config_.input_time_pool;
    l.fc = config_.ablation_fc_head;

    std::size_t cursor = 0;
    const auto add = [&](std::string name, std::size_t size) {
        layout_.push_back({std::move(name), cursor, size});
        cursor += size;
        return cursor - size;
    };
    const std::vector<int> widths = config_.widths();
    const std::size_t kernel = static_cast<std::size_t>(l.kt) * l.kf;
    l.stem_w = add("stem.weight", widths[0] * kernel);
    l.stem_b = add("stem.bias", widths[0]);
    for (int i = 0; i < config_.n_blocks; ++i) {
        typename Layers::Block b;
        b.width = widths[i];
        b.next_width = i + 1 < config_.n_blocks ? widths[i + 1] : widths[i];
        b.stride = config_.time_downsample[i];
        const std::string p = "block" + std::to_string(i) + ".";
        const std::size_t c = b.width;
        const std::size_t hidden = c * l.expansion;
        b.dw_w = add(p + "dwconv.weight", c * kernel);
        b.dw_b = add(p + "dwconv.bias", c);
        b.ln1_g = add(p + "norm.weight", c);
        b.ln1_b = add(p + "norm.bias", c);
        b.pw1_w = add(p + "pwconv1.weight", hidden * c);
        b.pw1_b = add(p + "pwconv1.bias", hidden);
        b.pw2_w = add(p + "pwconv2.weight", c * hidden);
        b.pw2_b = add(p + "pwconv2.bias", c);
        b.ln2_g = add(p + "downsample.norm.weight", c);
        b.ln2_b = add(p + "downsample.norm.bias", c);
        b.ds_w = add(p + "downsample.conv.weight", static_cast<std::size_t>(b.stride) * b.next_width * c);
        b.ds_b = add(p + "downsample.conv.bias", b.next_width);
        l.blocks.push_back(b);
    }
    const std::size_t last = l.blocks.back().next_width;
    l.lnf_g = add("head.norm.weight", last);
    l.lnf_b = add("head.norm.bias", last);
    l.proj_w = add("head.proj.weight", static_cast<std::size_t>(l.out_channels) * last);
    if (l.fc) {
        l.fc_w = add("fc_head.weight", static_cast<std::size_t>(kNumChroma) * F);
        l.fc_b = add("fc_head.bias", kNumChroma);
    }
    params_.assign(cursor, S(0));
    for (const auto& slice : layout_) {
        if (slice.name.find("norm.weight") != std::string::npos) {
            std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(slice.offset), slice.size, S(1));
        }
    }
}

template <typename S>
BasicChromaNet<S>::~BasicChromaNet() = default;

template <typename S>
BasicChromaNet<S>::BasicChromaNet(const BasicChromaNet& other)
    : config_(other.config_),
      params_(other.params_),
      layout_(other.layout_),
      layers_(std::make_unique<Layers>(*other.layers_))
{
}

template <typename S>
BasicChromaNet<S>& BasicChromaNet<S>::operator=(const BasicChromaNet& other)
{
    if (this != &other) {
        config_ = other.config_;
        params_ = other.params_;
        layout_ = other.layout_;
        layers_ = std::make_unique<Layers>(*other.layers_);
    }
    return *this;
}

template <typename S>
BasicChromaNet<S>::BasicChromaNet(BasicChromaNet&&) noexcept = default;
template <typename S>
BasicChromaNet<S>& BasicChromaNet<S>::operator=(BasicChromaNet&&) noexcept = default;

template <typename S>
void BasicChromaNet<S>::initialize(RandomSource& rng)
{
    const Layers& l = *layers_;
    const auto fill_uniform = [&](std::size_t offset, std::size_t size, double bound) {
        for (std::size_t i = 0; i < size; ++i) {
            params_[offset + i] = static_cast<S>(uniform_real(rng, -bound, bound));
        }
    };
    std::fill(params_.begin(), params_.end(), S(0));
    const double kernel = static_cast<double>(l.kt) * l.kf;
    fill_uniform(l.stem_w, layout_[0].size, 1.0 / std::sqrt(kernel));
    for (const auto& b : l.blocks) {
        const double c = b.width;
        fill_uniform(b.dw_w, static_cast<std::size_t>(c * kernel), 1.0 / std::sqrt(kernel));
        std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(b.ln1_g), b.width, S(1));
        fill_uniform(b.pw1_w, static_cast<std::size_t>(c * c * l.expansion), 1.0 / std::sqrt(c));
        fill_uniform(b.pw2_w, static_cast<std::size_t>(c * c * l.expansion),
                     1.0 / std::sqrt(c * l.expansion));
        std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(b.ln2_g), b.width, S(1));
        fill_uniform(b.ds_w, static_cast<std::size_t>(b.stride) * b.next_width * b.width,
                     1.0 / std::sqrt(c * b.stride));
    }
    const int last = l.blocks.back().next_width;
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(l.lnf_g), last, S(1));
    const double proj_bound = 0.1 / std::sqrt(last);
    fill_uniform(l.proj_w, static_cast<std::size_t>(last), proj_bound);
    // Further output channels start as small perturbations of the first one.
    for (int o = 1; o < l.out_channels; ++o) {
        for (int i = 0; i < last; ++i) {
            params_[l.proj_w + static_cast<std::size_t>(o * last + i)] =
                params_[l.proj_w + static_cast<std::size_t>(i)] +
                static_cast<S>(uniform_real(rng, -kModeSplitInit, kModeSplitInit) * proj_bound);
        }
    }
    if (l.fc) {
        fill_uniform(l.fc_w, static_cast<std::size_t>(kNumChroma) * F, 1.0 / std::sqrt(F));
    }
}

template <typename S>
void BasicChromaNet<S>::zero_final_projection()
{
    const Layers& l = *layers_;
    std::fill_n(params_.begin() + static_cast<std::ptrdiff_t>(l.proj_w),
                static_cast<std::size_t>(l.out_channels) * l.blocks.back().next_width, S(0));
}

template <typename S>
std::vector<S> BasicChromaNet<S>::forward(const Spectrogram<kCropBins>& x, Trace* trace) const
{
    if (x.rows() != F || x.data.size() != static_cast<std::size_t>(x.frames) * F || x.frames < 1) {
        throw std::invalid_argument("bad frequency span: expected 84 rows");
    }
    const Layers& l = *layers_;
    Trace local;
    typename Trace::Impl& tr = trace != nullptr ? *trace->impl : *local.impl;
    const S* w = params_.data();

    // Input time pooling.
    const int pooled = (x.frames + l.pool - 1) / l.pool;
    tr.input.reset(1, pooled);
    for (int t = 0; t < pooled; ++t) {
        const int begin = t * l.pool;
        const int end = std::min(x.frames, begin + l.pool);
        S* dst = tr.input.v.data() + static_cast<std::size_t>(t) * F;
        for (int s = begin; s < end; ++s) {
            const auto src = x.frame(s);
            for (int f = 0; f < F; ++f) {
                dst[f] += static_cast<S>(src[static_cast<std::size_t>(f)]);
            }
        }
        const S inv = S(1) / static_cast<S>(end - begin);
        for (int f = 0; f < F; ++f) {
            dst[f] *= inv;
        }
    }

    const std::size_t kernel = static_cast<std::size_t>(l.kt) * l.kf;
    const int width0 = l.blocks.front().width;
    im2col(tr.input.v.data(), pooled, l.kt, l.kf, tr.patches);
    pointwise(tr.patches, w + l.stem_w, w + l.stem_b, width0, tr.stem);

    tr.blocks.resize(l.blocks.size());
    const Act<S>* current = &tr.stem;
    for (std::size_t i = 0; i < l.blocks.size(); ++i) {
        const auto& b = l.blocks[i];
        auto& bt = tr.blocks[i];
        bt.in = *current;
        const int frames = bt.in.frames;

        bt.dw.reset(b.width, frames);
        Buffer<S> scratch;
        for (int c = 0; c < b.width; ++c) {
            S* out = bt.dw.ch(c);
            std::fill_n(out, bt.dw.plane(), w[b.dw_b + c]);
            conv_same(bt.in.ch(c), frames, w + b.dw_w + c * kernel, l.kt, l.kf, out, scratch);
        }
        layer_norm(bt.dw, w + b.ln1_g, w + b.ln1_b, bt.ln1, bt.ln1_cache);
        pointwise(bt.ln1, w + b.pw1_w, w + b.pw1_b, b.width * l.expansion, bt.hidden);
        bt.act.channels = bt.hidden.channels;
        bt.act.frames = frames;
        gelu(bt.hidden.v, bt.act.v);
        pointwise(bt.act, w + b.pw2_w, w + b.pw2_b, b.width, bt.sum);
        for (std::size_t j = 0; j < bt.sum.v.size(); ++j) {
            bt.sum.v[j] += bt.in.v[j];
        }
        layer_norm(bt.sum, w + b.ln2_g, w + b.ln2_b, bt.ln2, bt.ln2_cache);
        time_downsample(bt.ln2, w + b.ds_w, w + b.ds_b, b.next_width, b.stride, bt.out);
        current = &bt.out;
    }

    layer_norm(*current, w + l.lnf_g, w + l.lnf_b, tr.lnf, tr.lnf_cache);
    pointwise<S>(tr.lnf, w + l.proj_w, nullptr, l.out_channels, tr.proj);

    std::vector<S> features(static_cast<std::size_t>(l.out_channels) * F, S(0));
    const S inv_t = S(1) / static_cast<S>(tr.proj.frames);
    for (int o = 0; o < l.out_channels; ++o) {
        const S* plane = tr.proj.ch(o);
        S* dst = features.data() + static_cast<std::size_t>(o) * F;
        for (int t = 0; t < tr.proj.frames; ++t) {
            for (int f = 0; f < F; ++f) {
                dst[f] += plane[static_cast<std::size_t>(t) * F + f];
            }
        }
        for (int f = 0; f < F; ++f) {
            dst[f] *= inv_t;
        }
    }
    return features;
}

template <typename S>
void BasicChromaNet<S>::backward(const Trace& trace, std::span<const S> d_output,
                                 std::span<S> grad) const
{
    const Layers& l = *layers_;
    const typename Trace::Impl& tr = *trace.impl;
    if (d_output.size() != static_cast<std::size_t>(l.out_channels) * F || grad.size() != params_.size()) {
        throw std::invalid_argument("backward: shape mismatch");
    }
    const S* w = params_.data();
    S* g = grad.data();

    Act<S> d_proj;
    d_proj.reset(l.out_channels, tr.proj.frames);
    const S inv_t = S(1) / static_cast<S>(tr.proj.frames);
    for (int o = 0; o < l.out_channels; ++o) {
        S* plane = d_proj.ch(o);
        for (int t = 0; t < tr.proj.frames; ++t) {
            for (int f = 0; f < F; ++f) {
                plane[static_cast<std::size_t>(t) * F + f] = d_output[static_cast<std::size_t>(o) * F + f] * inv_t;
            }
        }
    }
    Act<S> d_lnf;
    pointwise_backward<S>(tr.lnf, d_proj, w + l.proj_w, g + l.proj_w, nullptr, &d_lnf);
    Act<S> d_current;
    layer_norm_backward(d_lnf, tr.lnf_cache, w + l.lnf_g, g + l.lnf_g, g + l.lnf_b, d_current);

    const std::size_t kernel = static_cast<std::size_t>(l.kt) * l.kf;
    Act<S> d_ln2, d_sum, d_act, d_hidden, d_ln1, d_dw, d_in;
    Buffer<S> scratch, d_padded;
    for (std::size_t ii = l.blocks.size(); ii-- > 0;) {
        const auto& b = l.blocks[ii];
        const auto& bt = tr.blocks[ii];
        const int frames = bt.in.frames;

        time_downsample_backward(bt.ln2, d_current, w + b.ds_w, b.stride, g + b.ds_w, g + b.ds_b, d_ln2);
        layer_norm_backward(d_ln2, bt.ln2_cache, w + b.ln2_g, g + b.ln2_g, g + b.ln2_b, d_sum);
        // Residual: d_sum flows both to the input and through the MLP branch.
        pointwise_backward(bt.act, d_sum, w + b.pw2_w, g + b.pw2_w, g + b.pw2_b, &d_act);
        d_hidden.channels = d_act.channels;
        d_hidden.frames = frames;
        gelu_backward(bt.hidden.v, d_act.v, d_hidden.v);
        pointwise_backward(bt.ln1, d_hidden, w + b.pw1_w, g + b.pw1_w, g + b.pw1_b, &d_ln1);
        layer_norm_backward(d_ln1, bt.ln1_cache, w + b.ln1_g, g + b.ln1_g, g + b.ln1_b, d_dw);

        d_in = d_sum;
        for (int c = 0; c < b.width; ++c) {
            const S* dy = d_dw.ch(c);
            g[b.dw_b + c] += Eigen::Map<const Vec<S>>(dy, static_cast<Eigen::Index>(d_dw.plane())).sum();
            conv_same_backward(bt.in.ch(c), dy, frames, w + b.dw_w + c * kernel, l.kt, l.kf,
                               d_in.ch(c), g + b.dw_w + c * kernel, scratch, d_padded);
        }
        d_current = std::move(d_in);
    }

    // Stem; the input itself needs no gradient.
    pointwise_backward<S>(tr.patches, d_current, w + l.stem_w, g + l.stem_w, g + l.stem_b, nullptr);
}

template <typename S>
Ksp BasicChromaNet<S>::fc_head(std::span<const S> features) const
{
    const Layers& l = *layers_;
    if (!l.fc) {
        throw std::logic_error("fully connected head is not enabled");
    }
    if (features.size() != static_cast<std::size_t>(F)) {
        throw std::invalid_argument("fc head expects 84 features");
    }
    std::array<double, kNumChroma> logits{};
    for (int q = 0; q < kNumChroma; ++q) {
        double acc = params_[l.fc_b + q];
        for (int f = 0; f < F; ++f) {
            acc += static_cast<double>(params_[l.fc_w + static_cast<std::size_t>(q) * F + f]) * features[f];
        }
        logits[static_cast<std::size_t>(q)] = acc;
    }
    return Ksp::from_logits(logits);
}

template <typename S>
std::vector<double> BasicChromaNet<S>::fc_head_backward(std::span<const S> features, const Ksp& d_logits,
                                                        std::span<S> grad) const
{
    const Layers& l = *layers_;
    std::vector<double> d_features(static_cast<std::size_t>(F), 0.0);
    for (int q = 0; q < kNumChroma; ++q) {
        const double d = d_logits[static_cast<std::size_t>(q)];
        grad[l.fc_b + q] += static_cast<S>(d);
        for (int f = 0; f < F; ++f) {
            const std::size_t w = l.fc_w + static_cast<std::size_t>(q) * F + f;
            grad[w] += static_cast<S>(d * features[f]);
            d_features[static_cast<std::size_t>(f)] += d * params_[w];
        }
    }
    return d_features;
}

template <typename S>
std::vector<int> BasicChromaNet<S>::activation_rows(const Trace& trace)
{
    const typename Trace::Impl& tr = *trace.impl;
    std::vector<int> rows;
    const auto rows_of = [](const Act<S>& a) {
        return a.channels > 0 ? static_cast<int>(a.v.size() / (static_cast<std::size_t>(a.channels) * a.frames)) : 0;
    };
    rows.push_back(rows_of(tr.stem));
    for (const auto& bt : tr.blocks) {
        for (const Act<S>* a : {&bt.dw, &bt.hidden, &bt.sum, &bt.out}) {
            rows.push_back(rows_of(*a));
        }
    }
    rows.push_back(rows_of(tr.proj));
    return rows;
}

template class BasicChromaNet<float>;
template class BasicChromaNet<double>;

// ---------------------------------------------------------------------------

std::array<double, kNumChroma> octave_sum(std::span<const double> v)
{
    if (v.size() != static_cast<std::size_t>(F)) {
        throw std::invalid_argument("octave pooling expects 84 coefficients, got " + std::to_string(v.size()));
    }
    std::array<double, kNumChroma> sums{};
    for (int j = 0; j < kOctaves; ++j) {
        for (int q = 0; q < kNumChroma; ++q) {
            sums[static_cast<std::size_t>(q)] += v[static_cast<std::size_t>(kNumChroma * j + q)];
        }
    }
    return sums;
}

Ksp octave_pool_g(std::span<const double> v)
{
    return Ksp::from_logits(octave_sum(v));
}

std::vector<double> octave_pool_g_backward(const Ksp& y, const Ksp& d_y)
{
    const auto d_logits = softmax_backward(y.values, d_y.values);
    std::vector<double> d_v(static_cast<std::size_t>(F));
    for (int p = 0; p < F; ++p) {
        d_v[static_cast<std::size_t>(p)] = d_logits[static_cast<std::size_t>(p % kNumChroma)];
    }
    return d_v;
}

namespace {

KeyModeMatrix softmax24(const std::array<double, 24>& logits)
{
    const double top = *std::max_element(logits.begin(), logits.end());
    KeyModeMatrix y;
    double total = 0.0;
    for (std::size_t i = 0; i < 24; ++i) {
        y.values[i] = std::exp(logits[i] - top);
        total += y.values[i];
    }
    for (double& v : y.values) {
        v /= total;
    }
    return y;
}

/// Octave sums of each channel, laid out like KeyModeMatrix (q * 2 + m).
std::array<double, 24> channel_octave_sums(std::span<const double> v)
{
    if (v.size() != static_cast<std::size_t>(2 * F)) {
        throw std::invalid_argument("structured head expects 168 coefficients, got " + std::to_string(v.size()));
    }
    std::array<double, 24> z{};
    for (int m = 0; m < 2; ++m) {
        const auto sums = octave_sum(v.subspan(static_cast<std::size_t>(m) * F, F));
        for (int q = 0; q < kNumChroma; ++q) {
            z[static_cast<std::size_t>(q * 2 + m)] = sums[static_cast<std::size_t>(q)];
        }
    }
    return z;
}

}  // namespace

KeyModeMatrix structured_head(std::span<const double> v, const NormState& norm)
{
    if (norm.updates == 0) {
        throw std::logic_error("normalization statistics missing");
    }
    auto z = channel_octave_sums(v);
    for (std::size_t i = 0; i < z.size(); ++i) {
        const std::size_t m = i % 2;
        z[i] = (z[i] - norm.mean[m]) / std::sqrt(norm.var[m] + norm.eps);
    }
    return softmax24(z);
}

std::vector<KeyModeMatrix> StructuredHeadBatch::forward(const std::vector<std::vector<double>>& features,
                                                        NormState& norm)
{
    const std::size_t batch = features.size();
    if (batch == 0) {
        throw std::invalid_argument("empty batch");
    }
    std::vector<std::array<double, 24>> z(batch);
    std::array<double, 2> mean{};
    std::array<double, 2> var{};
    for (std::size_t i = 0; i < batch; ++i) {
        z[i] = channel_octave_sums(features[i]);
        for (std::size_t j = 0; j < 24; ++j) {
            mean[j % 2] += z[i][j];
        }
    }
    const double count = static_cast<double>(batch * kNumChroma);
    for (double& m : mean) {
        m /= count;
    }
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t j = 0; j < 24; ++j) {
            const double d = z[i][j] - mean[j % 2];
            var[j % 2] += d * d;
        }
    }
    for (std::size_t m = 0; m < 2; ++m) {
        const double biased = var[m] / count;
        inv_std_[m] = 1.0 / std::sqrt(biased + norm.eps);
        const double unbiased = count > 1 ? var[m] / (count - 1) : biased;
        if (norm.updates == 0) {
            norm.mean[m] = mean[m];
            norm.var[m] = unbiased;
        } else {
            norm.mean[m] = (1.0 - norm.momentum) * norm.mean[m] + norm.momentum * mean[m];
            norm.var[m] = (1.0 - norm.momentum) * norm.var[m] + norm.momentum * unbiased;
        }
    }
    ++norm.updates;

    normalized_.resize(batch);
    outputs_.resize(batch);
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t j = 0; j < 24; ++j) {
            normalized_[i][j] = (z[i][j] - mean[j % 2]) * inv_std_[j % 2];
        }
        outputs_[i] = softmax24(normalized_[i]);
    }
    return outputs_;
}

std::vector<std::vector<double>> StructuredHeadBatch::backward(const std::vector<KeyModeMatrix>& d_y) const
{
    const std::size_t batch = outputs_.size();
    if (d_y.size() != batch) {
        throw std::invalid_argument("structured head backward: batch size mismatch");
    }
    std::vector<std::array<double, 24>> d_norm(batch);
    std::array<double, 2> sum_d{};
    std::array<double, 2> sum_dx{};
    for (std::size_t i = 0; i < batch; ++i) {
        d_norm[i] = softmax_backward(outputs_[i].values, d_y[i].values);
        for (std::size_t j = 0; j < 24; ++j) {
            sum_d[j % 2] += d_norm[i][j];
            sum_dx[j % 2] += d_norm[i][j] * normalized_[i][j];
        }
    }
    const double count = static_cast<double>(batch * kNumChroma);
    std::vector<std::vector<double>> d_features(batch, std::vector<double>(2 * F));
    for (std::size_t i = 0; i < batch; ++i) {
        for (std::size_t j = 0; j < 24; ++j) {
            const std::size_t m = j % 2;
            const double d_z = inv_std_[m] * (d_norm[i][j] - sum_d[m] / count -
                                              normalized_[i][j] * sum_dx[m] / count);
            const std::size_t q = j / 2;
            for (int o = 0; o < kOctaves; ++o) {
                d_features[i][m * F + static_cast<std::size_t>(o) * kNumChroma + q] = d_z;
            }
        }
    }
    return d_features;
}

}  // namespace stone
