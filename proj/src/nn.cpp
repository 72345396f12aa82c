#include "dfe/nn.hpp"

#include "dfe/error.hpp"
#include "kernels.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>

namespace dfe {

std::string Shape4::str() const {
    return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) + "x" + std::to_string(w);
}

Tensor4::Tensor4(Shape4 shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
        throw Error(ErrorCode::ShapeMismatch, "tensor data length " + std::to_string(data_.size()) +
                                                  " does not match shape " + shape_.str());
    }
}

bool Tensor4::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string_view to_string(LayerKind kind) {
    switch (kind) {
    case LayerKind::conv: return "conv";
    case LayerKind::conv_transpose: return "conv_transpose";
    case LayerKind::batch_norm: return "batch_norm";
    case LayerKind::relu: return "relu";
    }
    return "?";
}

LayerKind layer_kind_from_string(std::string_view s) {
    if (s == "conv") return LayerKind::conv;
    if (s == "conv_transpose") return LayerKind::conv_transpose;
    if (s == "batch_norm") return LayerKind::batch_norm;
    if (s == "relu") return LayerKind::relu;
    throw Error(ErrorCode::InvalidArgument, "unknown layer kind '" + std::string(s) + "'");
}

LayerSpec LayerSpec::conv(int in, int out, int kernel, int stride, int padding) {
    return {LayerKind::conv, in, out, kernel, stride, padding};
}

LayerSpec LayerSpec::conv_transpose(int in, int out, int kernel, int stride, int padding) {
    return {LayerKind::conv_transpose, in, out, kernel, stride, padding};
}

LayerSpec LayerSpec::batch_norm(int channels) { return {LayerKind::batch_norm, channels, channels, 1, 1, 0}; }

LayerSpec LayerSpec::relu(int channels) { return {LayerKind::relu, channels, channels, 1, 1, 0}; }

void LayerSpec::validate() const {
    if (in_channels < 1 || out_channels < 1) throw Error(ErrorCode::InvalidArgument, "layer channels must be >= 1");
    if (kernel < 1 || stride < 1 || padding < 0) {
        throw Error(ErrorCode::InvalidArgument, "layer needs kernel >= 1, stride >= 1, padding >= 0");
    }
    if ((kind == LayerKind::batch_norm || kind == LayerKind::relu) && in_channels != out_channels) {
        throw Error(ErrorCode::InvalidArgument, std::string(to_string(kind)) + " must keep the channel count");
    }
}

Shape4 LayerSpec::output_shape(const Shape4& in) const {
    if (in.c != in_channels) {
        throw Error(ErrorCode::ShapeMismatch, std::string(to_string(kind)) + " expects " +
                                                  std::to_string(in_channels) + " channels, got input " + in.str());
    }
    Shape4 out = in;
    out.c = out_channels;
    if (kind == LayerKind::conv) {
        out.h = (in.h + 2 * padding - kernel) / stride + 1;
        out.w = (in.w + 2 * padding - kernel) / stride + 1;
        if (in.h + 2 * padding < kernel || in.w + 2 * padding < kernel) out.h = out.w = 0;
    } else if (kind == LayerKind::conv_transpose) {
        out.h = (in.h - 1) * stride - 2 * padding + kernel;
        out.w = (in.w - 1) * stride - 2 * padding + kernel;
    }
    if (out.h < 1 || out.w < 1 || in.n < 1) {
        throw Error(ErrorCode::ShapeMismatch, std::string(to_string(kind)) + " cannot be applied to " + in.str());
    }
    return out;
}

std::size_t LayerSpec::weight_count() const {
    switch (kind) {
    case LayerKind::conv:
    case LayerKind::conv_transpose:
        return static_cast<std::size_t>(in_channels) * out_channels * kernel * kernel;
    case LayerKind::batch_norm: return static_cast<std::size_t>(out_channels);
    case LayerKind::relu: return 0;
    }
    return 0;
}

std::size_t LayerSpec::bias_count() const { return kind == LayerKind::relu ? 0 : static_cast<std::size_t>(out_channels); }

void batch_norm_eval_coefficients(const LayerParams& p, int channel, double& scale, double& shift) {
    scale = p.weight[channel] / std::sqrt(p.running_var[channel] + kBatchNormEps);
    shift = p.bias[channel] - p.running_mean[channel] * scale;
}

namespace {

using kernels::PatchGeometry;

// Geometry of the forward convolution (conv) or of the convolution that
// conv_transpose is the adjoint of: image side is the larger spatial extent.
PatchGeometry patch_geometry(const LayerSpec& spec, const Shape4& image, const Shape4& cols) {
    return {image.c, image.h, image.w, spec.kernel, spec.stride, spec.padding, 1, cols.h, cols.w};
}

// Per-thread work buffers reused across calls; contents are unspecified on entry.
double* scratch(int slot, std::size_t n) {
    thread_local std::array<std::vector<double>, 3> buffers;
    auto& buf = buffers[static_cast<std::size_t>(slot)];
    if (buf.size() < n) buf.resize(n);
    return buf.data();
}

// [c][n*P + p] layout from NCHW.
const double* to_channel_major(const Tensor4& t, int slot) {
    const Shape4& s = t.shape();
    const std::size_t plane = s.plane();
    const std::size_t cols = static_cast<std::size_t>(s.n) * plane;
    double* m = scratch(slot, static_cast<std::size_t>(s.c) * cols);
    for (int b = 0; b < s.n; ++b) {
        for (int c = 0; c < s.c; ++c) {
            const double* src = t.sample(b) + static_cast<std::size_t>(c) * plane;
            std::copy(src, src + plane, m + c * cols + b * plane);
        }
    }
    return m;
}

void from_channel_major(const double* m, Tensor4& t) {
    const Shape4& s = t.shape();
    const std::size_t plane = s.plane();
    const std::size_t cols = static_cast<std::size_t>(s.n) * plane;
    for (int b = 0; b < s.n; ++b) {
        for (int c = 0; c < s.c; ++c) {
            const double* src = m + c * cols + b * plane;
            std::copy(src, src + plane, t.sample(b) + static_cast<std::size_t>(c) * plane);
        }
    }
}

void add_channel_bias(Tensor4& t, std::span<const double> bias) {
    const Shape4& s = t.shape();
    for (int b = 0; b < s.n; ++b) {
        for (int c = 0; c < s.c; ++c) {
            kernels::add_scalar(t.sample(b) + static_cast<std::size_t>(c) * s.plane(), s.plane(), bias[c]);
        }
    }
}

void channel_sums(const Tensor4& t, std::span<double> out) {
    const Shape4& s = t.shape();
    std::fill(out.begin(), out.end(), 0.0);
    for (int b = 0; b < s.n; ++b) {
        for (int c = 0; c < s.c; ++c) {
            const double* p = t.sample(b) + static_cast<std::size_t>(c) * s.plane();
            double acc = 0.0;
            for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
            out[c] += acc;
        }
    }
}

Tensor4 conv_forward(const LayerSpec& spec, const LayerParams& p, const Tensor4& x) {
    Tensor4 out(spec.output_shape(x.shape()));
    const Shape4& so = out.shape();
    const int cols = static_cast<int>(so.n * so.plane());
    const int k = spec.in_channels * spec.kernel * spec.kernel;
    double* col = scratch(0, static_cast<std::size_t>(k) * cols);
    const PatchGeometry g = patch_geometry(spec, x.shape(), so);
    for (int b = 0; b < so.n; ++b) kernels::im2col(g, x.sample(b), col, cols, b * static_cast<int>(so.plane()));
    double* res = scratch(1, static_cast<std::size_t>(so.c) * cols);
    kernels::gemm(false, false, so.c, cols, k, p.weight.data(), k, col, cols, res, cols, false);
    from_channel_major(res, out);
    add_channel_bias(out, p.bias);
    return out;
}

Tensor4 conv_backward(const LayerSpec& spec, const LayerParams& p, const Tensor4& x, const Tensor4& gy,
                      const LayerGrads& grads) {
    const Shape4& so = gy.shape();
    const int cols = static_cast<int>(so.n * so.plane());
    const int k = spec.in_channels * spec.kernel * spec.kernel;
    const PatchGeometry g = patch_geometry(spec, x.shape(), so);
    double* col = scratch(0, static_cast<std::size_t>(k) * cols);
    for (int b = 0; b < so.n; ++b) kernels::im2col(g, x.sample(b), col, cols, b * static_cast<int>(so.plane()));
    const double* d = to_channel_major(gy, 1);
    kernels::gemm(false, true, so.c, k, cols, d, cols, col, cols, grads.weight.data(), k, false);
    channel_sums(gy, grads.bias);
    kernels::gemm(true, false, k, cols, so.c, p.weight.data(), k, d, cols, col, cols, false);
    Tensor4 gx(x.shape());
    for (int b = 0; b < so.n; ++b) kernels::col2im(g, col, cols, b * static_cast<int>(so.plane()), gx.sample(b));
    return gx;
}

Tensor4 conv_transpose_forward(const LayerSpec& spec, const LayerParams& p, const Tensor4& x) {
    Tensor4 out(spec.output_shape(x.shape()));
    const Shape4& si = x.shape();
    const int cols = static_cast<int>(si.n * si.plane());
    const int rows = spec.out_channels * spec.kernel * spec.kernel;
    const double* xm = to_channel_major(x, 1);
    double* col = scratch(0, static_cast<std::size_t>(rows) * cols);
    kernels::gemm(true, false, rows, cols, spec.in_channels, p.weight.data(), rows, xm, cols, col, cols, false);
    const PatchGeometry g = patch_geometry(spec, out.shape(), si);
    for (int b = 0; b < si.n; ++b) kernels::col2im(g, col, cols, b * static_cast<int>(si.plane()), out.sample(b));
    add_channel_bias(out, p.bias);
    return out;
}

Tensor4 conv_transpose_backward(const LayerSpec& spec, const LayerParams& p, const Tensor4& x, const Tensor4& gy,
                                const LayerGrads& grads) {
    const Shape4& si = x.shape();
    const int cols = static_cast<int>(si.n * si.plane());
    const int rows = spec.out_channels * spec.kernel * spec.kernel;
    const PatchGeometry g = patch_geometry(spec, gy.shape(), si);
    double* dcol = scratch(0, static_cast<std::size_t>(rows) * cols);
    for (int b = 0; b < si.n; ++b) kernels::im2col(g, gy.sample(b), dcol, cols, b * static_cast<int>(si.plane()));
    const double* xm = to_channel_major(x, 1);
    kernels::gemm(false, true, spec.in_channels, rows, cols, xm, cols, dcol, cols, grads.weight.data(), rows, false);
    channel_sums(gy, grads.bias);
    double* dx = scratch(2, static_cast<std::size_t>(spec.in_channels) * cols);
    kernels::gemm(false, false, spec.in_channels, cols, rows, p.weight.data(), rows, dcol, cols, dx, cols, false);
    Tensor4 gx(si);
    from_channel_major(dx, gx);
    return gx;
}

Tensor4 batch_norm_forward(const LayerSpec& spec, const LayerParams& p, const Tensor4& x, Mode mode,
                           LayerCache* cache) {
    const Shape4& s = x.shape();
    if (s.c != spec.in_channels) spec.output_shape(s); // throws
    Tensor4 out = x;
    const std::size_t plane = s.plane();
    std::vector<double> inv_std(s.c);
    if (mode == Mode::eval) {
        for (int c = 0; c < s.c; ++c) {
            double scale = 0, shift = 0;
            batch_norm_eval_coefficients(p, c, scale, shift);
            inv_std[c] = 1.0 / std::sqrt(p.running_var[c] + kBatchNormEps);
            for (int b = 0; b < s.n; ++b) kernels::affine(out.sample(b) + c * plane, plane, scale, shift);
        }
        if (cache) cache->inv_std = std::move(inv_std);
        return out;
    }

    if (s.n < 2) throw Error(ErrorCode::ShapeMismatch, "batch_norm in train mode needs a batch of at least 2");
    const double count = static_cast<double>(s.n) * plane;
    Tensor4 xhat(s);
    for (int c = 0; c < s.c; ++c) {
        double sum = 0.0;
        for (int b = 0; b < s.n; ++b) {
            const double* q = x.sample(b) + c * plane;
            for (std::size_t i = 0; i < plane; ++i) sum += q[i];
        }
        const double mean = sum / count;
        double sq = 0.0;
        for (int b = 0; b < s.n; ++b) {
            const double* q = x.sample(b) + c * plane;
            for (std::size_t i = 0; i < plane; ++i) sq += (q[i] - mean) * (q[i] - mean);
        }
        const double var = sq / count;
        const double is = 1.0 / std::sqrt(var + kBatchNormEps);
        inv_std[c] = is;
        for (int b = 0; b < s.n; ++b) {
            const double* q = x.sample(b) + c * plane;
            double* h = xhat.sample(b) + c * plane;
            double* o = out.sample(b) + c * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                h[i] = (q[i] - mean) * is;
                o[i] = p.weight[c] * h[i] + p.bias[c];
            }
        }
        p.running_mean[c] = (1.0 - kBatchNormMomentum) * p.running_mean[c] + kBatchNormMomentum * mean;
        p.running_var[c] =
            (1.0 - kBatchNormMomentum) * p.running_var[c] + kBatchNormMomentum * var * count / (count - 1.0);
    }
    if (cache) {
        cache->inv_std = std::move(inv_std);
        cache->normalized = std::move(xhat);
    }
    return out;
}

Tensor4 batch_norm_backward(const LayerParams& p, const LayerCache& cache, const Tensor4& gy,
                            const LayerGrads& grads) {
    const Shape4& s = gy.shape();
    const std::size_t plane = s.plane();
    Tensor4 gx(s);
    if (cache.mode == Mode::eval) {
        for (int c = 0; c < s.c; ++c) {
            double scale = 0, shift = 0;
            batch_norm_eval_coefficients(p, c, scale, shift);
            double dg = 0, db = 0;
            for (int b = 0; b < s.n; ++b) {
                const double* g = gy.sample(b) + c * plane;
                const double* x = cache.input.sample(b) + c * plane;
                double* o = gx.sample(b) + c * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    o[i] = g[i] * scale;
                    dg += g[i] * (x[i] - p.running_mean[c]) * cache.inv_std[c];
                    db += g[i];
                }
            }
            grads.weight[c] = dg;
            grads.bias[c] = db;
        }
        return gx;
    }
    const double count = static_cast<double>(s.n) * plane;
    for (int c = 0; c < s.c; ++c) {
        double sum_g = 0, sum_gh = 0;
        for (int b = 0; b < s.n; ++b) {
            const double* g = gy.sample(b) + c * plane;
            const double* h = cache.normalized.sample(b) + c * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                sum_g += g[i];
                sum_gh += g[i] * h[i];
            }
        }
        grads.weight[c] = sum_gh;
        grads.bias[c] = sum_g;
        const double gamma = p.weight[c];
        const double k = gamma * cache.inv_std[c] / count;
        for (int b = 0; b < s.n; ++b) {
            const double* g = gy.sample(b) + c * plane;
            const double* h = cache.normalized.sample(b) + c * plane;
            double* o = gx.sample(b) + c * plane;
            for (std::size_t i = 0; i < plane; ++i) o[i] = k * (count * g[i] - sum_g - h[i] * sum_gh);
        }
    }
    return gx;
}

} // namespace

Tensor4 layer_forward(const LayerSpec& spec, const LayerParams& params, const Tensor4& x, Mode mode,
                      LayerCache* cache) {
    if (cache) {
        cache->input = x;
        cache->mode = mode;
    }
    switch (spec.kind) {
    case LayerKind::conv: return conv_forward(spec, params, x);
    case LayerKind::conv_transpose: return conv_transpose_forward(spec, params, x);
    case LayerKind::batch_norm: return batch_norm_forward(spec, params, x, mode, cache);
    case LayerKind::relu: {
        spec.output_shape(x.shape());
        Tensor4 out = x;
        kernels::relu(out.data().data(), out.size());
        return out;
    }
    }
    throw Error(ErrorCode::InvalidArgument, "unknown layer kind");
}

Tensor4 layer_backward(const LayerSpec& spec, const LayerParams& params, const LayerCache& cache,
                       const Tensor4& grad_out, const LayerGrads& grads) {
    if (grad_out.shape() != spec.output_shape(cache.input.shape())) {
        throw Error(ErrorCode::ShapeMismatch, "gradient shape " + grad_out.shape().str() + " does not match layer output");
    }
    switch (spec.kind) {
    case LayerKind::conv: return conv_backward(spec, params, cache.input, grad_out, grads);
    case LayerKind::conv_transpose: return conv_transpose_backward(spec, params, cache.input, grad_out, grads);
    case LayerKind::batch_norm: return batch_norm_backward(params, cache, grad_out, grads);
    case LayerKind::relu: {
        Tensor4 gx = grad_out;
        auto g = gx.data();
        auto x = cache.input.data();
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (!(x[i] > 0.0)) g[i] = 0.0;
        }
        return gx;
    }
    }
    throw Error(ErrorCode::InvalidArgument, "unknown layer kind");
}

// --- Network ----------------------------------------------------------------

Network::Network(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
    std::size_t pcount = 0, scount = 0;
    offsets_.resize(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        const LayerSpec& l = layers_[i];
        l.validate();
        if (i > 0 && layers_[i - 1].out_channels != l.in_channels) {
            throw Error(ErrorCode::ShapeMismatch, "layer " + std::to_string(i) + " expects " +
                                                      std::to_string(l.in_channels) + " channels but layer " +
                                                      std::to_string(i - 1) + " produces " +
                                                      std::to_string(layers_[i - 1].out_channels));
        }
        const std::string prefix = std::to_string(i) + ".";
        Offsets& o = offsets_[i];
        o.weight = pcount;
        if (l.weight_count() > 0) {
            std::vector<int> shape;
            if (l.kind == LayerKind::conv) shape = {l.out_channels, l.in_channels, l.kernel, l.kernel};
            else if (l.kind == LayerKind::conv_transpose) shape = {l.in_channels, l.out_channels, l.kernel, l.kernel};
            else shape = {l.out_channels};
            slots_.push_back({prefix + "weight", shape, true, pcount, l.weight_count()});
            pcount += l.weight_count();
        }
        o.bias = pcount;
        if (l.bias_count() > 0) {
            slots_.push_back({prefix + "bias", {l.out_channels}, true, pcount, l.bias_count()});
            pcount += l.bias_count();
        }
        if (l.has_running_stats()) {
            o.mean = scount;
            slots_.push_back({prefix + "running_mean", {l.out_channels}, false, scount, static_cast<std::size_t>(l.out_channels)});
            scount += l.out_channels;
            o.var = scount;
            slots_.push_back({prefix + "running_var", {l.out_channels}, false, scount, static_cast<std::size_t>(l.out_channels)});
            scount += l.out_channels;
        }
    }
    params_.assign(pcount, 0.0);
    stats_.assign(scount, 0.0);
    for (std::size_t i = 0; i < layers_.size(); ++i) {
        if (layers_[i].kind != LayerKind::batch_norm) continue;
        const auto c = static_cast<std::size_t>(layers_[i].out_channels);
        std::fill_n(params_.begin() + offsets_[i].weight, c, 1.0);
        std::fill_n(stats_.begin() + offsets_[i].var, c, 1.0);
    }
}

LayerParams Network::layer_params(std::size_t i) {
    const LayerSpec& l = layers_[i];
    const Offsets& o = offsets_[i];
    LayerParams p;
    p.weight = std::span<const double>(params_).subspan(o.weight, l.weight_count());
    p.bias = std::span<const double>(params_).subspan(o.bias, l.bias_count());
    if (l.has_running_stats()) {
        p.running_mean = std::span<double>(stats_).subspan(o.mean, l.out_channels);
        p.running_var = std::span<double>(stats_).subspan(o.var, l.out_channels);
    }
    return p;
}

LayerGrads Network::layer_grads(std::size_t i, std::span<double> grad_buffer) const {
    const LayerSpec& l = layers_[i];
    return {grad_buffer.subspan(offsets_[i].weight, l.weight_count()), grad_buffer.subspan(offsets_[i].bias, l.bias_count())};
}

Tensor4 Network::forward(const Tensor4& x, Mode mode, Trace* trace, std::size_t first, std::size_t last) {
    last = std::min(last, layers_.size());
    if (trace) {
        trace->caches.clear();
        trace->caches.resize(last - first);
    }
    Tensor4 cur = x;
    for (std::size_t i = first; i < last; ++i) {
        const LayerSpec& spec = layers_[i];
        if (!trace && mode == Mode::eval && spec.kind == LayerKind::batch_norm && cur.shape().c == spec.in_channels) {
            // Inference: normalize in place, folding a following ReLU into the same pass.
            const bool fuse = i + 1 < last && layers_[i + 1].kind == LayerKind::relu;
            const LayerParams p = layer_params(i);
            const std::size_t plane = cur.shape().plane();
            for (int c = 0; c < cur.shape().c; ++c) {
                double scale = 0, shift = 0;
                batch_norm_eval_coefficients(p, c, scale, shift);
                for (int b = 0; b < cur.shape().n; ++b) {
                    double* q = cur.sample(b) + c * plane;
                    if (fuse) kernels::affine_relu(q, plane, scale, shift);
                    else kernels::affine(q, plane, scale, shift);
                }
            }
            if (fuse) ++i;
            continue;
        }
        cur = layer_forward(spec, layer_params(i), cur, mode, trace ? &trace->caches[i - first] : nullptr);
    }
    return cur;
}

Tensor4 Network::infer(const Tensor4& x, std::size_t first, std::size_t last) const {
    // Eval mode reads but never writes the running statistics.
    return const_cast<Network*>(this)->forward(x, Mode::eval, nullptr, first, last);
}

Tensor4 Network::backward(const Trace& trace, const Tensor4& grad_out, std::span<double> param_grads,
                          std::size_t first) {
    if (param_grads.size() != params_.size()) {
        throw Error(ErrorCode::ShapeMismatch, "gradient buffer has " + std::to_string(param_grads.size()) +
                                                  " entries, network has " + std::to_string(params_.size()));
    }
    Tensor4 g = grad_out;
    for (std::size_t k = trace.caches.size(); k-- > 0;) {
        const std::size_t i = first + k;
        g = layer_backward(layers_[i], layer_params(i), trace.caches[k], g, layer_grads(i, param_grads));
    }
    return g;
}

// --- losses -------------------------------------------------------------------

double mse_loss(const Tensor4& pred, const Tensor4& target, Tensor4* grad) {
    if (pred.shape() != target.shape()) {
        throw Error(ErrorCode::ShapeMismatch, "mse_loss: " + pred.shape().str() + " vs " + target.shape().str());
    }
    const auto p = pred.data();
    const auto t = target.data();
    const double n = static_cast<double>(p.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) acc += (p[i] - t[i]) * (p[i] - t[i]);
    if (grad) {
        *grad = Tensor4(pred.shape());
        auto g = grad->data();
        for (std::size_t i = 0; i < p.size(); ++i) g[i] = 2.0 * (p[i] - t[i]) / n;
    }
    return acc / n;
}

GaussianMask gaussian_mask(const CropWindow& window, double sigma) {
    window.validate();
    if (!(sigma > 0.0)) throw Error(ErrorCode::InvalidArgument, "gaussian mask sigma must be > 0");
    GaussianMask m{window, sigma, std::vector<double>(window.pixels())};
    const double norm = 1.0 / (2.0 * std::numbers::pi * sigma * sigma);
    for (int y = 0; y < window.w_y; ++y) {
        for (int x = 0; x < window.w_x; ++x) {
            const double dx = x - window.half_x();
            const double dy = y - window.half_y();
            m.weights[static_cast<std::size_t>(y) * window.w_x + x] =
                norm * std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        }
    }
    return m;
}

double GaussianMask::continuous_mass_within(double radius) const {
    return 1.0 - std::exp(-radius * radius / (2.0 * sigma * sigma));
}

double weighted_mse_loss(const Tensor4& pred, const Tensor4& target, const GaussianMask& mask, Tensor4* grad) {
    const Shape4& s = pred.shape();
    if (s != target.shape() || s.h != mask.window.w_y || s.w != mask.window.w_x) {
        throw Error(ErrorCode::ShapeMismatch, "weighted_mse_loss: " + s.str() + " vs " + target.shape().str() +
                                                  " with a " + std::to_string(mask.window.w_x) + "x" +
                                                  std::to_string(mask.window.w_y) + " mask");
    }
    const double n = static_cast<double>(s.size());
    const std::size_t plane = s.plane();
    if (grad) *grad = Tensor4(s);
    double acc = 0.0;
    for (int b = 0; b < s.n; ++b) {
        for (int c = 0; c < s.c; ++c) {
            const std::size_t base = (static_cast<std::size_t>(b) * s.c + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) {
                const double d = pred.data()[base + i] - target.data()[base + i];
                acc += mask.weights[i] * d * d;
                if (grad) grad->data()[base + i] = 2.0 * mask.weights[i] * d / n;
            }
        }
    }
    return acc / n;
}

// --- optimizer ----------------------------------------------------------------

void adamax_step(std::span<double> params, std::span<const double> grads, AdamaxState& state) {
    if (params.size() != grads.size()) {
        throw Error(ErrorCode::ShapeMismatch, "adamax: " + std::to_string(params.size()) + " parameters but " +
                                                  std::to_string(grads.size()) + " gradients");
    }
    if (state.first_moment.empty() && state.weighted_inf_norm.empty()) {
        state.first_moment.assign(params.size(), 0.0);
        state.weighted_inf_norm.assign(params.size(), 0.0);
    }
    if (state.first_moment.size() != params.size() || state.weighted_inf_norm.size() != params.size()) {
        throw Error(ErrorCode::ShapeMismatch, "adamax state does not match the parameter count");
    }
    ++state.step_count;
    const double step = state.alpha / (1.0 - std::pow(state.beta1, static_cast<double>(state.step_count)));
    for (std::size_t i = 0; i < params.size(); ++i) {
        double& m = state.first_moment[i];
        double& u = state.weighted_inf_norm[i];
        m = state.beta1 * m + (1.0 - state.beta1) * grads[i];
        u = std::max(state.beta2 * u, std::abs(grads[i]));
        params[i] -= step * m / (u + state.epsilon);
    }
}

// --- gradcheck ------------------------------------------------------------------

GradcheckReport gradcheck(const Network& net, const Tensor4& input, const Tensor4& target, LossKind loss,
                          const GaussianMask* mask, double step, Mode mode) {
    if (loss == LossKind::weighted && mask == nullptr) {
        throw Error(ErrorCode::InvalidArgument, "weighted gradcheck needs a mask");
    }
    Network work = net;
    // Sign pattern of every ReLU input of the last evaluation.
    std::vector<std::uint8_t> pattern;
    auto eval_loss = [&](const Tensor4& x, Tensor4* grad) {
        Network::Trace trace;
        const Tensor4 out = work.forward(x, mode, &trace);
        pattern.clear();
        for (std::size_t l = 0; l < work.size(); ++l) {
            if (work.layers()[l].kind != LayerKind::relu) continue;
            for (double v : trace.caches[l].input.data()) pattern.push_back(v > 0.0 ? 1 : 0);
        }
        Tensor4 g;
        const double value = loss == LossKind::plain ? mse_loss(out, target, &g) : weighted_mse_loss(out, target, *mask, &g);
        if (grad) {
            std::vector<double> pg(work.parameter_count(), 0.0);
            const Tensor4 gx = work.backward(trace, g, pg);
            *grad = Tensor4(Shape4{1, 1, 1, static_cast<int>(pg.size() + gx.size())});
            std::copy(pg.begin(), pg.end(), grad->data().begin());
            std::copy(gx.data().begin(), gx.data().end(), grad->data().begin() + static_cast<std::ptrdiff_t>(pg.size()));
        }
        return value;
    };

    Tensor4 analytic;
    eval_loss(input, &analytic);
    const std::vector<std::uint8_t> base_pattern = pattern;
    const auto a = analytic.data();
    const std::size_t np = work.parameter_count();

    std::vector<double> numeric(a.size());
    std::vector<std::uint8_t> straddles(a.size(), 0);
    auto central = [&](double& value, std::size_t i, const Tensor4& x_eval) {
        const double orig = value;
        value = orig + step;
        const double up = eval_loss(x_eval, nullptr);
        bool kink = pattern != base_pattern;
        value = orig - step;
        const double down = eval_loss(x_eval, nullptr);
        kink = kink || pattern != base_pattern;
        value = orig;
        numeric[i] = (up - down) / (2.0 * step);
        straddles[i] = kink ? 1 : 0;
    };
    auto params = work.parameters();
    for (std::size_t i = 0; i < np; ++i) central(params[i], i, input);
    Tensor4 x = input;
    for (std::size_t i = 0; i < x.size(); ++i) central(x.data()[i], np + i, x);

    GradcheckReport report;
    for (std::size_t i = 0; i < a.size(); ++i) {
        report.max_abs_gradient = std::max({report.max_abs_gradient, std::abs(a[i]), std::abs(numeric[i])});
    }
    const double floor = 1e-6 * report.max_abs_gradient;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (straddles[i]) {
            ++report.skipped_kinks;
            continue;
        }
        const double denom = std::max({std::abs(a[i]), std::abs(numeric[i]), floor, 1e-300});
        const double rel = std::abs(a[i] - numeric[i]) / denom;
        if (rel > report.max_relative_error) {
            report.max_relative_error = rel;
            report.worst_parameter = i;
        }
    }
    report.checked = a.size() - report.skipped_kinks;
    return report;
}

} // namespace dfe
