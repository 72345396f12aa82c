#pragma once

#include "dfe/image.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace dfe {

struct Shape4 {
    int n = 0, c = 0, h = 0, w = 0;

    std::size_t size() const { return static_cast<std::size_t>(n) * c * h * w; }
    std::size_t plane() const { return static_cast<std::size_t>(h) * w; }
    bool operator==(const Shape4&) const = default;
    std::string str() const;
};

/// Dense NCHW tensor of doubles.
class Tensor4 {
public:
    Tensor4() = default;
    explicit Tensor4(Shape4 shape, double fill = 0.0) : shape_(shape), data_(shape.size(), fill) {}
    Tensor4(Shape4 shape, std::vector<double> data);

    const Shape4& shape() const { return shape_; }
    std::size_t size() const { return data_.size(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    double& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
    double at(int n, int c, int h, int w) const { return data_[index(n, c, h, w)]; }

    double* sample(int n) { return data_.data() + static_cast<std::size_t>(n) * shape_.c * shape_.plane(); }
    const double* sample(int n) const { return data_.data() + static_cast<std::size_t>(n) * shape_.c * shape_.plane(); }

    bool all_finite() const;

private:
    std::size_t index(int n, int c, int h, int w) const {
        return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
    }

    Shape4 shape_;
    std::vector<double> data_;
};

enum class LayerKind { conv, conv_transpose, batch_norm, relu };

std::string_view to_string(LayerKind kind);
LayerKind layer_kind_from_string(std::string_view s);

/// Geometry of one layer. Weights follow the usual conventions:
/// conv [out][in][k][k], conv_transpose [in][out][k][k], batch_norm gamma/beta [c].
struct LayerSpec {
    LayerKind kind = LayerKind::relu;
    int in_channels = 1;
    int out_channels = 1;
    int kernel = 1;
    int stride = 1;
    int padding = 0;

    static LayerSpec conv(int in, int out, int kernel, int stride, int padding);
    static LayerSpec conv_transpose(int in, int out, int kernel, int stride, int padding);
    static LayerSpec batch_norm(int channels);
    static LayerSpec relu(int channels);

    void validate() const;
    Shape4 output_shape(const Shape4& in) const; // throws ShapeMismatch
    std::size_t weight_count() const;
    std::size_t bias_count() const;
    bool has_running_stats() const { return kind == LayerKind::batch_norm; }

    bool operator==(const LayerSpec&) const = default;
};

enum class Mode { train, eval };

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;

/// Per-layer views into a network's parameter and statistics buffers.
struct LayerParams {
    std::span<const double> weight;
    std::span<const double> bias;
    std::span<double> running_mean;
    std::span<double> running_var;
};

struct LayerGrads {
    std::span<double> weight;
    std::span<double> bias;
};

/// Intermediates recorded by a forward pass and consumed by backward.
struct LayerCache {
    Tensor4 input;
    std::vector<double> inv_std; // batch_norm: per-channel 1/sqrt(var+eps) used in the pass
    Tensor4 normalized;          // batch_norm (train): x-hat
    Mode mode = Mode::eval;
};

/// Eval-mode batch-norm as a per-channel affine map y = x*scale + shift.
void batch_norm_eval_coefficients(const LayerParams& p, int channel, double& scale, double& shift);

/// Forward pass of a single layer. In train mode batch_norm normalizes with
/// batch statistics and updates the running statistics in place.
Tensor4 layer_forward(const LayerSpec& spec, const LayerParams& params, const Tensor4& x, Mode mode,
                      LayerCache* cache = nullptr);

/// Reverse pass of a single layer; writes parameter gradients into grads and
/// returns the gradient with respect to the layer input.
Tensor4 layer_backward(const LayerSpec& spec, const LayerParams& params, const LayerCache& cache,
                       const Tensor4& grad_out, const LayerGrads& grads);

/// Description of one named tensor inside a network's buffers.
struct TensorSlot {
    std::string name;       // e.g. "3.weight", "4.running_mean"
    std::vector<int> shape;
    bool trainable = true;  // false: lives in the statistics buffer
    std::size_t offset = 0; // into parameters() or statistics()
    std::size_t size = 0;
};

/// Sequential stack of layers with all trainable parameters in one flat
/// buffer and batch-norm running statistics in another.
class Network {
public:
    struct Trace {
        std::vector<LayerCache> caches;
    };

    Network() = default;
    explicit Network(std::vector<LayerSpec> layers);

    const std::vector<LayerSpec>& layers() const { return layers_; }
    std::size_t size() const { return layers_.size(); }

    std::span<double> parameters() { return params_; }
    std::span<const double> parameters() const { return params_; }
    std::span<double> statistics() { return stats_; }
    std::span<const double> statistics() const { return stats_; }
    std::size_t parameter_count() const { return params_.size(); }

    const std::vector<TensorSlot>& slots() const { return slots_; }

    LayerParams layer_params(std::size_t i);
    LayerGrads layer_grads(std::size_t i, std::span<double> grad_buffer) const;

    /// Runs layers [first, last). Train mode updates running statistics.
    Tensor4 forward(const Tensor4& x, Mode mode, Trace* trace = nullptr, std::size_t first = 0,
                    std::size_t last = static_cast<std::size_t>(-1));

    /// Eval-mode inference over [first, last); never mutates the network.
    Tensor4 infer(const Tensor4& x, std::size_t first = 0, std::size_t last = static_cast<std::size_t>(-1)) const;

    /// Reverse pass through the layers recorded in trace. Fills param_grads
    /// (size parameter_count()) and returns the gradient with respect to the input.
    Tensor4 backward(const Trace& trace, const Tensor4& grad_out, std::span<double> param_grads,
                     std::size_t first = 0);

private:
    struct Offsets {
        std::size_t weight = 0, bias = 0, mean = 0, var = 0;
    };

    std::vector<LayerSpec> layers_;
    std::vector<Offsets> offsets_;
    std::vector<TensorSlot> slots_;
    std::vector<double> params_;
    std::vector<double> stats_;
};

struct Gradients {
    std::vector<double> parameters;
    Tensor4 input;
};

/// Forward in the given mode, then reverse-mode gradients of a loss whose
/// output gradient is produced by loss_grad_fn(output).
template <class LossGradFn>
Gradients backprop(Network& net, const Tensor4& x, Mode mode, LossGradFn&& loss_grad_fn) {
    Network::Trace trace;
    const Tensor4 out = net.forward(x, mode, &trace);
    const Tensor4 g = loss_grad_fn(out);
    Gradients grads;
    grads.parameters.assign(net.parameter_count(), 0.0);
    grads.input = net.backward(trace, g, grads.parameters);
    return grads;
}

// --- losses ---------------------------------------------------------------

/// Mean of squared differences over all elements. Writes dLoss/dpred when grad != nullptr.
double mse_loss(const Tensor4& pred, const Tensor4& target, Tensor4* grad = nullptr);

/// Center-weighted reconstruction weights w(m,n) = exp(-(m^2+n^2)/(2 sigma^2)) / (2 pi sigma^2)
/// over integer offsets (m,n) from the crop center.
struct GaussianMask {
    CropWindow window;
    double sigma = 5.0;
    std::vector<double> weights; // w_y x w_x, row-major

    double at(int dx, int dy) const {
        return weights[static_cast<std::size_t>(dy + window.half_y()) * window.w_x + (dx + window.half_x())];
    }
    double peak() const { return at(0, 0); }

    /// Probability mass of the continuous 2-D Gaussian inside radius r: 1 - exp(-r^2 / (2 sigma^2)).
    double continuous_mass_within(double radius) const;
};

GaussianMask gaussian_mask(const CropWindow& window, double sigma);

/// Sum over pixels and channels of w(m,n)*(pred-target)^2 divided by the element count.
double weighted_mse_loss(const Tensor4& pred, const Tensor4& target, const GaussianMask& mask,
                         Tensor4* grad = nullptr);

// --- optimizer --------------------------------------------------------------

struct AdamaxState {
    std::int64_t step_count = 0;
    std::vector<double> first_moment;      // m
    std::vector<double> weighted_inf_norm; // u
    double alpha = 0.002;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// One Adamax update. Moment buffers are zero-initialized on first use.
void adamax_step(std::span<double> params, std::span<const double> grads, AdamaxState& state);

// --- gradient check ---------------------------------------------------------

enum class LossKind { plain, weighted };

struct GradcheckReport {
    double max_relative_error = 0.0;
    std::size_t worst_parameter = 0; // index into parameters(), or parameter_count() + input index
    std::size_t checked = 0;
    std::size_t skipped_kinks = 0; // perturbation flipped a ReLU input sign; difference quotient meaningless
    double max_abs_gradient = 0.0;
};

/// Compares analytic gradients against central differences for every
/// parameter and every input element. In train mode batch-norm layers use
/// batch statistics; in eval mode they are the affine maps given by the
/// running statistics. Relative error is
/// |a - n| / max(|a|, |n|, floor) with floor = 1e-6 * max |gradient|.
/// Entries whose +-step evaluations change the sign of any ReLU input are
/// counted in skipped_kinks and excluded from the maximum.
GradcheckReport gradcheck(const Network& net, const Tensor4& input, const Tensor4& target, LossKind loss,
                          const GaussianMask* mask = nullptr, double step = 1e-3, Mode mode = Mode::train);

} // namespace dfe
