#include "dfe/autoencoder.hpp"

#include "dfe/error.hpp"
#include "kernels.hpp"
#include "random.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#ifdef __GLIBC__
#endif

namespace dfe {

double ModelSpec::compression_factor() const {
    return static_cast<double>(latent_dim) / (static_cast<double>(input_window.pixels()) * channels);
}

namespace {

std::vector<LayerSpec> concat(const ModelSpec& spec) {
    std::vector<LayerSpec> all = spec.encoder_layers;
    all.insert(all.end(), spec.decoder_layers.begin(), spec.decoder_layers.end());
    return all;
}

} // namespace

Autoencoder::Autoencoder(ModelSpec spec) : spec_(std::move(spec)), net_(concat(spec_)) {
    spec_.input_window.validate();
    const Shape4 in{1, spec_.channels, spec_.input_window.w_y, spec_.input_window.w_x};
    Shape4 s = in;
    for (const LayerSpec& l : spec_.encoder_layers) s = l.output_shape(s);
    if (s != Shape4{1, spec_.latent_dim, 1, 1}) {
        throw Error(ErrorCode::ShapeMismatch, "encoder maps " + in.str() + " to " + s.str() + ", expected 1x" +
                                                  std::to_string(spec_.latent_dim) + "x1x1");
    }
    for (const LayerSpec& l : spec_.decoder_layers) s = l.output_shape(s);
    if (s != in) {
        throw Error(ErrorCode::ShapeMismatch, "decoder output " + s.str() + " does not match input " + in.str());
    }
}

ModelSpec default_model_spec(const ModelOptions& options) {
    if (options.width_divisor < 1 || 32 % options.width_divisor != 0 || options.latent_dim < 1) {
        throw Error(ErrorCode::InvalidArgument, "width divisor must divide 32 and latent_dim must be >= 1");
    }
    const int c1 = 32 / options.width_divisor;
    const int c2 = 64 / options.width_divisor;
    const int c3 = 128 / options.width_divisor;
    const int z = options.latent_dim;
    ModelSpec spec;
    spec.latent_dim = z;
    spec.encoder_layers = {
        LayerSpec::conv(3, c1, 3, 2, 1),  LayerSpec::batch_norm(c1), LayerSpec::relu(c1),
        LayerSpec::conv(c1, c2, 3, 2, 1), LayerSpec::batch_norm(c2), LayerSpec::relu(c2),
        LayerSpec::conv(c2, c3, 3, 2, 1), LayerSpec::batch_norm(c3), LayerSpec::relu(c3),
        LayerSpec::conv(c3, z, 4, 1, 0),
    };
    spec.decoder_layers = {
        LayerSpec::conv_transpose(z, c3, 4, 1, 0),  LayerSpec::batch_norm(c3), LayerSpec::relu(c3),
        LayerSpec::conv_transpose(c3, c2, 4, 2, 1), LayerSpec::batch_norm(c2), LayerSpec::relu(c2),
        LayerSpec::conv_transpose(c2, c1, 4, 2, 1), LayerSpec::batch_norm(c1), LayerSpec::relu(c1),
        LayerSpec::conv_transpose(c1, 3, 3, 2, 1),
    };
    return spec;
}

void initialize_he_uniform(Autoencoder& model, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Network& net = model.network();
    auto params = net.parameters();
    for (const TensorSlot& slot : net.slots()) {
        if (!slot.trainable) continue;
        const std::size_t layer = std::stoul(slot.name.substr(0, slot.name.find('.')));
        const LayerSpec& l = net.layers()[layer];
        const bool is_weight = slot.name.ends_with(".weight");
        if (l.kind == LayerKind::batch_norm) {
            std::fill_n(params.begin() + static_cast<std::ptrdiff_t>(slot.offset), slot.size, is_weight ? 1.0 : 0.0);
            continue;
        }
        if (!is_weight) {
            std::fill_n(params.begin() + static_cast<std::ptrdiff_t>(slot.offset), slot.size, 0.0);
            continue;
        }
        const double fan_in = static_cast<double>(l.in_channels) * l.kernel * l.kernel;
        const double bound = std::sqrt(6.0 / fan_in);
        for (std::size_t k = 0; k < slot.size; ++k) params[slot.offset + k] = detail::uniform(rng, -bound, bound);
    }
    auto stats = net.statistics();
    for (const TensorSlot& slot : net.slots()) {
        if (slot.trainable) continue;
        const double v = slot.name.ends_with("running_var") ? 1.0 : 0.0;
        std::fill_n(stats.begin() + static_cast<std::ptrdiff_t>(slot.offset), slot.size, v);
    }
}

Autoencoder build_default_model(std::uint64_t seed, const ModelOptions& options) {
    Autoencoder model(default_model_spec(options));
    initialize_he_uniform(model, seed);
    model.metadata.seed = seed;
    return model;
}

Tensor4 crops_to_tensor(std::span<const Crop> crops) {
    if (crops.empty()) throw Error(ErrorCode::InvalidArgument, "no crops to convert");
    const CropWindow w = crops.front().window;
    Tensor4 t(Shape4{static_cast<int>(crops.size()), 3, w.w_y, w.w_x});
    const std::size_t plane = w.pixels();
    for (std::size_t n = 0; n < crops.size(); ++n) {
        const Crop& c = crops[n];
        if (c.window != w || c.data.size() != plane * 3) {
            throw Error(ErrorCode::ShapeMismatch, "crop batch mixes window sizes");
        }
        double* dst = t.sample(static_cast<int>(n));
        for (std::size_t p = 0; p < plane; ++p) {
            dst[p] = c.data[3 * p];
            dst[plane + p] = c.data[3 * p + 1];
            dst[2 * plane + p] = c.data[3 * p + 2];
        }
    }
    return t;
}

Crop tensor_to_crop(const Tensor4& t, int n, const CropWindow& window) {
    const Shape4& s = t.shape();
    if (s.c != 3 || s.h != window.w_y || s.w != window.w_x || n < 0 || n >= s.n) {
        throw Error(ErrorCode::ShapeMismatch, "tensor " + s.str() + " is not a batch of crops of this window");
    }
    Crop c{window, std::vector<double>(window.pixels() * 3)};
    const std::size_t plane = window.pixels();
    const double* src = t.sample(n);
    for (std::size_t p = 0; p < plane; ++p) {
        c.data[3 * p] = src[p];
        c.data[3 * p + 1] = src[plane + p];
        c.data[3 * p + 2] = src[2 * plane + p];
    }
    return c;
}

namespace {

void check_window(const Autoencoder& model, const Crop& crop) {
    if (crop.window != model.spec().input_window || crop.data.size() != crop.window.pixels() * 3) {
        throw Error(ErrorCode::ShapeMismatch, "crop is " + std::to_string(crop.window.w_x) + "x" +
                                                  std::to_string(crop.window.w_y) + ", model expects " +
                                                  std::to_string(model.spec().input_window.w_x) + "x" +
                                                  std::to_string(model.spec().input_window.w_y));
    }
}

constexpr std::size_t kEncodeBatch = 256;

} // namespace

std::vector<LatentCode> encode_batch(const Autoencoder& model, std::span<const Crop> crops) {
    std::vector<LatentCode> codes;
    codes.reserve(crops.size());
    const int z = model.spec().latent_dim;
    for (std::size_t start = 0; start < crops.size(); start += kEncodeBatch) {
        const auto chunk = crops.subspan(start, std::min(kEncodeBatch, crops.size() - start));
        for (const Crop& c : chunk) check_window(model, c);
        const Tensor4 out = model.network().infer(crops_to_tensor(chunk), 0, model.encoder_size());
        for (std::size_t n = 0; n < chunk.size(); ++n) {
            const double* p = out.sample(static_cast<int>(n));
            codes.push_back(LatentCode{std::vector<double>(p, p + z)});
        }
    }
    return codes;
}

LatentCode encode(const Autoencoder& model, const Crop& crop) {
    return encode_batch(model, std::span<const Crop>(&crop, 1)).front();
}

Crop reconstruct(const Autoencoder& model, const Crop& crop) {
    check_window(model, crop);
    const Tensor4 out = model.network().infer(crops_to_tensor(std::span<const Crop>(&crop, 1)));
    return tensor_to_crop(out, 0, crop.window);
}

// --- crop sampling --------------------------------------------------------------

namespace {

CropSample sample_impl(std::size_t count, const std::function<const LabImage*(std::size_t, std::string&)>& image_at,
                       const CropWindow& window, int crops_per_image, std::uint64_t seed) {
    window.validate();
    if (crops_per_image < 1) throw Error(ErrorCode::InvalidArgument, "crops_per_image must be >= 1");
    std::mt19937_64 rng(seed);
    CropSample out;
    for (std::size_t k = 0; k < count; ++k) {
        std::string name;
        const LabImage* img = image_at(k, name);
        if (img == nullptr) continue;
        if (img->width < window.w_x || img->height < window.w_y) {
            out.warnings.push_back(std::string(to_string(ErrorCode::ImageTooSmall)) + ": " + name + " is " +
                                   std::to_string(img->width) + "x" + std::to_string(img->height) + ", skipped");
            continue;
        }
        const int nx = valid_extent(img->width, window.w_x);
        const int ny = valid_extent(img->height, window.w_y);
        for (int c = 0; c < crops_per_image; ++c) {
            const int i = window.half_x() + static_cast<int>(detail::uniform_index(rng, static_cast<std::uint64_t>(nx)));
            const int j = window.half_y() + static_cast<int>(detail::uniform_index(rng, static_cast<std::uint64_t>(ny)));
            out.crops.push_back({extract_crop(*img, i, j, window), k, i, j});
        }
    }
    return out;
}

} // namespace

CropSample sample_training_crops(std::span<const LabImage> images, const CropWindow& window, int crops_per_image,
                                 std::uint64_t seed) {
    return sample_impl(
        images.size(),
        [&](std::size_t k, std::string& name) {
            name = "image #" + std::to_string(k);
            return &images[k];
        },
        window, crops_per_image, seed);
}

CropSample sample_training_crops(const std::filesystem::path& dir, const CropWindow& window, int crops_per_image,
                                 std::uint64_t seed) {
    const auto files = list_image_files(dir);
    LabImage current;
    return sample_impl(
        files.size(),
        [&](std::size_t k, std::string& name) {
            name = files[k].string();
            current = rgb_to_cielab(read_image(files[k]));
            return &current;
        },
        window, crops_per_image, seed);
}

// --- training ---------------------------------------------------------------------

void TrainingConfig::validate() const {
    if (epochs < 1) throw Error(ErrorCode::InvalidArgument, "epochs must be >= 1");
    if (batch_size < 2) throw Error(ErrorCode::InvalidArgument, "batch_size must be >= 2 (batch normalization)");
    if (loss == LossKind::weighted && !(sigma > 0.0)) throw Error(ErrorCode::InvalidArgument, "weighted loss needs sigma > 0");
    if (!(learning_rate >= 0.0)) throw Error(ErrorCode::InvalidArgument, "learning rate must be >= 0");
}

TrainingResult train(Autoencoder& model, std::span<const Crop> crops, const TrainingConfig& config,
                     const EpochCallback& on_epoch) {
    config.validate();
    if (crops.size() < 2) throw Error(ErrorCode::InvalidArgument, "training needs at least 2 crops");
    for (const Crop& c : crops) check_window(model, c);
    kernels::retain_large_allocations();

    Network& net = model.network();
    std::optional<GaussianMask> mask;
    if (config.loss == LossKind::weighted) mask = gaussian_mask(model.spec().input_window, config.sigma);

    AdamaxState state;
    state.alpha = config.learning_rate;
    state.beta1 = config.beta1;
    state.beta2 = config.beta2;
    state.epsilon = config.epsilon;

    // Shuffling stream is separate from the initialization stream of the same seed.
    std::mt19937_64 rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<std::size_t> order(crops.size());
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;

    std::vector<double> grads(net.parameter_count());
    std::vector<Crop> batch;
    TrainingResult result;
    for (int epoch = 1; epoch <= config.epochs; ++epoch) {
        detail::shuffle(order, rng);
        double loss_sum = 0.0;
        std::size_t seen = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config.batch_size));
            if (end - start < 2) break;
            batch.clear();
            for (std::size_t k = start; k < end; ++k) batch.push_back(crops[order[k]]);
            const Tensor4 x = crops_to_tensor(batch);

            Network::Trace trace;
            const Tensor4 y = net.forward(x, Mode::train, &trace);
            Tensor4 g;
            const double loss = mask ? weighted_mse_loss(y, x, *mask, &g) : mse_loss(y, x, &g);
            if (!std::isfinite(loss)) {
                throw Error(ErrorCode::NonFiniteLoss, "non-finite training loss in epoch " + std::to_string(epoch));
            }
            std::fill(grads.begin(), grads.end(), 0.0);
            net.backward(trace, g, grads);
            adamax_step(net.parameters(), grads, state);
            loss_sum += loss * static_cast<double>(end - start);
            seen += end - start;
        }
        const double epoch_loss = loss_sum / static_cast<double>(seen);
        const auto params = net.parameters();
        if (!std::isfinite(epoch_loss) ||
            !std::all_of(params.begin(), params.end(), [](double v) { return std::isfinite(v); })) {
            throw Error(ErrorCode::NonFiniteLoss, "non-finite parameters after epoch " + std::to_string(epoch));
        }
        result.loss_history.push_back(epoch_loss);
        if (on_epoch) on_epoch(epoch, epoch_loss);
    }

    model.metadata.loss = config.loss == LossKind::plain ? "plain" : "weighted";
    model.metadata.sigma = config.loss == LossKind::plain ? 0.0 : config.sigma;
    model.metadata.epochs += config.epochs;
    model.metadata.final_loss = result.loss_history.back();
    model.metadata.seed = config.seed;
    return result;
}

void write_loss_history_csv(const TrainingResult& result, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    out << "epoch,loss\n";
    char buf[64];
    for (std::size_t e = 0; e < result.loss_history.size(); ++e) {
        std::snprintf(buf, sizeof(buf), "%.17g", result.loss_history[e]);
        out << e + 1 << ',' << buf << '\n';
    }
}

} // namespace dfe
