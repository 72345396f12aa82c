#pragma once

#include "dfe/image.hpp"
#include "dfe/nn.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace dfe {

/// Architecture of y(x) = g(f(x)): encoder layers f map a window-sized crop
/// to a 1x1 latent with latent_dim channels; decoder layers g map it back.
struct ModelSpec {
    std::vector<LayerSpec> encoder_layers;
    std::vector<LayerSpec> decoder_layers;
    int latent_dim = 128;
    CropWindow input_window{31, 31};
    int channels = 3;

    /// latent_dim / (w_x * w_y * channels).
    double compression_factor() const;
    bool operator==(const ModelSpec&) const = default;
};

struct LatentCode {
    std::vector<double> values;

    std::size_t size() const { return values.size(); }
    bool operator==(const LatentCode&) const = default;
};

struct TrainingMetadata {
    std::string loss = "plain"; // "plain" or "weighted"
    double sigma = 0.0;         // weighted loss only
    int epochs = 0;
    double final_loss = 0.0;
    std::uint64_t seed = 0;
};

/// The autoencoder: one network whose first encoder_layers().size() layers
/// form the encoder.
class Autoencoder {
public:
    Autoencoder() = default;
    explicit Autoencoder(ModelSpec spec);

    const ModelSpec& spec() const { return spec_; }
    Network& network() { return net_; }
    const Network& network() const { return net_; }
    std::size_t encoder_size() const { return spec_.encoder_layers.size(); }

    TrainingMetadata metadata;

private:
    ModelSpec spec_;
    Network net_;
};

struct ModelOptions {
    int width_divisor = 1;   // divides the 32/64/128 feature widths
    int latent_dim = 128;
};

/// Default architecture for 31x31x3 crops:
/// encoder conv(3->32,k3,s2,p1) BN ReLU, conv(32->64,k3,s2,p1) BN ReLU,
/// conv(64->128,k3,s2,p1) BN ReLU, conv(128->latent,k4,s1,p0)  [31->16->8->4->1];
/// decoder convT(latent->128,k4,s1,p0) BN ReLU, convT(128->64,k4,s2,p1) BN ReLU,
/// convT(64->32,k4,s2,p1) BN ReLU, convT(32->3,k3,s2,p1)  [1->4->8->16->31].
ModelSpec default_model_spec(const ModelOptions& options = {});

/// He-uniform weights (bound sqrt(6 / fan_in)) drawn from seed; zero biases.
Autoencoder build_default_model(std::uint64_t seed, const ModelOptions& options = {});
void initialize_he_uniform(Autoencoder& model, std::uint64_t seed);

/// Crops -> NCHW tensor and back.
Tensor4 crops_to_tensor(std::span<const Crop> crops);
Crop tensor_to_crop(const Tensor4& t, int n, const CropWindow& window);

/// Eval-mode encoder; deterministic and independent of batch composition.
LatentCode encode(const Autoencoder& model, const Crop& crop);
std::vector<LatentCode> encode_batch(const Autoencoder& model, std::span<const Crop> crops);
Crop reconstruct(const Autoencoder& model, const Crop& crop);

// --- training data -------------------------------------------------------------

struct SampledCrop {
    Crop crop;
    std::size_t image_index = 0;
    int i = 0; // center column
    int j = 0; // center row
};

struct CropSample {
    std::vector<SampledCrop> crops;
    std::vector<std::string> warnings; // one per skipped image
};

/// Uniformly random valid centers, crops_per_image per image, in image order.
CropSample sample_training_crops(std::span<const LabImage> images, const CropWindow& window, int crops_per_image,
                                 std::uint64_t seed);
/// Same over every .png/.ppm in dir (sorted by name). Images smaller than the
/// window are skipped with an ImageTooSmall warning.
CropSample sample_training_crops(const std::filesystem::path& dir, const CropWindow& window, int crops_per_image,
                                 std::uint64_t seed);

// --- training ------------------------------------------------------------------------

struct TrainingConfig {
    int epochs = 30;
    int batch_size = 64;
    LossKind loss = LossKind::plain;
    double sigma = 5.0; // weighted loss
    std::uint64_t seed = 0;
    int crops_per_image = 100;
    double learning_rate = 0.002; // constant schedule
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;

    void validate() const;
};

struct TrainingResult {
    std::vector<double> loss_history; // mean training loss per epoch
};

using EpochCallback = std::function<void(int epoch, double loss)>;

/// Adamax over shuffled mini-batches of a fixed crop set. Batches smaller
/// than 2 are dropped. Throws NonFiniteLoss naming the epoch on divergence.
TrainingResult train(Autoencoder& model, std::span<const Crop> crops, const TrainingConfig& config,
                     const EpochCallback& on_epoch = {});

void write_loss_history_csv(const TrainingResult& result, const std::filesystem::path& path);

// --- checkpoints ----------------------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

/// Plain-text header (spec, metadata, one line per tensor with name, shape,
/// byte offset) followed by a little-endian float64 blob.
void save_checkpoint(const Autoencoder& model, const std::filesystem::path& path);
Autoencoder load_checkpoint(const std::filesystem::path& path);

std::string serialize_checkpoint(const Autoencoder& model);
Autoencoder deserialize_checkpoint(const std::string& bytes);

} // namespace dfe
