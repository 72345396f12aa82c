#include "dfe/autoencoder.hpp"
#include "dfe/error.hpp"
#include "dfe/matcher.hpp"
#include "dfe/parallel.hpp"
#include "dfe/tracker.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <random>
#include <string>

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitTraining = 3;
constexpr int kExitTracking = 4;

struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrackingFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct RunConfig {
    fs::path images_dir;
    fs::path frames_dir;
    fs::path checkpoint;
    fs::path ground_truth;
    fs::path track_csv;
    fs::path output;
    fs::path report_dir;
    fs::path history;
    fs::path reference_image;
    fs::path target_image;
    dfe::CropWindow window;
    int ref_frame = 1;
    std::optional<int> ref_x, ref_y;
    int frame = 1; // landscape target frame
    dfe::ReferenceMode mode = dfe::ReferenceMode::fixed;
    dfe::LossKind loss = dfe::LossKind::plain;
    double sigma = 5.0;
    int keep_every = 1;
    std::optional<std::pair<int, int>> resize;
    double sigma_x = 1.0, sigma_y = 1.0;
    std::optional<std::uint64_t> seed;
    std::optional<int> threads;
    int epochs = 30;
    int batch_size = 64;
    int crops_per_image = 100;
    double learning_rate = 0.002;
    int width_divisor = 1;
    int latent_dim = 128;
    int gradcheck_batch = 2;
    double gradcheck_step = 1e-3;
    bool gradcheck_train_mode = false;
};

template <class T>
T get(const json& j, const char* key) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config key '") + key + "': " + e.what());
    }
}

RunConfig parse_config(const json& j) {
    RunConfig c;
    auto path = [&](const char* key, fs::path& out) {
        if (j.contains(key)) out = get<std::string>(j, key);
    };
    path("images_dir", c.images_dir);
    path("frames_dir", c.frames_dir);
    path("checkpoint", c.checkpoint);
    path("ground_truth", c.ground_truth);
    path("track_csv", c.track_csv);
    path("output", c.output);
    path("report_dir", c.report_dir);
    path("history", c.history);
    path("reference_image", c.reference_image);
    path("target_image", c.target_image);
    if (j.contains("window")) {
        const json& w = j.at("window");
        if (w.is_number_integer()) c.window = {w.get<int>(), w.get<int>()};
        else if (w.is_array() && w.size() == 2) c.window = {w[0].get<int>(), w[1].get<int>()};
        else throw ConfigError("config key 'window': expected an odd integer or [w_x, w_y]");
    }
    if (j.contains("reference")) {
        const json& r = j.at("reference");
        if (r.contains("frame")) c.ref_frame = get<int>(r, "frame");
        if (r.contains("x")) c.ref_x = get<int>(r, "x");
        if (r.contains("y")) c.ref_y = get<int>(r, "y");
    }
    if (j.contains("frame")) c.frame = get<int>(j, "frame");
    if (j.contains("mode")) {
        const auto m = get<std::string>(j, "mode");
        if (m == "fixed") c.mode = dfe::ReferenceMode::fixed;
        else if (m == "updating") c.mode = dfe::ReferenceMode::updating;
        else throw ConfigError("config key 'mode': expected fixed or updating, got '" + m + "'");
    }
    if (j.contains("loss")) {
        const auto l = get<std::string>(j, "loss");
        if (l == "plain") c.loss = dfe::LossKind::plain;
        else if (l == "weighted") c.loss = dfe::LossKind::weighted;
        else throw ConfigError("config key 'loss': expected plain or weighted, got '" + l + "'");
    }
    if (j.contains("sigma")) c.sigma = get<double>(j, "sigma");
    if (j.contains("keep_every")) c.keep_every = get<int>(j, "keep_every");
    if (j.contains("resize")) {
        const json& r = j.at("resize");
        if (!r.is_array() || r.size() != 2) throw ConfigError("config key 'resize': expected [width, height]");
        c.resize = std::pair{r[0].get<int>(), r[1].get<int>()};
    }
    if (j.contains("sigma_x")) c.sigma_x = get<double>(j, "sigma_x");
    if (j.contains("sigma_y")) c.sigma_y = get<double>(j, "sigma_y");
    if (j.contains("seed")) c.seed = get<std::uint64_t>(j, "seed");
    if (j.contains("threads")) c.threads = get<int>(j, "threads");
    if (j.contains("epochs")) c.epochs = get<int>(j, "epochs");
    if (j.contains("batch_size")) c.batch_size = get<int>(j, "batch_size");
    if (j.contains("crops_per_image")) c.crops_per_image = get<int>(j, "crops_per_image");
    if (j.contains("learning_rate")) c.learning_rate = get<double>(j, "learning_rate");
    if (j.contains("width_divisor")) c.width_divisor = get<int>(j, "width_divisor");
    if (j.contains("latent_dim")) c.latent_dim = get<int>(j, "latent_dim");
    return c;
}

void require_exists(const fs::path& p, const char* what) {
    if (p.empty()) throw ConfigError(std::string("missing ") + what);
    if (!fs::exists(p)) throw ConfigError(std::string(what) + " does not exist: " + p.string());
}

void apply_threads(const RunConfig& c) {
    if (c.threads) {
        dfe::set_thread_budget(*c.threads);
    } else if (const char* env = std::getenv("DFE_THREADS")) {
        try {
            dfe::set_thread_budget(std::stoi(env));
        } catch (const std::exception&) {
            throw ConfigError(std::string("DFE_THREADS is not an integer: ") + env);
        }
    }
}

void validate_window(const RunConfig& c) {
    try {
        c.window.validate();
    } catch (const dfe::Error& e) {
        throw ConfigError(e.what());
    }
}

dfe::Autoencoder load_model(const RunConfig& c) {
    require_exists(c.checkpoint, "checkpoint");
    try {
        return dfe::load_checkpoint(c.checkpoint);
    } catch (const dfe::Error& e) {
        throw ConfigError("cannot load checkpoint " + c.checkpoint.string() + ": " + e.what());
    }
}

dfe::LabImage load_lab(const fs::path& p, const RunConfig& c) {
    dfe::Rgb8Image img = dfe::read_image(p);
    if (c.resize) img = dfe::resize_inter_area(img, c.resize->first, c.resize->second);
    return dfe::rgb_to_cielab(img);
}

// Processed frames after keep-every-N subsampling, in file-name order.
std::vector<fs::path> processed_frames(const RunConfig& c) {
    require_exists(c.frames_dir, "frames directory");
    if (c.keep_every < 1) throw ConfigError("keep_every must be >= 1");
    const auto files = dfe::list_image_files(c.frames_dir);
    if (files.empty()) throw ConfigError("no .png/.ppm frames in " + c.frames_dir.string());
    std::vector<fs::path> out;
    for (std::size_t k : dfe::keep_every(files.size(), static_cast<std::size_t>(c.keep_every))) out.push_back(files[k]);
    return out;
}

std::pair<int, int> reference_point(const RunConfig& c) {
    if (!c.ref_x || !c.ref_y) throw ConfigError("reference point (reference.x, reference.y) is required");
    return {*c.ref_x, *c.ref_y};
}

// --- commands ---------------------------------------------------------------

int cmd_train(const RunConfig& c) {
    require_exists(c.images_dir, "image directory");
    if (c.checkpoint.empty()) throw ConfigError("missing checkpoint output path");
    if (!c.seed) throw ConfigError("seed is required for training");
    validate_window(c);
    dfe::TrainingConfig tc;
    tc.epochs = c.epochs;
    tc.batch_size = c.batch_size;
    tc.loss = c.loss;
    tc.sigma = c.sigma;
    tc.seed = *c.seed;
    tc.crops_per_image = c.crops_per_image;
    tc.learning_rate = c.learning_rate;
    try {
        tc.validate();
    } catch (const dfe::Error& e) {
        throw ConfigError(e.what());
    }
    dfe::ModelOptions opts{c.width_divisor, c.latent_dim};
    dfe::Autoencoder model = [&] {
        try {
            if (c.window != dfe::CropWindow{31, 31}) throw ConfigError("the default architecture needs a 31x31 window");
            return dfe::build_default_model(*c.seed, opts);
        } catch (const dfe::Error& e) {
            throw ConfigError(e.what());
        }
    }();

    const dfe::CropSample sample = dfe::sample_training_crops(c.images_dir, c.window, c.crops_per_image, *c.seed);
    for (const auto& w : sample.warnings) std::cerr << "warning: " << w << '\n';
    if (sample.crops.size() < 2) throw ConfigError("no usable training images in " + c.images_dir.string());
    std::vector<dfe::Crop> crops;
    crops.reserve(sample.crops.size());
    for (const auto& s : sample.crops) crops.push_back(s.crop);
    std::cerr << "training on " << crops.size() << " crops\n";

    const dfe::TrainingResult result = dfe::train(model, crops, tc, [](int epoch, double loss) {
        std::cerr << "epoch " << epoch << " loss " << loss << '\n';
    });
    if (c.checkpoint.has_parent_path()) fs::create_directories(c.checkpoint.parent_path());
    dfe::save_checkpoint(model, c.checkpoint);
    fs::path history = c.history;
    if (history.empty()) history = fs::path(c.checkpoint).replace_extension(".loss.csv");
    dfe::write_loss_history_csv(result, history);
    std::printf("final_loss %.9g\n", result.loss_history.back());
    return 0;
}

int cmd_track(const RunConfig& c) {
    validate_window(c);
    const dfe::Autoencoder model = load_model(c);
    const auto frames = processed_frames(c);
    if (c.ref_frame != 1) throw ConfigError("tracking defines the reference in frame 1 (reference.frame must be 1)");
    const auto [ri, rj] = reference_point(c);
    std::optional<dfe::GroundTruth> gt;
    if (!c.ground_truth.empty()) {
        require_exists(c.ground_truth, "ground truth");
        gt = dfe::read_ground_truth_csv(c.ground_truth);
        for (std::size_t f = 1; f <= frames.size(); ++f) {
            if (!gt->entries.contains(static_cast<int>(f))) {
                throw TrackingFailure("ground truth has no entry for frame " + std::to_string(f));
            }
        }
    }
    std::cerr << frames.size() << " processed frames\n";

    dfe::TrackSequence seq;
    try {
        seq = dfe::track(
            model, frames.size(), [&](std::size_t f) { return load_lab(frames[f], c); }, ri, rj, c.window, c.mode,
            [&](std::size_t f, const dfe::MatchResult& m) {
                std::cerr << dfe::format_match_row(static_cast<int>(f) + 1, m) << (m.failed ? " (failed)" : "") << '\n';
            });
    } catch (const dfe::Error& e) {
        throw TrackingFailure(std::string("reference frame: ") + e.what());
    }
    const fs::path out = c.output.empty() ? fs::path("track.csv") : c.output;
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    dfe::write_track_csv(seq, out);
    if (gt) {
        const dfe::ErrorReport report = dfe::error_report(seq, *gt, {c.sigma_x, c.sigma_y});
        const fs::path dir = c.report_dir.empty() ? out.parent_path() / "report" : c.report_dir;
        dfe::write_error_report(report, dir);
        std::printf("mean_error_px %.6f diverged %d\n", report.mean_error, report.diverged ? 1 : 0);
    }
    return 0;
}

int cmd_match(const RunConfig& c) {
    validate_window(c);
    const dfe::Autoencoder model = load_model(c);
    require_exists(c.reference_image, "reference image");
    require_exists(c.target_image, "target image");
    const auto [ri, rj] = reference_point(c);
    const dfe::LabImage ref = load_lab(c.reference_image, c);
    if (!dfe::crop_fits(ref.width, ref.height, ri, rj, c.window)) {
        throw TrackingFailure("reference point has no full crop in the reference image");
    }
    const dfe::LatentCode code = dfe::encode(model, dfe::extract_crop(ref, ri, rj, c.window));
    const dfe::MatchResult m = [&] {
        try {
            return dfe::match_feature(model, code, load_lab(c.target_image, c), c.window);
        } catch (const dfe::Error& e) {
            throw TrackingFailure(e.what());
        }
    }();
    const std::string row = dfe::format_match_row(1, m);
    if (!c.output.empty()) {
        std::ofstream out(c.output);
        out << "frame,x,y,ssr,refined\n" << row << '\n';
    }
    std::printf("%s\n", row.c_str());
    return 0;
}

int cmd_eval(const RunConfig& c) {
    require_exists(c.track_csv, "track csv");
    require_exists(c.ground_truth, "ground truth");
    const dfe::TrackSequence seq = dfe::read_track_csv(c.track_csv);
    const dfe::GroundTruth gt = dfe::read_ground_truth_csv(c.ground_truth);
    dfe::ErrorReport report;
    try {
        report = dfe::error_report(seq, gt, {c.sigma_x, c.sigma_y});
    } catch (const dfe::Error& e) {
        if (e.code() == dfe::ErrorCode::MissingGroundTruth) throw TrackingFailure(e.what());
        throw;
    }
    const fs::path dir = c.report_dir.empty() ? (c.output.empty() ? fs::path("report") : c.output) : c.report_dir;
    dfe::write_error_report(report, dir);
    std::printf("mean_error_px %.6f diverged %d", report.mean_error, report.diverged ? 1 : 0);
    if (report.first_exceed_frame) std::printf(" first_exceed_frame %d", *report.first_exceed_frame);
    std::printf("\n");
    return 0;
}

int cmd_landscape(const RunConfig& c) {
    validate_window(c);
    const dfe::Autoencoder model = load_model(c);
    const auto frames = processed_frames(c);
    const auto [ri, rj] = reference_point(c);
    const int n = static_cast<int>(frames.size());
    if (c.frame < 1 || c.frame > n) {
        throw ConfigError("frame " + std::to_string(c.frame) + " is out of range 1.." + std::to_string(n));
    }
    if (c.ref_frame < 1 || c.ref_frame > n) {
        throw ConfigError("reference frame " + std::to_string(c.ref_frame) + " is out of range 1.." + std::to_string(n));
    }
    const dfe::LabImage ref = load_lab(frames[static_cast<std::size_t>(c.ref_frame - 1)], c);
    if (!dfe::crop_fits(ref.width, ref.height, ri, rj, c.window)) {
        throw TrackingFailure("reference point has no full crop in the reference frame");
    }
    const dfe::LatentCode code = dfe::encode(model, dfe::extract_crop(ref, ri, rj, c.window));
    const dfe::LabImage target =
        c.frame == c.ref_frame ? ref : load_lab(frames[static_cast<std::size_t>(c.frame - 1)], c);
    dfe::SsrField field;
    try {
        field = dfe::ssr_field(dfe::encode_dense(model, target, c.window), code);
    } catch (const dfe::Error& e) {
        throw TrackingFailure(e.what());
    }
    const fs::path out = c.output.empty() ? fs::path("landscape.csv") : c.output;
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    dfe::export_ssr_landscape(field, out);
    const dfe::Candidate cand = dfe::select_candidate(field);
    std::printf("argmin %d %d ssr %.9g\n", cand.i, cand.j, cand.ssr);
    return 0;
}

int cmd_gradcheck(const RunConfig& c) {
    const std::uint64_t seed = c.seed.value_or(0);
    dfe::Autoencoder model = [&] {
        try {
            return dfe::build_default_model(seed, {c.width_divisor, c.latent_dim});
        } catch (const dfe::Error& e) {
            throw ConfigError(e.what());
        }
    }();
    if (c.gradcheck_batch < 2) throw ConfigError("gradcheck batch must be >= 2");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto random_batch = [&](int n) {
        dfe::Tensor4 t({n, 3, 31, 31});
        for (double& v : t.data()) v = u(rng);
        return t;
    };
    const dfe::Tensor4 x = random_batch(c.gradcheck_batch);
    const dfe::Tensor4 target = random_batch(c.gradcheck_batch);
    for (int k = 0; k < 5; ++k) model.network().forward(random_batch(8), dfe::Mode::train);
    const dfe::GaussianMask mask = dfe::gaussian_mask(model.spec().input_window, c.sigma);
    const dfe::Mode mode = c.gradcheck_train_mode ? dfe::Mode::train : dfe::Mode::eval;
    const dfe::GradcheckReport r = dfe::gradcheck(model.network(), x, target, c.loss,
                                                  c.loss == dfe::LossKind::weighted ? &mask : nullptr,
                                                  c.gradcheck_step, mode);
    std::printf("parameters %zu checked %zu skipped_kinks %zu max_relative_error %.6g worst_index %zu\n",
                model.network().parameter_count(), r.checked, r.skipped_kinks, r.max_relative_error,
                r.worst_parameter);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Deep feature encodings: train, match, track and evaluate"};
    app.require_subcommand(1);

    std::string config_path;
    json overrides = json::object();
    RunConfig defaults;

    // Flags shared by all commands; each one overrides the config key of the same name.
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("-c,--config", config_path, "JSON run configuration");
        auto str = [&](const char* flag, const char* key, const char* help) {
            sub->add_option_function<std::string>(flag, [&, key](const std::string& v) { overrides[key] = v; }, help);
        };
        auto integer = [&](const char* flag, const char* key, const char* help) {
            sub->add_option_function<long long>(flag, [&, key](long long v) { overrides[key] = v; }, help);
        };
        auto real = [&](const char* flag, const char* key, const char* help) {
            sub->add_option_function<double>(flag, [&, key](double v) { overrides[key] = v; }, help);
        };
        str("--checkpoint", "checkpoint", "checkpoint file");
        str("--frames", "frames_dir", "directory of numbered frames");
        str("--images", "images_dir", "training image directory");
        str("--gt", "ground_truth", "ground-truth CSV (frame,x,y)");
        str("--track", "track_csv", "track CSV (frame,x,y,ssr,refined)");
        str("-o,--output", "output", "output file or directory");
        str("--report-dir", "report_dir", "error report directory");
        str("--history", "history", "loss history CSV");
        str("--reference-image", "reference_image", "image holding the reference feature");
        str("--target-image", "target_image", "image to search");
        str("--mode", "mode", "fixed or updating");
        str("--loss", "loss", "plain or weighted");
        integer("--window", "window", "odd crop side");
        integer("--keep-every", "keep_every", "temporal subsampling step");
        integer("--seed", "seed", "random seed");
        integer("--threads", "threads", "worker threads");
        integer("--epochs", "epochs", "training epochs");
        integer("--batch-size", "batch_size", "mini-batch size");
        integer("--crops-per-image", "crops_per_image", "training crops per image");
        integer("--frame", "frame", "1-based processed frame (landscape)");
        integer("--width-divisor", "width_divisor", "divide feature widths");
        integer("--latent-dim", "latent_dim", "latent code length");
        real("--sigma", "sigma", "Gaussian loss sigma");
        real("--sigma-x", "sigma_x", "labeling sigma along x");
        real("--sigma-y", "sigma_y", "labeling sigma along y");
        real("--learning-rate", "learning_rate", "Adamax step size");
        sub->add_option_function<int>("--ref-x", [&](int v) { overrides["reference"]["x"] = v; }, "reference column");
        sub->add_option_function<int>("--ref-y", [&](int v) { overrides["reference"]["y"] = v; }, "reference row");
        sub->add_option_function<int>("--ref-frame", [&](int v) { overrides["reference"]["frame"] = v; },
                                      "reference frame");
    };

    auto* train = app.add_subcommand("train", "train an autoencoder on image crops");
    auto* trk = app.add_subcommand("track", "track a reference feature through a frame sequence");
    auto* match = app.add_subcommand("match", "match a reference feature in a single target image");
    auto* eval = app.add_subcommand("eval", "error report from a track CSV and ground truth");
    auto* land = app.add_subcommand("landscape", "export the SSR landscape of one frame");
    auto* grad = app.add_subcommand("gradcheck", "compare analytic and numerical gradients");
    for (auto* s : {train, trk, match, eval, land, grad}) add_common(s);
    grad->add_option("--batch", defaults.gradcheck_batch, "batch size");
    grad->add_option("--step", defaults.gradcheck_step, "finite-difference step");
    grad->add_flag("--train-mode", defaults.gradcheck_train_mode, "batch statistics instead of running statistics");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }

    try {
        json j = json::object();
        if (!config_path.empty()) {
            std::ifstream in(config_path);
            if (!in) throw ConfigError("config file does not exist: " + config_path);
            try {
                j = json::parse(in);
            } catch (const json::exception& e) {
                throw ConfigError("config file " + config_path + ": " + e.what());
            }
            if (!j.is_object()) throw ConfigError("config file " + config_path + " must hold a JSON object");
        }
        j.merge_patch(overrides);
        RunConfig c = parse_config(j);
        c.gradcheck_batch = defaults.gradcheck_batch;
        c.gradcheck_step = defaults.gradcheck_step;
        c.gradcheck_train_mode = defaults.gradcheck_train_mode;
        if (grad->parsed()) {
            if (!j.contains("width_divisor")) c.width_divisor = 4;
            if (!j.contains("latent_dim")) c.latent_dim = 32;
        }
        apply_threads(c);

        if (train->parsed()) return cmd_train(c);
        if (trk->parsed()) return cmd_track(c);
        if (match->parsed()) return cmd_match(c);
        if (eval->parsed()) return cmd_eval(c);
        if (land->parsed()) return cmd_landscape(c);
        if (grad->parsed()) return cmd_gradcheck(c);
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const TrackingFailure& e) {
        std::cerr << "tracking failed: " << e.what() << '\n';
        return kExitTracking;
    } catch (const dfe::Error& e) {
        std::cerr << "error (" << dfe::to_string(e.code()) << "): " << e.what() << '\n';
        if (e.code() == dfe::ErrorCode::NonFiniteLoss) return kExitTraining;
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitConfig;
    }
    return kExitConfig;
}
