#pragma once

#include "dfe/autoencoder.hpp"
#include "dfe/matcher.hpp"

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <vector>

namespace dfe {

enum class ReferenceMode { fixed, updating };

/// Per-frame results; results[0] belongs to frame 1, the frame the
/// reference feature is defined in.
struct TrackSequence {
    std::vector<MatchResult> results;
    ReferenceMode mode = ReferenceMode::fixed;
};

using FrameCallback = std::function<void(std::size_t frame_index, const MatchResult&)>;

/// Tracks the feature at pixel ref_point of frames[0] through all frames.
/// fixed: the reference code comes from frame 1 only. updating: after each
/// frame the reference is re-read at that frame's pixel-level prediction.
/// Throws OutOfBounds if ref_point has no valid crop in frame 1; failures in
/// later frames are recorded (failed = true) and tracking continues.
TrackSequence track(const Autoencoder& model, std::span<const LabImage> frames, int ref_i, int ref_j,
                    const CropWindow& window, ReferenceMode mode, const FrameCallback& on_frame = {});

/// Same, pulling frame k (0-based) from source on demand so that long
/// sequences need not be held in memory.
using FrameSource = std::function<LabImage(std::size_t frame_index)>;
TrackSequence track(const Autoencoder& model, std::size_t frame_count, const FrameSource& source, int ref_i,
                    int ref_j, const CropWindow& window, ReferenceMode mode, const FrameCallback& on_frame = {});

/// Manual annotations keyed by 1-based processed frame number.
struct GroundTruth {
    std::map<int, Point2d> entries;
};

/// `frame,x,y` rows (a header line is optional). Frames must be strictly increasing.
GroundTruth read_ground_truth_csv(const std::filesystem::path& path);

/// Reads `frame,x,y,ssr,refined` rows back into a sequence.
TrackSequence read_track_csv(const std::filesystem::path& path);
void write_track_csv(const TrackSequence& track, const std::filesystem::path& path);

struct LabelingSigma {
    double sigma_x = 1.0;
    double sigma_y = 1.0;
};

struct FrameError {
    int frame = 0;
    double ex = 0, ey = 0;
    double distance = 0;     // sqrt(ex^2 + ey^2)
    double standardized = 0; // ex^2/sigma_x^2 + ey^2/sigma_y^2
    double cumulative = 0;
    double ci = 0;           // chi2_inv_cdf(p, 2 * frame index)
};

struct ErrorReport {
    std::vector<FrameError> frames;
    double mean_error = 0;
    std::vector<double> sorted_errors; // descending
    double ci_probability = 0.99;
    bool diverged = false;
    std::optional<int> first_exceed_frame;
};

/// Largest distance between two points of a width x height frame (its diagonal).
double max_possible_distance(int width, int height);

ErrorReport error_report(const TrackSequence& track, const GroundTruth& gt, const LabelingSigma& sigma,
                         double ci_probability = 0.99);

/// Entry t (1-based) is chi2_inv_cdf(p, 2t).
std::vector<double> ci_curve(int n_frames, double p = 0.99);

/// First frame whose cumulative standardized error exceeds the CI curve.
std::optional<int> divergence_detect(const ErrorReport& report);

/// Writes per_frame.csv, sorted_errors.csv, cumulative.csv and summary.csv
/// (`mean_error_px,diverged,first_exceed_frame`) into dir.
void write_error_report(const ErrorReport& report, const std::filesystem::path& dir);

struct LabelingTest {
    double sigma_x = 0;
    double sigma_y = 0;
    double statistic = 0; // chi-square-hat
    int samples = 0;      // n
    int dof = 0;          // 2n
    double threshold = 0; // chi2_inv_cdf(0.99, 2n)
    bool pass = false;    // statistic <= threshold
};

/// relabels[f] holds repeated annotations of frame f. Errors are taken
/// against the per-frame mean; sigma is the pooled per-axis RMS error unless
/// given. Throws InsufficientSamples (< 2 per frame) and DegenerateSigma.
LabelingTest labeling_chi_square(std::span<const std::vector<Point2d>> relabels,
                                 std::optional<LabelingSigma> sigma = std::nullopt, double p = 0.99);

} // namespace dfe
