#pragma once

#include "dfe/autoencoder.hpp"
#include "dfe/image.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace dfe {

struct Point2d {
    double x = 0.0;
    double y = 0.0;
};

/// Latent code for every crop center of a frame. Positions whose window
/// would overhang the frame are invalid and hold all-zero codes.
struct LatentMap {
    int width = 0;
    int height = 0;
    int dim = 0;
    CropWindow window;
    std::vector<double> codes;         // (j*width + i)*dim
    std::vector<std::uint8_t> valid;   // j*width + i

    bool is_valid(int i, int j) const {
        return i >= 0 && j >= 0 && i < width && j < height && valid[static_cast<std::size_t>(j) * width + i] != 0;
    }
    std::span<const double> code(int i, int j) const {
        return {codes.data() + (static_cast<std::size_t>(j) * width + i) * dim, static_cast<std::size_t>(dim)};
    }
    LatentCode code_at(int i, int j) const;
    std::size_t valid_count() const;
};

/// Encodes every valid center of image with the eval-mode encoder. Codes
/// are bit-identical to encode(model, extract_crop(image, i, j, window)).
LatentMap encode_dense(const Autoencoder& model, const LabImage& image, const CropWindow& window);

/// Sum of squared code differences to a reference code at every position.
struct SsrField {
    int width = 0;
    int height = 0;
    std::vector<double> ssr;
    std::vector<std::uint8_t> valid;

    bool is_valid(int i, int j) const {
        return i >= 0 && j >= 0 && i < width && j < height && valid[static_cast<std::size_t>(j) * width + i] != 0;
    }
    double at(int i, int j) const { return ssr[static_cast<std::size_t>(j) * width + i]; }
    double& at(int i, int j) { return ssr[static_cast<std::size_t>(j) * width + i]; }
};

SsrField ssr_field(const LatentMap& map, const LatentCode& reference);

struct Candidate {
    int i = 0;
    int j = 0;
    double ssr = 0.0;
    int tie_count = 0;
};

/// Global minimum over valid positions. Exact ties go to the largest
/// Hessian trace of the local 3x3 quadratic fit (points without a full
/// neighborhood count as flat, trace 0); remaining ties to the first
/// position in row-major order. Throws EmptyField.
Candidate select_candidate(const SsrField& field);

/// eps(x, y) ~ a + b x + c y + d x^2 + e x y + f y^2 in center-relative
/// coordinates (x along columns, y along rows).
struct QuadraticSurface {
    double a = 0, b = 0, c = 0, d = 0, e = 0, f = 0;
    double residual = 0; // sum of squared residuals over the 9 samples

    double operator()(double x, double y) const { return a + b * x + c * y + d * x * x + e * x * y + f * y * y; }
    double hessian_trace() const { return 2.0 * d + 2.0 * f; }
};

/// Least-squares fit to 3x3 samples given row-major for y = -1..1, x = -1..1.
QuadraticSurface fit_quadratic_3x3(const std::array<double, 9>& samples);
/// Fit around (i, j); throws NoNeighborhood unless all 9 positions are valid.
QuadraticSurface fit_quadratic_3x3(const SsrField& field, int i, int j);

struct SubpixelEstimate {
    bool refined = false;    // false: fell back to the integer pixel
    bool hessian_pd = false;
    double x = 0.0;          // absolute coordinates
    double y = 0.0;
};

/// Stationary point of the surface when its Hessian is positive definite
/// and the offset lies strictly inside (-1, 1) on both axes; otherwise the
/// center pixel itself.
SubpixelEstimate subpixel_refine(const QuadraticSurface& surface, int i, int j);

struct MatchResult {
    int pixel_i = 0;
    int pixel_j = 0;
    double x = 0.0; // subpixel estimate, equal to the pixel when not refined
    double y = 0.0;
    double ssr_min = 0.0;
    bool refined = false;
    bool hessian_pd = false;
    int tie_count = 0;
    bool failed = false; // frame could not be matched; pixel carries the previous estimate
};

/// select_candidate -> fit -> refine on an existing field.
MatchResult match_field(const SsrField& field);
MatchResult match_in_map(const LatentMap& map, const LatentCode& reference);
MatchResult match_feature(const Autoencoder& model, const LatentCode& reference, const LabImage& target,
                          const CropWindow& window);

/// `frame,x,y,ssr,refined`
std::string format_match_row(int frame, const MatchResult& m);

/// Heat-map CSV: one line per image row, one comma-separated value per
/// column, empty cells at invalid positions, then "# argmin,i,j,ssr".
void export_ssr_landscape(const SsrField& field, const std::filesystem::path& path);
SsrField import_ssr_landscape(const std::filesystem::path& path);

} // namespace dfe
