#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dfe {

/// Interleaved 8-bit sRGB raster, row-major, 3 channels per pixel.
struct Rgb8Image {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;

    Rgb8Image() = default;
    Rgb8Image(int w, int h, std::uint8_t fill = 0);

    std::uint8_t& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    std::uint8_t at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

/// Interleaved CIELAB raster. L in [0,100], a and b roughly in [-128,128].
struct LabImage {
    int width = 0;
    int height = 0;
    std::vector<double> data;

    LabImage() = default;
    LabImage(int w, int h);

    double& at(int x, int y, int c) { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
};

/// Odd-sized crop geometry; the crop center is the pixel at (w_x/2, w_y/2).
struct CropWindow {
    int w_x = 31;
    int w_y = 31;

    int half_x() const { return w_x / 2; }
    int half_y() const { return w_y / 2; }
    std::size_t pixels() const { return static_cast<std::size_t>(w_x) * w_y; }

    /// Throws InvalidArgument unless both sides are odd and >= 3.
    void validate() const;

    bool operator==(const CropWindow&) const = default;
};

/// A w_y x w_x x 3 patch of normalized CIELAB values (each channel in [0,1]).
struct Crop {
    CropWindow window;
    std::vector<double> data;

    double at(int x, int y, int c) const { return data[(static_cast<std::size_t>(y) * window.w_x + x) * 3 + c]; }
};

struct Lab {
    double l = 0, a = 0, b = 0;
};

Lab srgb_to_lab(std::uint8_t r, std::uint8_t g, std::uint8_t b);
std::array<double, 3> lab_to_srgb(const Lab& lab); // unclamped, in [0,255] for in-gamut colors

/// Network input scaling: (L/100, (a+128)/256, (b+128)/256).
inline std::array<double, 3> normalize_lab(double l, double a, double b) {
    return {l / 100.0, (a + 128.0) / 256.0, (b + 128.0) / 256.0};
}

LabImage rgb_to_cielab(const Rgb8Image& img);
Rgb8Image cielab_to_rgb(const LabImage& img);

/// Area-weighted downscale (box filter over exact pixel overlaps). Throws
/// UpscaleRequested if either target side exceeds the source.
Rgb8Image resize_inter_area(const Rgb8Image& img, int target_w, int target_h);

/// True when the full window centered at (i, j) lies inside a width x height frame.
bool crop_fits(int width, int height, int i, int j, const CropWindow& window);

/// Patch centered at column i, row j covering [i-w_x/2, i+w_x/2] inclusive.
/// Throws OutOfBounds when the window overhangs the frame.
Crop extract_crop(const LabImage& img, int i, int j, const CropWindow& window);

/// Number of valid crop centers along each axis.
inline int valid_extent(int size, int window_side) { return size - 2 * (window_side / 2); }

// --- file io -------------------------------------------------------------

Rgb8Image read_image(const std::filesystem::path& path); // .png, .ppm
void write_png(const Rgb8Image& img, const std::filesystem::path& path);
void write_ppm(const Rgb8Image& img, const std::filesystem::path& path);

/// Image files (.png, .ppm) in a directory, sorted by file name.
std::vector<std::filesystem::path> list_image_files(const std::filesystem::path& dir);

/// Indices 0, n, 2n, ... below count (temporal subsampling).
std::vector<std::size_t> keep_every(std::size_t count, std::size_t n);

} // namespace dfe
