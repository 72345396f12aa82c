#include "dfe/image.hpp"

#include "dfe/error.hpp"

#include <algorithm>
#include <cmath>

namespace dfe {

namespace {

// sRGB primaries with D65 white.
constexpr double kRgbToXyz[3][3] = {
    {0.4124564, 0.3575761, 0.1804375},
    {0.2126729, 0.7151522, 0.0721750},
    {0.0193339, 0.1191920, 0.9503041},
};

struct WhitePoint {
    double x, y, z;
};

// Reference white is the image of linear (1,1,1) so that white maps to a = b = 0.
WhitePoint white_point() {
    auto row = [](int r) { return kRgbToXyz[r][0] * 1.0 + kRgbToXyz[r][1] * 1.0 + kRgbToXyz[r][2] * 1.0; };
    return {row(0), row(1), row(2)};
}

const WhitePoint kWhite = white_point();

constexpr double kDelta = 6.0 / 29.0;

double srgb_to_linear(double c) {
    return c <= 0.04045 ? c / 12.92 : std::pow((c + 0.055) / 1.055, 2.4);
}

double linear_to_srgb(double c) {
    return c <= 0.0031308 ? 12.92 * c : 1.055 * std::pow(c, 1.0 / 2.4) - 0.055;
}

double lab_f(double t) {
    return t > kDelta * kDelta * kDelta ? std::cbrt(t) : t / (3.0 * kDelta * kDelta) + 4.0 / 29.0;
}

double lab_f_inv(double t) {
    return t > kDelta ? t * t * t : 3.0 * kDelta * kDelta * (t - 4.0 / 29.0);
}

struct Mat3 {
    double m[3][3];
};

Mat3 invert(const double (&a)[3][3]) {
    Mat3 r{};
    const double det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) -
                       a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
                       a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    r.m[0][0] = (a[1][1] * a[2][2] - a[1][2] * a[2][1]) / det;
    r.m[0][1] = (a[0][2] * a[2][1] - a[0][1] * a[2][2]) / det;
    r.m[0][2] = (a[0][1] * a[1][2] - a[0][2] * a[1][1]) / det;
    r.m[1][0] = (a[1][2] * a[2][0] - a[1][0] * a[2][2]) / det;
    r.m[1][1] = (a[0][0] * a[2][2] - a[0][2] * a[2][0]) / det;
    r.m[1][2] = (a[0][2] * a[1][0] - a[0][0] * a[1][2]) / det;
    r.m[2][0] = (a[1][0] * a[2][1] - a[1][1] * a[2][0]) / det;
    r.m[2][1] = (a[0][1] * a[2][0] - a[0][0] * a[2][1]) / det;
    r.m[2][2] = (a[0][0] * a[1][1] - a[0][1] * a[1][0]) / det;
    return r;
}

const Mat3 kXyzToRgb = invert(kRgbToXyz);

} // namespace

Rgb8Image::Rgb8Image(int w, int h, std::uint8_t fill)
    : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

LabImage::LabImage(int w, int h) : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, 0.0) {}

void CropWindow::validate() const {
    if (w_x < 3 || w_y < 3 || w_x % 2 == 0 || w_y % 2 == 0) {
        throw Error(ErrorCode::InvalidArgument,
                    "crop window must be odd and >= 3, got " + std::to_string(w_x) + "x" + std::to_string(w_y));
    }
}

Lab srgb_to_lab(std::uint8_t r8, std::uint8_t g8, std::uint8_t b8) {
    const double r = srgb_to_linear(r8 / 255.0);
    const double g = srgb_to_linear(g8 / 255.0);
    const double b = srgb_to_linear(b8 / 255.0);
    const double x = kRgbToXyz[0][0] * r + kRgbToXyz[0][1] * g + kRgbToXyz[0][2] * b;
    const double y = kRgbToXyz[1][0] * r + kRgbToXyz[1][1] * g + kRgbToXyz[1][2] * b;
    const double z = kRgbToXyz[2][0] * r + kRgbToXyz[2][1] * g + kRgbToXyz[2][2] * b;
    const double yr = y / kWhite.y;
    const double fx = lab_f(x / kWhite.x);
    const double fy = lab_f(yr);
    const double fz = lab_f(z / kWhite.z);
    // Linear segment written out so that black gives L = 0 exactly.
    const double l = yr > kDelta * kDelta * kDelta ? 116.0 * fy - 16.0 : yr * (116.0 / (3.0 * kDelta * kDelta));
    return {l, 500.0 * (fx - fy), 200.0 * (fy - fz)};
}

std::array<double, 3> lab_to_srgb(const Lab& lab) {
    const double fy = (lab.l + 16.0) / 116.0;
    const double fx = fy + lab.a / 500.0;
    const double fz = fy - lab.b / 200.0;
    const double x = kWhite.x * lab_f_inv(fx);
    const double y = kWhite.y * lab_f_inv(fy);
    const double z = kWhite.z * lab_f_inv(fz);
    std::array<double, 3> rgb{};
    for (int c = 0; c < 3; ++c) {
        const double lin = kXyzToRgb.m[c][0] * x + kXyzToRgb.m[c][1] * y + kXyzToRgb.m[c][2] * z;
        rgb[c] = 255.0 * linear_to_srgb(lin);
    }
    return rgb;
}

LabImage rgb_to_cielab(const Rgb8Image& img) {
    LabImage out(img.width, img.height);
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    for (std::size_t p = 0; p < n; ++p) {
        const Lab lab = srgb_to_lab(img.data[3 * p], img.data[3 * p + 1], img.data[3 * p + 2]);
        // Guard against rounding just outside the documented L range.
        out.data[3 * p] = std::clamp(lab.l, 0.0, 100.0);
        out.data[3 * p + 1] = lab.a;
        out.data[3 * p + 2] = lab.b;
    }
    return out;
}

Rgb8Image cielab_to_rgb(const LabImage& img) {
    Rgb8Image out(img.width, img.height);
    const std::size_t n = static_cast<std::size_t>(img.width) * img.height;
    for (std::size_t p = 0; p < n; ++p) {
        const auto rgb = lab_to_srgb({img.data[3 * p], img.data[3 * p + 1], img.data[3 * p + 2]});
        for (int c = 0; c < 3; ++c) {
            out.data[3 * p + c] = static_cast<std::uint8_t>(std::clamp(std::nearbyint(rgb[c]), 0.0, 255.0));
        }
    }
    return out;
}

namespace {

struct Tap {
    int src;
    double weight;
};

// Exact overlap of destination cell [d*scale, (d+1)*scale) with each source cell.
std::vector<std::vector<Tap>> area_taps(int src, int dst) {
    std::vector<std::vector<Tap>> taps(dst);
    const double scale = static_cast<double>(src) / dst;
    for (int d = 0; d < dst; ++d) {
        const double lo = d * scale;
        const double hi = d + 1 == dst ? static_cast<double>(src) : (d + 1) * scale;
        for (int s = static_cast<int>(std::floor(lo)); s < src && s < hi; ++s) {
            const double w = std::min(hi, s + 1.0) - std::max(lo, static_cast<double>(s));
            if (w > 1e-12) taps[d].push_back({s, w});
        }
    }
    return taps;
}

} // namespace

Rgb8Image resize_inter_area(const Rgb8Image& img, int target_w, int target_h) {
    if (target_w < 1 || target_h < 1) {
        throw Error(ErrorCode::InvalidArgument, "resize target must be at least 1x1");
    }
    if (target_w > img.width || target_h > img.height) {
        throw Error(ErrorCode::UpscaleRequested,
                    "inter-area resize only downscales: " + std::to_string(img.width) + "x" +
                        std::to_string(img.height) + " -> " + std::to_string(target_w) + "x" +
                        std::to_string(target_h));
    }
    if (target_w == img.width && target_h == img.height) return img;

    const auto xt = area_taps(img.width, target_w);
    const auto yt = area_taps(img.height, target_h);
    Rgb8Image out(target_w, target_h);
    for (int y = 0; y < target_h; ++y) {
        for (int x = 0; x < target_w; ++x) {
            double acc[3] = {0, 0, 0};
            double wsum = 0;
            for (const Tap& ty : yt[y]) {
                for (const Tap& tx : xt[x]) {
                    const double w = ty.weight * tx.weight;
                    wsum += w;
                    for (int c = 0; c < 3; ++c) acc[c] += w * img.at(tx.src, ty.src, c);
                }
            }
            for (int c = 0; c < 3; ++c) {
                out.at(x, y, c) = static_cast<std::uint8_t>(std::clamp(std::nearbyint(acc[c] / wsum), 0.0, 255.0));
            }
        }
    }
    return out;
}

bool crop_fits(int width, int height, int i, int j, const CropWindow& window) {
    const int hx = window.half_x();
    const int hy = window.half_y();
    return i - hx >= 0 && i + hx <= width - 1 && j - hy >= 0 && j + hy <= height - 1;
}

Crop extract_crop(const LabImage& img, int i, int j, const CropWindow& window) {
    window.validate();
    if (!crop_fits(img.width, img.height, i, j, window)) {
        throw Error(ErrorCode::OutOfBounds, "crop centered at (" + std::to_string(i) + "," + std::to_string(j) +
                                                ") overhangs a " + std::to_string(img.width) + "x" +
                                                std::to_string(img.height) + " frame");
    }
    Crop crop{window, std::vector<double>(window.pixels() * 3)};
    const int x0 = i - window.half_x();
    const int y0 = j - window.half_y();
    std::size_t k = 0;
    for (int y = 0; y < window.w_y; ++y) {
        for (int x = 0; x < window.w_x; ++x) {
            const auto n = normalize_lab(img.at(x0 + x, y0 + y, 0), img.at(x0 + x, y0 + y, 1), img.at(x0 + x, y0 + y, 2));
            crop.data[k++] = n[0];
            crop.data[k++] = n[1];
            crop.data[k++] = n[2];
        }
    }
    return crop;
}

std::vector<std::size_t> keep_every(std::size_t count, std::size_t n) {
    if (n == 0) throw Error(ErrorCode::InvalidArgument, "keep-every factor must be >= 1");
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < count; i += n) idx.push_back(i);
    return idx;
}

} // namespace dfe
