#include "synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

namespace dfe::testing {

namespace {

std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

double lattice(std::uint64_t seed, std::int64_t ix, std::int64_t iy, int octave, int channel) {
    std::uint64_t h = splitmix(seed ^ static_cast<std::uint64_t>(octave * 8 + channel));
    h = splitmix(h ^ static_cast<std::uint64_t>(ix));
    h = splitmix(h ^ static_cast<std::uint64_t>(iy));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

double smooth(double t) { return t * t * t * (t * (6.0 * t - 15.0) + 10.0); }

std::uint8_t to_u8(double v) { return static_cast<std::uint8_t>(std::clamp(std::nearbyint(v), 0.0, 255.0)); }

} // namespace

NoiseTexture::NoiseTexture(std::uint64_t seed, double base_period, int octaves)
    : seed_(seed), base_period_(base_period), octaves_(octaves) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> mix(-1.0, 1.0);
    std::uniform_real_distribution<double> base(60.0, 190.0);
    for (auto& row : palette_) {
        for (double& v : row) v = 90.0 * mix(rng);
    }
    for (double& v : offset_) v = base(rng);
}

double NoiseTexture::noise(double x, double y, int octave, int channel) const {
    const double fx = std::floor(x), fy = std::floor(y);
    const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
    const double tx = smooth(x - fx), ty = smooth(y - fy);
    const double v00 = lattice(seed_, ix, iy, octave, channel);
    const double v10 = lattice(seed_, ix + 1, iy, octave, channel);
    const double v01 = lattice(seed_, ix, iy + 1, octave, channel);
    const double v11 = lattice(seed_, ix + 1, iy + 1, octave, channel);
    const double top = v00 + (v10 - v00) * tx;
    const double bottom = v01 + (v11 - v01) * tx;
    return top + (bottom - top) * ty - 0.5;
}

std::array<double, 3> NoiseTexture::sample(double x, double y) const {
    std::array<double, 3> field{};
    for (int ch = 0; ch < 3; ++ch) {
        double period = base_period_, amp = 1.0;
        for (int o = 0; o < octaves_; ++o) {
            field[static_cast<std::size_t>(ch)] += amp * noise(x / period, y / period, o, ch);
            period *= 0.5;
            amp *= 0.55;
        }
    }
    std::array<double, 3> rgb = offset_;
    for (std::size_t c = 0; c < 3; ++c) {
        for (std::size_t k = 0; k < 3; ++k) rgb[c] += palette_[c][k] * 2.0 * field[k];
    }
    for (double& v : rgb) v = std::clamp(v, 0.0, 255.0);
    return rgb;
}

Rgb8Image render_texture(const NoiseTexture& tex, int width, int height, double shift_x, double shift_y) {
    Rgb8Image img(width, height);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            const auto rgb = tex.sample(x - shift_x, y - shift_y);
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = to_u8(rgb[static_cast<std::size_t>(c)]);
        }
    }
    return img;
}

Rgb8Image textured_image(int width, int height, std::uint64_t seed) {
    std::mt19937_64 rng(splitmix(seed));
    std::uniform_real_distribution<double> period(6.0, 24.0);
    std::uniform_int_distribution<int> octaves(2, 5);
    const double p = period(rng);
    const int o = octaves(rng);
    return render_texture(NoiseTexture(seed, p, o), width, height);
}

Rgb8Image translate_constant_pad(const Rgb8Image& src, int dx, int dy, std::array<std::uint8_t, 3> pad) {
    Rgb8Image dst(src.width, src.height);
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) {
            const int sx = x - dx, sy = y - dy;
            const bool inside = sx >= 0 && sy >= 0 && sx < src.width && sy < src.height;
            for (int c = 0; c < 3; ++c) dst.at(x, y, c) = inside ? src.at(sx, sy, c) : pad[static_cast<std::size_t>(c)];
        }
    }
    return dst;
}

MovingPatchSequence moving_patch_sequence(int width, int height, int n_frames, std::uint64_t seed,
                                          double gain_drift) {
    const NoiseTexture background(seed, 16.0, 4);
    const NoiseTexture patch(splitmix(seed + 1), 7.0, 3);
    const double radius = 11.0;
    const double cx = 0.5 * (width - 1), cy = 0.5 * (height - 1);
    const double ax = 0.25 * (width - 2 * 24), ay = 0.25 * (height - 2 * 24);
    constexpr int ss = 4; // supersampling per axis

    MovingPatchSequence seq;
    for (int t = 0; t < n_frames; ++t) {
        const double phase = 2.0 * std::numbers::pi * t / n_frames;
        const Point2d p{cx + ax * std::sin(phase) + 0.37 * t / n_frames, cy + ay * std::sin(2.0 * phase + 0.4)};
        seq.path.push_back(p);
        const double gain = 1.0 - gain_drift * t / std::max(1, n_frames - 1);
        Rgb8Image img(width, height);
        for (int y = 0; y < height; ++y) {
            for (int x = 0; x < width; ++x) {
                std::array<double, 3> acc{};
                for (int sy = 0; sy < ss; ++sy) {
                    for (int sx = 0; sx < ss; ++sx) {
                        const double px = x + (sx + 0.5) / ss - 0.5, py = y + (sy + 0.5) / ss - 0.5;
                        const double rx = px - p.x, ry = py - p.y;
                        const auto rgb = rx * rx + ry * ry <= radius * radius ? patch.sample(rx, ry)
                                                                              : background.sample(px, py);
                        for (std::size_t c = 0; c < 3; ++c) acc[c] += rgb[c];
                    }
                }
                for (int c = 0; c < 3; ++c) img.at(x, y, c) = to_u8(gain * acc[static_cast<std::size_t>(c)] / (ss * ss));
            }
        }
        seq.frames.push_back(std::move(img));
    }
    return seq;
}

double chi2_cdf_simpson(double x, int dof, int intervals) {
    if (x <= 0.0) return 0.0;
    const double k = 0.5 * dof;
    const double log_norm = -k * std::log(2.0) - std::lgamma(k);
    auto pdf = [&](double t) {
        if (t <= 0.0) return dof == 2 ? std::exp(log_norm) : 0.0;
        return std::exp(log_norm + (k - 1.0) * std::log(t) - 0.5 * t);
    };
    if (intervals % 2 != 0) ++intervals;
    const double h = x / intervals;
    double sum = pdf(0.0) + pdf(x);
    for (int n = 1; n < intervals; ++n) sum += (n % 2 != 0 ? 4.0 : 2.0) * pdf(n * h);
    return sum * h / 3.0;
}

} // namespace dfe::testing
