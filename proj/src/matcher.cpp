#include "dfe/matcher.hpp"

#include "dfe/error.hpp"
#include "kernels.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace dfe {

LatentCode LatentMap::code_at(int i, int j) const {
    const auto c = code(i, j);
    return LatentCode{std::vector<double>(c.begin(), c.end())};
}

std::size_t LatentMap::valid_count() const {
    return static_cast<std::size_t>(std::count(valid.begin(), valid.end(), std::uint8_t{1}));
}

namespace {

constexpr int kDenseBatch = 24;

} // namespace

LatentMap encode_dense(const Autoencoder& model, const LabImage& image, const CropWindow& window) {
    window.validate();
    if (window != model.spec().input_window) {
        throw Error(ErrorCode::ShapeMismatch, "window does not match the model input window");
    }
    if (image.width < window.w_x || image.height < window.w_y) {
        throw Error(ErrorCode::ImageTooSmall, "frame " + std::to_string(image.width) + "x" +
                                                  std::to_string(image.height) + " is smaller than the " +
                                                  std::to_string(window.w_x) + "x" + std::to_string(window.w_y) +
                                                  " window");
    }
    LatentMap map;
    map.width = image.width;
    map.height = image.height;
    map.dim = model.spec().latent_dim;
    map.window = window;
    map.codes.assign(static_cast<std::size_t>(map.width) * map.height * map.dim, 0.0);
    map.valid.assign(static_cast<std::size_t>(map.width) * map.height, 0);

    // Normalized channel planes, computed exactly as extract_crop does.
    const std::size_t npix = static_cast<std::size_t>(image.width) * image.height;
    std::vector<double> planes(npix * 3);
    for (std::size_t p = 0; p < npix; ++p) {
        const auto n = normalize_lab(image.data[3 * p], image.data[3 * p + 1], image.data[3 * p + 2]);
        planes[p] = n[0];
        planes[npix + p] = n[1];
        planes[2 * npix + p] = n[2];
    }

    std::vector<std::pair<int, int>> centers;
    for (int j = window.half_y(); j <= image.height - 1 - window.half_y(); ++j) {
        for (int i = window.half_x(); i <= image.width - 1 - window.half_x(); ++i) centers.emplace_back(i, j);
    }

    kernels::retain_large_allocations();
    const std::size_t plane = window.pixels();
    for (std::size_t start = 0; start < centers.size(); start += kDenseBatch) {
        const int count = static_cast<int>(std::min<std::size_t>(kDenseBatch, centers.size() - start));
        Tensor4 batch(Shape4{count, 3, window.w_y, window.w_x});
        for (int n = 0; n < count; ++n) {
            const auto [ci, cj] = centers[start + n];
            const int x0 = ci - window.half_x();
            const int y0 = cj - window.half_y();
            double* dst = batch.sample(n);
            for (int c = 0; c < 3; ++c) {
                for (int y = 0; y < window.w_y; ++y) {
                    const double* src = planes.data() + c * npix + static_cast<std::size_t>(y0 + y) * image.width + x0;
                    std::copy(src, src + window.w_x, dst + c * plane + static_cast<std::size_t>(y) * window.w_x);
                }
            }
        }
        const Tensor4 out = model.network().infer(batch, 0, model.encoder_size());
        for (int n = 0; n < count; ++n) {
            const auto [ci, cj] = centers[start + n];
            const std::size_t idx = static_cast<std::size_t>(cj) * map.width + ci;
            std::copy(out.sample(n), out.sample(n) + map.dim, map.codes.begin() + static_cast<std::ptrdiff_t>(idx * map.dim));
            map.valid[idx] = 1;
        }
    }
    return map;
}

SsrField ssr_field(const LatentMap& map, const LatentCode& reference) {
    if (static_cast<int>(reference.size()) != map.dim) {
        throw Error(ErrorCode::ShapeMismatch, "reference code has " + std::to_string(reference.size()) +
                                                  " components, map codes have " + std::to_string(map.dim));
    }
    SsrField field;
    field.width = map.width;
    field.height = map.height;
    field.valid = map.valid;
    field.ssr.assign(static_cast<std::size_t>(map.width) * map.height, 0.0);
    const std::size_t n = field.ssr.size();
    for (std::size_t p = 0; p < n; ++p) {
        if (!map.valid[p]) continue;
        const double* h = map.codes.data() + p * map.dim;
        double acc = 0.0;
        for (int k = 0; k < map.dim; ++k) {
            const double d = h[k] - reference.values[k];
            acc += d * d;
        }
        field.ssr[p] = acc;
    }
    return field;
}

QuadraticSurface fit_quadratic_3x3(const std::array<double, 9>& v) {
    // Normal equations of the fixed 9x6 design over x, y in {-1, 0, 1}
    // reduce to the stencil below (sum x^2 = 6, sum x^2 y^2 = 4).
    double s = 0, sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
    for (int y = -1; y <= 1; ++y) {
        for (int x = -1; x <= 1; ++x) {
            const double val = v[static_cast<std::size_t>((y + 1) * 3 + (x + 1))];
            s += val;
            sx += x * val;
            sy += y * val;
            sxx += x * x * val;
            syy += y * y * val;
            sxy += x * y * val;
        }
    }
    QuadraticSurface q;
    q.b = sx / 6.0;
    q.c = sy / 6.0;
    q.e = sxy / 4.0;
    q.d = sxx / 2.0 - s / 3.0;
    q.f = syy / 2.0 - s / 3.0;
    q.a = (5.0 * s - 3.0 * (sxx + syy)) / 9.0;
    for (int y = -1; y <= 1; ++y) {
        for (int x = -1; x <= 1; ++x) {
            const double r = q(x, y) - v[static_cast<std::size_t>((y + 1) * 3 + (x + 1))];
            q.residual += r * r;
        }
    }
    return q;
}

QuadraticSurface fit_quadratic_3x3(const SsrField& field, int i, int j) {
    std::array<double, 9> v{};
    for (int y = -1; y <= 1; ++y) {
        for (int x = -1; x <= 1; ++x) {
            if (!field.is_valid(i + x, j + y)) {
                throw Error(ErrorCode::NoNeighborhood, "3x3 neighborhood of (" + std::to_string(i) + "," +
                                                           std::to_string(j) + ") leaves the valid region");
            }
            v[static_cast<std::size_t>((y + 1) * 3 + (x + 1))] = field.at(i + x, j + y);
        }
    }
    return fit_quadratic_3x3(v);
}

namespace {

double curvature_or_flat(const SsrField& field, int i, int j) {
    for (int y = -1; y <= 1; ++y) {
        for (int x = -1; x <= 1; ++x) {
            if (!field.is_valid(i + x, j + y)) return 0.0;
        }
    }
    return fit_quadratic_3x3(field, i, j).hessian_trace();
}

} // namespace

Candidate select_candidate(const SsrField& field) {
    double best = std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t p = 0; p < field.ssr.size(); ++p) {
        if (field.valid[p] && (!any || field.ssr[p] < best)) {
            best = field.ssr[p];
            any = true;
        }
    }
    if (!any) throw Error(ErrorCode::EmptyField, "SSR field has no valid positions");

    Candidate cand;
    double best_curv = -std::numeric_limits<double>::infinity();
    for (int j = 0; j < field.height; ++j) {
        for (int i = 0; i < field.width; ++i) {
            if (!field.is_valid(i, j) || field.at(i, j) != best) continue;
            ++cand.tie_count;
            const double curv = curvature_or_flat(field, i, j);
            if (cand.tie_count == 1 || curv > best_curv) {
                best_curv = curv;
                cand.i = i;
                cand.j = j;
            }
        }
    }
    cand.ssr = best;
    return cand;
}

SubpixelEstimate subpixel_refine(const QuadraticSurface& q, int i, int j) {
    SubpixelEstimate est{false, false, static_cast<double>(i), static_cast<double>(j)};
    const double hxx = 2.0 * q.d;
    const double hyy = 2.0 * q.f;
    const double det = hxx * hyy - q.e * q.e;
    est.hessian_pd = hxx > 0.0 && det > 0.0;
    if (!est.hessian_pd) return est;
    // [2d e; e 2f] [dx; dy] = [-b; -c]
    const double dx = (-q.b * hyy + q.c * q.e) / det;
    const double dy = (-q.c * hxx + q.b * q.e) / det;
    if (!(std::abs(dx) < 1.0 && std::abs(dy) < 1.0)) return est;
    est.refined = true;
    est.x = i + dx;
    est.y = j + dy;
    return est;
}

MatchResult match_field(const SsrField& field) {
    const Candidate cand = select_candidate(field);
    MatchResult m;
    m.pixel_i = cand.i;
    m.pixel_j = cand.j;
    m.x = cand.i;
    m.y = cand.j;
    m.ssr_min = cand.ssr;
    m.tie_count = cand.tie_count;
    try {
        const QuadraticSurface q = fit_quadratic_3x3(field, cand.i, cand.j);
        const SubpixelEstimate est = subpixel_refine(q, cand.i, cand.j);
        m.refined = est.refined;
        m.hessian_pd = est.hessian_pd;
        m.x = est.x;
        m.y = est.y;
    } catch (const Error& e) {
        if (e.code() != ErrorCode::NoNeighborhood) throw;
    }
    return m;
}

MatchResult match_in_map(const LatentMap& map, const LatentCode& reference) {
    return match_field(ssr_field(map, reference));
}

MatchResult match_feature(const Autoencoder& model, const LatentCode& reference, const LabImage& target,
                          const CropWindow& window) {
    if (static_cast<int>(reference.size()) != model.spec().latent_dim) {
        throw Error(ErrorCode::ShapeMismatch, "reference code length does not match the model latent size");
    }
    return match_in_map(encode_dense(model, target, window), reference);
}

namespace {

std::string fmt(double v) {
    char buf[64];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

} // namespace

std::string format_match_row(int frame, const MatchResult& m) {
    return std::to_string(frame) + "," + fmt(m.x) + "," + fmt(m.y) + "," + fmt(m.ssr_min) + "," + (m.refined ? "1" : "0");
}

void export_ssr_landscape(const SsrField& field, const std::filesystem::path& path) {
    const Candidate cand = select_candidate(field);
    std::ofstream out(path);
    if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
    std::string line;
    for (int j = 0; j < field.height; ++j) {
        line.clear();
        for (int i = 0; i < field.width; ++i) {
            if (i) line += ',';
            if (field.is_valid(i, j)) line += fmt(field.at(i, j));
        }
        out << line << '\n';
    }
    out << "# argmin," << cand.i << ',' << cand.j << ',' << fmt(cand.ssr) << '\n';
    if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

SsrField import_ssr_landscape(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
    SsrField field;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line[0] == '#') continue;
        std::vector<std::string> cells;
        std::size_t start = 0;
        for (;;) {
            const std::size_t comma = line.find(',', start);
            cells.push_back(line.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (field.height == 0) field.width = static_cast<int>(cells.size());
        if (static_cast<int>(cells.size()) != field.width) {
            throw Error(ErrorCode::Io, path.string() + ": ragged landscape row " + std::to_string(field.height + 1));
        }
        for (const std::string& c : cells) {
            double v = 0.0;
            if (!c.empty()) {
                const auto res = std::from_chars(c.data(), c.data() + c.size(), v);
                if (res.ec != std::errc()) throw Error(ErrorCode::Io, path.string() + ": bad value '" + c + "'");
            }
            field.ssr.push_back(v);
            field.valid.push_back(c.empty() ? 0 : 1);
        }
        ++field.height;
    }
    return field;
}

} // namespace dfe
