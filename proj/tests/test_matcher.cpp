#include "dfe/error.hpp"
#include "dfe/matcher.hpp"
#include "dfe/parallel.hpp"
#include "support/synthetic.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

using namespace dfe;

namespace {

const Autoencoder& small_model() {
    static const Autoencoder model = build_default_model(21, {4, 32});
    return model;
}

SsrField make_field(int w, int h, double fill = 1.0) {
    SsrField f;
    f.width = w;
    f.height = h;
    f.ssr.assign(static_cast<std::size_t>(w) * h, fill);
    f.valid.assign(static_cast<std::size_t>(w) * h, 1);
    return f;
}

std::array<double, 9> sample_surface(const auto& fn) {
    std::array<double, 9> s{};
    for (int y = -1; y <= 1; ++y) {
        for (int x = -1; x <= 1; ++x) s[static_cast<std::size_t>((y + 1) * 3 + (x + 1))] = fn(x, y);
    }
    return s;
}

} // namespace

TEST_CASE("dense encoding") {
    const LabImage img = rgb_to_cielab(testing::textured_image(40, 36, 4));
    const LatentMap map = encode_dense(small_model(), img, CropWindow{});
    CHECK(map.width == 40);
    CHECK(map.height == 36);
    CHECK(map.dim == 32);
    CHECK(map.valid_count() == 10u * 6u);
    for (int j = 0; j < map.height; ++j) {
        for (int i = 0; i < map.width; ++i) {
            const bool inside = i >= 15 && i <= 24 && j >= 15 && j <= 20;
            CHECK(map.is_valid(i, j) == inside);
            if (inside) {
                CHECK(map.code_at(i, j) == encode(small_model(), extract_crop(img, i, j, CropWindow{})));
            } else {
                for (double v : map.code(i, j)) CHECK(v == 0.0);
            }
        }
    }

    const LabImage exact = rgb_to_cielab(testing::textured_image(31, 31, 5));
    const LatentMap one = encode_dense(small_model(), exact, CropWindow{});
    CHECK(one.valid_count() == 1);
    CHECK(one.is_valid(15, 15));

    try {
        encode_dense(small_model(), rgb_to_cielab(testing::textured_image(30, 40, 6)), CropWindow{});
        FAIL("expected ImageTooSmall");
    } catch (const Error& e) {
        CHECK(e.code() == ErrorCode::ImageTooSmall);
    }
}

TEST_CASE("dense encoding ignores the thread budget") {
    const LabImage img = rgb_to_cielab(testing::textured_image(48, 40, 8));
    set_thread_budget(1);
    const LatentMap a = encode_dense(small_model(), img, CropWindow{});
    set_thread_budget(3);
    const LatentMap b = encode_dense(small_model(), img, CropWindow{});
    set_thread_budget(1);
    CHECK(a.codes == b.codes);
    CHECK(a.valid == b.valid);
}

TEST_CASE("ssr field") {
    const LabImage img = rgb_to_cielab(testing::textured_image(44, 38, 9));
    const LatentMap map = encode_dense(small_model(), img, CropWindow{});
    for (int j = 0; j < map.height; ++j) {
        for (int i = 0; i < map.width; ++i) {
            if (!map.is_valid(i, j)) continue;
            const SsrField f = ssr_field(map, map.code_at(i, j));
            CHECK(f.at(i, j) == 0.0);
            for (std::size_t k = 0; k < f.ssr.size(); ++k) {
                if (f.valid[k]) CHECK(f.ssr[k] >= 0.0);
            }
        }
    }
    LatentCode shifted = map.code_at(20, 18);
    shifted.values[7] += 1.0;
    CHECK(ssr_field(map, shifted).at(20, 18) == doctest::Approx(1.0).epsilon(1e-12));

    // Consistent permutation of code components leaves the field unchanged.
    std::vector<int> perm(static_cast<std::size_t>(map.dim));
    for (int k = 0; k < map.dim; ++k) perm[static_cast<std::size_t>(k)] = (k * 7 + 3) % map.dim;
    LatentMap pm = map;
    for (std::size_t p = 0; p < map.valid.size(); ++p) {
        for (int k = 0; k < map.dim; ++k) pm.codes[p * map.dim + perm[k]] = map.codes[p * map.dim + k];
    }
    const LatentCode ref = map.code_at(22, 19);
    LatentCode pref = ref;
    for (int k = 0; k < map.dim; ++k) pref.values[perm[k]] = ref.values[k];
    const SsrField f0 = ssr_field(map, ref), f1 = ssr_field(pm, pref);
    for (std::size_t k = 0; k < f0.ssr.size(); ++k) {
        if (f0.valid[k]) CHECK(f1.ssr[k] == doctest::Approx(f0.ssr[k]).epsilon(1e-12));
    }
}

TEST_CASE("candidate selection") {
    SUBCASE("unique minimum") {
        SsrField f = make_field(7, 6);
        f.at(4, 2) = 0.25;
        const Candidate c = select_candidate(f);
        CHECK(c.i == 4);
        CHECK(c.j == 2);
        CHECK(c.tie_count == 1);
        CHECK(c.ssr == 0.25);
    }
    SUBCASE("sharp pit beats flat valley") {
        SsrField f = make_field(12, 9, 0.0);
        for (int j = 0; j < 9; ++j) {
            for (int i = 0; i < 12; ++i) {
                f.at(i, j) = std::pow(j - 2, 2) * 0.1 + 0.0 * i; // valley along row 2
            }
        }
        // Pit at (8,6): raise a bowl around it so both minima are 0.
        for (int j = 4; j < 9; ++j) {
            for (int i = 6; i < 11; ++i) f.at(i, j) = 3.0 * (std::pow(i - 8, 2) + std::pow(j - 6, 2));
        }
        // Brute force: the valley points have trace 0.2, the pit has 12.
        const QuadraticSurface valley = fit_quadratic_3x3(f, 5, 2);
        const QuadraticSurface pit = fit_quadratic_3x3(f, 8, 6);
        REQUIRE(pit.hessian_trace() > valley.hessian_trace());
        const Candidate c = select_candidate(f);
        CHECK(c.i == 8);
        CHECK(c.j == 6);
        CHECK(c.tie_count > 2);
    }
    SUBCASE("constant field") {
        SsrField f = make_field(5, 4, 2.0);
        f.valid[0] = 0;
        const Candidate c = select_candidate(f);
        CHECK(c.i == 1);
        CHECK(c.j == 0);
        CHECK(c.tie_count == 19);
    }
    SUBCASE("empty") {
        SsrField f = make_field(3, 3);
        std::fill(f.valid.begin(), f.valid.end(), 0);
        CHECK_THROWS_AS(select_candidate(f), Error);
    }
    SUBCASE("argmin invariant under a positive offset") {
        std::mt19937_64 rng(4);
        std::uniform_real_distribution<double> u(0.0, 10.0);
        for (int rep = 0; rep < 50; ++rep) {
            SsrField f = make_field(9, 8);
            for (double& v : f.ssr) v = std::floor(u(rng)); // plenty of ties
            SsrField g = f;
            for (double& v : g.ssr) v += 3.0;
            const Candidate a = select_candidate(f), b = select_candidate(g);
            CHECK(a.i == b.i);
            CHECK(a.j == b.j);
            CHECK(a.tie_count == b.tie_count);
        }
    }
}

TEST_CASE("quadratic fit") {
    SUBCASE("exact quadratic") {
        const auto q = fit_quadratic_3x3(sample_surface([](double x, double y) {
            return std::pow(x - 0.3, 2) + std::pow(y - 0.2, 2);
        }));
        CHECK(q.b == doctest::Approx(-0.6));
        CHECK(q.c == doctest::Approx(-0.4));
        CHECK(q.d == doctest::Approx(1.0));
        CHECK(std::abs(q.e) < 1e-14);
        CHECK(q.f == doctest::Approx(1.0));
        CHECK(q.residual < 1e-24);
    }
    SUBCASE("constant") {
        const auto q = fit_quadratic_3x3(sample_surface([](double, double) { return 4.5; }));
        CHECK(q.a == doctest::Approx(4.5));
        for (double v : {q.b, q.c, q.d, q.e, q.f}) CHECK(std::abs(v) < 1e-14);
    }
    SUBCASE("cross term") {
        const auto q = fit_quadratic_3x3(sample_surface([](double x, double y) { return x * y; }));
        CHECK(q.e == doctest::Approx(1.0));
        for (double v : {q.a, q.b, q.c, q.d, q.f}) CHECK(std::abs(v) < 1e-14);
    }
    SUBCASE("least squares against normal equations") {
        // Non-quadratic samples: compare with a direct 6x6 normal-equation solve.
        const std::array<double, 9> s{3, 1, 4, 1, 5, 9, 2, 6, 5};
        const QuadraticSurface q = fit_quadratic_3x3(s);
        double ata[6][7] = {};
        for (int y = -1; y <= 1; ++y) {
            for (int x = -1; x <= 1; ++x) {
                const double row[6] = {1.0, double(x), double(y), double(x * x), double(x * y), double(y * y)};
                for (int r = 0; r < 6; ++r) {
                    for (int c = 0; c < 6; ++c) ata[r][c] += row[r] * row[c];
                    ata[r][6] += row[r] * s[static_cast<std::size_t>((y + 1) * 3 + x + 1)];
                }
            }
        }
        for (int c = 0; c < 6; ++c) { // Gauss-Jordan with partial pivoting
            int piv = c;
            for (int r = c + 1; r < 6; ++r) {
                if (std::abs(ata[r][c]) > std::abs(ata[piv][c])) piv = r;
            }
            std::swap(ata[c], ata[piv]);
            for (int r = 0; r < 6; ++r) {
                if (r == c) continue;
                const double f = ata[r][c] / ata[c][c];
                for (int k = c; k < 7; ++k) ata[r][k] -= f * ata[c][k];
            }
        }
        const double coef[6] = {q.a, q.b, q.c, q.d, q.e, q.f};
        for (int r = 0; r < 6; ++r) CHECK(coef[r] == doctest::Approx(ata[r][6] / ata[r][r]).epsilon(1e-12));
        double res = 0;
        for (int y = -1; y <= 1; ++y) {
            for (int x = -1; x <= 1; ++x) res += std::pow(q(x, y) - s[static_cast<std::size_t>((y + 1) * 3 + x + 1)], 2);
        }
        CHECK(q.residual == doctest::Approx(res).epsilon(1e-10));
    }
    SUBCASE("border neighborhood") {
        SsrField f = make_field(5, 5);
        f.valid[0] = 0;
        CHECK_THROWS_AS(fit_quadratic_3x3(f, 1, 1), Error);
        CHECK_THROWS_AS(fit_quadratic_3x3(f, 0, 2), Error);
        CHECK_NOTHROW(fit_quadratic_3x3(f, 2, 2));
    }
}

TEST_CASE("subpixel refinement") {
    SUBCASE("analytic minimum") {
        const auto q = fit_quadratic_3x3(sample_surface([](double x, double y) {
            return std::pow(x - 0.3, 2) + std::pow(y - 0.2, 2);
        }));
        const SubpixelEstimate e = subpixel_refine(q, 10, 20);
        CHECK(e.refined);
        CHECK(e.hessian_pd);
        CHECK(e.x == doctest::Approx(10.3).epsilon(1e-14));
        CHECK(e.y == doctest::Approx(20.2).epsilon(1e-14));
    }
    SUBCASE("saddle") {
        const auto q = fit_quadratic_3x3(sample_surface([](double x, double y) { return x * x - y * y; }));
        const SubpixelEstimate e = subpixel_refine(q, 4, 5);
        CHECK_FALSE(e.refined);
        CHECK_FALSE(e.hessian_pd);
        CHECK(e.x == 4.0);
        CHECK(e.y == 5.0);
    }
    SUBCASE("lopsided fit outside the cell") {
        const auto s = sample_surface([](double x, double y) { return 0.5 * std::pow(x - 1.4, 2) + 2.0 * y * y; });
        const auto q = fit_quadratic_3x3(s);
        // Dense brute-force evaluation of the fitted surface locates its minimum.
        double best = 1e300, bx = 0;
        for (int k = -3000; k <= 3000; ++k) {
            const double x = k * 1e-3;
            if (q(x, 0.0) < best) {
                best = q(x, 0.0);
                bx = x;
            }
        }
        CHECK(std::abs(bx - 1.4) < 2e-3);
        const SubpixelEstimate e = subpixel_refine(q, 7, 7);
        CHECK(e.hessian_pd);
        CHECK_FALSE(e.refined);
        CHECK(e.x == 7.0);
    }
    SUBCASE("refined value never exceeds the center value") {
        std::mt19937_64 rng(12);
        std::uniform_real_distribution<double> u(-1.0, 1.0);
        int refined = 0;
        for (int rep = 0; rep < 500; ++rep) {
            std::array<double, 9> s{};
            for (double& v : s) v = 2.0 + u(rng);
            s[4] = 1.0 + 0.2 * u(rng);
            const auto q = fit_quadratic_3x3(s);
            const SubpixelEstimate e = subpixel_refine(q, 0, 0);
            if (!e.refined) continue;
            ++refined;
            CHECK(std::abs(e.x) < 1.0);
            CHECK(std::abs(e.y) < 1.0);
            CHECK(q(e.x, e.y) <= q(0.0, 0.0) + 1e-12);
        }
        CHECK(refined > 100);
    }
}

TEST_CASE("matching") {
    const LabImage img = rgb_to_cielab(testing::textured_image(56, 50, 13));
    const LatentMap map = encode_dense(small_model(), img, CropWindow{});

    SUBCASE("self match") {
        const LatentCode ref = encode(small_model(), extract_crop(img, 27, 24, CropWindow{}));
        const MatchResult m = match_feature(small_model(), ref, img, CropWindow{});
        CHECK(m.pixel_i == 27);
        CHECK(m.pixel_j == 24);
        CHECK(m.ssr_min == 0.0);
        CHECK_FALSE(m.failed);
        CHECK(std::abs(m.x - 27) <= 1.0);
    }
    SUBCASE("border minimum falls back to the pixel") {
        const MatchResult m = match_in_map(map, map.code_at(15, 15));
        CHECK(m.pixel_i == 15);
        CHECK(m.pixel_j == 15);
        CHECK_FALSE(m.refined);
        CHECK(m.x == 15.0);
        CHECK(m.y == 15.0);
    }
    SUBCASE("integer translation") {
        const Rgb8Image src = testing::textured_image(60, 56, 14);
        const LabImage base = rgb_to_cielab(src);
        const LatentCode ref = encode(small_model(), extract_crop(base, 30, 28, CropWindow{}));
        for (const auto& [dx, dy] : {std::pair{3, -2}, std::pair{-4, 4}, std::pair{0, 1}}) {
            const LabImage moved = rgb_to_cielab(testing::translate_constant_pad(src, dx, dy, {90, 120, 60}));
            // Translated crops are bit-identical to the source crop.
            CHECK(extract_crop(moved, 30 + dx, 28 + dy, CropWindow{}).data == extract_crop(base, 30, 28, CropWindow{}).data);
            const MatchResult m = match_feature(small_model(), ref, moved, CropWindow{});
            CHECK(m.pixel_i == 30 + dx);
            CHECK(m.pixel_j == 28 + dy);
            CHECK(m.ssr_min == 0.0);
        }
    }
    SUBCASE("window must match the model") {
        CHECK_THROWS_AS(encode_dense(small_model(), img, CropWindow{21, 21}), Error);
    }
}

TEST_CASE("match rows") {
    MatchResult m;
    m.x = 12.5;
    m.y = 7.25;
    m.ssr_min = 0.125;
    m.refined = true;
    CHECK(format_match_row(3, m) == "3,12.5,7.25,0.125,1");
    m.refined = false;
    CHECK(format_match_row(1, m).ends_with(",0"));
}

TEST_CASE("landscape export") {
    const auto dir = std::filesystem::temp_directory_path() / "dfe_test_landscape";
    std::filesystem::create_directories(dir);
    SUBCASE("3x3 format and round trip") {
        SsrField f = make_field(3, 3);
        for (int k = 0; k < 9; ++k) f.ssr[static_cast<std::size_t>(k)] = 9.0 - k;
        export_ssr_landscape(f, dir / "f.csv");
        std::ifstream in(dir / "f.csv");
        std::vector<std::string> lines;
        for (std::string l; std::getline(in, l);) lines.push_back(l);
        REQUIRE(lines.size() == 4);
        CHECK(lines[0] == "9,8,7");
        CHECK(lines[2] == "3,2,1");
        CHECK(lines[3] == "# argmin,2,2,1");
        const SsrField g = import_ssr_landscape(dir / "f.csv");
        CHECK(g.width == 3);
        CHECK(g.height == 3);
        CHECK(g.ssr == f.ssr);
        const Candidate c = select_candidate(g);
        CHECK(c.i == 2);
        CHECK(c.j == 2);
    }
    SUBCASE("self-match export has an exact zero") {
        const LabImage img = rgb_to_cielab(testing::textured_image(40, 36, 15));
        const LatentMap map = encode_dense(small_model(), img, CropWindow{});
        const SsrField f = ssr_field(map, map.code_at(20, 18));
        export_ssr_landscape(f, dir / "s.csv");
        const SsrField g = import_ssr_landscape(dir / "s.csv");
        CHECK(g.width == 40);
        CHECK(g.height == 36);
        CHECK(g.valid == f.valid);
        CHECK(g.at(20, 18) == 0.0);
        CHECK(g.ssr == f.ssr);
    }
    std::filesystem::remove_all(dir);
}
