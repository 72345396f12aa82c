#include "dfe/chi2.hpp"
#include "dfe/error.hpp"
#include "dfe/tracker.hpp"
#include "support/synthetic.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>

using namespace dfe;

namespace {

TrackSequence track_from(const std::vector<Point2d>& pts) {
    TrackSequence t;
    for (const auto& p : pts) {
        MatchResult m;
        m.x = p.x;
        m.y = p.y;
        m.pixel_i = static_cast<int>(std::lround(p.x));
        m.pixel_j = static_cast<int>(std::lround(p.y));
        t.results.push_back(m);
    }
    return t;
}

GroundTruth gt_from(const std::vector<Point2d>& pts) {
    GroundTruth g;
    for (std::size_t k = 0; k < pts.size(); ++k) g.entries[static_cast<int>(k) + 1] = pts[k];
    return g;
}

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace

TEST_CASE("chi-square quantiles") {
    CHECK(chi2_inv_cdf(0.99, 2) == doctest::Approx(-2.0 * std::log(0.01)).epsilon(1e-9));
    CHECK(std::abs(chi2_inv_cdf(0.99, 2) - 9.21034) < 1e-4);
    CHECK(std::abs(chi2_inv_cdf(0.5, 2) - 1.38629) < 1e-5);
    CHECK(std::abs(chi2_inv_cdf(0.99, 4) - 13.2767) < 1e-4);
    // Independent Simpson-rule integration of the density.
    CHECK(testing::chi2_cdf_simpson(13.2767, 4) == doctest::Approx(0.99).epsilon(1e-5));
    CHECK(testing::chi2_cdf_simpson(chi2_inv_cdf(0.99, 260), 260) == doctest::Approx(0.99).epsilon(1e-7));
    CHECK(std::abs(chi2_inv_cdf(0.99, 260) - 315.970) < 1e-3);

    CHECK_THROWS_AS(chi2_inv_cdf(0.0, 2), Error);
    CHECK_THROWS_AS(chi2_inv_cdf(1.0, 2), Error);
    CHECK_THROWS_AS(chi2_inv_cdf(0.5, 0), Error);
}

TEST_CASE("chi-square cdf agrees with numerical integration") {
    for (int dof : {2, 3, 5, 10, 40, 120}) {
        for (double q : {0.3, 0.8, 1.0, 1.4, 2.0}) {
            const double x = q * dof;
            CHECK(chi2_cdf(x, dof) == doctest::Approx(testing::chi2_cdf_simpson(x, dof)).epsilon(1e-8));
        }
    }
}

TEST_CASE("chi-square inverse is the inverse of the cdf") {
    double worst = 0.0;
    for (int dof = 2; dof <= 600; dof += (dof < 40 ? 1 : 7)) {
        for (int pk = 1; pk <= 99; pk += 2) {
            const double p = pk / 100.0;
            worst = std::max(worst, std::abs(chi2_cdf(chi2_inv_cdf(p, dof), dof) - p));
        }
    }
    CHECK(worst < 1e-7);
}

TEST_CASE("confidence curve") {
    const auto c = ci_curve(300);
    CHECK(c[0] == doctest::Approx(9.21034).epsilon(1e-6));
    for (std::size_t t = 1; t < c.size(); ++t) CHECK(c[t] > c[t - 1]);
    CHECK(std::abs(c[129] - 315.970) < 1e-3);
    CHECK_THROWS_AS(ci_curve(0), Error);
}

TEST_CASE("max possible distance") {
    CHECK(std::abs(max_possible_distance(420, 300) - 516.14) < 0.01);
}

TEST_CASE("error report arithmetic") {
    SUBCASE("perfect track") {
        const std::vector<Point2d> p{{20, 30}, {21.5, 30.25}, {22, 31}};
        const ErrorReport r = error_report(track_from(p), gt_from(p), {1.0, 1.0});
        CHECK(r.mean_error == 0.0);
        for (const auto& e : r.frames) CHECK(e.cumulative == 0.0);
        CHECK_FALSE(r.diverged);
    }
    SUBCASE("constant (3,4) error") {
        std::vector<Point2d> gt, est;
        for (int k = 0; k < 10; ++k) {
            gt.push_back({50.0 + k, 60.0});
            est.push_back({53.0 + k, 64.0});
        }
        const ErrorReport r = error_report(track_from(est), gt_from(gt), {1.0, 1.0});
        CHECK(r.mean_error == doctest::Approx(5.0));
        for (std::size_t k = 0; k < 10; ++k) {
            CHECK(r.frames[k].distance == doctest::Approx(5.0));
            CHECK(r.frames[k].standardized == doctest::Approx(25.0));
            CHECK(r.frames[k].cumulative == doctest::Approx(25.0 * (k + 1)));
        }
        CHECK(r.diverged);
        CHECK(r.first_exceed_frame == 1);
    }
    SUBCASE("invariants on random tracks") {
        std::mt19937_64 rng(3);
        std::normal_distribution<double> n(0.0, 2.0);
        std::vector<Point2d> gt, est;
        for (int k = 0; k < 40; ++k) {
            gt.push_back({100.0 + k, 80.0});
            est.push_back({100.0 + k + n(rng), 80.0 + n(rng)});
        }
        const ErrorReport r = error_report(track_from(est), gt_from(gt), {1.5, 0.8});
        double sum = 0;
        for (const auto& e : r.frames) sum += e.distance;
        CHECK(std::abs(r.mean_error - sum / 40.0) < 1e-12);
        std::vector<double> d;
        for (const auto& e : r.frames) d.push_back(e.distance);
        std::sort(d.begin(), d.end(), std::greater<>());
        CHECK(r.sorted_errors == d);
        for (std::size_t k = 1; k < r.frames.size(); ++k) CHECK(r.frames[k].cumulative >= r.frames[k - 1].cumulative);

        // Common sigma scale c multiplies every standardized error by 1/c^2.
        const ErrorReport scaled = error_report(track_from(est), gt_from(gt), {1.5 * 2.0, 0.8 * 2.0});
        for (std::size_t k = 0; k < r.frames.size(); ++k) {
            CHECK(scaled.frames[k].standardized == doctest::Approx(r.frames[k].standardized / 4.0).epsilon(1e-14));
        }

        // Reordering frames changes the path of the cumulative series but not its end.
        std::vector<std::size_t> order(40);
        std::iota(order.begin(), order.end(), 0);
        std::reverse(order.begin(), order.end());
        std::vector<Point2d> gt2, est2;
        for (auto k : order) {
            gt2.push_back(gt[k]);
            est2.push_back(est[k]);
        }
        const ErrorReport rev = error_report(track_from(est2), gt_from(gt2), {1.5, 0.8});
        CHECK(rev.frames.back().cumulative == doctest::Approx(r.frames.back().cumulative).epsilon(1e-12));
        CHECK(rev.frames.front().cumulative != doctest::Approx(r.frames.front().cumulative));
    }
    SUBCASE("missing ground truth") {
        const std::vector<Point2d> p{{1, 1}, {2, 2}, {3, 3}};
        GroundTruth g = gt_from(p);
        g.entries.erase(2);
        try {
            error_report(track_from(p), g, {1, 1});
            FAIL("expected MissingGroundTruth");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::MissingGroundTruth);
            CHECK(std::string(e.what()).find("frame 2") != std::string::npos);
        }
    }
}

TEST_CASE("divergence detection") {
    std::vector<Point2d> gt(20, Point2d{40, 40});
    std::vector<Point2d> est = gt;
    CHECK_FALSE(divergence_detect(error_report(track_from(est), gt_from(gt), {1, 1})).has_value());
    est[12].x += 30.0;
    const ErrorReport r = error_report(track_from(est), gt_from(gt), {1, 1});
    CHECK(divergence_detect(r) == 13);
    CHECK(r.first_exceed_frame == 13);
}

TEST_CASE("labeling chi-square") {
    SUBCASE("identical relabels") {
        std::vector<std::vector<Point2d>> rl(4, std::vector<Point2d>(3, Point2d{5, 5}));
        try {
            labeling_chi_square(rl);
            FAIL("expected DegenerateSigma");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::DegenerateSigma);
        }
    }
    SUBCASE("too few relabels") {
        std::vector<std::vector<Point2d>> rl{{{1, 1}, {2, 2}}, {{1, 1}}};
        try {
            labeling_chi_square(rl);
            FAIL("expected InsufficientSamples");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::InsufficientSamples);
        }
    }
    SUBCASE("normalization identity and sigma recovery") {
        // 18 frames x 5 relabels = 90 samples. Deviations from the per-frame
        // mean of k draws have standard deviation sigma*sqrt((k-1)/k).
        const int frames = 18, k = 5;
        const double sx = 1.2, sy = 0.7;
        const double shrink = std::sqrt((k - 1.0) / k);
        int within_x = 0, within_y = 0;
        std::vector<double> ratios;
        const int runs = 400;
        for (int seed = 0; seed < runs; ++seed) {
            std::mt19937_64 rng(1000 + seed);
            std::normal_distribution<double> nx(0.0, sx), ny(0.0, sy);
            std::vector<std::vector<Point2d>> rl(frames);
            for (int f = 0; f < frames; ++f) {
                for (int a = 0; a < k; ++a) rl[f].push_back({100.0 + f + nx(rng), 50.0 + ny(rng)});
            }
            const LabelingTest t = labeling_chi_square(rl);
            CHECK(t.samples == 90);
            CHECK(t.dof == 180);
            CHECK(t.statistic == doctest::Approx(2.0 * t.samples).epsilon(1e-12));
            CHECK(t.pass);
            within_x += std::abs(t.sigma_x / (sx * shrink) - 1.0) < 0.15 ? 1 : 0;
            within_y += std::abs(t.sigma_y / (sy * shrink) - 1.0) < 0.15 ? 1 : 0;
            ratios.push_back(t.sigma_x / (sx * shrink));
        }
        // 72 degrees of freedom per axis: relative sd of the estimate is about
        // 1/sqrt(144), so 15% is about 1.8 sd and ~93% of runs land inside.
        CHECK(within_x >= runs * 85 / 100);
        CHECK(within_y >= runs * 85 / 100);
        std::nth_element(ratios.begin(), ratios.begin() + runs / 2, ratios.end());
        CHECK(std::abs(ratios[runs / 2] - 1.0) < 0.03);
    }
    SUBCASE("given sigma") {
        std::vector<std::vector<Point2d>> rl{{{0, 0}, {2, 0}}, {{0, 0}, {0, 2}}};
        const LabelingTest t = labeling_chi_square(rl, LabelingSigma{1.0, 1.0});
        CHECK(t.statistic == doctest::Approx(4.0));
        CHECK(t.threshold == doctest::Approx(chi2_inv_cdf(0.99, 8)));
        CHECK(t.pass);
        const LabelingTest tight = labeling_chi_square(rl, LabelingSigma{0.1, 0.1});
        CHECK_FALSE(tight.pass);
    }
}

TEST_CASE("final-frame exceedance rate of i.i.d. chi-square errors") {
    // Standardized errors distributed as chi-square(2): ex, ey ~ N(0, 1).
    const int trials = 2000, n = 50;
    int exceed = 0;
    for (int s = 0; s < trials; ++s) {
        std::mt19937_64 rng(77 + s);
        std::normal_distribution<double> g(0.0, 1.0);
        std::vector<Point2d> gt(n, Point2d{10, 10}), est;
        for (int k = 0; k < n; ++k) est.push_back({10 + g(rng), 10 + g(rng)});
        const ErrorReport r = error_report(track_from(est), gt_from(gt), {1, 1});
        if (r.frames.back().cumulative > r.frames.back().ci) ++exceed;
    }
    const double rate = static_cast<double>(exceed) / trials;
    CHECK(rate > 0.003);
    CHECK(rate < 0.02);
}

TEST_CASE("csv io") {
    const auto dir = std::filesystem::temp_directory_path() / "dfe_test_tracker_io";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    {
        std::ofstream out(dir / "gt.csv");
        out << "frame,x,y\n1,10.5,20\n2,11,20.25\n3,12,21\n";
    }
    const GroundTruth g = read_ground_truth_csv(dir / "gt.csv");
    REQUIRE(g.entries.size() == 3);
    CHECK(g.entries.at(2).y == 20.25);
    {
        std::ofstream out(dir / "bad.csv");
        out << "frame,x,y\n1,1,1\n1,2,2\n";
    }
    CHECK_THROWS_AS(read_ground_truth_csv(dir / "bad.csv"), Error);

    TrackSequence t = track_from({{10.5, 20}, {11.25, 20.5}});
    t.results[1].refined = true;
    t.results[1].ssr_min = 0.375;
    write_track_csv(t, dir / "track.csv");
    CHECK(slurp(dir / "track.csv") == "frame,x,y,ssr,refined\n1,10.5,20,0,0\n2,11.25,20.5,0.375,1\n");
    const TrackSequence back = read_track_csv(dir / "track.csv");
    REQUIRE(back.results.size() == 2);
    CHECK(back.results[1].x == 11.25);
    CHECK(back.results[1].refined);

    const ErrorReport r = error_report(t, gt_from({{10.5, 20}, {11, 20.5}}), {0.5, 0.5});
    write_error_report(r, dir / "report");
    for (const char* f : {"per_frame.csv", "sorted_errors.csv", "cumulative.csv", "summary.csv"}) {
        CHECK(std::filesystem::exists(dir / "report" / f));
    }
    CHECK(slurp(dir / "report" / "summary.csv") == "mean_error_px,diverged,first_exceed_frame\n0.125,0,\n");
    std::filesystem::remove_all(dir);
}

TEST_CASE("tracking synthetic sequences") {
    const Autoencoder model = build_default_model(31, {4, 32});
    const Rgb8Image base = testing::textured_image(64, 58, 41);

    SUBCASE("identical frames, both modes") {
        std::vector<LabImage> frames(4, rgb_to_cielab(base));
        const TrackSequence a = track(model, frames, 30, 27, CropWindow{}, ReferenceMode::fixed);
        const TrackSequence b = track(model, frames, 30, 27, CropWindow{}, ReferenceMode::updating);
        REQUIRE(a.results.size() == 4);
        for (std::size_t k = 0; k < 4; ++k) {
            CHECK(a.results[k].pixel_i == 30);
            CHECK(a.results[k].pixel_j == 27);
            CHECK(a.results[k].ssr_min == 0.0);
            CHECK(format_match_row(1, a.results[k]) == format_match_row(1, b.results[k]));
        }
    }
    SUBCASE("integer translations are followed exactly") {
        std::vector<LabImage> frames;
        const int shifts[][2] = {{0, 0}, {1, 0}, {2, -1}, {3, -2}, {2, -3}};
        for (const auto& s : shifts) frames.push_back(rgb_to_cielab(testing::translate_constant_pad(base, s[0], s[1], {128, 128, 128})));
        std::vector<std::size_t> seen;
        const TrackSequence t = track(model, frames, 31, 29, CropWindow{}, ReferenceMode::fixed,
                                      [&](std::size_t f, const MatchResult&) { seen.push_back(f); });
        CHECK(seen.size() == 5);
        for (std::size_t k = 0; k < 5; ++k) {
            CHECK(t.results[k].pixel_i == 31 + shifts[k][0]);
            CHECK(t.results[k].pixel_j == 29 + shifts[k][1]);
        }
    }
    SUBCASE("reference must have a full crop") {
        std::vector<LabImage> frames(2, rgb_to_cielab(base));
        try {
            track(model, frames, 3, 3, CropWindow{}, ReferenceMode::fixed);
            FAIL("expected OutOfBounds");
        } catch (const Error& e) {
            CHECK(e.code() == ErrorCode::OutOfBounds);
        }
    }
    SUBCASE("an unusable frame is recorded and tracking continues") {
        std::vector<LabImage> frames{rgb_to_cielab(base), rgb_to_cielab(testing::textured_image(20, 20, 1)),
                                     rgb_to_cielab(base)};
        const TrackSequence t = track(model, frames, 30, 27, CropWindow{}, ReferenceMode::fixed);
        REQUIRE(t.results.size() == 3);
        CHECK(t.results[1].failed);
        CHECK(t.results[1].pixel_i == 30);
        CHECK(std::isinf(t.results[1].ssr_min));
        CHECK_FALSE(t.results[2].failed);
        CHECK(t.results[2].ssr_min == 0.0);
    }
}
