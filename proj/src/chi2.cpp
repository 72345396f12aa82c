#include "dfe/chi2.hpp"

#include "dfe/error.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace dfe {

namespace {

constexpr int kMaxIter = 10000;
constexpr double kEps = 1e-16;

double gamma_series(double a, double x) {
    double ap = a;
    double sum = 1.0 / a;
    double del = sum;
    for (int n = 0; n < kMaxIter; ++n) {
        ap += 1.0;
        del *= x / ap;
        sum += del;
        if (std::abs(del) < std::abs(sum) * kEps) break;
    }
    return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Upper tail Q(a, x) by the modified Lentz method.
double gamma_continued_fraction(double a, double x) {
    constexpr double tiny = std::numeric_limits<double>::min() / kEps;
    double b = x + 1.0 - a;
    double c = 1.0 / tiny;
    double d = 1.0 / b;
    double h = d;
    for (int i = 1; i < kMaxIter; ++i) {
        const double an = -i * (i - a);
        b += 2.0;
        d = an * d + b;
        if (std::abs(d) < tiny) d = tiny;
        c = b + an / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < kEps) break;
    }
    return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

} // namespace

double regularized_gamma_p(double a, double x) {
    if (!(a > 0.0)) throw Error(ErrorCode::InvalidArgument, "incomplete gamma needs a > 0");
    if (x <= 0.0) return 0.0;
    if (x < a + 1.0) return gamma_series(a, x);
    return 1.0 - gamma_continued_fraction(a, x);
}

double chi2_cdf(double x, int dof) {
    if (dof < 1) throw Error(ErrorCode::InvalidArgument, "chi-square needs dof >= 1");
    return regularized_gamma_p(0.5 * dof, 0.5 * x);
}

double chi2_inv_cdf(double p, int dof) {
    if (!(p > 0.0 && p < 1.0)) {
        throw Error(ErrorCode::InvalidArgument, "chi-square quantile needs 0 < p < 1, got " + std::to_string(p));
    }
    if (dof < 1) throw Error(ErrorCode::InvalidArgument, "chi-square needs dof >= 1");
    double lo = 0.0;
    double hi = std::max(1.0, static_cast<double>(dof));
    while (chi2_cdf(hi, dof) < p) {
        lo = hi;
        hi *= 2.0;
    }
    while (hi - lo > 1e-8 * 0.5) {
        const double mid = 0.5 * (lo + hi);
        if (mid <= lo || mid >= hi) break;
        if (chi2_cdf(mid, dof) < p) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

} // namespace dfe
