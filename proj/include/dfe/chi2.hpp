#pragma once

namespace dfe {

/// Regularized lower incomplete gamma P(a, x): series for x < a + 1,
/// Lentz continued fraction otherwise.
double regularized_gamma_p(double a, double x);

/// CDF of the chi-square distribution with dof degrees of freedom.
double chi2_cdf(double x, int dof);

/// x with chi2_cdf(x, dof) = p, by bracketed bisection to an absolute
/// tolerance of 1e-8. Throws InvalidArgument unless 0 < p < 1 and dof >= 1.
double chi2_inv_cdf(double p, int dof);

} // namespace dfe
