#pragma once

// Point-process and distribution math for an exponential-affine intensity
// lambda(g) = exp(base + slope * g), plus the Poisson, Gaussian-KL and
// logit-normal pieces of the latent-variable objective.

#include <cstdint>
#include <optional>

#include "rtpp/diffgraph.hpp"
#include "rtpp/rng.hpp"

namespace rtpp::tpp {

/// Slopes with magnitude below this are treated as exactly zero.
inline constexpr double kSlopeEpsilon = 1e-8;

/// Evaluated intensity of the next gap: base = w_z z + w_h . h + b_t, slope = w_t.
struct IntensitySpec {
  double base = 0.0;
  double slope = 0.0;
};

/// Mean and standard deviation of a Gaussian in logit space.
struct GaussianParams {
  double mean = 0.0;
  double stddev = 1.0;
  bool operator==(const GaussianParams&) const = default;
};

double intensity(const IntensitySpec& spec, double gap);
/// Integral of the intensity over [0, gap].
double cumulative_intensity(const IntensitySpec& spec, double gap);
/// Limit of cumulative_intensity as gap grows; +inf unless slope < 0.
double cumulative_intensity_limit(const IntensitySpec& spec);
/// Probability that the next gap is finite (below 1 only for a negative slope).
double return_probability(const IntensitySpec& spec);
double log_gap_density(const IntensitySpec& spec, double gap);
double gap_cdf(const IntensitySpec& spec, double gap);

enum class ExpectationMode { Closed, Quadrature };

/// Mean next gap, conditional on a return when the distribution is defective.
/// Closed mode uses exponential-integral identities and falls back to
/// quadrature where those overflow.
double expected_gap(const IntensitySpec& spec, ExpectationMode mode = ExpectationMode::Closed);

/// Inverse-CDF transform of u in (0, 1]. Empty when the draw lands in the
/// "never returns" mass of a defective distribution.
std::optional<double> gap_from_uniform(const IntensitySpec& spec, double u);
std::optional<double> sample_gap(const IntensitySpec& spec, Rng& rng);

double poisson_log_pmf(double rate, std::int64_t k);

double gaussian_kl(const GaussianParams& q, const GaussianParams& p);

/// z = sigmoid(mean + stddev * eps).
double sample_logit_normal(const GaussianParams& params, double eps);

double sigmoid(double x);
double softplus(double x);

// Tape-attached forms used by the objective; they agree with the scalar
// versions above to rounding.

ad::Var cumulative_intensity(ad::Var base, double slope, double gap);
ad::Var cumulative_intensity(ad::Var base, ad::Var slope, double gap);
ad::Var log_gap_density(ad::Var base, double slope, double gap);
ad::Var log_gap_density(ad::Var base, ad::Var slope, double gap);
/// Poisson log-pmf parameterized by log-rate, k * eta - exp(eta) - ln k!.
ad::Var poisson_log_pmf_log_rate(ad::Var log_rate, std::int64_t k);
ad::Var gaussian_kl(ad::Var q_mean, ad::Var q_std, ad::Var p_mean, ad::Var p_std);
ad::Var sample_logit_normal(ad::Var mean, ad::Var stddev, double eps);

}  // namespace rtpp::tpp
