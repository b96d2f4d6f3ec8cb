#include "rtpp/tppmath.hpp"

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/special_functions/expint.hpp>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <string>

#include "rtpp/errors.hpp"

namespace rtpp::tpp {
namespace {

void require_gap(double gap, const char* where) {
  if (!(gap >= 0.0)) throw std::domain_error(std::string(where) + ": gap must be >= 0, got " + std::to_string(gap));
}

bool flat(double slope) { return std::abs(slope) < kSlopeEpsilon; }

// exp(c) * E1(c) for c > 0.
double scaled_e1(double c) {
  if (c < 600.0) return std::exp(c) * boost::math::expint(1, c);
  const double r = 1.0 / c;
  return r * (1.0 - r + 2.0 * r * r - 6.0 * r * r * r + 24.0 * r * r * r * r);
}

// Ein(x) = sum_k x^k / (k * k!) = Ei(x) - gamma - ln x.
double ein(double x) {
  if (x < 40.0) {
    double term = 1.0;
    double acc = 0.0;
    for (int k = 1; k < 400; ++k) {
      term *= x / k;
      const double add = term / k;
      acc += add;
      if (add < 1e-17 * acc) break;
    }
    return acc;
  }
  return boost::math::expint(x) - std::numbers::egamma - std::log(x);
}

double quadrature_expected_gap(const IntensitySpec& spec) {
  boost::math::quadrature::exp_sinh<double> integrator;
  auto integrand = [&](double g) {
    const double lf = log_gap_density(spec, g);
    return g * std::exp(lf);
  };
  double error = 0.0;
  double l1 = 0.0;
  double value = 0.0;
  try {
    value = integrator.integrate(integrand, 0.0, std::numeric_limits<double>::infinity(), 1e-10, &error, &l1);
  } catch (const std::exception& e) {
    throw NumericalError(std::string("expected_gap: quadrature failed: ") + e.what());
  }
  if (!std::isfinite(value) || error > 1e-6 * std::abs(value))
    throw NumericalError("expected_gap: quadrature did not converge");
  return value / return_probability(spec);
}

}  // namespace

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double intensity(const IntensitySpec& spec, double gap) {
  require_gap(gap, "intensity");
  return std::exp(spec.base + spec.slope * gap);
}

double cumulative_intensity(const IntensitySpec& spec, double gap) {
  require_gap(gap, "cumulative_intensity");
  if (flat(spec.slope)) return std::exp(spec.base) * gap;
  return std::exp(spec.base) * std::expm1(spec.slope * gap) / spec.slope;
}

double cumulative_intensity_limit(const IntensitySpec& spec) {
  if (spec.slope < 0.0 && !flat(spec.slope)) return std::exp(spec.base) / -spec.slope;
  return std::numeric_limits<double>::infinity();
}

double return_probability(const IntensitySpec& spec) {
  const double limit = cumulative_intensity_limit(spec);
  if (std::isinf(limit)) return 1.0;
  return -std::expm1(-limit);
}

double log_gap_density(const IntensitySpec& spec, double gap) {
  require_gap(gap, "log_gap_density");
  return spec.base + spec.slope * gap - cumulative_intensity(spec, gap);
}

double gap_cdf(const IntensitySpec& spec, double gap) {
  require_gap(gap, "gap_cdf");
  return -std::expm1(-cumulative_intensity(spec, gap));
}

double expected_gap(const IntensitySpec& spec, ExpectationMode mode) {
  if (!std::isfinite(spec.base) || !std::isfinite(spec.slope))
    throw NumericalError("expected_gap: non-finite intensity parameters");
  if (flat(spec.slope)) return std::exp(-spec.base);
  if (mode == ExpectationMode::Quadrature) return quadrature_expected_gap(spec);

  if (spec.slope > 0.0) {
    // E[g] = int_0^inf exp(-c (e^{wg} - 1)) dg = e^c E1(c) / w with c = e^a / w.
    const double c = std::exp(spec.base) / spec.slope;
    if (c > 0.0 && std::isfinite(c)) {
      const double v = scaled_e1(c) / spec.slope;
      if (std::isfinite(v)) return v;
    }
    return quadrature_expected_gap(spec);
  }
  // Defective case: int_0^inf (S(g) - S(inf)) dg / P(return) with
  // S(g) - S(inf) integrating to e^{-c} Ein(c) / |w|, c = e^a / |w|.
  const double w = -spec.slope;
  const double c = std::exp(spec.base) / w;
  if (c > 0.0 && c < 650.0) {
    const double v = std::exp(-c) * ein(c) / w / return_probability(spec);
    if (std::isfinite(v)) return v;
  }
  return quadrature_expected_gap(spec);
}

std::optional<double> gap_from_uniform(const IntensitySpec& spec, double u) {
  if (!(u > 0.0 && u <= 1.0)) throw std::domain_error("gap_from_uniform: u must lie in (0, 1]");
  const double target = -std::log(u);
  if (target == 0.0) return 0.0;
  if (flat(spec.slope)) return target * std::exp(-spec.base);
  const double x = target * spec.slope * std::exp(-spec.base);
  if (!(x > -1.0)) return std::nullopt;
  return std::log1p(x) / spec.slope;
}

std::optional<double> sample_gap(const IntensitySpec& spec, Rng& rng) { return gap_from_uniform(spec, rng.uniform()); }

double poisson_log_pmf(double rate, std::int64_t k) {
  if (!(rate > 0.0)) throw std::domain_error("poisson_log_pmf: rate must be positive");
  if (k < 0) throw std::domain_error("poisson_log_pmf: count must be non-negative");
  const double kd = static_cast<double>(k);
  return kd * std::log(rate) - rate - std::lgamma(kd + 1.0);
}

double gaussian_kl(const GaussianParams& q, const GaussianParams& p) {
  if (!(q.stddev > 0.0) || !(p.stddev > 0.0)) throw std::domain_error("gaussian_kl: standard deviations must be positive");
  const double d = q.mean - p.mean;
  return std::log(p.stddev / q.stddev) + (q.stddev * q.stddev + d * d) / (2.0 * p.stddev * p.stddev) - 0.5;
}

double sample_logit_normal(const GaussianParams& params, double eps) {
  return sigmoid(params.mean + params.stddev * eps);
}

ad::Var cumulative_intensity(ad::Var base, double slope, double gap) {
  require_gap(gap, "cumulative_intensity");
  if (flat(slope)) return gap * ad::exp(base);
  return (std::expm1(slope * gap) / slope) * ad::exp(base);
}

ad::Var cumulative_intensity(ad::Var base, ad::Var slope, double gap) {
  require_gap(gap, "cumulative_intensity");
  // phi(w) = (e^{wg} - 1) / w, with a series where the quotient cancels.
  ad::UnaryFn phi{
      [gap](double w) {
        const double x = w * gap;
        if (std::abs(x) < 1e-4) return gap * (1.0 + x / 2.0 + x * x / 6.0 + x * x * x / 24.0);
        return std::expm1(x) / w;
      },
      [gap](double w) {
        const double x = w * gap;
        if (std::abs(x) < 1e-4) return gap * gap * (0.5 + x / 3.0 + x * x / 8.0);
        return (gap * std::exp(x) * w - std::expm1(x)) / (w * w);
      }};
  return ad::exp(base) * slope.tape->map(slope, std::move(phi));
}

ad::Var log_gap_density(ad::Var base, double slope, double gap) {
  ad::Var lam = cumulative_intensity(base, slope, gap);
  return (base + slope * gap) - lam;
}

ad::Var log_gap_density(ad::Var base, ad::Var slope, double gap) {
  ad::Var lam = cumulative_intensity(base, slope, gap);
  return (base + gap * slope) - lam;
}

ad::Var poisson_log_pmf_log_rate(ad::Var log_rate, std::int64_t k) {
  if (k < 0) throw std::domain_error("poisson_log_pmf: count must be non-negative");
  const double kd = static_cast<double>(k);
  return (kd * log_rate - ad::exp(log_rate)) - std::lgamma(kd + 1.0);
}

ad::Var gaussian_kl(ad::Var q_mean, ad::Var q_std, ad::Var p_mean, ad::Var p_std) {
  ad::Var log_p = ad::log(p_std);
  ad::Var log_q = ad::log(q_std);
  ad::Var diff = q_mean - p_mean;
  ad::Var inv_var = ad::exp(-2.0 * log_p);
  ad::Var quad = (q_std * q_std + diff * diff) * inv_var;
  return ((log_p - log_q) + 0.5 * quad) - 0.5;
}

ad::Var sample_logit_normal(ad::Var mean, ad::Var stddev, double eps) { return ad::sigmoid(mean + eps * stddev); }

}  // namespace rtpp::tpp
