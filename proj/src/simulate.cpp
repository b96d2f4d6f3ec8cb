#include "rtpp/simulate.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>

#include "rtpp/errors.hpp"
#include "rtpp/rng.hpp"
#include "rtpp/tppmath.hpp"

namespace rtpp::sim {
namespace {

using eventlog::Session;
using eventlog::SessionSequence;

std::string user_name(std::size_t i, std::size_t total) {
  std::size_t width = 1;
  for (std::size_t n = total > 0 ? total - 1 : 0; n >= 10; n /= 10) ++width;
  width = std::max<std::size_t>(width, 4);
  std::string digits = std::to_string(i);
  return "u" + std::string(width - std::min(width, digits.size()), '0') + digits;
}

std::int64_t shifted_poisson(double mean, Rng& rng) {
  // 1 + Poisson(mean - 1) keeps synthetic durations >= 1.
  if (mean - 1.0 <= 0.0) return 1;
  return 1 + rng.poisson(mean - 1.0);
}

SessionSequence generate_stationary(const GeneratorSpec& spec, const std::string& user, Rng& rng) {
  SessionSequence seq{user, {}};
  double t = 0.0;
  seq.sessions.push_back({t, 0.0, shifted_poisson(spec.stationary.mean_duration, rng)});
  while (seq.sessions.size() < spec.max_sessions) {
    const double g = rng.exponential(spec.stationary.mean_gap);
    const std::int64_t d = shifted_poisson(spec.stationary.mean_duration, rng);
    if (t + g > spec.horizon || !(g > 0.0)) break;
    t += g;
    seq.sessions.push_back({t, g, d});
  }
  return seq;
}

SessionSequence generate_regimes(const GeneratorSpec& spec, const std::string& user, Rng& rng,
                                 std::vector<int>& path) {
  const auto pi = stationary_distribution(spec.switching);
  int state = rng.uniform() < pi[0] ? 0 : 1;
  SessionSequence seq{user, {}};
  double t = 0.0;
  seq.sessions.push_back({t, 0.0, shifted_poisson(spec.regimes[state].mean_duration, rng)});
  path.push_back(state);
  while (seq.sessions.size() < spec.max_sessions) {
    state = rng.uniform() < spec.switching[state][0] ? 0 : 1;
    const double g = rng.exponential(spec.regimes[state].mean_gap);
    const std::int64_t d = shifted_poisson(spec.regimes[state].mean_duration, rng);
    if (t + g > spec.horizon || !(g > 0.0)) break;
    t += g;
    seq.sessions.push_back({t, g, d});
    path.push_back(state);
  }
  return seq;
}

SessionSequence generate_from_model(const GeneratorSpec& spec, const std::string& user, Rng& rng) {
  const model::ModelParams& params = *spec.model;
  const double slope = params.config.slope == model::SlopeMode::Learned ? params.gap_w_t[0] : 0.0;
  model::Evaluator ev(params);
  SessionSequence seq{user, {}};
  model::StepOutput out = ev.initial(model::StepMode::Generate, rng.normal());
  double t = 0.0;
  Session s{t, 0.0, sample_positive_poisson(out.rate, rng)};
  model::HiddenState state = model::HiddenState::zeros(params.config.hidden);
  while (true) {
    seq.sessions.push_back(s);
    if (seq.sessions.size() >= spec.max_sessions) break;
    out = ev.step(state, s.gap, s.duration, model::StepMode::Generate, rng.normal());
    state = out.state;
    const auto g = tpp::sample_gap({out.base, slope}, rng);
    const std::int64_t d = sample_positive_poisson(out.rate, rng);
    if (!g || !(*g > 0.0) || t + *g > spec.horizon) break;
    t += *g;
    s = Session{t, *g, d};
  }
  return seq;
}

}  // namespace

const char* to_string(GeneratorKind k) {
  switch (k) {
    case GeneratorKind::Stationary: return "stationary";
    case GeneratorKind::RegimeSwitching: return "regime_switching";
    case GeneratorKind::FromModel: return "from_model";
  }
  return "?";
}

GeneratorKind parse_kind(const std::string& s) {
  if (s == "stationary") return GeneratorKind::Stationary;
  if (s == "regime_switching") return GeneratorKind::RegimeSwitching;
  if (s == "from_model") return GeneratorKind::FromModel;
  throw DataError("unknown generator kind '" + s + "'");
}

void GeneratorSpec::validate() const {
  if (users < 1) throw DataError("generator needs at least one user");
  if (!(horizon > 0.0)) throw DataError("generator horizon must be positive");
  if (max_sessions < 1) throw DataError("max sessions must be >= 1");
  auto check_regime = [](const Regime& r) {
    if (!(r.mean_gap > 0.0)) throw DataError("mean gap must be positive");
    if (!(r.mean_duration >= 1.0)) throw DataError("mean duration must be >= 1 (durations are 1 + Poisson)");
  };
  switch (kind) {
    case GeneratorKind::Stationary:
      check_regime(stationary);
      break;
    case GeneratorKind::RegimeSwitching:
      for (const auto& r : regimes) check_regime(r);
      for (const auto& row : switching) {
        if (row[0] < 0.0 || row[1] < 0.0) throw DataError("switching probabilities must be non-negative");
        if (std::abs(row[0] + row[1] - 1.0) > 1e-9) throw DataError("switching matrix rows must sum to 1");
      }
      if (switching[0][1] + switching[1][0] <= 0.0)
        throw DataError("switching matrix never changes regime; stationary mixture is undefined");
      break;
    case GeneratorKind::FromModel:
      if (model == nullptr) throw DataError("from_model generator needs model parameters");
      break;
  }
}

std::array<double, 2> stationary_distribution(const std::array<std::array<double, 2>, 2>& p) {
  const double a = p[0][1];
  const double b = p[1][0];
  if (a + b <= 0.0) throw DataError("switching chain has no unique stationary distribution");
  return {b / (a + b), a / (a + b)};
}

std::int64_t sample_positive_poisson(double rate, Rng& rng) {
  if (!(rate > 0.0) || !std::isfinite(rate)) throw NumericalError("Poisson rate must be positive and finite");
  // Inversion restricted to k >= 1.
  const double p0 = std::exp(-rate);
  const double positive_mass = -std::expm1(-rate);
  const double target = rng.uniform() * positive_mass;
  std::int64_t k = 1;
  double log_p = std::log(rate) - rate;
  double cdf = std::exp(log_p);
  while (cdf < target && k < 100000 + static_cast<std::int64_t>(20.0 * rate)) {
    ++k;
    log_p += std::log(rate) - std::log(static_cast<double>(k));
    cdf += std::exp(log_p);
  }
  (void)p0;
  return k;
}

GeneratedData generate(const GeneratorSpec& spec, std::uint64_t seed) {
  spec.validate();
  GeneratedData out;
  out.sequences.reserve(spec.users);
  for (std::size_t u = 0; u < spec.users; ++u) {
    const std::string user = user_name(u, spec.users);
    Rng rng(derive_seed(seed, user));
    switch (spec.kind) {
      case GeneratorKind::Stationary:
        out.sequences.push_back(generate_stationary(spec, user, rng));
        break;
      case GeneratorKind::RegimeSwitching: {
        std::vector<int> path;
        out.sequences.push_back(generate_regimes(spec, user, rng, path));
        out.regimes.push_back(std::move(path));
        break;
      }
      case GeneratorKind::FromModel:
        out.sequences.push_back(generate_from_model(spec, user, rng));
        break;
    }
  }
  return out;
}

bool latent_is_inert(const model::ModelParams& p) {
  if (p.config.latent == model::LatentMode::Ablation) return true;
  if (p.gap_w_z[0] != 0.0 || p.dur_w_z[0] != 0.0) return false;
  for (std::size_t r = 0; r < p.lstm_W.rows(); ++r)
    if (p.lstm_W(r, 2) != 0.0) return false;
  return true;
}

double generating_log_likelihood(const model::ModelParams& params, const SessionSequence& seq) {
  if (!latent_is_inert(params))
    throw std::invalid_argument("generating_log_likelihood: the latent path must be inert for an exact likelihood");
  if (seq.sessions.empty()) throw DataError("generating_log_likelihood: empty sequence");
  const double slope = params.config.slope == model::SlopeMode::Learned ? params.gap_w_t[0] : 0.0;
  model::Evaluator ev(params);
  auto duration_ll = [](double rate, std::int64_t d) {
    return tpp::poisson_log_pmf(rate, d) - std::log(-std::expm1(-rate));
  };
  model::StepOutput out = ev.initial(model::StepMode::Filter);
  double ll = duration_ll(out.rate, seq.sessions[0].duration);
  model::HiddenState state = model::HiddenState::zeros(params.config.hidden);
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    out = ev.step(state, seq.sessions[i].gap, seq.sessions[i].duration, model::StepMode::Filter);
    state = out.state;
    const auto& next = seq.sessions[i + 1];
    ll += tpp::log_gap_density({out.base, slope}, next.gap) + duration_ll(out.rate, next.duration);
  }
  return ll;
}

void write_sidecar(const std::filesystem::path& path, const GeneratorSpec& spec, std::uint64_t seed,
                   const GeneratedData& data) {
  nlohmann::ordered_json doc;
  doc["kind"] = to_string(spec.kind);
  doc["seed"] = seed;
  doc["users"] = spec.users;
  doc["horizon"] = spec.horizon;
  doc["max_sessions"] = spec.max_sessions;
  switch (spec.kind) {
    case GeneratorKind::Stationary:
      doc["mean_gap"] = spec.stationary.mean_gap;
      doc["mean_duration"] = spec.stationary.mean_duration;
      break;
    case GeneratorKind::RegimeSwitching: {
      auto regimes = nlohmann::ordered_json::array();
      for (const auto& r : spec.regimes) regimes.push_back({{"mean_gap", r.mean_gap}, {"mean_duration", r.mean_duration}});
      doc["regimes"] = regimes;
      doc["switching"] = {{spec.switching[0][0], spec.switching[0][1]}, {spec.switching[1][0], spec.switching[1][1]}};
      auto paths = nlohmann::ordered_json::object();
      for (std::size_t u = 0; u < data.sequences.size() && u < data.regimes.size(); ++u)
        paths[data.sequences[u].user_id] = data.regimes[u];
      doc["regime_paths"] = paths;
      break;
    }
    case GeneratorKind::FromModel:
      doc["model_path"] = spec.model_path;
      break;
  }
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << doc.dump(2) << "\n";
}

}  // namespace rtpp::sim
