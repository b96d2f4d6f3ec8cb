#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>

#include "rtpp/errors.hpp"
#include "rtpp/simulate.hpp"
#include "support/oracles.hpp"

using namespace rtpp;
using namespace rtpp::sim;

namespace {

model::ModelConfig small_config() {
  model::ModelConfig c;
  c.hidden = 4;
  c.mlp_hidden = 3;
  return c;
}

std::vector<double> all_gaps(const GeneratedData& d) {
  std::vector<double> out;
  for (const auto& s : d.sequences)
    for (std::size_t i = 1; i < s.size(); ++i) out.push_back(s.sessions[i].gap);
  return out;
}

double ln_factorial(std::int64_t k) {
  double s = 0.0;
  for (std::int64_t i = 2; i <= k; ++i) s += std::log(static_cast<double>(i));
  return s;
}

}  // namespace

TEST_CASE("stationary generator matches its configured means") {
  GeneratorSpec spec;
  spec.users = 200;
  spec.horizon = 1e9;
  spec.max_sessions = 600;
  const auto data = generate(spec, 1);
  const auto gaps = all_gaps(data);
  REQUIRE(gaps.size() >= 100000);
  const double mg = testing::mean(gaps);
  CHECK(mg >= 1.96);
  CHECK(mg <= 2.04);
  CHECK(testing::ks_statistic(gaps, [](double g) { return 1.0 - std::exp(-g / 2.0); }) < 0.01);

  std::vector<double> durs;
  std::int64_t min_d = 1 << 30;
  for (const auto& s : data.sequences) {
    for (const auto& x : s.sessions) {
      durs.push_back(static_cast<double>(x.duration));
      min_d = std::min(min_d, x.duration);
    }
  }
  const double md = testing::mean(durs);
  CHECK(md >= 4.95);
  CHECK(md <= 5.05);
  CHECK(min_d >= 1);
}

TEST_CASE("sequences respect the horizon and start at zero") {
  GeneratorSpec spec;
  spec.users = 30;
  spec.horizon = 50.0;
  const auto data = generate(spec, 2);
  REQUIRE(data.sequences.size() == 30);
  CHECK(data.sequences[0].user_id == "u0000");
  CHECK(data.sequences[29].user_id == "u0029");
  for (const auto& s : data.sequences) {
    eventlog::validate(s);
    CHECK(s.sessions.front().start == 0.0);
    CHECK(s.sessions.front().gap == 0.0);
    CHECK(s.sessions.back().start <= 50.0);
    for (std::size_t i = 1; i < s.size(); ++i)
      CHECK(s.sessions[i].gap == doctest::Approx(s.sessions[i].start - s.sessions[i - 1].start));
  }
}

TEST_CASE("generation is deterministic with independent user streams") {
  GeneratorSpec spec;
  spec.users = 20;
  spec.horizon = 40.0;
  const auto a = generate(spec, 5);
  const auto b = generate(spec, 5);
  CHECK(a.sequences == b.sequences);
  CHECK_FALSE(generate(spec, 6).sequences == a.sequences);
  // Adding users leaves existing users untouched.
  spec.users = 25;
  const auto c = generate(spec, 5);
  for (std::size_t u = 0; u < 20; ++u) CHECK(c.sequences[u] == a.sequences[u]);
  CHECK_FALSE(a.sequences[0].sessions == a.sequences[1].sessions);
}

TEST_CASE("regime switching produces the stationary mixture") {
  GeneratorSpec spec;
  spec.kind = GeneratorKind::RegimeSwitching;
  spec.users = 400;
  spec.horizon = 1e12;
  spec.max_sessions = 1000;
  const auto data = generate(spec, 3);
  REQUIRE(data.regimes.size() == data.sequences.size());
  const auto pi = stationary_distribution(spec.switching);
  CHECK(pi[0] == doctest::Approx(0.5));
  const double target = pi[0] * spec.regimes[0].mean_gap + pi[1] * spec.regimes[1].mean_gap;
  const auto gaps = all_gaps(data);
  REQUIRE(gaps.size() >= 100000);
  CHECK(testing::mean(gaps) == doctest::Approx(target).epsilon(0.03));

  std::array<double, 2> sum{}, count{};
  std::size_t switches = 0, transitions = 0;
  for (std::size_t u = 0; u < data.sequences.size(); ++u) {
    const auto& path = data.regimes[u];
    REQUIRE(path.size() == data.sequences[u].size());
    for (std::size_t i = 1; i < path.size(); ++i) {
      sum[path[i]] += data.sequences[u].sessions[i].gap;
      count[path[i]] += 1.0;
      switches += path[i] != path[i - 1];
      ++transitions;
    }
  }
  CHECK(sum[0] / count[0] == doctest::Approx(1.0).epsilon(0.03));
  CHECK(sum[1] / count[1] == doctest::Approx(10.0).epsilon(0.03));
  CHECK(static_cast<double>(switches) / transitions == doctest::Approx(0.1).epsilon(0.05));

  const auto asym = stationary_distribution({{{0.8, 0.2}, {0.05, 0.95}}});
  CHECK(asym[0] == doctest::Approx(0.2));
}

TEST_CASE("zero-weight model generates unit exponential gaps") {
  const auto p = model::ModelParams::zeros(small_config());
  GeneratorSpec spec;
  spec.kind = GeneratorKind::FromModel;
  spec.model = &p;
  spec.users = 100;
  spec.horizon = 1e9;
  spec.max_sessions = 1001;
  const auto gaps = all_gaps(generate(spec, 4));
  REQUIRE(gaps.size() == 100000);
  CHECK(testing::ks_statistic(gaps, [](double g) { return 1.0 - std::exp(-g); }) < 0.01);
}

TEST_CASE("generating likelihood matches the analytic entropy rate") {
  // Constant heads: gaps Exp(e^a), durations zero-truncated Poisson(e^b).
  auto p = model::ModelParams::zeros(small_config());
  const double a = std::log(0.5), b = std::log(3.0);
  p.gap_b[0] = a;
  p.dur_b[0] = b;
  REQUIRE(latent_is_inert(p));
  GeneratorSpec spec;
  spec.kind = GeneratorKind::FromModel;
  spec.model = &p;
  spec.users = 500;
  spec.horizon = 1e12;
  spec.max_sessions = 20;
  const auto data = generate(spec, 8);

  const double rate = std::exp(b);
  double dur_entropy = 0.0;
  for (std::int64_t k = 1; k < 80; ++k) {
    const double lp = k * b - rate - ln_factorial(k) - std::log(-std::expm1(-rate));
    dur_entropy += std::exp(lp) * lp;
  }
  const double gap_entropy = a - 1.0;
  const double expected = (19.0 * gap_entropy + 20.0 * dur_entropy) / 20.0;

  std::vector<double> per_event;
  for (const auto& s : data.sequences) {
    REQUIRE(s.size() == 20);
    per_event.push_back(generating_log_likelihood(p, s) / 20.0);
  }
  const auto est = testing::mean_and_error(per_event);
  CHECK(std::abs(est.mean - expected) < 3.0 * est.std_error);

  auto live = model::init_params(small_config(), 1);
  CHECK_FALSE(latent_is_inert(live));
  CHECK_THROWS(generating_log_likelihood(live, data.sequences[0]));

  std::int64_t min_d = 100;
  for (const auto& s : data.sequences)
    for (const auto& x : s.sessions) min_d = std::min(min_d, x.duration);
  CHECK(min_d >= 1);
}

TEST_CASE("from_model stops on never-return draws") {
  auto p = model::ModelParams::zeros(small_config());
  p.config.slope = model::SlopeMode::Learned;
  p.gap_w_t[0] = -5.0;  // return probability 1 - exp(-0.2), about 0.18
  GeneratorSpec spec;
  spec.kind = GeneratorKind::FromModel;
  spec.model = &p;
  spec.users = 300;
  spec.horizon = 1e9;
  const auto data = generate(spec, 1);
  double mean_len = 0.0;
  for (const auto& s : data.sequences) mean_len += static_cast<double>(s.size());
  mean_len /= 300.0;
  // Geometric number of returns: 1 / (1 - 0.181).
  CHECK(mean_len == doctest::Approx(1.0 / std::exp(-0.2)).epsilon(0.1));
}

TEST_CASE("positive poisson draws") {
  Rng rng(2);
  double sum = 0.0;
  const int n = 100000;
  std::int64_t mn = 10;
  for (int i = 0; i < n; ++i) {
    const auto k = sample_positive_poisson(1.0, rng);
    mn = std::min(mn, k);
    sum += static_cast<double>(k);
  }
  CHECK(mn == 1);
  CHECK(sum / n == doctest::Approx(1.0 / (1.0 - std::exp(-1.0))).epsilon(0.01));
}

TEST_CASE("spec validation and sidecar") {
  GeneratorSpec bad;
  bad.stationary.mean_gap = 0.0;
  CHECK_THROWS_AS(generate(bad, 1), DataError);
  GeneratorSpec frozen;
  frozen.kind = GeneratorKind::RegimeSwitching;
  frozen.switching = {{{1.0, 0.0}, {0.0, 1.0}}};
  CHECK_THROWS_AS(generate(frozen, 1), DataError);
  GeneratorSpec rows;
  rows.kind = GeneratorKind::RegimeSwitching;
  rows.switching = {{{0.5, 0.4}, {0.1, 0.9}}};
  CHECK_THROWS_AS(generate(rows, 1), DataError);
  GeneratorSpec no_model;
  no_model.kind = GeneratorKind::FromModel;
  CHECK_THROWS_AS(generate(no_model, 1), DataError);
  CHECK(parse_kind("regime_switching") == GeneratorKind::RegimeSwitching);
  CHECK_THROWS_AS(parse_kind("hawkes"), DataError);

  GeneratorSpec spec;
  spec.kind = GeneratorKind::RegimeSwitching;
  spec.users = 3;
  spec.horizon = 30.0;
  const auto data = generate(spec, 9);
  const auto path = std::filesystem::temp_directory_path() / "rtpp_sidecar_test.json";
  write_sidecar(path, spec, 9, data);
  std::ifstream in(path);
  const auto doc = nlohmann::json::parse(in);
  CHECK(doc["kind"] == "regime_switching");
  CHECK(doc["seed"] == 9);
  CHECK(doc["regime_paths"]["u0001"].size() == data.sequences[1].size());
  std::filesystem::remove(path);
}
