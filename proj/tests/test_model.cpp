#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "rtpp/errors.hpp"
#include "rtpp/model.hpp"
#include "rtpp/rng.hpp"

using namespace rtpp;
using namespace rtpp::model;

namespace {

ModelConfig small_config(std::size_t h = 4, std::size_t hp = 3, SlopeMode slope = SlopeMode::FrozenZero) {
  ModelConfig c;
  c.hidden = h;
  c.mlp_hidden = hp;
  c.slope = slope;
  return c;
}

// Registers all tensors of a parameter set from grad_check's Vars.
BoundParams bind_vars(const ModelParams& shape_source, std::span<const ad::Var> vars) {
  BoundParams b;
  b.params = &shape_source;
  for (std::size_t i = 0; i < ModelParams::kCount; ++i) {
    b.vars[i] = vars[i];
    b.trainable[i] = true;
  }
  return b;
}

std::vector<Tensor> as_vector(const ModelParams& p) {
  std::vector<Tensor> out;
  for (const Tensor* t : p.tensors()) out.push_back(*t);
  return out;
}

}  // namespace

TEST_CASE("init is deterministic and shaped") {
  const ModelConfig c = small_config(8, 5);
  const ModelParams a = init_params(c, 42);
  const ModelParams b = init_params(c, 42);
  CHECK(a == b);
  CHECK_FALSE(a == init_params(c, 43));
  const auto shapes = ModelParams::shapes(c);
  const auto ts = a.tensors();
  std::size_t total = 0;
  for (std::size_t i = 0; i < ModelParams::kCount; ++i) {
    CHECK(ts[i]->rows() == shapes[i].first);
    CHECK(ts[i]->cols() == shapes[i].second);
    total += ts[i]->size();
  }
  CHECK(a.parameter_count() == total);
  CHECK(a.lstm_W.rows() == 32);
  CHECK(a.lstm_W.cols() == 11);
  CHECK(a.gap_w_t[0] == 0.0);
  for (std::size_t r = 8; r < 16; ++r) CHECK(a.lstm_b[r] == 1.0);
  const double s = 1.0 / std::sqrt(11.0);
  for (std::size_t i = 0; i < a.lstm_W.size(); ++i) CHECK(std::abs(a.lstm_W[i]) <= s);
  const auto prior = prior_params(ModelParams{a}, HiddenState::zeros(8));
  CHECK(prior.stddev > 0.0);

  // Names are sorted, matching checkpoint order.
  const auto& names = ModelParams::names();
  for (std::size_t i = 1; i < names.size(); ++i) CHECK(names[i - 1] < names[i]);
  CHECK(names[kSlopeIndex] == "gap.w_t");
}

TEST_CASE("raw std bias starts the std at one half") {
  ModelParams p = ModelParams::zeros(small_config());
  p.prior_b2[1] = init_params(small_config(), 1).prior_b2[1];
  CHECK(prior_params(p, HiddenState::zeros(4)).stddev == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("hidden size one is valid") {
  const ModelParams p = init_params(small_config(1, 1), 3);
  Evaluator ev(p);
  auto s0 = ev.initial(StepMode::Filter);
  auto s1 = ev.step(s0.state, 2.0, 3, StepMode::Filter);
  CHECK(s1.state.h.size() == 1);
  CHECK(s1.rate > 0.0);
}

TEST_CASE("frozen slope is a constant on the tape") {
  const ModelParams frozen = init_params(small_config(), 1);
  ad::Tape tape;
  const BoundParams b = bind(tape, frozen);
  CHECK_FALSE(b.trainable[kSlopeIndex]);
  CHECK(tape.parameter_ids().size() == ModelParams::kCount - 1);

  const ModelParams learned = init_params(small_config(4, 3, SlopeMode::Learned), 1);
  ad::Tape t2;
  CHECK(bind(t2, learned).trainable[kSlopeIndex]);

  ModelConfig abl = small_config();
  abl.latent = LatentMode::Ablation;
  ad::Tape t3;
  const BoundParams ba = bind(t3, init_params(abl, 1));
  std::size_t trainable = 0;
  for (bool t : ba.trainable) trainable += t;
  CHECK(trainable == ModelParams::kCount - 1 - 8);
}

TEST_CASE("zero-weight prior and posterior") {
  const ModelParams p = ModelParams::zeros(small_config());
  const auto prior = prior_params(p, HiddenState::zeros(4));
  CHECK(prior.mean == 0.0);
  CHECK(prior.stddev == doctest::Approx(std::log(2.0) + 1e-4).epsilon(1e-15));
  CHECK(prior.stddev == doctest::Approx(0.6933).epsilon(1e-4));
  const auto post = posterior_params(p, 3.0, 2, HiddenState::zeros(4));
  CHECK(post.mean == 0.0);
  CHECK(post.stddev == doctest::Approx(0.6933).epsilon(1e-4));

  const ModelParams q = init_params(small_config(), 9);
  const HiddenState h{{0.1, -0.2, 0.3, 0.05}, {0, 0, 0, 0}};
  CHECK(prior_params(q, h) == prior_params(q, h));
  CHECK(posterior_params(q, 1.0, 4, h) == posterior_params(q, 1.0, 4, h));
}

TEST_CASE("heads") {
  ModelParams p = ModelParams::zeros(small_config());
  for (double z : {0.1, 0.5, 0.9}) {
    auto [a, g] = heads(p, z, {0.3, -0.1, 0.2, 0.4});
    CHECK(a == 0.0);
    CHECK(g == 1.0);
  }
  p.gap_w_z[0] = 1.0;
  auto [a, g] = heads(p, 0.5, {0, 0, 0, 0});
  CHECK(a == 0.5);
  CHECK(tpp::intensity({a, 0.0}, 0.0) == doctest::Approx(1.6487212707001282).epsilon(1e-14));

  ModelParams q = init_params(small_config(), 5);
  const std::vector<double> h{0.2, -0.3, 0.1, 0.6};
  const double g0 = heads(q, 0.3, h).second;
  q.dur_b[0] += 0.7;
  CHECK(heads(q, 0.3, h).second == doctest::Approx(g0 * std::exp(0.7)).epsilon(1e-14));

  q.gap_b[0] = 800.0;
  CHECK_THROWS_AS(heads(q, 0.3, h), NumericalError);
  CHECK_THROWS(heads(q, 1.0, h));
}

TEST_CASE("zero-weight step") {
  const ModelParams p = ModelParams::zeros(small_config());
  Evaluator ev(p);
  for (StepMode mode : {StepMode::Infer, StepMode::Generate, StepMode::Filter}) {
    auto out = ev.step(HiddenState::zeros(4), 7.5, 4, mode, 0.8);
    // Gates are sigmoid(0) = 0.5 and the candidate tanh(0) = 0, so c = 0.5 c_prev and h = 0.5 tanh(c).
    for (double v : out.state.h) CHECK(v == 0.0);
    for (double v : out.state.c) CHECK(v == 0.0);
    CHECK(out.base == 0.0);
    CHECK(out.rate == 1.0);
  }
  auto out = ev.step(HiddenState{{0, 0, 0, 0}, {1.0, -2.0, 0.0, 0.5}}, 2.0, 1, StepMode::Filter);
  CHECK(out.state.c[0] == 0.5);
  CHECK(out.state.h[0] == doctest::Approx(0.5 * std::tanh(0.5)).epsilon(1e-15));
  CHECK(out.state.h[1] == doctest::Approx(0.5 * std::tanh(-1.0)).epsilon(1e-15));
  CHECK(out.z == 0.5);
}

TEST_CASE("step modes select the latent source") {
  const ModelParams p = init_params(small_config(), 2);
  Evaluator ev(p);
  const HiddenState h0{{0.1, 0.2, -0.1, 0.0}, {0.3, 0.0, 0.1, -0.2}};
  const auto f1 = ev.step(h0, 3.0, 2, StepMode::Filter);
  const auto f2 = ev.step(h0, 3.0, 2, StepMode::Filter, 123.0);
  CHECK(f1 == f2);
  CHECK(f1.z == doctest::Approx(tpp::sigmoid(f1.posterior.mean)).epsilon(1e-15));
  const auto inf = ev.step(h0, 3.0, 2, StepMode::Infer, 0.7);
  CHECK(inf.z == doctest::Approx(tpp::sigmoid(inf.posterior.mean + inf.posterior.stddev * 0.7)).epsilon(1e-15));
  const auto gen = ev.step(h0, 3.0, 2, StepMode::Generate, 0.7);
  CHECK(gen.z == doctest::Approx(tpp::sigmoid(gen.prior.mean + gen.prior.stddev * 0.7)).epsilon(1e-15));
  CHECK(model::step(p, h0, 3.0, 2, StepMode::Infer, 0.7) == inf);
  CHECK_THROWS_AS(ev.step(h0, -1.0, 2, StepMode::Filter), DataError);
  CHECK_THROWS_AS(ev.step(h0, 1.0, 0, StepMode::Filter), DataError);
  CHECK_THROWS_AS(ev.step(HiddenState::zeros(3), 1.0, 1, StepMode::Filter), ShapeError);
}

TEST_CASE("outputs stay in range for random parameterizations") {
  Rng rng(77);
  for (int trial = 0; trial < 30; ++trial) {
    ModelParams p = init_params(small_config(), rng.next_u64());
    for (Tensor* t : p.tensors())
      for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] *= 3.0;
    Evaluator ev(p);
    auto s = ev.initial(StepMode::Generate, rng.normal());
    for (int i = 0; i < 20; ++i) {
      s = ev.step(s.state, 10.0 * rng.uniform(), 1 + static_cast<std::int64_t>(rng.index(20)), StepMode::Infer,
                  rng.normal());
      CHECK(s.z > 0.0);
      CHECK(s.z < 1.0);
      CHECK(s.prior.stddev > 0.0);
      CHECK(s.posterior.stddev > 0.0);
      CHECK(s.rate > 0.0);
    }
  }
}

TEST_CASE("step outputs are causal") {
  const ModelParams p = init_params(small_config(), 6);
  std::vector<double> gaps{0.0, 2.0, 5.0, 1.5, 9.0, 3.0};
  std::vector<std::int64_t> durs{1, 3, 2, 7, 1, 4};
  auto run = [&](const std::vector<double>& g, const std::vector<std::int64_t>& d) {
    Evaluator ev(p);
    std::vector<StepOutput> outs{ev.initial(StepMode::Filter)};
    for (std::size_t i = 0; i < g.size(); ++i) outs.push_back(ev.step(outs.back().state, g[i], d[i], StepMode::Filter));
    return outs;
  };
  const auto base = run(gaps, durs);
  auto g2 = gaps;
  auto d2 = durs;
  g2[4] = 100.0;
  d2[5] = 30;
  const auto pert = run(g2, d2);
  for (std::size_t i = 0; i <= 4; ++i) CHECK(pert[i] == base[i]);
  CHECK_FALSE(pert[5] == base[5]);
}

TEST_CASE("frozen weights with zero slope imply mean gap exp(-a)") {
  const ModelParams p = init_params(small_config(), 8);
  Evaluator ev(p);
  auto s = ev.step(HiddenState::zeros(4), 2.0, 3, StepMode::Filter);
  CHECK(tpp::expected_gap({s.base, p.gap_w_t[0]}) == std::exp(-s.base));
}

TEST_CASE("prior and posterior gradients match finite differences") {
  const ModelParams p = init_params(small_config(), 10);
  auto params = as_vector(p);
  const Tensor h = Tensor::column({0.3, -0.2, 0.5, 0.1});
  auto prior_mean = [&](ad::Tape& tape, std::span<const ad::Var> v) {
    const BoundParams b = bind_vars(p, v);
    auto [m, s] = prior_params(b, tape.constant(h));
    return m + 0.3 * s;
  };
  CHECK(ad::grad_check(prior_mean, params, 1e-5, 1e-6).max_rel_error < 1e-6);
  auto post = [&](ad::Tape& tape, std::span<const ad::Var> v) {
    const BoundParams b = bind_vars(p, v);
    auto [m, s] = posterior_params(b, model_input(tape, 4.0, 3), tape.constant(h));
    return m - 0.7 * s;
  };
  CHECK(ad::grad_check(post, params, 1e-5, 1e-6).max_rel_error < 1e-6);
}

TEST_CASE("five-step unroll gradient matches finite differences") {
  const ModelParams p = init_params(small_config(4, 3, SlopeMode::Learned), 12);
  ModelParams q = p;
  q.gap_w_t[0] = 0.05;
  auto params = as_vector(q);
  const std::vector<double> gaps{0.0, 1.5, 4.0, 0.7, 12.0};
  const std::vector<std::int64_t> durs{2, 1, 5, 3, 2};
  Rng rng(13);
  std::vector<double> eps(6);
  for (double& e : eps) e = rng.normal();

  auto unroll = [&](ad::Tape& tape, std::span<const ad::Var> v) {
    const BoundParams b = bind_vars(q, v);
    TapeStep s = initial_step(b, constant_state(tape, HiddenState::zeros(4)), StepMode::Generate, eps[0]);
    ad::Var total = tape.constant(0.0);
    for (std::size_t i = 0; i < gaps.size(); ++i) {
      const TapeStep prev = s;
      s = step(b, prev.state, gaps[i], durs[i], StepMode::Infer, eps[i + 1]);
      if (i > 0) total = total + tpp::log_gap_density(prev.base, b[kSlopeIndex], gaps[i]);
      total = total + tpp::poisson_log_pmf_log_rate(prev.log_rate, durs[i]);
      total = total - tpp::gaussian_kl(s.post_mean, s.post_std, s.prior_mean, s.prior_std);
    }
    return total + ad::sum(s.state.h);
  };
  const auto report = ad::grad_check(unroll, params, 1e-5, 1e-4);
  CAPTURE(report.worst_param);
  CAPTURE(report.worst_index);
  CHECK(report.passed);
  CHECK(report.max_rel_error < 1e-4);
}
