#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <sstream>

#include "rtpp/errors.hpp"
#include "rtpp/inference.hpp"
#include "rtpp/simulate.hpp"
#include "rtpp/train.hpp"
#include "support/oracles.hpp"

using namespace rtpp;
using namespace rtpp::inference;
using eventlog::Session;
using eventlog::SessionSequence;

namespace {

model::ModelConfig small_config() {
  model::ModelConfig c;
  c.hidden = 4;
  c.mlp_hidden = 3;
  return c;
}

SessionSequence sample_sequence() {
  SessionSequence s;
  s.user_id = "alice";
  s.sessions = {{0.0, 0.0, 2}, {1.5, 1.5, 1}, {4.0, 2.5, 3}, {4.8, 0.8, 7}, {12.0, 7.2, 1}, {13.1, 1.1, 2}};
  return s;
}

const model::ModelParams& trained_params() {
  static const model::ModelParams p = [] {
    sim::GeneratorSpec spec;
    spec.users = 30;
    spec.horizon = 120.0;
    const auto data = sim::generate(spec, 3).sequences;
    train::TrainConfig cfg;
    cfg.model = small_config();
    cfg.epochs = 5;
    cfg.learning_rate = 0.02;
    cfg.batch_size = 4;
    return train::train(data, cfg).params;
  }();
  return p;
}

}  // namespace

TEST_CASE("zero-weight model predicts unit gap and duration") {
  const auto p = model::ModelParams::zeros(small_config());
  const auto seq = sample_sequence();
  const auto rec = predict_next(p, seq, {});
  CHECK(rec.pred_gap == 1.0);
  CHECK(rec.pred_duration == 1.0);
  CHECK(rec.step == seq.size());
  CHECK_FALSE(rec.obs_gap.has_value());
  for (const auto& r : rolling_evaluate(p, seq, {8, 3})) {
    CHECK(r.pred_gap == 1.0);
    CHECK(r.pred_duration == 1.0);
  }
}

TEST_CASE("rolling records align with the sequence") {
  const auto& p = trained_params();
  const auto seq = sample_sequence();
  const auto recs = rolling_evaluate(p, seq, {});
  REQUIRE(recs.size() == seq.size() - 1);
  for (std::size_t i = 0; i < recs.size(); ++i) {
    CHECK(recs[i].user_id == "alice");
    CHECK(recs[i].step == i + 1);
    CHECK(*recs[i].obs_gap == seq.sessions[i + 1].gap);
    CHECK(*recs[i].obs_duration == seq.sessions[i + 1].duration);
    CHECK(recs[i].pred_gap > 0.0);
    CHECK(recs[i].pred_duration > 0.0);
    SessionSequence prefix{seq.user_id, {seq.sessions.begin(), seq.sessions.begin() + static_cast<std::ptrdiff_t>(i + 1)}};
    auto direct = predict_next(p, prefix, {});
    direct.obs_gap = recs[i].obs_gap;
    direct.obs_duration = recs[i].obs_duration;
    CHECK(direct == recs[i]);
  }
  SessionSequence two{"b", {{0.0, 0.0, 1}, {3.0, 3.0, 2}}};
  CHECK(rolling_evaluate(p, two, {}).size() == 1);
  SessionSequence one{"c", {{0.0, 0.0, 1}}};
  CHECK_THROWS_AS(rolling_evaluate(p, one, {}), DataError);
  CHECK_THROWS_AS(predict_next(p, SessionSequence{"d", {}}, {}), DataError);
}

TEST_CASE("predictions are deterministic and causal") {
  const auto& p = trained_params();
  auto seq = sample_sequence();
  const auto a = rolling_evaluate(p, seq, {16, 5});
  CHECK(a == rolling_evaluate(p, seq, {16, 5}));
  auto longer = seq;
  longer.sessions.push_back({20.0, 6.9, 4});
  longer.sessions.push_back({20.5, 0.5, 1});
  const auto b = rolling_evaluate(p, longer, {16, 5});
  for (std::size_t i = 0; i + 1 < a.size(); ++i) CHECK(a[i] == b[i]);
  CHECK(a.back().pred_gap == b[a.size() - 1].pred_gap);

  PredictOptions sampled{16, 5, true};
  CHECK(rolling_evaluate(p, seq, sampled) == rolling_evaluate(p, seq, sampled));
}

TEST_CASE("zero slope predictions use the exponential mean exactly") {
  const auto& p = trained_params();
  const auto seq = sample_sequence();
  const PredictOptions opts{12, 9};
  const auto rec = predict_next(p, seq, opts);

  // Replay the frontier with the evaluator and the same draw stream.
  model::Evaluator ev(p);
  model::HiddenState state = model::HiddenState::zeros(4);
  for (const auto& s : seq.sessions) state = ev.step(state, s.gap, s.duration, model::StepMode::Filter).state;
  const auto prior = ev.prior(state);
  Rng rng(derive_seed(opts.seed, seq.user_id, seq.size()));
  double g = 0.0, d = 0.0;
  for (std::size_t k = 0; k < opts.samples; ++k) {
    const auto [base, rate] = ev.heads(tpp::sample_logit_normal(prior, rng.normal()), state);
    g += std::exp(-base);
    d += rate;
  }
  CHECK(rec.pred_gap == doctest::Approx(g / 12.0).epsilon(1e-15));
  CHECK(rec.pred_duration == doctest::Approx(d / 12.0).epsilon(1e-15));
}

TEST_CASE("few and many prediction samples agree") {
  const auto& p = trained_params();
  const auto seq = sample_sequence();
  model::Evaluator ev(p);
  model::HiddenState state = model::HiddenState::zeros(4);
  for (const auto& s : seq.sessions) state = ev.step(state, s.gap, s.duration, model::StepMode::Filter).state;
  const auto prior = ev.prior(state);
  Rng rng(123);
  std::vector<double> per_draw;
  for (int k = 0; k < 1000; ++k) per_draw.push_back(std::exp(-ev.heads(tpp::sample_logit_normal(prior, rng.normal()), state).first));
  const double spread = testing::mean_and_error(per_draw).std_error * std::sqrt(1000.0);
  const double one = predict_next(p, seq, {1, 4}).pred_gap;
  const double many = predict_next(p, seq, {1000, 4}).pred_gap;
  CHECK(std::abs(one - many) < 3.0 * spread + 1e-12);
}

TEST_CASE("learned slope predictions") {
  auto p = trained_params();
  p.config.slope = model::SlopeMode::Learned;
  p.gap_w_t[0] = 0.2;
  const auto rec = predict_next(p, sample_sequence(), {4, 1});
  const auto frozen = predict_next(trained_params(), sample_sequence(), {4, 1});
  CHECK(rec.pred_gap < frozen.pred_gap);
  p.gap_w_t[0] = -0.2;
  CHECK(predict_next(p, sample_sequence(), {4, 1}).pred_gap > 0.0);
}

TEST_CASE("ablation predictions ignore the latent") {
  auto p = trained_params();
  p.config.latent = model::LatentMode::Ablation;
  const auto a = predict_next(p, sample_sequence(), {1, 1});
  const auto b = predict_next(p, sample_sequence(), {50, 2});
  CHECK(a.pred_gap == doctest::Approx(b.pred_gap).epsilon(1e-15));
}

TEST_CASE("churn alarms") {
  PredictionRecord r;
  r.pred_gap = 10.0;
  r.pred_duration = 1.0;
  AlarmPolicy fixed{AlarmMode::Fixed, 5.0, 2.0, Comparator::Less};
  CHECK(churn_alarm(r, fixed));
  r.pred_duration = 3.0;
  CHECK_FALSE(churn_alarm(r, fixed));

  const HistoryStats stats{4.0, 6.0};
  AlarmPolicy expected{AlarmMode::Expected, 0.0, 0.0, Comparator::Less};
  r.pred_gap = 8.0;
  r.pred_duration = 3.0;
  CHECK(churn_alarm(r, expected, stats));
  expected.duration_cmp = Comparator::Greater;
  CHECK_FALSE(churn_alarm(r, expected, stats));
  CHECK_THROWS_AS(churn_alarm(r, expected), DataError);
  CHECK_THROWS(churn_alarm(r, AlarmPolicy{AlarmMode::Fixed, 0.0, 2.0, Comparator::Less}));

  // Raising the predicted gap never clears a fixed-mode alarm.
  Rng rng(3);
  for (int i = 0; i < 500; ++i) {
    PredictionRecord x;
    x.pred_gap = 10.0 * rng.uniform();
    x.pred_duration = 4.0 * rng.uniform();
    const bool before = churn_alarm(x, fixed);
    x.pred_gap += 5.0 * rng.uniform();
    if (before) CHECK(churn_alarm(x, fixed));
  }

  CHECK(parse_alarm_mode("fixed") == AlarmMode::Fixed);
  CHECK(parse_comparator("greater") == Comparator::Greater);
  CHECK_THROWS_AS(parse_alarm_mode("sometimes"), DataError);
}

TEST_CASE("history stats") {
  const auto seq = sample_sequence();
  CHECK_FALSE(history_stats(seq, 1).has_value());
  const auto s = history_stats(seq, 3);
  REQUIRE(s.has_value());
  CHECK(s->mean_gap == doctest::Approx(2.0));
  CHECK(s->mean_duration == doctest::Approx(2.0));
}

TEST_CASE("prediction csv") {
  std::ostringstream out;
  write_predictions_header(out);
  PredictionRecord r{"u1", 3, 0.1, 2.5, 1.25, 4, 0.0, 1.0};
  r.obs_gap = 1.25;
  r.obs_duration = 4;
  write_prediction_row(out, r, true);
  r.obs_gap.reset();
  r.obs_duration.reset();
  write_prediction_row(out, r, std::nullopt);
  CHECK(out.str() ==
        "user_id,step,pred_gap,obs_gap,pred_dur,obs_dur,alarm\n"
        "u1,3,0.10000000000000001,1.25,2.5,4,1\n"
        "u1,3,0.10000000000000001,,2.5,,\n");
}
