#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rtpp/checkpoint.hpp"
#include "rtpp/errors.hpp"
#include "rtpp/simulate.hpp"
#include "rtpp/train.hpp"
#include "support/oracles.hpp"

using namespace rtpp;
using eventlog::Session;
using eventlog::SessionSequence;
using model::ModelConfig;
using model::ModelParams;

namespace {

ModelConfig small_config(std::size_t h = 4, std::size_t hp = 3) {
  ModelConfig c;
  c.hidden = h;
  c.mlp_hidden = hp;
  return c;
}

SessionSequence make_sequence(const std::string& id, const std::vector<double>& gaps, const std::vector<std::int64_t>& durs) {
  SessionSequence s;
  s.user_id = id;
  double t = 0.0;
  for (std::size_t i = 0; i < gaps.size(); ++i) {
    t += gaps[i];
    s.sessions.push_back(Session{t, gaps[i], durs[i]});
  }
  return s;
}

std::vector<SessionSequence> stationary_data(std::size_t users, double horizon, std::uint64_t seed) {
  sim::GeneratorSpec spec;
  spec.users = users;
  spec.horizon = horizon;
  return sim::generate(spec, seed).sequences;
}

const std::filesystem::path& scratch() {
  static const std::filesystem::path dir = [] {
    auto d = std::filesystem::temp_directory_path() / "rtpp_train_test";
    std::filesystem::create_directories(d);
    return d;
  }();
  return dir;
}

}  // namespace

TEST_CASE("zero-weight ELBO is the unit-rate likelihood") {
  const ModelParams p = ModelParams::zeros(small_config());
  const auto seq = make_sequence("u", {0.0, 0.8, 2.1, 0.3, 1.7}, {1, 1, 1, 1, 1});
  Rng rng(1);
  train::ElboStats stats;
  const double elbo = train::sequence_elbo_value(p, seq, 4, rng, &stats);
  CHECK(elbo == doctest::Approx(-(0.8 + 2.1 + 0.3 + 1.7) - 5.0).epsilon(1e-13));
  CHECK(stats.kl == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(stats.gap_terms == 4 * 4);
  CHECK(stats.duration_terms == 5 * 4);
}

TEST_CASE("KL vanishes when the posterior equals the prior") {
  // With both MLPs ignoring their inputs and sharing biases, q and p coincide.
  ModelParams p = model::init_params(small_config(), 3);
  for (Tensor* t : {&p.prior_W1, &p.prior_W2, &p.post_W1, &p.post_W2}) *t = Tensor(t->rows(), t->cols());
  p.post_b2 = p.prior_b2;
  p.post_b1 = p.prior_b1;
  const auto seq = make_sequence("u", {0.0, 1.0, 3.0}, {2, 1, 4});
  Rng rng(2);
  train::ElboStats stats;
  train::sequence_elbo_value(p, seq, 2, rng, &stats);
  CHECK(stats.kl == 0.0);
  CHECK(stats.min_step_kl == 0.0);
}

TEST_CASE("single-sample and many-sample estimates agree") {
  const ModelParams p = model::init_params(small_config(8, 4), 4);
  const auto seq = make_sequence("u", {0.0, 1.2, 0.4, 5.0, 2.2, 0.9, 1.1}, {3, 1, 2, 6, 1, 2, 4});
  Rng rng(5);
  std::vector<double> single;
  for (int i = 0; i < 64; ++i) single.push_back(train::sequence_elbo_value(p, seq, 1, rng));
  const auto spread = testing::mean_and_error(single);
  const double many = train::sequence_elbo_value(p, seq, 64, rng);
  const double one = train::sequence_elbo_value(p, seq, 1, rng);
  // The L=64 average has std error spread.std_error; one draw has 8x that.
  CHECK(std::abs(many - spread.mean) < 4.0 * std::sqrt(2.0) * spread.std_error + 1e-12);
  CHECK(std::abs(one - many) < 4.0 * 8.0 * spread.std_error + 1e-12);
}

TEST_CASE("ELBO gradient matches finite differences") {
  for (auto slope : {model::SlopeMode::FrozenZero, model::SlopeMode::Learned}) {
    ModelConfig c = small_config();
    c.slope = slope;
    ModelParams p = model::init_params(c, 6);
    if (slope == model::SlopeMode::Learned) p.gap_w_t[0] = -0.03;
    const auto seq = make_sequence("u", {0.0, 0.6, 3.5, 1.0, 7.0}, {1, 4, 2, 2, 9});
    Rng rng(7);
    const auto noise = train::NoiseDraws::draw(2, seq.size(), rng);
    const auto grad = train::sequence_gradient(p, seq, noise, 0);

    ad::Tape probe;
    const auto trainable = model::bind(probe, p).trainable;
    double worst = 0.0;
    const double h = 1e-5;
    auto value = [&](const ModelParams& q) {
      ad::Tape tape;
      const auto b = model::bind(tape, q);
      return tape.scalar(train::sequence_elbo(tape, b, seq, noise));
    };
    const auto names = ModelParams::names();
    const auto gts = grad.grad.tensors();
    for (std::size_t i = 0; i < ModelParams::kCount; ++i) {
      if (!trainable[i]) {
        for (std::size_t e = 0; e < gts[i]->size(); ++e) CHECK((*gts[i])[e] == 0.0);
        continue;
      }
      double group = 0.0;
      for (std::size_t e = 0; e < gts[i]->size(); ++e) {
        ModelParams plus = p, minus = p;
        (*plus.tensors()[i])[e] += h;
        (*minus.tensors()[i])[e] -= h;
        const double numeric = (value(plus) - value(minus)) / (2.0 * h);
        group = std::max(group, ad::relative_error((*gts[i])[e], numeric));
      }
      CAPTURE(names[i]);
      CHECK(group < 1e-4);
      worst = std::max(worst, group);
    }
    CHECK(worst < 1e-4);
    CHECK(grad.elbo == doctest::Approx(value(p)).epsilon(1e-12));
  }
}

TEST_CASE("truncated gradient matches the full gradient on short sequences") {
  const ModelParams p = model::init_params(small_config(), 8);
  const auto seq = make_sequence("u", {0.0, 0.6, 3.5, 1.0, 7.0, 2.0}, {1, 4, 2, 2, 9, 1});
  Rng rng(9);
  const auto noise = train::NoiseDraws::draw(1, seq.size(), rng);
  const auto full = train::sequence_gradient(p, seq, noise, 0);
  const auto same = train::sequence_gradient(p, seq, noise, 6);
  CHECK(full.grad == same.grad);
  const auto cut = train::sequence_gradient(p, seq, noise, 2);
  CHECK(cut.elbo == doctest::Approx(full.elbo).epsilon(1e-12));
  CHECK_FALSE(cut.grad == full.grad);
}

TEST_CASE("ELBO requires two sessions") {
  const ModelParams p = model::init_params(small_config(), 1);
  Rng rng(1);
  CHECK_THROWS_AS(train::sequence_elbo_value(p, make_sequence("u", {0.0}, {1}), 1, rng), DataError);
}

TEST_CASE("zero learning rate changes nothing") {
  const auto data = stationary_data(12, 60.0, 3);
  train::TrainConfig cfg;
  cfg.model = small_config();
  cfg.epochs = 3;
  cfg.learning_rate = 0.0;
  cfg.batch_size = 4;
  const auto res = train::train(data, cfg);
  CHECK(res.params == model::init_params(cfg.model, cfg.seed));
  REQUIRE(res.report.epochs.size() == 3);
  CHECK(res.report.epochs[0].neg_elbo_per_event == res.report.epochs[1].neg_elbo_per_event);
  CHECK(res.report.epochs[1].neg_elbo_per_event == res.report.epochs[2].neg_elbo_per_event);
}

TEST_CASE("training is deterministic and independent of the worker count") {
  const auto data = stationary_data(10, 80.0, 4);
  train::TrainConfig cfg;
  cfg.model = small_config();
  cfg.epochs = 3;
  cfg.learning_rate = 0.01;
  cfg.batch_size = 4;
  cfg.truncation = 7;
  const auto a = train::train(data, cfg);
  const auto b = train::train(data, cfg);
  CHECK(a.params == b.params);
  std::ostringstream ra, rb;
  train::write_report_csv(ra, a.report, false);
  train::write_report_csv(rb, b.report, false);
  CHECK(ra.str() == rb.str());
  cfg.workers = 3;
  const auto c = train::train(data, cfg);
  CHECK(a.params == c.params);
  cfg.seed = 2;
  CHECK_FALSE(train::train(data, cfg).params == a.params);
}

TEST_CASE("training lowers the loss on stationary data") {
  const auto data = stationary_data(40, 100.0, 5);
  train::TrainConfig cfg;
  cfg.model = small_config(8, 4);
  cfg.epochs = 12;
  cfg.learning_rate = 0.02;
  cfg.batch_size = 8;
  const auto res = train::train(data, cfg);
  const auto& e = res.report.epochs;
  CHECK(e.back().neg_elbo_per_event < e.front().neg_elbo_per_event);
  CHECK(e.back().mae_duration < e.front().mae_duration);
  for (const auto& s : e) {
    CHECK(std::isfinite(s.neg_elbo_per_event));
    CHECK(s.seconds >= 0.0);
  }
  std::ostringstream csv;
  train::write_report_csv(csv, res.report);
  CHECK(csv.str().rfind("epoch,neg_elbo_per_event,mae_gap,mae_duration,seconds\n", 0) == 0);
}

TEST_CASE("ablation trains without error") {
  const auto data = stationary_data(16, 80.0, 6);
  train::TrainConfig cfg;
  cfg.model = small_config();
  cfg.model.latent = model::LatentMode::Ablation;
  cfg.epochs = 3;
  cfg.learning_rate = 0.01;
  const auto init = model::init_params(cfg.model, cfg.seed);
  const auto res = train::train(data, cfg);
  CHECK(res.params.prior_W1 == init.prior_W1);
  CHECK(res.params.post_W2 == init.post_W2);
  CHECK_FALSE(res.params.gap_b == init.gap_b);
  // The ablation objective is deterministic: no dependence on noise.
  Rng r1(1), r2(99);
  CHECK(train::sequence_elbo_value(res.params, data[0], 1, r1) == train::sequence_elbo_value(res.params, data[0], 3, r2));
}

TEST_CASE("training input errors") {
  train::TrainConfig cfg;
  cfg.model = small_config();
  cfg.epochs = 1;
  std::vector<SessionSequence> only_short{make_sequence("u", {0.0}, {1})};
  CHECK_THROWS_AS(train::train(only_short, cfg), DataError);
  cfg.epochs = 0;
  CHECK_THROWS(train::train(stationary_data(3, 20.0, 1), cfg));
  cfg.epochs = 1;
  cfg.samples = 0;
  CHECK_THROWS(cfg.validate());
}

TEST_CASE("divergence is reported with context") {
  auto data = stationary_data(4, 40.0, 2);
  train::TrainConfig cfg;
  cfg.model = small_config();
  cfg.epochs = 1;
  auto init = model::init_params(cfg.model, 1);
  init.gap_b[0] = 690.0;
  init.gap_w_z[0] = 20.0;
  try {
    train::train(data, cfg, init);
    FAIL("expected divergence");
  } catch (const NumericalError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch 1") != std::string::npos);
    CHECK(msg.find("batch 1") != std::string::npos);
  }
}

TEST_CASE("checkpoint round-trip and errors") {
  ModelConfig c = small_config(8, 5);
  c.slope = model::SlopeMode::Learned;
  ModelParams p = model::init_params(c, 11);
  p.gap_w_t[0] = -1.0 / 3.0;
  p.dur_b[0] = 1e-300;
  train::DataConfig data{eventlog::GapMode::EndToStart, 0.5};
  const auto path = scratch() / "ck.json";
  train::save_checkpoint(p, data, path);
  const auto back = train::load_checkpoint(path);
  CHECK(back.params == p);
  CHECK(back.data == data);
  CHECK(back.params.config == c);

  const std::string text = train::checkpoint_json(p, data);
  CHECK(text.find("\"format_version\":1") != std::string::npos);
  CHECK(text.find("\"w_t_mode\":\"learned\"") != std::string::npos);

  std::ofstream(scratch() / "trunc.json") << text.substr(0, text.size() / 2);
  CHECK_THROWS_AS(train::load_checkpoint(scratch() / "trunc.json"), train::CheckpointCorruptError);

  ModelConfig bigger = c;
  bigger.hidden = 16;
  CHECK_THROWS_AS(train::load_checkpoint(path, bigger), train::CheckpointShapeError);

  std::string v2 = text;
  v2.replace(v2.find("\"format_version\":1"), 18, "\"format_version\":2");
  CHECK_THROWS_AS(train::parse_checkpoint(v2), train::CheckpointVersionError);

  std::string bad_shape = text;
  const auto pos = bad_shape.find("\"shape\":[1,8]");
  REQUIRE(pos != std::string::npos);
  bad_shape.replace(pos, 13, "\"shape\":[1,7]");
  CHECK_THROWS_AS(train::parse_checkpoint(bad_shape), DataError);

  CHECK_THROWS_AS(train::load_checkpoint(scratch() / "missing.json"), DataError);
}
