#include "rtpp/model.hpp"

#include <cmath>

#include "rtpp/errors.hpp"
#include "rtpp/rng.hpp"

namespace rtpp::model {
namespace {

enum Index : std::size_t {
  kDurB,
  kDurWh,
  kDurWz,
  kGapB,
  kGapWh,
  kGapWt,
  kGapWz,
  kLstmW,
  kLstmB,
  kPostW1,
  kPostW2,
  kPostB1,
  kPostB2,
  kPriorW1,
  kPriorW2,
  kPriorB1,
  kPriorB2,
};
static_assert(kGapWt == kSlopeIndex);

bool latent_group(std::size_t i) { return i >= kPostW1; }

double inverse_softplus(double y) { return y + std::log(-std::expm1(-y)); }

void check_exp_argument(double x, const char* what) {
  if (!(std::abs(x) <= kMaxExpArgument))
    throw NumericalError(std::string("diverged: ") + what + " argument " + std::to_string(x) + " is out of range");
}

}  // namespace

const char* to_string(SlopeMode m) { return m == SlopeMode::FrozenZero ? "frozen_zero" : "learned"; }
const char* to_string(LatentMode m) { return m == LatentMode::Full ? "full" : "ablation"; }

SlopeMode parse_slope_mode(const std::string& s) {
  if (s == "frozen_zero") return SlopeMode::FrozenZero;
  if (s == "learned") return SlopeMode::Learned;
  throw DataError("unknown w_t mode '" + s + "'");
}

LatentMode parse_latent_mode(const std::string& s) {
  if (s == "full") return LatentMode::Full;
  if (s == "ablation") return LatentMode::Ablation;
  throw DataError("unknown latent mode '" + s + "'");
}

const std::array<std::string_view, ModelParams::kCount>& ModelParams::names() {
  static const std::array<std::string_view, kCount> n{
      "dur.b",   "dur.w_h", "dur.w_z", "gap.b",   "gap.w_h",  "gap.w_t",  "gap.w_z",  "lstm.W",  "lstm.b",
      "post.W1", "post.W2", "post.b1", "post.b2", "prior.W1", "prior.W2", "prior.b1", "prior.b2"};
  return n;
}

std::array<Tensor*, ModelParams::kCount> ModelParams::tensors() {
  return {&dur_b,   &dur_w_h, &dur_w_z, &gap_b,   &gap_w_h,  &gap_w_t,  &gap_w_z,  &lstm_W,  &lstm_b,
          &post_W1, &post_W2, &post_b1, &post_b2, &prior_W1, &prior_W2, &prior_b1, &prior_b2};
}

std::array<const Tensor*, ModelParams::kCount> ModelParams::tensors() const {
  auto t = const_cast<ModelParams*>(this)->tensors();
  std::array<const Tensor*, kCount> out;
  for (std::size_t i = 0; i < kCount; ++i) out[i] = t[i];
  return out;
}

std::array<std::pair<std::size_t, std::size_t>, ModelParams::kCount> ModelParams::shapes(const ModelConfig& c) {
  const std::size_t h = c.hidden, hp = c.mlp_hidden;
  return {{{1, 1},
           {1, h},
           {1, 1},
           {1, 1},
           {1, h},
           {1, 1},
           {1, 1},
           {4 * h, kCellInputs + h},
           {4 * h, 1},
           {hp, 2 + h},
           {2, hp},
           {hp, 1},
           {2, 1},
           {hp, h},
           {2, hp},
           {hp, 1},
           {2, 1}}};
}

ModelParams ModelParams::zeros(const ModelConfig& config) {
  if (config.hidden < 1 || config.mlp_hidden < 1) throw std::invalid_argument("model sizes must be >= 1");
  ModelParams p;
  p.config = config;
  const auto sh = shapes(config);
  auto ts = p.tensors();
  for (std::size_t i = 0; i < kCount; ++i) *ts[i] = Tensor(sh[i].first, sh[i].second);
  return p;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const Tensor* t : tensors()) n += t->size();
  return n;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = ModelParams::zeros(config);
  Rng rng(derive_seed(seed, "init"));
  auto fill = [&](Tensor& t, std::size_t fan_in) {
    const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = s * (2.0 * rng.uniform() - 1.0);
  };
  const std::size_t h = config.hidden;
  fill(p.lstm_W, p.lstm_W.cols());
  fill(p.gap_w_z, h + 1);
  fill(p.gap_w_h, h + 1);
  fill(p.dur_w_z, h + 1);
  fill(p.dur_w_h, h + 1);
  fill(p.prior_W1, p.prior_W1.cols());
  fill(p.prior_W2, p.prior_W2.cols());
  fill(p.post_W1, p.post_W1.cols());
  fill(p.post_W2, p.post_W2.cols());
  for (std::size_t r = h; r < 2 * h; ++r) p.lstm_b[r] = 1.0;
  const double raw_std = inverse_softplus(0.5 - kStdFloor);
  p.prior_b2[1] = raw_std;
  p.post_b2[1] = raw_std;
  // The slope starts at zero in both modes.
  p.gap_w_t[0] = 0.0;
  return p;
}

BoundParams bind(ad::Tape& tape, const ModelParams& params) {
  BoundParams b;
  b.params = &params;
  const auto ts = params.tensors();
  for (std::size_t i = 0; i < ModelParams::kCount; ++i) {
    bool trainable = true;
    if (i == kSlopeIndex && params.config.slope == SlopeMode::FrozenZero) trainable = false;
    if (latent_group(i) && params.config.latent == LatentMode::Ablation) trainable = false;
    b.trainable[i] = trainable;
    b.vars[i] = trainable ? tape.parameter(*ts[i]) : tape.constant(*ts[i]);
  }
  return b;
}

TapeState constant_state(ad::Tape& tape, const HiddenState& s) {
  return {tape.constant(Tensor::column(s.h)), tape.constant(Tensor::column(s.c))};
}

ad::Var model_input(ad::Tape& tape, double gap, std::int64_t duration) {
  if (!(gap >= 0.0) || !std::isfinite(gap)) throw DataError("model input: gap must be finite and >= 0");
  if (duration < 1) throw DataError("model input: duration must be >= 1");
  return tape.constant(Tensor::column({std::log1p(gap), std::log1p(static_cast<double>(duration))}));
}

namespace {

std::pair<ad::Var, ad::Var> gaussian_head(ad::Var out) {
  ad::Var mean = ad::slice(out, 0, 1);
  ad::Var std_dev = ad::softplus(ad::slice(out, 1, 1)) + kStdFloor;
  return {mean, std_dev};
}

ad::Var sample_z(ad::Var mean, ad::Var std_dev, StepMode mode, double eps) {
  if (mode == StepMode::Filter) return ad::sigmoid(mean);
  return tpp::sample_logit_normal(mean, std_dev, eps);
}

}  // namespace

std::pair<ad::Var, ad::Var> prior_params(const BoundParams& p, ad::Var h_prev) {
  ad::Var hidden = ad::tanh(ad::matvec(p[kPriorW1], h_prev) + p[kPriorB1]);
  return gaussian_head(ad::matvec(p[kPriorW2], hidden) + p[kPriorB2]);
}

std::pair<ad::Var, ad::Var> posterior_params(const BoundParams& p, ad::Var input, ad::Var h_prev) {
  ad::Var x = ad::concat({input, h_prev});
  ad::Var hidden = ad::tanh(ad::matvec(p[kPostW1], x) + p[kPostB1]);
  return gaussian_head(ad::matvec(p[kPostW2], hidden) + p[kPostB2]);
}

std::pair<ad::Var, ad::Var> heads(const BoundParams& p, ad::Var z, ad::Var h) {
  ad::Tape& tape = *z.tape;
  ad::Var base = (p[kGapWz] * z + ad::matvec(p[kGapWh], h)) + p[kGapB];
  ad::Var log_rate = (p[kDurWz] * z + ad::matvec(p[kDurWh], h)) + p[kDurB];
  check_exp_argument(tape.scalar(base), "intensity");
  check_exp_argument(tape.scalar(log_rate), "duration rate");
  return {base, log_rate};
}

TapeState lstm(const BoundParams& p, ad::Var input, ad::Var z, TapeState prev) {
  const std::size_t h = p.params->config.hidden;
  ad::Var x = ad::concat({input, z, prev.h});
  ad::Var gates = ad::matvec(p[kLstmW], x) + p[kLstmB];
  ad::Var in_gate = ad::sigmoid(ad::slice(gates, 0, h));
  ad::Var forget = ad::sigmoid(ad::slice(gates, h, h));
  ad::Var out_gate = ad::sigmoid(ad::slice(gates, 2 * h, h));
  ad::Var cand = ad::tanh(ad::slice(gates, 3 * h, h));
  ad::Var c = forget * prev.c + in_gate * cand;
  ad::Var hn = out_gate * ad::tanh(c);
  return {hn, c};
}

TapeStep initial_step(const BoundParams& p, TapeState init, StepMode mode, double eps) {
  ad::Tape& tape = *init.h.tape;
  TapeStep s;
  s.state = init;
  if (p.params->config.latent == LatentMode::Ablation) {
    s.z = tape.constant(0.5);
  } else {
    auto [m, sd] = prior_params(p, init.h);
    s.prior_mean = m;
    s.prior_std = sd;
    s.z = sample_z(m, sd, mode, eps);
  }
  auto [base, log_rate] = heads(p, s.z, init.h);
  s.base = base;
  s.log_rate = log_rate;
  s.has_heads = true;
  return s;
}

TapeStep step(const BoundParams& p, TapeState prev, double gap, std::int64_t duration, StepMode mode, double eps,
              bool with_heads) {
  ad::Tape& tape = *prev.h.tape;
  TapeStep s;
  ad::Var input = model_input(tape, gap, duration);
  if (p.params->config.latent == LatentMode::Ablation) {
    s.z = tape.constant(0.5);
  } else {
    auto [pm, ps] = prior_params(p, prev.h);
    auto [qm, qs] = posterior_params(p, input, prev.h);
    s.prior_mean = pm;
    s.prior_std = ps;
    s.post_mean = qm;
    s.post_std = qs;
    s.has_latent = true;
    s.z = mode == StepMode::Generate ? sample_z(pm, ps, mode, eps) : sample_z(qm, qs, mode, eps);
  }
  s.state = lstm(p, input, s.z, prev);
  if (with_heads) {
    auto [base, log_rate] = heads(p, s.z, s.state.h);
    s.base = base;
    s.log_rate = log_rate;
    s.has_heads = true;
  }
  return s;
}

Evaluator::Evaluator(const ModelParams& params) : params_(&params) {
  bound_ = bind(tape_, params);
  mark_ = tape_.mark();
}

StepOutput Evaluator::collect(const TapeStep& s, bool with_prior) {
  StepOutput out;
  auto hv = tape_.value(s.state.h);
  auto cv = tape_.value(s.state.c);
  out.state.h.assign(hv.begin(), hv.end());
  out.state.c.assign(cv.begin(), cv.end());
  out.z = tape_.scalar(s.z);
  if (with_prior && s.prior_mean.valid())
    out.prior = {tape_.scalar(s.prior_mean), tape_.scalar(s.prior_std)};
  if (s.has_latent) out.posterior = {tape_.scalar(s.post_mean), tape_.scalar(s.post_std)};
  out.base = tape_.scalar(s.base);
  out.rate = std::exp(tape_.scalar(s.log_rate));
  return out;
}

StepOutput Evaluator::initial(StepMode mode, double eps) {
  tape_.rewind(mark_);
  const TapeState init = constant_state(tape_, HiddenState::zeros(params_->config.hidden));
  const TapeStep s = initial_step(bound_, init, mode, eps);
  StepOutput out = collect(s, true);
  out.posterior = out.prior;
  return out;
}

StepOutput Evaluator::step(const HiddenState& prev, double gap, std::int64_t duration, StepMode mode, double eps) {
  if (prev.h.size() != params_->config.hidden || prev.c.size() != params_->config.hidden)
    throw ShapeError("step: hidden state size does not match the model");
  tape_.rewind(mark_);
  const TapeState ts = constant_state(tape_, prev);
  const TapeStep s = model::step(bound_, ts, gap, duration, mode, eps, true);
  StepOutput out = collect(s, true);
  if (!std::isfinite(out.base) || !std::isfinite(out.rate)) throw NumericalError("step: non-finite output");
  return out;
}

tpp::GaussianParams Evaluator::prior(const HiddenState& prev) {
  tape_.rewind(mark_);
  const TapeState ts = constant_state(tape_, prev);
  auto [m, s] = prior_params(bound_, ts.h);
  return {tape_.scalar(m), tape_.scalar(s)};
}

std::pair<double, double> Evaluator::heads(double z, const HiddenState& state) {
  tape_.rewind(mark_);
  ad::Var zv = tape_.constant(z);
  ad::Var hv = tape_.constant(Tensor::column(state.h));
  auto [base, log_rate] = model::heads(bound_, zv, hv);
  return {tape_.scalar(base), std::exp(tape_.scalar(log_rate))};
}

tpp::GaussianParams prior_params(const ModelParams& params, const HiddenState& prev) {
  Evaluator ev(params);
  return ev.prior(prev);
}

tpp::GaussianParams posterior_params(const ModelParams& params, double gap, std::int64_t duration,
                                     const HiddenState& prev) {
  ad::Tape tape;
  const BoundParams b = bind(tape, params);
  const TapeState ts = constant_state(tape, prev);
  auto [m, s] = posterior_params(b, model_input(tape, gap, duration), ts.h);
  return {tape.scalar(m), tape.scalar(s)};
}

std::pair<double, double> heads(const ModelParams& params, double z, const std::vector<double>& h) {
  if (!(z > 0.0 && z < 1.0)) throw std::domain_error("heads: z must lie in (0, 1)");
  Evaluator ev(params);
  return ev.heads(z, HiddenState{h, std::vector<double>(h.size(), 0.0)});
}

StepOutput step(const ModelParams& params, const HiddenState& prev, double gap, std::int64_t duration, StepMode mode,
                double eps) {
  Evaluator ev(params);
  return ev.step(prev, gap, duration, mode, eps);
}

}  // namespace rtpp::model
