#include "rtpp/inference.hpp"

#include <cmath>
#include <ostream>
#include <sstream>

#include "rtpp/errors.hpp"
#include "rtpp/rng.hpp"

namespace rtpp::inference {
namespace {

using eventlog::SessionSequence;

struct Filter {
  explicit Filter(const model::ModelParams& p, const PredictOptions& o, const std::string& user)
      : params(p), options(o), user_id(user), ev(p) {}

  const model::ModelParams& params;
  const PredictOptions& options;
  const std::string& user_id;
  model::Evaluator ev;
  model::HiddenState state;
  model::StepOutput last;

  model::StepMode mode() const { return options.sampled_filter ? model::StepMode::Infer : model::StepMode::Filter; }

  double noise(std::size_t step) const {
    if (!options.sampled_filter) return 0.0;
    Rng rng(derive_seed(options.seed, user_id, 0x5eed0000ULL + step));
    return rng.normal();
  }

  void advance(const eventlog::Session& s, std::size_t index) {
    if (index == 0) state = model::HiddenState::zeros(params.config.hidden);
    last = ev.step(state, s.gap, s.duration, mode(), noise(index + 1));
    state = last.state;
  }

  PredictionRecord frontier(std::size_t prefix_length) {
    PredictionRecord r;
    r.user_id = user_id;
    r.step = prefix_length;
    r.base = last.base;
    r.rate = last.rate;
    const double slope = params.config.slope == model::SlopeMode::Learned ? params.gap_w_t[0] : 0.0;
    double gap_sum = 0.0;
    double dur_sum = 0.0;
    if (params.config.latent == model::LatentMode::Ablation) {
      const auto [base, rate] = ev.heads(0.5, state);
      gap_sum = static_cast<double>(options.samples) * tpp::expected_gap({base, slope});
      dur_sum = static_cast<double>(options.samples) * rate;
    } else {
      const tpp::GaussianParams prior = ev.prior(state);
      Rng rng(derive_seed(options.seed, user_id, prefix_length));
      for (std::size_t k = 0; k < options.samples; ++k) {
        const double z = tpp::sample_logit_normal(prior, rng.normal());
        const auto [base, rate] = ev.heads(z, state);
        gap_sum += tpp::expected_gap({base, slope});
        dur_sum += rate;
      }
    }
    r.pred_gap = gap_sum / static_cast<double>(options.samples);
    r.pred_duration = dur_sum / static_cast<double>(options.samples);
    if (!(r.pred_gap > 0.0) || !(r.pred_duration > 0.0) || !std::isfinite(r.pred_gap) || !std::isfinite(r.pred_duration))
      throw NumericalError("prediction for user '" + user_id + "' is not a positive finite value");
    return r;
  }
};

}  // namespace

PredictionRecord predict_next(const model::ModelParams& params, const SessionSequence& prefix,
                              const PredictOptions& options) {
  if (prefix.sessions.empty()) throw DataError("predict_next: empty prefix for user '" + prefix.user_id + "'");
  if (options.samples < 1) throw std::invalid_argument("predict_next: need at least one prediction sample");
  Filter f(params, options, prefix.user_id);
  for (std::size_t i = 0; i < prefix.size(); ++i) f.advance(prefix.sessions[i], i);
  return f.frontier(prefix.size());
}

std::vector<PredictionRecord> rolling_evaluate(const model::ModelParams& params, const SessionSequence& seq,
                                               const PredictOptions& options) {
  if (seq.size() < 2) throw DataError("rolling_evaluate: user '" + seq.user_id + "' has fewer than 2 sessions");
  if (options.samples < 1) throw std::invalid_argument("rolling_evaluate: need at least one prediction sample");
  Filter f(params, options, seq.user_id);
  std::vector<PredictionRecord> out;
  out.reserve(seq.size() - 1);
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    f.advance(seq.sessions[i], i);
    PredictionRecord r = f.frontier(i + 1);
    r.obs_gap = seq.sessions[i + 1].gap;
    r.obs_duration = seq.sessions[i + 1].duration;
    out.push_back(std::move(r));
  }
  return out;
}

void AlarmPolicy::validate() const {
  if (mode == AlarmMode::Fixed && !(theta_gap > 0.0 && theta_duration > 0.0))
    throw std::invalid_argument("fixed alarm thresholds must be positive");
}

AlarmMode parse_alarm_mode(const std::string& s) {
  if (s == "fixed") return AlarmMode::Fixed;
  if (s == "expected") return AlarmMode::Expected;
  throw DataError("unknown alarm mode '" + s + "'");
}

Comparator parse_comparator(const std::string& s) {
  if (s == "less") return Comparator::Less;
  if (s == "greater") return Comparator::Greater;
  throw DataError("unknown duration comparator '" + s + "'");
}

std::optional<HistoryStats> history_stats(const SessionSequence& seq, std::size_t prefix_length) {
  const std::size_t n = std::min(prefix_length, seq.size());
  if (n < 2) return std::nullopt;
  double gaps = 0.0;
  double durs = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (i > 0) gaps += seq.sessions[i].gap;
    durs += static_cast<double>(seq.sessions[i].duration);
  }
  return HistoryStats{gaps / static_cast<double>(n - 1), durs / static_cast<double>(n)};
}

bool churn_alarm(const PredictionRecord& r, const AlarmPolicy& policy, const std::optional<HistoryStats>& stats) {
  policy.validate();
  if (policy.mode == AlarmMode::Fixed) return r.pred_gap > policy.theta_gap && r.pred_duration < policy.theta_duration;
  if (!stats) throw DataError("expected-mode churn alarm needs the user's history statistics");
  const bool dur = policy.duration_cmp == Comparator::Less ? r.pred_duration < stats->mean_duration
                                                            : r.pred_duration > stats->mean_duration;
  return r.pred_gap > stats->mean_gap && dur;
}

void write_predictions_header(std::ostream& out) { out << "user_id,step,pred_gap,obs_gap,pred_dur,obs_dur,alarm\n"; }

void write_prediction_row(std::ostream& out, const PredictionRecord& r, const std::optional<bool>& alarm) {
  std::ostringstream s;
  s.precision(17);
  s << r.user_id << ',' << r.step << ',' << r.pred_gap << ',';
  if (r.obs_gap) s << *r.obs_gap;
  s << ',' << r.pred_duration << ',';
  if (r.obs_duration) s << *r.obs_duration;
  s << ',';
  if (alarm) s << (*alarm ? 1 : 0);
  out << s.str() << '\n';
}

}  // namespace rtpp::inference
