#include "rtpp/evalharness.hpp"

#include <cmath>
#include <ostream>
#include <sstream>

#include "rtpp/errors.hpp"

namespace rtpp::eval {
namespace {

using eventlog::SessionSequence;
using inference::PredictionRecord;

struct Totals {
  double gap_sum = 0.0;
  std::size_t gaps = 0;
  double dur_sum = 0.0;
  std::size_t durs = 0;
};

Totals totals(const SessionSequence& s) {
  Totals t;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i > 0) {
      t.gap_sum += s.sessions[i].gap;
      ++t.gaps;
    }
    t.dur_sum += static_cast<double>(s.sessions[i].duration);
    ++t.durs;
  }
  return t;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(17);
  s << v;
  return s.str();
}

}  // namespace

MetricSummary compute_metrics(std::span<const PredictionRecord> records) {
  if (records.empty()) throw DataError("compute_metrics: no records");
  MetricSummary m;
  for (const auto& r : records) {
    if (!r.obs_gap || !r.obs_duration) throw DataError("compute_metrics: record without observations");
    const double og = *r.obs_gap;
    const double od = static_cast<double>(*r.obs_duration);
    if (!(og > 0.0) || !(od >= 1.0)) throw DataError("compute_metrics: observed gap must be > 0 and duration >= 1");
    const double eg = std::abs(r.pred_gap - og);
    const double ed = std::abs(r.pred_duration - od);
    m.mae_gap += eg;
    m.mre_gap += eg / og;
    m.mae_duration += ed;
    m.mre_duration += ed / od;
  }
  const double n = static_cast<double>(records.size());
  m.mae_gap /= n;
  m.mre_gap /= n;
  m.mae_duration /= n;
  m.mre_duration /= n;
  m.count = records.size();
  return m;
}

const char* to_string(BaselineKind k) {
  switch (k) {
    case BaselineKind::PerUserMean: return "per_user_mean";
    case BaselineKind::GlobalMean: return "global_mean";
    case BaselineKind::LastValue: return "last_value";
    case BaselineKind::HomPoisson: return "hom_poisson";
    case BaselineKind::AblationRnn: return "ablation_rnn";
  }
  return "?";
}

BaselineKind parse_baseline(const std::string& s) {
  for (auto k : {BaselineKind::PerUserMean, BaselineKind::GlobalMean, BaselineKind::LastValue, BaselineKind::HomPoisson,
                 BaselineKind::AblationRnn})
    if (s == to_string(k)) return k;
  throw DataError("unknown baseline '" + s + "'");
}

BaselinePredictor fit_baseline(BaselineKind kind, std::span<const SessionSequence> train, const BaselineConfig& config) {
  if (train.empty()) throw DataError("fit_baseline: no training sequences");
  BaselinePredictor b;
  b.kind_ = kind;
  b.predict_ = config.predict;
  Totals all;
  for (const auto& s : train) {
    const Totals t = totals(s);
    all.gap_sum += t.gap_sum;
    all.gaps += t.gaps;
    all.dur_sum += t.dur_sum;
    all.durs += t.durs;
    if (t.durs > 0) b.user_duration_[s.user_id] = t.dur_sum / static_cast<double>(t.durs);
    if (t.gaps > 0 && t.gap_sum > 0.0) {
      // Per-user mean gap; for hom_poisson this is 1 / lambda_u with lambda_u = (n_u - 1) / sum g.
      b.user_gap_[s.user_id] = t.gap_sum / static_cast<double>(t.gaps);
    }
  }
  if (all.gaps == 0 || !(all.gap_sum > 0.0)) throw DataError("fit_baseline: training data contain no positive gaps");
  b.global_gap_ = all.gap_sum / static_cast<double>(all.gaps);
  b.global_duration_ = all.dur_sum / static_cast<double>(all.durs);
  if (kind == BaselineKind::AblationRnn) {
    if (config.ablation_params) {
      if (config.ablation_params->config.latent != model::LatentMode::Ablation)
        throw DataError("ablation_rnn needs ablation-mode weights");
      b.ablation_ = *config.ablation_params;
    } else {
      train::TrainConfig tc = config.train;
      tc.model.latent = model::LatentMode::Ablation;
      b.ablation_ = train::train(train, tc).params;
    }
  }
  return b;
}

double BaselinePredictor::predicted_gap(const std::string& user_id) const {
  if (kind_ == BaselineKind::PerUserMean || kind_ == BaselineKind::HomPoisson) {
    auto it = user_gap_.find(user_id);
    if (it != user_gap_.end()) return it->second;
  }
  return global_gap_;
}

double BaselinePredictor::predicted_duration(const std::string& user_id) const {
  if (kind_ == BaselineKind::PerUserMean || kind_ == BaselineKind::HomPoisson) {
    auto it = user_duration_.find(user_id);
    if (it != user_duration_.end()) return it->second;
  }
  return global_duration_;
}

std::vector<PredictionRecord> BaselinePredictor::rolling(const SessionSequence& seq) const {
  if (kind_ == BaselineKind::AblationRnn) return inference::rolling_evaluate(*ablation_, seq, predict_);
  if (seq.size() < 2) throw DataError("rolling: user '" + seq.user_id + "' has fewer than 2 sessions");
  std::vector<PredictionRecord> out;
  out.reserve(seq.size() - 1);
  for (std::size_t i = 0; i + 1 < seq.size(); ++i) {
    PredictionRecord r;
    r.user_id = seq.user_id;
    r.step = i + 1;
    if (kind_ == BaselineKind::LastValue) {
      r.pred_gap = i > 0 && seq.sessions[i].gap > 0.0 ? seq.sessions[i].gap : global_gap_;
      r.pred_duration = static_cast<double>(seq.sessions[i].duration);
    } else {
      r.pred_gap = predicted_gap(seq.user_id);
      r.pred_duration = predicted_duration(seq.user_id);
    }
    r.base = -std::log(r.pred_gap);
    r.rate = r.pred_duration;
    r.obs_gap = seq.sessions[i + 1].gap;
    r.obs_duration = seq.sessions[i + 1].duration;
    out.push_back(std::move(r));
  }
  return out;
}

Method model_method(std::string name, const model::ModelParams& params, const inference::PredictOptions& options) {
  return {std::move(name), [&params, options](const SessionSequence& s) {
            return inference::rolling_evaluate(params, s, options);
          }};
}

Method baseline_method(std::string name, BaselinePredictor predictor) {
  return {std::move(name), [p = std::move(predictor)](const SessionSequence& s) { return p.rolling(s); }};
}

std::vector<MethodResult> compare(std::span<const Method> methods, std::span<const SessionSequence> test) {
  std::vector<MethodResult> out;
  std::vector<std::pair<std::string, std::size_t>> reference;
  for (const auto& m : methods) {
    MethodResult r;
    r.name = m.name;
    std::vector<std::pair<std::string, std::size_t>> keys;
    for (const auto& s : test) {
      if (s.size() < 2) continue;
      auto recs = m.rolling(s);
      for (auto& rec : recs) {
        keys.emplace_back(rec.user_id, rec.step);
        r.records.push_back(std::move(rec));
      }
    }
    if (out.empty()) {
      reference = keys;
    } else if (keys != reference) {
      throw DataError("compare: method '" + m.name + "' produced " + std::to_string(keys.size()) +
                      " records on a different index set than '" + out.front().name + "' (" +
                      std::to_string(reference.size()) + ")");
    }
    r.metrics = compute_metrics(r.records);
    out.push_back(std::move(r));
  }
  return out;
}

void write_summary_header(std::ostream& out) { out << "method,seed,count,mae_gap,mre_gap,mae_dur,mre_dur\n"; }

void write_summary_rows(std::ostream& out, std::span<const MethodResult> results, std::uint64_t seed) {
  for (const auto& r : results)
    out << r.name << ',' << seed << ',' << r.metrics.count << ',' << fmt(r.metrics.mae_gap) << ','
        << fmt(r.metrics.mre_gap) << ',' << fmt(r.metrics.mae_duration) << ',' << fmt(r.metrics.mre_duration) << '\n';
}

void write_long_header(std::ostream& out) { out << "method,seed,metric,value\n"; }

void write_long_rows(std::ostream& out, std::span<const MethodResult> results, std::uint64_t seed) {
  for (const auto& r : results) {
    const std::pair<const char*, double> rows[] = {{"mae_gap", r.metrics.mae_gap},
                                                   {"mre_gap", r.metrics.mre_gap},
                                                   {"mae_dur", r.metrics.mae_duration},
                                                   {"mre_dur", r.metrics.mre_duration},
                                                   {"count", static_cast<double>(r.metrics.count)}};
    for (const auto& [name, value] : rows) out << r.name << ',' << seed << ',' << name << ',' << fmt(value) << '\n';
  }
}

}  // namespace rtpp::eval
