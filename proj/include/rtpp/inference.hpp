#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rtpp/eventlog.hpp"
#include "rtpp/model.hpp"

namespace rtpp::inference {

struct PredictionRecord {
  std::string user_id;
  std::size_t step = 0;  // prefix length the prediction conditions on
  double pred_gap = 0.0;
  double pred_duration = 0.0;
  std::optional<double> obs_gap;
  std::optional<std::int64_t> obs_duration;
  double base = 0.0;  // filtered intensity base at the frontier
  double rate = 1.0;  // filtered Poisson rate at the frontier
  bool operator==(const PredictionRecord&) const = default;
};

struct PredictOptions {
  std::size_t samples = 32;
  std::uint64_t seed = 1;
  /// Sample z from the posterior while filtering instead of using its logit-mean.
  bool sampled_filter = false;
};

/// Filters the prefix and averages expected gap and Poisson mean over prior latent draws at the frontier.
PredictionRecord predict_next(const model::ModelParams& params, const eventlog::SessionSequence& prefix,
                              const PredictOptions& options);

/// One record per prefix length 1..n-1, paired with the observed next session.
std::vector<PredictionRecord> rolling_evaluate(const model::ModelParams& params,
                                               const eventlog::SessionSequence& sequence,
                                               const PredictOptions& options);

enum class AlarmMode { Fixed, Expected };
enum class Comparator { Less, Greater };

struct AlarmPolicy {
  AlarmMode mode = AlarmMode::Expected;
  double theta_gap = 0.0;
  double theta_duration = 0.0;
  Comparator duration_cmp = Comparator::Less;

  void validate() const;
};

AlarmMode parse_alarm_mode(const std::string& s);
Comparator parse_comparator(const std::string& s);

/// Empirical means of a user's observed gaps (sentinel excluded) and durations.
struct HistoryStats {
  double mean_gap = 0.0;
  double mean_duration = 0.0;
};

/// Stats over the first `prefix_length` sessions; empty when no gap has been observed.
std::optional<HistoryStats> history_stats(const eventlog::SessionSequence& seq, std::size_t prefix_length);

bool churn_alarm(const PredictionRecord& record, const AlarmPolicy& policy,
                 const std::optional<HistoryStats>& stats = std::nullopt);

/// CSV `user_id,step,pred_gap,obs_gap,pred_dur,obs_dur,alarm`; the alarm column
/// is empty where a decision could not be made.
void write_predictions_header(std::ostream& out);
void write_prediction_row(std::ostream& out, const PredictionRecord& r, const std::optional<bool>& alarm);

}  // namespace rtpp::inference
