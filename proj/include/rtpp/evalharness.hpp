#pragma once

#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rtpp/eventlog.hpp"
#include "rtpp/inference.hpp"
#include "rtpp/model.hpp"
#include "rtpp/train.hpp"

namespace rtpp::eval {

struct MetricSummary {
  double mae_gap = 0.0;
  double mre_gap = 0.0;
  double mae_duration = 0.0;
  double mre_duration = 0.0;
  std::size_t count = 0;
  bool operator==(const MetricSummary&) const = default;
};

/// MAE = mean |pred - obs|, MRE = mean |pred - obs| / obs, over records with observations.
MetricSummary compute_metrics(std::span<const inference::PredictionRecord> records);

enum class BaselineKind { PerUserMean, GlobalMean, LastValue, HomPoisson, AblationRnn };

const char* to_string(BaselineKind k);
BaselineKind parse_baseline(const std::string& s);

struct BaselineConfig {
  train::TrainConfig train{};          // for ablation_rnn
  inference::PredictOptions predict{};  // for ablation_rnn
  /// Use these weights for ablation_rnn instead of training.
  std::optional<model::ModelParams> ablation_params;
};

/// A fitted reference predictor producing rolling records like the model does.
class BaselinePredictor {
 public:
  BaselineKind kind() const { return kind_; }
  std::vector<inference::PredictionRecord> rolling(const eventlog::SessionSequence& seq) const;
  /// Gap predicted for a user before any of its sessions are seen.
  double predicted_gap(const std::string& user_id) const;
  double predicted_duration(const std::string& user_id) const;
  double global_mean_gap() const { return global_gap_; }
  const model::ModelParams* ablation_params() const { return ablation_ ? &*ablation_ : nullptr; }

  friend BaselinePredictor fit_baseline(BaselineKind, std::span<const eventlog::SessionSequence>,
                                        const BaselineConfig&);

 private:
  BaselineKind kind_ = BaselineKind::GlobalMean;
  double global_gap_ = 1.0;
  double global_duration_ = 1.0;
  std::map<std::string, double> user_gap_;
  std::map<std::string, double> user_duration_;
  std::optional<model::ModelParams> ablation_;
  inference::PredictOptions predict_;
};

BaselinePredictor fit_baseline(BaselineKind kind, std::span<const eventlog::SessionSequence> train,
                               const BaselineConfig& config);

/// A named rolling predictor.
struct Method {
  std::string name;
  std::function<std::vector<inference::PredictionRecord>(const eventlog::SessionSequence&)> rolling;
};

Method model_method(std::string name, const model::ModelParams& params, const inference::PredictOptions& options);
Method baseline_method(std::string name, BaselinePredictor predictor);

struct MethodResult {
  std::string name;
  MetricSummary metrics;
  std::vector<inference::PredictionRecord> records;
};

/// Evaluates every method on the same rolling record set of the test users.
std::vector<MethodResult> compare(std::span<const Method> methods, std::span<const eventlog::SessionSequence> test);

/// CSV `method,seed,count,mae_gap,mre_gap,mae_dur,mre_dur`.
void write_summary_header(std::ostream& out);
void write_summary_rows(std::ostream& out, std::span<const MethodResult> results, std::uint64_t seed);
/// Plot-ready long format `method,seed,metric,value`.
void write_long_header(std::ostream& out);
void write_long_rows(std::ostream& out, std::span<const MethodResult> results, std::uint64_t seed);

}  // namespace rtpp::eval
