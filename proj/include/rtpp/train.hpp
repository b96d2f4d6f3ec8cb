#pragma once

// Per-sequence variational lower bound and its optimization by truncated
// backpropagation through time with Adam.

#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "rtpp/checkpoint.hpp"
#include "rtpp/eventlog.hpp"
#include "rtpp/model.hpp"
#include "rtpp/rng.hpp"

namespace rtpp::train {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainConfig {
  std::size_t epochs = 70;
  double learning_rate = 1e-3;
  model::ModelConfig model{};
  std::size_t samples = 1;        // Monte-Carlo latent trajectories per sequence
  std::size_t batch_size = 16;    // users per Adam step
  std::size_t truncation = 200;   // BPTT window in steps; 0 disables truncation
  std::uint64_t seed = 1;
  AdamConfig adam{};
  double clip_norm = 5.0;         // 0 disables clipping
  std::size_t workers = 1;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;
  double neg_elbo_per_event = 0.0;
  double mae_gap = 0.0;
  double mae_duration = 0.0;
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
};

/// CSV `epoch,neg_elbo_per_event,mae_gap,mae_duration,seconds`.
void write_report_csv(std::ostream& out, const TrainReport& report, bool include_seconds = true);

/// Standard-normal draws for every step of every latent trajectory. Step 0 is
/// the initial prior draw; step j >= 1 belongs to session j.
struct NoiseDraws {
  std::size_t samples = 0;
  std::size_t steps = 0;
  std::vector<double> values;

  double at(std::size_t sample, std::size_t step) const { return values[sample * steps + step]; }
  static NoiseDraws draw(std::size_t samples, std::size_t sessions, Rng& rng);
  static NoiseDraws zeros(std::size_t samples, std::size_t sessions);
};

/// Side quantities gathered while assembling the bound.
struct ElboStats {
  double gap_log_lik = 0.0;
  double duration_log_lik = 0.0;
  double kl = 0.0;
  double min_step_kl = 0.0;
  double abs_err_gap = 0.0;
  double abs_err_duration = 0.0;
  std::size_t gap_terms = 0;
  std::size_t duration_terms = 0;
};

/// Average over the noise trajectories of
///   sum_{i>=2} log f(g_i | a_{i-1}) + sum_{i>=1} log Poisson(d_i; gamma_{i-1}) - sum_{i>=1} KL(q_i || p_i).
ad::Var sequence_elbo(ad::Tape& tape, const model::BoundParams& params, const eventlog::SessionSequence& seq,
                      const NoiseDraws& noise, ElboStats* stats = nullptr);
ad::Var sequence_elbo(ad::Tape& tape, const model::BoundParams& params, const eventlog::SessionSequence& seq,
                      std::size_t samples, Rng& rng, ElboStats* stats = nullptr);
double sequence_elbo_value(const model::ModelParams& params, const eventlog::SessionSequence& seq,
                           std::size_t samples, Rng& rng, ElboStats* stats = nullptr);

struct SequenceGradient {
  model::ModelParams grad;  // d ELBO / d params, same layout as the model
  double elbo = 0.0;
  ElboStats stats;
};

/// ELBO gradient with BPTT truncated every `truncation` steps (hidden state carried, gradient cut).
SequenceGradient sequence_gradient(const model::ModelParams& params, const eventlog::SessionSequence& seq,
                                   const NoiseDraws& noise, std::size_t truncation);

/// Central-difference check of the ELBO gradient over every trainable tensor,
/// with the noise draws held fixed. Entries of the report follow names() order
/// restricted to trainable tensors.
struct ElboGradCheck {
  ad::GradCheckReport report;
  std::vector<std::string> names;
};
ElboGradCheck elbo_grad_check(const model::ModelParams& params, const eventlog::SessionSequence& seq,
                              const NoiseDraws& noise, double h = 1e-5, double tol = 1e-4);

struct TrainResult {
  model::ModelParams params;
  TrainReport report;
};

/// Maximizes the per-event ELBO over users. Deterministic for a given config,
/// independent of the worker count.
TrainResult train(std::span<const eventlog::SessionSequence> sequences, const TrainConfig& config);
TrainResult train(std::span<const eventlog::SessionSequence> sequences, const TrainConfig& config,
                  model::ModelParams initial);

}  // namespace rtpp::train
