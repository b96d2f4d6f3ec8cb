#pragma once

// Latent-variable recurrent point-process network.
//
// Each step consumes (gap_i, duration_i), infers a loyalty latent z_i in (0,1)
// and updates an LSTM state; the heads at (z_i, h_i) define the intensity of
// the next gap and the Poisson rate of the next duration.

#include <array>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "rtpp/diffgraph.hpp"
#include "rtpp/tensor.hpp"
#include "rtpp/tppmath.hpp"

namespace rtpp::model {

/// Whether the intensity slope w_t is held at zero or trained.
enum class SlopeMode { FrozenZero, Learned };
/// Full latent path, or the deterministic ablation with z fixed at 0.5 and no KL.
enum class LatentMode { Full, Ablation };

const char* to_string(SlopeMode m);
const char* to_string(LatentMode m);
SlopeMode parse_slope_mode(const std::string& s);
LatentMode parse_latent_mode(const std::string& s);

struct ModelConfig {
  std::size_t hidden = 64;
  std::size_t mlp_hidden = 32;
  SlopeMode slope = SlopeMode::FrozenZero;
  LatentMode latent = LatentMode::Full;

  bool operator==(const ModelConfig&) const = default;
};

inline constexpr double kStdFloor = 1e-4;
inline constexpr double kMaxExpArgument = 700.0;
/// Input columns of the recurrent cell ahead of the hidden state: log1p(g), log1p(d), z.
inline constexpr std::size_t kCellInputs = 3;

/// All learnable weights. Member order is the lexicographic name order used
/// by checkpoints and by parameter registration on a tape.
struct ModelParams {
  ModelConfig config;

  Tensor dur_b;      // [1,1]
  Tensor dur_w_h;    // [1,H]
  Tensor dur_w_z;    // [1,1]
  Tensor gap_b;      // [1,1]
  Tensor gap_w_h;    // [1,H]
  Tensor gap_w_t;    // [1,1]
  Tensor gap_w_z;    // [1,1]
  Tensor lstm_W;     // [4H, 3+H]; gate rows input, forget, output, candidate
  Tensor lstm_b;     // [4H,1]
  Tensor post_W1;    // [Hp, 2+H]
  Tensor post_W2;    // [2, Hp]
  Tensor post_b1;    // [Hp,1]
  Tensor post_b2;    // [2,1]; rows mean, raw std
  Tensor prior_W1;   // [Hp, H]
  Tensor prior_W2;   // [2, Hp]
  Tensor prior_b1;   // [Hp,1]
  Tensor prior_b2;   // [2,1]

  static constexpr std::size_t kCount = 17;
  static const std::array<std::string_view, kCount>& names();

  std::array<Tensor*, kCount> tensors();
  std::array<const Tensor*, kCount> tensors() const;

  /// Expected shape of each tensor under `config`.
  static std::array<std::pair<std::size_t, std::size_t>, kCount> shapes(const ModelConfig& config);
  /// All-zero parameters of the configured shapes.
  static ModelParams zeros(const ModelConfig& config);

  std::size_t parameter_count() const;
  bool operator==(const ModelParams&) const = default;
};

/// Index of gap_w_t in names()/tensors().
inline constexpr std::size_t kSlopeIndex = 5;

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, zero biases, forget bias
/// one, raw-std biases set so the std starts near 0.5.
ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

struct HiddenState {
  std::vector<double> h;
  std::vector<double> c;

  static HiddenState zeros(std::size_t hidden) { return {std::vector<double>(hidden, 0.0), std::vector<double>(hidden, 0.0)}; }
  bool operator==(const HiddenState&) const = default;
};

struct StepOutput {
  HiddenState state;
  tpp::GaussianParams prior;
  tpp::GaussianParams posterior;
  double z = 0.5;
  double base = 0.0;  // intensity base for the next gap
  double rate = 1.0;  // Poisson rate for the next duration
  bool operator==(const StepOutput&) const = default;
};

/// How z is obtained at a step: sampled from the posterior, sampled from the
/// prior, or the deterministic posterior logit-mean.
enum class StepMode { Infer, Generate, Filter };

// ---- Tape-level building blocks -------------------------------------------

/// Parameters bound to one tape. Frozen slope and unused groups become constants.
struct BoundParams {
  const ModelParams* params = nullptr;
  std::array<ad::Var, ModelParams::kCount> vars{};
  /// Which tensors were registered as tape parameters, in names() order.
  std::array<bool, ModelParams::kCount> trainable{};

  ad::Var operator[](std::size_t i) const { return vars[i]; }
};

BoundParams bind(ad::Tape& tape, const ModelParams& params);

struct TapeState {
  ad::Var h;
  ad::Var c;
};

TapeState constant_state(ad::Tape& tape, const HiddenState& s);

struct TapeStep {
  TapeState state;
  ad::Var prior_mean, prior_std;
  ad::Var post_mean, post_std;
  ad::Var z;
  ad::Var base;
  ad::Var log_rate;
  bool has_latent = false;
  bool has_heads = false;
};

ad::Var model_input(ad::Tape& tape, double gap, std::int64_t duration);

/// Prior (mean, std) given the previous hidden state.
std::pair<ad::Var, ad::Var> prior_params(const BoundParams& p, ad::Var h_prev);
/// Posterior (mean, std) given the current inputs and the previous hidden state.
std::pair<ad::Var, ad::Var> posterior_params(const BoundParams& p, ad::Var input, ad::Var h_prev);
/// (intensity base, log Poisson rate) at (z, h).
std::pair<ad::Var, ad::Var> heads(const BoundParams& p, ad::Var z, ad::Var h);
TapeState lstm(const BoundParams& p, ad::Var input, ad::Var z, TapeState prev);

/// Step 0: z_0 from the prior at the initial state, heads at (z_0, h_0).
TapeStep initial_step(const BoundParams& p, TapeState init, StepMode mode, double eps);
/// One observed session; heads can be skipped when nothing follows.
TapeStep step(const BoundParams& p, TapeState prev, double gap, std::int64_t duration, StepMode mode, double eps,
              bool with_heads = true);

// ---- Value-level evaluation ----------------------------------------------

/// Binds parameters once and evaluates steps without keeping history.
class Evaluator {
 public:
  explicit Evaluator(const ModelParams& params);
  Evaluator(const Evaluator&) = delete;
  Evaluator& operator=(const Evaluator&) = delete;

  const ModelParams& params() const { return *params_; }
  StepOutput initial(StepMode mode, double eps = 0.0);
  StepOutput step(const HiddenState& prev, double gap, std::int64_t duration, StepMode mode, double eps = 0.0);
  tpp::GaussianParams prior(const HiddenState& prev);
  /// (base, rate) at a given latent value and hidden state.
  std::pair<double, double> heads(double z, const HiddenState& state);

 private:
  StepOutput collect(const TapeStep& s, bool with_prior);
  const ModelParams* params_;
  ad::Tape tape_;
  BoundParams bound_;
  ad::Tape::Mark mark_;
};

tpp::GaussianParams prior_params(const ModelParams& params, const HiddenState& prev);
tpp::GaussianParams posterior_params(const ModelParams& params, double gap, std::int64_t duration,
                                     const HiddenState& prev);
std::pair<double, double> heads(const ModelParams& params, double z, const std::vector<double>& h);
StepOutput step(const ModelParams& params, const HiddenState& prev, double gap, std::int64_t duration, StepMode mode,
                double eps);

}  // namespace rtpp::model
