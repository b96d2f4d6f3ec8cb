#pragma once

// Synthetic session data with known ground truth.

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rtpp/eventlog.hpp"
#include "rtpp/model.hpp"

namespace rtpp::sim {

enum class GeneratorKind { Stationary, RegimeSwitching, FromModel };

const char* to_string(GeneratorKind k);
GeneratorKind parse_kind(const std::string& s);

struct Regime {
  double mean_gap = 1.0;       // hours
  double mean_duration = 1.0;  // events, >= 1
};

struct GeneratorSpec {
  GeneratorKind kind = GeneratorKind::Stationary;
  std::size_t users = 100;
  double horizon = 500.0;  // hours
  Regime stationary{2.0, 5.0};
  std::array<Regime, 2> regimes{Regime{1.0, 2.0}, Regime{10.0, 6.0}};
  /// switching[a][b]: probability the next session is in regime b given regime a.
  std::array<std::array<double, 2>, 2> switching{{{0.9, 0.1}, {0.1, 0.9}}};
  /// Required for FromModel.
  const model::ModelParams* model = nullptr;
  std::string model_path;  // recorded in the sidecar only
  std::size_t max_sessions = 1000;

  void validate() const;
};

struct GeneratedData {
  std::vector<eventlog::SessionSequence> sequences;  // sorted by user id
  /// Per-user regime of each session (regime-switching only).
  std::vector<std::vector<int>> regimes;
};

GeneratedData generate(const GeneratorSpec& spec, std::uint64_t seed);

/// Stationary distribution of the two-state switching chain.
std::array<double, 2> stationary_distribution(const std::array<std::array<double, 2>, 2>& p);

/// Zero-truncated Poisson draw, used by FromModel so every session has d >= 1.
std::int64_t sample_positive_poisson(double rate, Rng& rng);

/// True when z reaches neither the recurrence nor the heads, so the sequence
/// likelihood is a deterministic unroll.
bool latent_is_inert(const model::ModelParams& params);

/// Exact log-likelihood of a sequence under the FromModel generating process
/// (plain-Poisson heads truncated at zero). Requires latent_is_inert().
double generating_log_likelihood(const model::ModelParams& params, const eventlog::SessionSequence& seq);

/// Ground-truth sidecar JSON: the spec plus per-user regime paths when present.
void write_sidecar(const std::filesystem::path& path, const GeneratorSpec& spec, std::uint64_t seed,
                   const GeneratedData& data);

}  // namespace rtpp::sim
