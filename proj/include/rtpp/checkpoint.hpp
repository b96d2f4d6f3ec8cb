#pragma once

#include <filesystem>
#include <optional>

#include "rtpp/errors.hpp"
#include "rtpp/eventlog.hpp"
#include "rtpp/model.hpp"

namespace rtpp::train {

inline constexpr int kCheckpointFormatVersion = 1;

class CheckpointCorruptError : public DataError {
 public:
  using DataError::DataError;
};
class CheckpointVersionError : public DataError {
 public:
  using DataError::DataError;
};
class CheckpointShapeError : public DataError {
 public:
  using DataError::DataError;
};

/// Data-preparation settings stored next to the weights.
struct DataConfig {
  eventlog::GapMode gap_mode = eventlog::GapMode::StartToStart;
  double session_threshold_hours = 1.0;
  bool operator==(const DataConfig&) const = default;
};

struct Checkpoint {
  model::ModelParams params;
  DataConfig data;
};

std::string checkpoint_json(const model::ModelParams& params, const DataConfig& data);
Checkpoint parse_checkpoint(const std::string& text, const std::optional<model::ModelConfig>& expected = std::nullopt);

void save_checkpoint(const model::ModelParams& params, const DataConfig& data, const std::filesystem::path& path);
/// When `expected` is given, a checkpoint of a different configuration is a shape error.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           const std::optional<model::ModelConfig>& expected = std::nullopt);

}  // namespace rtpp::train
