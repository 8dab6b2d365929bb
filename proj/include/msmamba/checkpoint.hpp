#pragma once

#include <string>

#include "msmamba/data.hpp"
#include "msmamba/model.hpp"

namespace msmamba {

inline constexpr const char* kCheckpointMagic = "MSMAMBA-CKPT-v1";

/// Single self-describing text file: magic line, config key/values, the
/// normalization statistics the model was trained under, then every named
/// parameter tensor in hexadecimal floats (exact round trip, byte-stable).
void save_checkpoint(const std::string& path, ForecastModel& model,
                     const NormalizationStats& stats);

ForecastModel load_checkpoint(const std::string& path, NormalizationStats* stats_out = nullptr);

}  // namespace msmamba
