#pragma once

#include <filesystem>
#include <string>

#include "extradiff/denoiser.hpp"

namespace extradiff {

/// Checkpoint layout:
///   line 1   JSON header: {"format":"extradiff-denoiser","version":1,
///            "config":{...},"param_count":N,"payload":"float64-le",
///            "order":"column-major","sha256":<hex of payload>,
///            "tensors":[{"name","offset","rows","cols"},...]}
///   then     exactly 8*N bytes, little-endian IEEE-754 doubles in tensor order.
void save_checkpoint(const DenoiserParams& params, const std::filesystem::path& path);

/// Verifies the header, payload length and hash; throws InputError on mismatch.
DenoiserParams load_checkpoint(const std::filesystem::path& path);

std::string denoiser_config_json(const DenoiserConfig& config);

}  // namespace extradiff
