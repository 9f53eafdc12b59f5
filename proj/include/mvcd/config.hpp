#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include <json.hpp>

#include "mvcd/datagen.hpp"
#include "mvcd/trainer.hpp"

namespace mvcd {

/// One experiment record: training settings, data spec, split protocol and
/// where outputs go. Every section is optional in the file.
struct RunConfig {
  TrainConfig train;
  SyntheticSpec data;
  SplitProtocol split;
  std::string output_dir = "out";
};

nlohmann::json run_config_to_json(const RunConfig& cfg);
/// Unknown keys anywhere are rejected; the result is validated.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

/// Reads MVCD_SEED; nullopt when unset. Throws on a malformed value.
std::optional<std::uint64_t> seed_from_env();
/// Applies MVCD_SEED to both the data and the training seed.
void apply_env_seed(RunConfig& cfg);

}  // namespace mvcd
