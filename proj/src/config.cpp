#include "mvcd/config.hpp"

#include <cstdlib>
#include <fstream>
#include <stdexcept>

namespace mvcd {

using nlohmann::json;

json run_config_to_json(const RunConfig& cfg) {
  return {{"train", train_config_to_json(cfg.train)},
          {"data", spec_to_json(cfg.data)},
          {"split", protocol_to_json(cfg.split)},
          {"output_dir", cfg.output_dir}};
}

RunConfig run_config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (key != "train" && key != "data" && key != "split" && key != "output_dir")
      throw std::invalid_argument("unknown config key '" + key + "'");
  }
  RunConfig cfg;
  if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"));
  if (j.contains("data")) cfg.data = spec_from_json(j.at("data"));
  if (j.contains("split")) cfg.split = protocol_from_json(j.at("split"));
  if (j.contains("output_dir")) cfg.output_dir = j.at("output_dir").get<std::string>();
  cfg.train.validate();
  cfg.data.validate();
  cfg.split.validate(cfg.data.classes.size());
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return run_config_from_json(j);
}

std::optional<std::uint64_t> seed_from_env() {
  const char* raw = std::getenv("MVCD_SEED");
  if (raw == nullptr || *raw == '\0') return std::nullopt;
  const std::string text(raw);
  if (text.find_first_not_of("0123456789") != std::string::npos)
    throw std::invalid_argument("MVCD_SEED must be a non-negative integer, got '" + text + "'");
  try {
    return std::stoull(text);
  } catch (const std::out_of_range&) {
    throw std::invalid_argument("MVCD_SEED out of range: " + text);
  }
}

void apply_env_seed(RunConfig& cfg) {
  if (auto seed = seed_from_env()) {
    cfg.train.seed = *seed;
    cfg.data.seed = *seed;
  }
}

}  // namespace mvcd
