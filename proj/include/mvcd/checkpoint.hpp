#pragma once

#include <filesystem>
#include <string>

#include "mvcd/detector.hpp"

namespace mvcd {

inline constexpr int kCheckpointSchemaVersion = 1;

/// JSON object: {schema_version, num_classes, class_ids, class_names, seed,
/// params: {name: {shape, values}}}. Doubles are written in shortest
/// round-trip form, so a save/load cycle is bit-exact.
std::string checkpoint_to_json(const DetectorParams& params);
DetectorParams checkpoint_from_json(const std::string& text);

void save_checkpoint(const DetectorParams& params, const std::filesystem::path& path);
DetectorParams load_checkpoint(const std::filesystem::path& path);

}  // namespace mvcd
