#include "mvcd/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace mvcd {

using nlohmann::json;

std::string checkpoint_to_json(const DetectorParams& params) {
  json tensors = json::object();
  for (const auto& [name, t] : params.tensors()) {
    tensors[name] = {{"shape", t->shape()}, {"values", t->values()}};
  }
  json doc = {{"schema_version", kCheckpointSchemaVersion},
              {"num_classes", params.num_classes()},
              {"class_ids", params.class_ids},
              {"class_names", params.class_names},
              {"seed", params.seed},
              {"params", std::move(tensors)}};
  return doc.dump(1) + "\n";
}

DetectorParams checkpoint_from_json(const std::string& text) {
  const json doc = json::parse(text);
  if (doc.at("schema_version").get<int>() != kCheckpointSchemaVersion) {
    throw std::invalid_argument("checkpoint: unsupported schema_version");
  }
  DetectorParams p = zero_detector(doc.at("class_ids").get<std::vector<int>>(),
                                   doc.at("class_names").get<std::vector<std::string>>());
  if (doc.at("num_classes").get<std::size_t>() != p.num_classes()) {
    throw std::invalid_argument("checkpoint: num_classes disagrees with class_ids");
  }
  p.seed = doc.at("seed").get<std::uint64_t>();
  const json& tensors = doc.at("params");
  for (auto& [name, t] : p.tensors()) {
    const json& entry = tensors.at(name);
    Tensor loaded(entry.at("shape").get<Shape>(), entry.at("values").get<std::vector<double>>());
    if (loaded.shape() != t->shape()) {
      throw std::invalid_argument("checkpoint: tensor " + name + " has shape " + shape_string(loaded.shape()) +
                                  ", expected " + shape_string(t->shape()));
    }
    *t = std::move(loaded);
  }
  if (tensors.size() != p.tensors().size()) throw std::invalid_argument("checkpoint: unexpected extra tensors");
  return p;
}

void save_checkpoint(const DetectorParams& params, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << checkpoint_to_json(params);
}

DetectorParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot read checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_json(ss.str());
}

}  // namespace mvcd
