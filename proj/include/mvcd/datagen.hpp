#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "mvcd/detector.hpp"
#include "mvcd/tensor.hpp"

namespace mvcd {

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ShapeKind { kCircle, kSquare, kTriangle, kCross, kRing, kDiamond };

std::string to_string(ShapeKind kind);
ShapeKind shape_kind_from_string(const std::string& name);

struct ShapeClass {
  std::string name;
  ShapeKind shape = ShapeKind::kCircle;
  std::array<double, 3> color{1.0, 1.0, 1.0};
};

/// Six high-contrast shape/colour classes.
std::vector<ShapeClass> default_shape_classes();

struct SyntheticSpec {
  std::uint64_t seed = 7;
  std::size_t num_images = 400;
  std::size_t image_size = kImageSize;
  std::vector<ShapeClass> classes = default_shape_classes();
  std::size_t min_objects = 1;
  std::size_t max_objects = 3;
  // Half extent of a shape in pixels; boxes are 2 * half wide.
  std::size_t min_half_extent = 6;
  std::size_t max_half_extent = 10;
  double noise_level = 0.05;
  // Trailing fraction of the images reserved for evaluation.
  double test_fraction = 0.25;

  void validate() const;
};

struct Image {
  int id = 0;
  bool test = false;
  Tensor pixels;  // 3 x S x S in [0, 1]
  std::vector<Annotation> annotations;
};

struct Dataset {
  SyntheticSpec spec;
  std::vector<std::string> class_names;
  std::vector<Image> images;
};

/// Deterministic given `spec`; image i draws from a generator seeded by (seed, i).
Dataset generate(const SyntheticSpec& spec);

/// Pixels a shape of the given kind covers (pixel centres inside the outline)
/// when centred at (cx, cy) with the given half extent. Returned as row-major
/// S x S mask values 0/1.
std::vector<std::uint8_t> shape_mask(ShapeKind kind, int cx, int cy, int half, std::size_t size);

enum class SplitMode { kAtOnce, kSequential, kGroups };

std::string to_string(SplitMode mode);
SplitMode split_mode_from_string(const std::string& name);

struct SplitProtocol {
  SplitMode mode = SplitMode::kAtOnce;
  std::vector<int> old_classes{0, 1, 2};
  std::vector<std::vector<int>> increments{{3, 4, 5}};

  void validate(std::size_t num_classes) const;
  /// Classes known after the given step (old classes plus increments[0..step]).
  std::vector<int> seen_classes(std::size_t step) const;
};

/// One image with the annotations visible to this view.
struct Sample {
  std::size_t index = 0;  // into Dataset::images
  std::vector<Annotation> annotations;
};

struct DataView {
  std::vector<int> classes;
  std::vector<Sample> samples;
};

struct SplitViews {
  DataView train;
  DataView test;
};

/// Views for incremental step `step`: training images expose only the step's
/// new-class labels; test images expose every class seen so far.
SplitViews apply_split(const Dataset& dataset, const SplitProtocol& protocol, std::size_t step);

/// Views for training the initial model on the old classes.
SplitViews base_split(const Dataset& dataset, const SplitProtocol& protocol);

/// Every image of one partition with all annotations of the listed classes.
DataView full_view(const Dataset& dataset, const std::vector<int>& classes, bool test);

nlohmann::json spec_to_json(const SyntheticSpec& spec);
/// Rejects unknown keys; missing keys keep their defaults.
SyntheticSpec spec_from_json(const nlohmann::json& j);

nlohmann::json protocol_to_json(const SplitProtocol& protocol);
SplitProtocol protocol_from_json(const nlohmann::json& j);

/// Annotation array entries: {image_id, class, box: [x1, y1, x2, y2]}.
nlohmann::json annotations_to_json(const Dataset& dataset);

/// Writes manifest.json, images.bin (little-endian doubles, C x H x W per
/// image) and annotations.json into `dir`.
void save_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace mvcd
