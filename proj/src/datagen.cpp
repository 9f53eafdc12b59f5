#include "mvcd/datagen.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace mvcd {

using nlohmann::json;

namespace {

constexpr int kPlacementRetries = 200;

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw std::invalid_argument(where + ": expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&key](const char* a) { return key == a; })) {
      throw std::invalid_argument(where + ": unknown key '" + key + "'");
    }
  }
}

std::uint64_t image_seed(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(index >> 32)};
  std::array<std::uint32_t, 2> out{};
  seq.generate(out.begin(), out.end());
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

bool boxes_touch(const Box& a, const Box& b) {
  // One pixel of clearance between objects.
  return !(a.x2 + 1.0 <= b.x1 || b.x2 + 1.0 <= a.x1 || a.y2 + 1.0 <= b.y1 || b.y2 + 1.0 <= a.y1);
}

std::vector<Annotation> filter(const std::vector<Annotation>& anns, const std::vector<int>& classes) {
  std::vector<Annotation> out;
  for (const Annotation& a : anns) {
    if (std::find(classes.begin(), classes.end(), a.class_id) != classes.end()) out.push_back(a);
  }
  return out;
}

bool any_of_classes(const std::vector<Annotation>& anns, const std::vector<int>& classes) {
  return !filter(anns, classes).empty();
}

bool all_of_classes(const std::vector<Annotation>& anns, const std::vector<int>& classes) {
  return !anns.empty() && filter(anns, classes).size() == anns.size();
}

}  // namespace

std::string to_string(ShapeKind kind) {
  switch (kind) {
    case ShapeKind::kCircle: return "circle";
    case ShapeKind::kSquare: return "square";
    case ShapeKind::kTriangle: return "triangle";
    case ShapeKind::kCross: return "cross";
    case ShapeKind::kRing: return "ring";
    case ShapeKind::kDiamond: return "diamond";
  }
  return "circle";
}

ShapeKind shape_kind_from_string(const std::string& name) {
  for (ShapeKind k : {ShapeKind::kCircle, ShapeKind::kSquare, ShapeKind::kTriangle, ShapeKind::kCross,
                      ShapeKind::kRing, ShapeKind::kDiamond}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown shape '" + name + "'");
}

std::vector<ShapeClass> default_shape_classes() {
  return {{"red_circle", ShapeKind::kCircle, {0.92, 0.15, 0.12}},
          {"green_square", ShapeKind::kSquare, {0.15, 0.85, 0.20}},
          {"blue_triangle", ShapeKind::kTriangle, {0.20, 0.30, 0.95}},
          {"yellow_cross", ShapeKind::kCross, {0.95, 0.90, 0.10}},
          {"magenta_ring", ShapeKind::kRing, {0.90, 0.20, 0.90}},
          {"cyan_diamond", ShapeKind::kDiamond, {0.10, 0.90, 0.90}}};
}

void SyntheticSpec::validate() const {
  if (classes.empty()) throw std::invalid_argument("synthetic spec: class list is empty");
  std::set<std::string> names;
  for (const ShapeClass& c : classes) {
    if (!names.insert(c.name).second) throw std::invalid_argument("synthetic spec: duplicate class " + c.name);
    for (double v : c.color) {
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("synthetic spec: colour outside [0, 1]");
    }
  }
  if (num_images == 0) throw std::invalid_argument("synthetic spec: num_images must be positive");
  if (image_size < 16) throw std::invalid_argument("synthetic spec: image_size too small");
  if (min_objects < 1 || max_objects < min_objects) throw std::invalid_argument("synthetic spec: bad object range");
  if (min_half_extent < 2 || max_half_extent < min_half_extent || 2 * max_half_extent >= image_size) {
    throw std::invalid_argument("synthetic spec: bad object size range");
  }
  if (!(noise_level >= 0.0)) throw std::invalid_argument("synthetic spec: noise_level must be >= 0");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw std::invalid_argument("synthetic spec: test_fraction must be in [0, 1)");
  }
}

std::vector<std::uint8_t> shape_mask(ShapeKind kind, int cx, int cy, int half, std::size_t size) {
  std::vector<std::uint8_t> mask(size * size, 0);
  const double r = half;
  const double bar = std::max(1.5, r / 3.0);
  const double ring = std::max(2.0, r / 3.0);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = static_cast<double>(x) + 0.5 - cx;
      const double dy = static_cast<double>(y) + 0.5 - cy;
      if (std::abs(dx) > r || std::abs(dy) > r) continue;
      bool in = false;
      switch (kind) {
        case ShapeKind::kCircle: in = dx * dx + dy * dy <= r * r; break;
        case ShapeKind::kSquare: in = true; break;
        case ShapeKind::kTriangle: in = std::abs(dx) <= (dy + r) * 0.5; break;
        case ShapeKind::kCross: in = std::abs(dx) <= bar || std::abs(dy) <= bar; break;
        case ShapeKind::kRing: {
          const double d = std::sqrt(dx * dx + dy * dy);
          in = d <= r && d >= r - ring;
          break;
        }
        case ShapeKind::kDiamond: in = std::abs(dx) + std::abs(dy) <= r; break;
      }
      mask[y * size + x] = in ? 1 : 0;
    }
  }
  return mask;
}

Dataset generate(const SyntheticSpec& spec) {
  spec.validate();
  Dataset ds;
  ds.spec = spec;
  for (const ShapeClass& c : spec.classes) ds.class_names.push_back(c.name);

  const std::size_t s = spec.image_size;
  const std::size_t num_classes = spec.classes.size();
  const std::size_t first_test = spec.num_images - static_cast<std::size_t>(
                                                       std::floor(spec.test_fraction * static_cast<double>(spec.num_images)));
  ds.images.reserve(spec.num_images);
  for (std::size_t i = 0; i < spec.num_images; ++i) {
    std::mt19937_64 rng(image_seed(spec.seed, i));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Image img;
    img.id = static_cast<int>(i);
    img.test = i >= first_test;
    img.pixels = Tensor({3, s, s}, 0.3 * unit(rng));

    const std::size_t count =
        std::uniform_int_distribution<std::size_t>(spec.min_objects, spec.max_objects)(rng);
    for (std::size_t k = 0; k < count; ++k) {
      // Object 0 cycles through the classes so each one is well represented.
      const std::size_t cls =
          k == 0 ? i % num_classes : std::uniform_int_distribution<std::size_t>(0, num_classes - 1)(rng);
      bool placed = false;
      for (int attempt = 0; attempt < kPlacementRetries && !placed; ++attempt) {
        const int half = static_cast<int>(
            std::uniform_int_distribution<std::size_t>(spec.min_half_extent, spec.max_half_extent)(rng));
        const int cx = std::uniform_int_distribution<int>(half, static_cast<int>(s) - half)(rng);
        const int cy = std::uniform_int_distribution<int>(half, static_cast<int>(s) - half)(rng);
        const Box box{static_cast<double>(cx - half), static_cast<double>(cy - half), static_cast<double>(cx + half),
                      static_cast<double>(cy + half)};
        if (std::any_of(img.annotations.begin(), img.annotations.end(),
                        [&box](const Annotation& a) { return boxes_touch(a.box, box); })) {
          continue;
        }
        const ShapeClass& sc = spec.classes[cls];
        const auto mask = shape_mask(sc.shape, cx, cy, half, s);
        for (std::size_t p = 0; p < s * s; ++p) {
          if (!mask[p]) continue;
          for (std::size_t ch = 0; ch < 3; ++ch) img.pixels[ch * s * s + p] = sc.color[ch];
        }
        img.annotations.push_back({box, static_cast<int>(cls)});
        placed = true;
      }
      if (!placed) {
        throw GenerationError("generate: could not place object " + std::to_string(k) + " in image " +
                              std::to_string(i));
      }
    }
    if (spec.noise_level > 0.0) {
      std::normal_distribution<double> noise(0.0, spec.noise_level);
      for (double& v : img.pixels.data()) v = std::clamp(v + noise(rng), 0.0, 1.0);
    }
    ds.images.push_back(std::move(img));
  }

  // Every class must appear in at least 5% of the images.
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::size_t with = 0;
    for (const Image& img : ds.images) {
      with += std::any_of(img.annotations.begin(), img.annotations.end(),
                          [c](const Annotation& a) { return a.class_id == static_cast<int>(c); });
    }
    if (20 * with < spec.num_images) {
      throw GenerationError("generate: class " + ds.class_names[c] + " appears in fewer than 5% of images");
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------

std::string to_string(SplitMode mode) {
  switch (mode) {
    case SplitMode::kAtOnce: return "at_once";
    case SplitMode::kSequential: return "sequential";
    case SplitMode::kGroups: return "groups";
  }
  return "at_once";
}

SplitMode split_mode_from_string(const std::string& name) {
  for (SplitMode m : {SplitMode::kAtOnce, SplitMode::kSequential, SplitMode::kGroups}) {
    if (to_string(m) == name) return m;
  }
  throw std::invalid_argument("unknown split mode '" + name + "'");
}

void SplitProtocol::validate(std::size_t num_classes) const {
  if (old_classes.empty()) throw std::invalid_argument("split protocol: no old classes");
  if (increments.empty()) throw std::invalid_argument("split protocol: no increments");
  if (mode == SplitMode::kAtOnce && increments.size() != 1) {
    throw std::invalid_argument("split protocol: at_once takes exactly one increment");
  }
  std::set<int> seen;
  auto claim = [&](int c) {
    if (c < 0 || static_cast<std::size_t>(c) >= num_classes) {
      throw std::invalid_argument("split protocol: class " + std::to_string(c) + " out of range");
    }
    if (!seen.insert(c).second) {
      throw std::invalid_argument("split protocol: class " + std::to_string(c) + " used twice");
    }
  };
  for (int c : old_classes) claim(c);
  for (const auto& inc : increments) {
    if (inc.empty()) throw std::invalid_argument("split protocol: empty increment");
    for (int c : inc) claim(c);
  }
}

std::vector<int> SplitProtocol::seen_classes(std::size_t step) const {
  std::vector<int> out = old_classes;
  for (std::size_t s = 0; s <= step && s < increments.size(); ++s) {
    out.insert(out.end(), increments[s].begin(), increments[s].end());
  }
  return out;
}

DataView full_view(const Dataset& dataset, const std::vector<int>& classes, bool test) {
  DataView view{classes, {}};
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    const Image& img = dataset.images[i];
    if (img.test != test || !any_of_classes(img.annotations, classes)) continue;
    view.samples.push_back({i, filter(img.annotations, classes)});
  }
  return view;
}

namespace {

DataView train_view(const Dataset& dataset, SplitMode mode, const std::vector<int>& classes) {
  DataView view{classes, {}};
  for (std::size_t i = 0; i < dataset.images.size(); ++i) {
    const Image& img = dataset.images[i];
    if (img.test) continue;
    const bool take = mode == SplitMode::kGroups ? all_of_classes(img.annotations, classes)
                                                 : any_of_classes(img.annotations, classes);
    if (take) view.samples.push_back({i, filter(img.annotations, classes)});
  }
  return view;
}

}  // namespace

SplitViews apply_split(const Dataset& dataset, const SplitProtocol& protocol, std::size_t step) {
  protocol.validate(dataset.class_names.size());
  if (step >= protocol.increments.size()) {
    throw std::invalid_argument("apply_split: step " + std::to_string(step) + " out of range");
  }
  return {train_view(dataset, protocol.mode, protocol.increments[step]),
          full_view(dataset, protocol.seen_classes(step), true)};
}

SplitViews base_split(const Dataset& dataset, const SplitProtocol& protocol) {
  protocol.validate(dataset.class_names.size());
  return {train_view(dataset, protocol.mode, protocol.old_classes), full_view(dataset, protocol.old_classes, true)};
}

// ---------------------------------------------------------------------------

json spec_to_json(const SyntheticSpec& spec) {
  json classes = json::array();
  for (const ShapeClass& c : spec.classes) {
    classes.push_back({{"name", c.name}, {"shape", to_string(c.shape)}, {"color", c.color}});
  }
  return {{"seed", spec.seed},
          {"num_images", spec.num_images},
          {"image_size", spec.image_size},
          {"classes", classes},
          {"objects_per_image", {spec.min_objects, spec.max_objects}},
          {"half_extent", {spec.min_half_extent, spec.max_half_extent}},
          {"noise_level", spec.noise_level},
          {"test_fraction", spec.test_fraction}};
}

SyntheticSpec spec_from_json(const json& j) {
  check_keys(j,
             {"seed", "num_images", "image_size", "classes", "objects_per_image", "half_extent", "noise_level",
              "test_fraction"},
             "data");
  SyntheticSpec s;
  if (j.contains("seed")) s.seed = j.at("seed").get<std::uint64_t>();
  if (j.contains("num_images")) s.num_images = j.at("num_images").get<std::size_t>();
  if (j.contains("image_size")) s.image_size = j.at("image_size").get<std::size_t>();
  if (j.contains("classes")) {
    s.classes.clear();
    for (const json& c : j.at("classes")) {
      check_keys(c, {"name", "shape", "color"}, "data.classes[]");
      s.classes.push_back({c.at("name").get<std::string>(), shape_kind_from_string(c.at("shape").get<std::string>()),
                           c.at("color").get<std::array<double, 3>>()});
    }
  }
  if (j.contains("objects_per_image")) {
    const auto r = j.at("objects_per_image").get<std::array<std::size_t, 2>>();
    s.min_objects = r[0];
    s.max_objects = r[1];
  }
  if (j.contains("half_extent")) {
    const auto r = j.at("half_extent").get<std::array<std::size_t, 2>>();
    s.min_half_extent = r[0];
    s.max_half_extent = r[1];
  }
  if (j.contains("noise_level")) s.noise_level = j.at("noise_level").get<double>();
  if (j.contains("test_fraction")) s.test_fraction = j.at("test_fraction").get<double>();
  s.validate();
  return s;
}

json protocol_to_json(const SplitProtocol& p) {
  return {{"mode", to_string(p.mode)}, {"old_classes", p.old_classes}, {"increments", p.increments}};
}

SplitProtocol protocol_from_json(const json& j) {
  check_keys(j, {"mode", "old_classes", "increments"}, "split");
  SplitProtocol p;
  if (j.contains("mode")) p.mode = split_mode_from_string(j.at("mode").get<std::string>());
  if (j.contains("old_classes")) p.old_classes = j.at("old_classes").get<std::vector<int>>();
  if (j.contains("increments")) p.increments = j.at("increments").get<std::vector<std::vector<int>>>();
  return p;
}

json annotations_to_json(const Dataset& dataset) {
  json out = json::array();
  for (const Image& img : dataset.images) {
    for (const Annotation& a : img.annotations) {
      out.push_back({{"image_id", img.id}, {"class", a.class_id}, {"box", {a.box.x1, a.box.y1, a.box.x2, a.box.y2}}});
    }
  }
  return out;
}

namespace {

void write_le_doubles(std::ofstream& out, std::span<const double> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()), static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (double v : values) {
      auto bits = std::bit_cast<std::uint64_t>(v);
      char bytes[8];
      for (int b = 0; b < 8; ++b) bytes[b] = static_cast<char>((bits >> (8 * b)) & 0xff);
      out.write(bytes, 8);
    }
  }
}

void read_le_doubles(std::ifstream& in, std::span<double> values) {
  std::vector<unsigned char> raw(values.size() * 8);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw std::invalid_argument("dataset: image blob truncated");
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(raw[i * 8 + b]) << (8 * b);
    values[i] = std::bit_cast<double>(bits);
  }
}

json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot read " + path.string());
  return json::parse(in);
}

}  // namespace

void save_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::ofstream blob(dir / "images.bin", std::ios::binary);
  if (!blob) throw std::runtime_error("cannot write " + (dir / "images.bin").string());
  json images = json::array();
  std::uint64_t offset = 0;
  for (const Image& img : dataset.images) {
    images.push_back({{"id", img.id}, {"split", img.test ? "test" : "train"}, {"tensor_file_offset", offset}});
    write_le_doubles(blob, img.pixels.data());
    offset += img.pixels.size() * sizeof(double);
  }
  const std::size_t s = dataset.spec.image_size;
  const json manifest = {{"spec", spec_to_json(dataset.spec)},
                         {"class_names", dataset.class_names},
                         {"tensor_shape", {3, s, s}},
                         {"images_file", "images.bin"},
                         {"annotations_file", "annotations.json"},
                         {"images", images}};
  std::ofstream(dir / "manifest.json") << manifest.dump(1) << "\n";
  std::ofstream(dir / "annotations.json") << annotations_to_json(dataset).dump(1) << "\n";
}

Dataset load_dataset(const std::filesystem::path& dir) {
  const json manifest = read_json_file(dir / "manifest.json");
  Dataset ds;
  ds.spec = spec_from_json(manifest.at("spec"));
  ds.class_names = manifest.at("class_names").get<std::vector<std::string>>();
  const Shape shape = manifest.at("tensor_shape").get<Shape>();
  std::ifstream blob(dir / manifest.at("images_file").get<std::string>(), std::ios::binary);
  if (!blob) throw std::invalid_argument("cannot read image blob in " + dir.string());
  for (const json& entry : manifest.at("images")) {
    Image img;
    img.id = entry.at("id").get<int>();
    img.test = entry.at("split").get<std::string>() == "test";
    img.pixels = Tensor(shape);
    blob.seekg(static_cast<std::streamoff>(entry.at("tensor_file_offset").get<std::uint64_t>()));
    read_le_doubles(blob, img.pixels.data());
    ds.images.push_back(std::move(img));
  }
  const json anns = read_json_file(dir / manifest.at("annotations_file").get<std::string>());
  for (const json& a : anns) {
    const int id = a.at("image_id").get<int>();
    auto it = std::find_if(ds.images.begin(), ds.images.end(), [id](const Image& img) { return img.id == id; });
    if (it == ds.images.end()) throw std::invalid_argument("dataset: annotation for unknown image");
    const auto b = a.at("box").get<std::array<double, 4>>();
    it->annotations.push_back({{b[0], b[1], b[2], b[3]}, a.at("class").get<int>()});
  }
  return ds;
}

}  // namespace mvcd
