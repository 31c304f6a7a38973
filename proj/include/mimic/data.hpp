#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "mimic/image.hpp"
#include "mimic/rng.hpp"
#include "mimic/tensor.hpp"

namespace mimic {

/// Ground truth for one image: pixel-space corner box plus class label.
struct Annotation {
  std::string image_id;
  int label = 0;
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;  // pixels
  int width = 0, height = 0;

  void validate(int class_count) const {
    if (width <= 0 || height <= 0)
      throw std::invalid_argument("annotation '" + image_id + "': nonpositive image size");
    if (!(x_min >= 0 && x_min < x_max && x_max <= width) ||
        !(y_min >= 0 && y_min < y_max && y_max <= height))
      throw std::invalid_argument("annotation '" + image_id + "': box outside image or empty");
    if (label < 0 || label >= class_count)
      throw std::invalid_argument("annotation '" + image_id + "': label " +
                                  std::to_string(label) + " outside [0," +
                                  std::to_string(class_count) + ")");
  }
};

struct NormalizedBox {
  double x_min = 0, y_min = 0, x_max = 0, y_max = 0;  // all in [0,1]

  std::array<double, 4> as_array() const { return {x_min, y_min, x_max, y_max}; }

  void validate() const {
    if (!(x_min >= 0 && x_min < x_max && x_max <= 1) ||
        !(y_min >= 0 && y_min < y_max && y_max <= 1))
      throw std::invalid_argument("normalized box violates 0 <= min < max <= 1");
  }
};

/// Coordinates divided by their image dimension.
inline NormalizedBox normalize_annotation(const Annotation& a) {
  if (a.width == 0 || a.height == 0)
    throw std::invalid_argument("normalize_annotation: degenerate annotation '" + a.image_id +
                                "' with zero dimension");
  return {a.x_min / a.width, a.y_min / a.height, a.x_max / a.width, a.y_max / a.height};
}

inline std::array<double, 4> denormalize_box(const NormalizedBox& b, int width, int height) {
  return {b.x_min * width, b.y_min * height, b.x_max * width, b.y_max * height};
}

/// value / (2^depth - 1) for integer pixel values.
inline double scale_pixels(int value, int depth) {
  if (depth != 8 && depth != 16)
    throw std::invalid_argument("scale_pixels: unsupported bit depth " + std::to_string(depth));
  const int top = (1 << depth) - 1;
  if (value < 0 || value > top)
    throw std::invalid_argument("scale_pixels: value " + std::to_string(value) +
                                " outside [0," + std::to_string(top) + "]");
  return static_cast<double>(value) / top;
}

struct DatasetSpec {
  int class_count = 3;
  int image_side = 64;
  std::vector<std::string> shapes = {"circle", "square", "triangle", "cross", "ring"};
  double size_min = 0.3;  // object extent as a fraction of the image side
  double size_max = 0.6;
  std::string background = "solid";  // solid | noise
  int sample_count = 600;
  std::uint64_t seed = 0;

  void validate() const {
    if (class_count < 2) throw std::invalid_argument("DatasetSpec: class_count must be >= 2");
    if (sample_count <= 0) throw std::invalid_argument("DatasetSpec: sample_count must be > 0");
    if (image_side < 16) throw std::invalid_argument("DatasetSpec: image_side must be >= 16");
    if (!(size_min > 0 && size_min < size_max && size_max < 1))
      throw std::invalid_argument("DatasetSpec: need 0 < size_min < size_max < 1");
    if (static_cast<int>(shapes.size()) < class_count)
      throw std::invalid_argument("DatasetSpec: " + std::to_string(class_count) +
                                  " classes need as many shapes, have " +
                                  std::to_string(shapes.size()));
    if (background != "solid" && background != "noise")
      throw std::invalid_argument("DatasetSpec: background must be solid or noise");
    for (const auto& s : shapes)
      if (s != "circle" && s != "square" && s != "triangle" && s != "cross" && s != "ring")
        throw std::invalid_argument("DatasetSpec: unknown shape '" + s + "'");
  }
};

inline void to_json(nlohmann::json& j, const DatasetSpec& s) {
  j = {{"class_count", s.class_count}, {"image_side", s.image_side},
       {"shapes", s.shapes},           {"size_min", s.size_min},
       {"size_max", s.size_max},       {"background", s.background},
       {"sample_count", s.sample_count}, {"seed", s.seed}};
}
inline void from_json(const nlohmann::json& j, DatasetSpec& s) {
  DatasetSpec d;
  s.class_count = j.value("class_count", d.class_count);
  s.image_side = j.value("image_side", d.image_side);
  s.shapes = j.value("shapes", d.shapes);
  s.size_min = j.value("size_min", d.size_min);
  s.size_max = j.value("size_max", d.size_max);
  s.background = j.value("background", d.background);
  s.sample_count = j.value("sample_count", d.sample_count);
  s.seed = j.value("seed", d.seed);
}

namespace detail {

/// Membership test at a pixel center for the supported shape family; (cx, cy)
/// is the object center and s its nominal extent.
inline bool shape_hit(const std::string& shape, double px, double py, double cx, double cy,
                      double s) {
  const double dx = px - cx, dy = py - cy, h = s / 2;
  if (shape == "circle") return dx * dx + dy * dy <= h * h;
  if (shape == "square") return std::abs(dx) <= h && std::abs(dy) <= h;
  if (shape == "ring") {
    const double r2 = dx * dx + dy * dy, inner = h / 2;
    return r2 <= h * h && r2 >= inner * inner;
  }
  if (shape == "cross") {
    const double arm = s / 6;
    return (std::abs(dx) <= arm && std::abs(dy) <= h) ||
           (std::abs(dy) <= arm && std::abs(dx) <= h);
  }
  // triangle: isosceles, apex up, inscribed in the s-by-s box
  const double ax = cx, ay = cy - h;
  const double bx = cx - h, by = cy + h;
  const double ex = cx + h, ey = cy + h;
  auto side = [&](double x1, double y1, double x2, double y2) {
    return (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1);
  };
  const double d1 = side(ax, ay, bx, by), d2 = side(bx, by, ex, ey), d3 = side(ex, ey, ax, ay);
  const bool has_neg = d1 < 0 || d2 < 0 || d3 < 0;
  const bool has_pos = d1 > 0 || d2 > 0 || d3 > 0;
  return !(has_neg && has_pos);
}

}  // namespace detail

/// Render spec.sample_count single-object images under out_dir: PNG files in
/// images/, one JSON annotation line per image, plus dataset.json metadata.
/// Labels cycle round-robin so classes are exactly balanced; class c always
/// draws spec.shapes[c]. Pure function of the spec, seed included.
inline int generate_shapes_dataset(const DatasetSpec& spec, const std::string& out_dir) {
  spec.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(fs::path(out_dir) / "images", ec);
  if (ec)
    throw std::runtime_error("cannot create dataset directory '" + out_dir + "': " +
                             ec.message());
  std::ofstream ann(fs::path(out_dir) / "annotations.jsonl");
  if (!ann) throw std::runtime_error("cannot write annotations in '" + out_dir + "'");

  Rng rng(spec.seed);
  const int side = spec.image_side;
  std::vector<std::uint8_t> mask(static_cast<std::size_t>(side) * side);
  for (int i = 0; i < spec.sample_count; ++i) {
    const int label = i % spec.class_count;
    const std::string& shape = spec.shapes[label];

    // Redraw size and position until the rasterized tight box respects the
    // extent bounds; the +2 px slack absorbs rasterization of curved edges.
    int bx0 = 0, by0 = 0, bx1 = 0, by1 = 0;
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      const double s = rng.uniform(spec.size_min * side + 1.5, spec.size_max * side + 0.5);
      const double margin = s / 2 + 2;
      const double cx = rng.uniform(margin, side - margin);
      const double cy = rng.uniform(margin, side - margin);
      bx0 = side;
      by0 = side;
      bx1 = -1;
      by1 = -1;
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x) {
          const bool hit = detail::shape_hit(shape, x + 0.5, y + 0.5, cx, cy, s);
          mask[static_cast<std::size_t>(y) * side + x] = hit;
          if (hit) {
            bx0 = std::min(bx0, x);
            by0 = std::min(by0, y);
            bx1 = std::max(bx1, x);
            by1 = std::max(by1, y);
          }
        }
      if (bx1 < 0) continue;
      const int ext = std::max(bx1 + 1 - bx0, by1 + 1 - by0);
      ok = ext >= spec.size_min * side && ext <= spec.size_max * side + 2;
    }
    if (!ok)
      throw std::logic_error("generate_shapes_dataset: no admissible placement for sample " +
                             std::to_string(i));

    Color obj{static_cast<std::uint8_t>(std::lround(rng.uniform(0.65, 1.0) * 255)),
              static_cast<std::uint8_t>(std::lround(rng.uniform(0.65, 1.0) * 255)),
              static_cast<std::uint8_t>(std::lround(rng.uniform(0.65, 1.0) * 255))};
    Image img(side, side);
    if (spec.background == "solid") {
      Color bg{static_cast<std::uint8_t>(std::lround(rng.uniform(0.0, 0.25) * 255)),
               static_cast<std::uint8_t>(std::lround(rng.uniform(0.0, 0.25) * 255)),
               static_cast<std::uint8_t>(std::lround(rng.uniform(0.0, 0.25) * 255))};
      fill_rect(img, 0, 0, side, side, bg);
    } else {
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          img.set(x, y,
                  {static_cast<std::uint8_t>(std::lround(rng.uniform(0.0, 0.3) * 255)),
                   static_cast<std::uint8_t>(std::lround(rng.uniform(0.0, 0.3) * 255)),
                   static_cast<std::uint8_t>(std::lround(rng.uniform(0.0, 0.3) * 255))});
    }
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x)
        if (mask[static_cast<std::size_t>(y) * side + x]) img.set(x, y, obj);

    char id[32];
    std::snprintf(id, sizeof(id), "img_%06d", i);
    write_png((fs::path(out_dir) / "images" / (std::string(id) + ".png")).string(), img);

    const nlohmann::json line = {{"image_id", id},   {"label", label}, {"x_min", bx0},
                                 {"y_min", by0},     {"x_max", bx1 + 1}, {"y_max", by1 + 1},
                                 {"width", side},    {"height", side}};
    ann << line.dump() << '\n';
  }
  ann.flush();
  if (!ann) throw std::runtime_error("write failed for annotations in '" + out_dir + "'");
  std::ofstream meta(fs::path(out_dir) / "dataset.json");
  nlohmann::json mj = spec;
  mj["format"] = "mimic-shapes-v1";
  meta << mj.dump(2) << '\n';
  if (!meta) throw std::runtime_error("cannot write dataset.json in '" + out_dir + "'");
  return spec.sample_count;
}

/// In-memory dataset: images scaled to [0,1], labels, normalized boxes.
struct Dataset {
  Tensor<float> images;  // (N, side, side, 3)
  std::vector<int> labels;
  std::vector<NormalizedBox> boxes;
  std::vector<Annotation> annotations;
  int class_count = 0;

  int size() const { return images.n(); }
  int side() const { return images.h(); }

  Dataset subset(std::span<const int> idx) const {
    Dataset out;
    out.images = gather_items(images, idx);
    out.class_count = class_count;
    for (int i : idx) {
      out.labels.push_back(labels[i]);
      out.boxes.push_back(boxes[i]);
      out.annotations.push_back(annotations[i]);
    }
    return out;
  }

  /// Ground-truth boxes for the given items as an (n,1,1,4) tensor.
  Tensor<float> box_tensor(std::span<const int> idx) const {
    Tensor<float> t(static_cast<int>(idx.size()), 1, 1, 4);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      auto a = boxes[idx[k]].as_array();
      for (int j = 0; j < 4; ++j) t.item(static_cast<int>(k))[j] = static_cast<float>(a[j]);
    }
    return t;
  }
};

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const fs::path ann_path = fs::path(dir) / "annotations.jsonl";
  std::ifstream ann(ann_path);
  if (!ann) throw std::runtime_error("cannot open '" + ann_path.string() + "'");

  Dataset ds;
  int meta_side = 0;
  {
    std::ifstream meta(fs::path(dir) / "dataset.json");
    if (meta) {
      nlohmann::json mj;
      meta >> mj;
      ds.class_count = mj.value("class_count", 0);
      meta_side = mj.value("image_side", 0);
    }
  }

  std::string line;
  int line_no = 0;
  while (std::getline(ann, line)) {
    ++line_no;
    if (line.empty()) continue;
    Annotation a;
    try {
      const auto j = nlohmann::json::parse(line);
      a.image_id = j.at("image_id").get<std::string>();
      a.label = j.at("label").get<int>();
      a.x_min = j.at("x_min").get<double>();
      a.y_min = j.at("y_min").get<double>();
      a.x_max = j.at("x_max").get<double>();
      a.y_max = j.at("y_max").get<double>();
      a.width = j.at("width").get<int>();
      a.height = j.at("height").get<int>();
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(ann_path.string() + " line " + std::to_string(line_no) +
                               ": malformed annotation: " + e.what());
    }
    ds.annotations.push_back(std::move(a));
  }
  if (ds.annotations.empty())
    throw std::runtime_error(ann_path.string() + ": no annotation lines");

  if (ds.class_count == 0) {
    for (const auto& a : ds.annotations) ds.class_count = std::max(ds.class_count, a.label + 1);
    ds.class_count = std::max(ds.class_count, 2);
  }

  const int n = static_cast<int>(ds.annotations.size());
  for (int i = 0; i < n; ++i) {
    const auto& a = ds.annotations[i];
    try {
      a.validate(ds.class_count);
    } catch (const std::exception& e) {
      throw std::runtime_error(ann_path.string() + " line " + std::to_string(i + 1) + ": " +
                               e.what());
    }
    const auto img_path = fs::path(dir) / "images" / (a.image_id + ".png");
    Image img = read_png(img_path.string());  // throws naming the file if absent
    if (img.width != a.width || img.height != a.height)
      throw std::runtime_error(img_path.string() + ": image is " + std::to_string(img.width) +
                               "x" + std::to_string(img.height) + " but annotation says " +
                               std::to_string(a.width) + "x" + std::to_string(a.height));
    if (meta_side && img.width != meta_side)
      throw std::runtime_error(img_path.string() + ": image side differs from dataset.json");
    if (i == 0)
      ds.images = Tensor<float>(n, img.height, img.width, 3);
    else if (img.height != ds.images.h() || img.width != ds.images.w())
      throw std::runtime_error(img_path.string() + ": image size differs from the first image");
    auto dst = ds.images.item(i);
    for (std::size_t p = 0; p < dst.size(); ++p)
      dst[p] = static_cast<float>(scale_pixels(img.rgb[p], 8));
    ds.labels.push_back(a.label);
    ds.boxes.push_back(normalize_annotation(a));
    ds.boxes.back().validate();
  }
  return ds;
}

/// Deterministic shuffled order for a dataset of n items.
inline std::vector<int> shuffled_indices(int n, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x73687566));
  return rng.permutation(n);
}

/// Split into train/test by a seeded permutation; test gets round(n*fraction),
/// at least 1, at most n-1.
inline std::pair<Dataset, Dataset> train_test_split(const Dataset& ds, double test_fraction,
                                                    std::uint64_t seed) {
  if (!(test_fraction > 0 && test_fraction < 1))
    throw std::invalid_argument("train_test_split: fraction must be in (0,1)");
  const int n = ds.size();
  int k = static_cast<int>(std::lround(n * test_fraction));
  k = std::min(std::max(k, 1), n - 1);
  const auto idx = shuffled_indices(n, seed);
  std::vector<int> train_idx(idx.begin(), idx.end() - k), test_idx(idx.end() - k, idx.end());
  return {ds.subset(train_idx), ds.subset(test_idx)};
}

}  // namespace mimic
