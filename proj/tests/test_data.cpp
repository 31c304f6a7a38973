#include <algorithm>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <gtest/gtest.h>
#include <json.hpp>
#include <mimic/data.hpp>
#include <mimic/image.hpp>

using namespace mimic;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("mimic-data-" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

DatasetSpec small_spec(std::uint64_t seed = 5) {
  DatasetSpec s;
  s.class_count = 3;
  s.image_side = 32;
  s.sample_count = 60;
  s.seed = seed;
  return s;
}

std::string slurp_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  EXPECT_TRUE(in.good()) << p;
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::vector<nlohmann::json> annotation_lines(const fs::path& dir) {
  std::ifstream in(dir / "annotations.jsonl");
  std::vector<nlohmann::json> lines;
  std::string line;
  while (std::getline(in, line))
    if (!line.empty()) lines.push_back(nlohmann::json::parse(line));
  return lines;
}

}  // namespace

TEST(Boxes, NormalizeHandValue) {
  Annotation a{"img", 0, 37, 12, 81, 99, 128, 128};
  auto b = normalize_annotation(a);
  EXPECT_DOUBLE_EQ(b.x_min, 0.2890625);
  EXPECT_DOUBLE_EQ(b.y_min, 0.09375);
  EXPECT_DOUBLE_EQ(b.x_max, 0.6328125);
  EXPECT_DOUBLE_EQ(b.y_max, 0.7734375);
  auto px = denormalize_box(b, 128, 128);
  EXPECT_DOUBLE_EQ(px[0], 37);
  EXPECT_DOUBLE_EQ(px[1], 12);
  EXPECT_DOUBLE_EQ(px[2], 81);
  EXPECT_DOUBLE_EQ(px[3], 99);
}

TEST(Boxes, NormalizeRejectsZeroDimension) {
  Annotation a{"bad", 0, 1, 1, 2, 2, 0, 64};
  EXPECT_THROW(normalize_annotation(a), std::invalid_argument);
}

TEST(Boxes, AnnotationValidateCatchesBadBoxesAndLabels) {
  Annotation ok{"x", 1, 4, 4, 20, 20, 64, 64};
  EXPECT_NO_THROW(ok.validate(3));
  auto bad = ok;
  bad.x_max = 65;  // spills past the right edge
  EXPECT_THROW(bad.validate(3), std::invalid_argument);
  bad = ok;
  bad.y_min = bad.y_max;  // empty
  EXPECT_THROW(bad.validate(3), std::invalid_argument);
  bad = ok;
  bad.label = 3;
  EXPECT_THROW(bad.validate(3), std::invalid_argument);
  bad.label = -1;
  EXPECT_THROW(bad.validate(3), std::invalid_argument);
}

TEST(Boxes, NormalizedValidateEnforcesUnitRange) {
  NormalizedBox b{0.1, 0.2, 0.5, 0.6};
  EXPECT_NO_THROW(b.validate());
  EXPECT_EQ(b.as_array(), (std::array<double, 4>{0.1, 0.2, 0.5, 0.6}));
  EXPECT_THROW((NormalizedBox{0.5, 0.2, 0.5, 0.6}.validate()), std::invalid_argument);
  EXPECT_THROW((NormalizedBox{-0.1, 0.2, 0.5, 0.6}.validate()), std::invalid_argument);
  EXPECT_THROW((NormalizedBox{0.1, 0.2, 1.2, 0.6}.validate()), std::invalid_argument);
}

TEST(Pixels, ScaleHandValuesAndErrors) {
  EXPECT_DOUBLE_EQ(scale_pixels(0, 8), 0.0);
  EXPECT_DOUBLE_EQ(scale_pixels(255, 8), 1.0);
  EXPECT_DOUBLE_EQ(scale_pixels(128, 8), 128.0 / 255.0);
  EXPECT_DOUBLE_EQ(scale_pixels(65535, 16), 1.0);
  EXPECT_THROW(scale_pixels(10, 12), std::invalid_argument);
  EXPECT_THROW(scale_pixels(-1, 8), std::invalid_argument);
  EXPECT_THROW(scale_pixels(256, 8), std::invalid_argument);
}

TEST(Generation, BalancedLabelsBoundedBoxes) {
  auto dir = temp_dir("gen");
  auto spec = small_spec();
  EXPECT_EQ(generate_shapes_dataset(spec, dir.string()), 60);

  auto lines = annotation_lines(dir);
  ASSERT_EQ(lines.size(), 60u);
  std::vector<int> per_class(3, 0);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& j = lines[i];
    const int label = j.at("label").get<int>();
    EXPECT_EQ(label, static_cast<int>(i) % 3);  // strict round-robin
    ++per_class[label];
    const double x0 = j.at("x_min").get<double>(), x1 = j.at("x_max").get<double>();
    const double y0 = j.at("y_min").get<double>(), y1 = j.at("y_max").get<double>();
    EXPECT_GE(x0, 0);
    EXPECT_LT(x0, x1);
    EXPECT_LE(x1, 32);
    EXPECT_GE(y0, 0);
    EXPECT_LT(y0, y1);
    EXPECT_LE(y1, 32);
    const double ext = std::max(x1 - x0, y1 - y0);
    EXPECT_GE(ext, spec.size_min * 32);
    EXPECT_LE(ext, spec.size_max * 32 + 2);
  }
  EXPECT_EQ(per_class, (std::vector<int>{20, 20, 20}));

  int pngs = 0;
  for (auto& e : fs::directory_iterator(dir / "images"))
    if (e.path().extension() == ".png") ++pngs;
  EXPECT_EQ(pngs, 60);
}

TEST(Generation, SameSeedIsByteIdentical) {
  auto a = temp_dir("rerun-a");
  auto b = temp_dir("rerun-b");
  generate_shapes_dataset(small_spec(), a.string());
  generate_shapes_dataset(small_spec(), b.string());
  EXPECT_EQ(slurp_bytes(a / "annotations.jsonl"), slurp_bytes(b / "annotations.jsonl"));
  EXPECT_EQ(slurp_bytes(a / "images" / "img_000000.png"),
            slurp_bytes(b / "images" / "img_000000.png"));
  EXPECT_EQ(slurp_bytes(a / "images" / "img_000031.png"),
            slurp_bytes(b / "images" / "img_000031.png"));
}

TEST(Generation, DifferentSeedsMoveTheObjects) {
  auto a = temp_dir("seed-a");
  auto b = temp_dir("seed-b");
  generate_shapes_dataset(small_spec(5), a.string());
  generate_shapes_dataset(small_spec(6), b.string());
  EXPECT_NE(slurp_bytes(a / "annotations.jsonl"), slurp_bytes(b / "annotations.jsonl"));
}

TEST(Generation, NoiseBackgroundIsNotFlat) {
  auto dir = temp_dir("noise");
  auto spec = small_spec();
  spec.background = "noise";
  spec.sample_count = 3;
  generate_shapes_dataset(spec, dir.string());
  Image img = read_png((dir / "images" / "img_000000.png").string());
  // background pixels outside the object box should not all share one value
  auto lines = annotation_lines(dir);
  const int x1 = lines[0].at("x_max").get<int>();
  std::set<int> seen;
  for (int x = x1 + 1; x < img.width; ++x) seen.insert(img.rgb[(0 * img.width + x) * 3]);
  if (x1 + 1 < img.width - 4) EXPECT_GT(seen.size(), 1u);
}

TEST(Loading, RoundTripMatchesFilesOnDisk) {
  auto dir = temp_dir("load");
  generate_shapes_dataset(small_spec(), dir.string());
  Dataset ds = load_dataset(dir.string());
  EXPECT_EQ(ds.size(), 60);
  EXPECT_EQ(ds.side(), 32);
  EXPECT_EQ(ds.class_count, 3);
  ASSERT_EQ(ds.labels.size(), 60u);
  ASSERT_EQ(ds.boxes.size(), 60u);

  auto lines = annotation_lines(dir);
  for (int i = 0; i < 60; ++i) {
    EXPECT_EQ(ds.labels[i], lines[i].at("label").get<int>());
    EXPECT_DOUBLE_EQ(ds.boxes[i].x_min, lines[i].at("x_min").get<double>() / 32);
    EXPECT_DOUBLE_EQ(ds.boxes[i].y_max, lines[i].at("y_max").get<double>() / 32);
  }

  // pixels: tensor values are png byte / 255, in [0,1]
  Image img = read_png((dir / "images" / "img_000000.png").string());
  auto t0 = ds.images.item(0);
  for (std::size_t p = 0; p < t0.size(); ++p)
    EXPECT_FLOAT_EQ(t0[p], static_cast<float>(img.rgb[p] / 255.0));
  const auto [lo, hi] = std::minmax_element(ds.images.v.begin(), ds.images.v.end());
  EXPECT_GE(*lo, 0.0f);
  EXPECT_LE(*hi, 1.0f);
}

TEST(Loading, MalformedLineIsReportedWithItsNumber) {
  auto dir = temp_dir("badline");
  generate_shapes_dataset(small_spec(), dir.string());
  auto text = slurp_bytes(dir / "annotations.jsonl");
  // clobber the third line
  std::size_t pos = 0;
  for (int skip = 0; skip < 2; ++skip) pos = text.find('\n', pos) + 1;
  text.replace(pos, text.find('\n', pos) - pos, "{not json at all");
  std::ofstream(dir / "annotations.jsonl") << text;
  try {
    load_dataset(dir.string());
    FAIL() << "malformed line accepted";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
}

TEST(Loading, MissingImageNamesTheFile) {
  auto dir = temp_dir("missing");
  generate_shapes_dataset(small_spec(), dir.string());
  fs::remove(dir / "images" / "img_000007.png");
  try {
    load_dataset(dir.string());
    FAIL() << "missing image accepted";
  } catch (const std::exception& e) {
    EXPECT_NE(std::string(e.what()).find("img_000007"), std::string::npos) << e.what();
  }
}

TEST(Loading, EmptyAnnotationsRejected) {
  auto dir = temp_dir("empty");
  fs::create_directories(dir / "images");
  std::ofstream(dir / "annotations.jsonl") << "";
  EXPECT_THROW(load_dataset(dir.string()), std::runtime_error);
  EXPECT_THROW(load_dataset((dir / "nowhere").string()), std::runtime_error);
}

TEST(Splits, SizesDisjointnessDeterminism) {
  auto dir = temp_dir("split");
  generate_shapes_dataset(small_spec(), dir.string());
  Dataset ds = load_dataset(dir.string());

  auto [train, test] = train_test_split(ds, 1.0 / 6, 99);
  EXPECT_EQ(test.size(), 10);
  EXPECT_EQ(train.size(), 50);
  EXPECT_EQ(train.class_count, 3);

  std::set<std::string> train_ids, test_ids;
  for (const auto& a : train.annotations) train_ids.insert(a.image_id);
  for (const auto& a : test.annotations) test_ids.insert(a.image_id);
  EXPECT_EQ(train_ids.size(), 50u);
  EXPECT_EQ(test_ids.size(), 10u);
  for (const auto& id : test_ids) EXPECT_EQ(train_ids.count(id), 0u) << id;

  auto [train2, test2] = train_test_split(ds, 1.0 / 6, 99);
  for (int i = 0; i < test.size(); ++i)
    EXPECT_EQ(test.annotations[i].image_id, test2.annotations[i].image_id);
  auto [train3, test3] = train_test_split(ds, 1.0 / 6, 100);
  std::set<std::string> test3_ids;
  for (const auto& a : test3.annotations) test3_ids.insert(a.image_id);
  EXPECT_NE(test_ids, test3_ids);

  // subset carried the matching tensors along with the metadata
  for (int i = 0; i < test.size(); ++i) {
    const int orig = std::stoi(test.annotations[i].image_id.substr(4));
    EXPECT_EQ(test.labels[i], orig % 3);
    auto want = ds.images.item(orig);
    auto got = test.images.item(i);
    EXPECT_TRUE(std::equal(want.begin(), want.end(), got.begin()));
  }
}

TEST(Splits, FractionBoundsAndFloors) {
  auto dir = temp_dir("splitb");
  auto spec = small_spec();
  spec.sample_count = 9;
  generate_shapes_dataset(spec, dir.string());
  Dataset ds = load_dataset(dir.string());
  EXPECT_THROW(train_test_split(ds, 0.0, 1), std::invalid_argument);
  EXPECT_THROW(train_test_split(ds, 1.0, 1), std::invalid_argument);
  auto [train, test] = train_test_split(ds, 0.01, 1);  // rounds to 0, floored at 1
  EXPECT_EQ(test.size(), 1);
  EXPECT_EQ(train.size(), 8);
}

TEST(Splits, ShuffledIndicesAreSeededPermutations) {
  auto a = shuffled_indices(100, 7);
  auto b = shuffled_indices(100, 7);
  auto c = shuffled_indices(100, 8);
  EXPECT_EQ(a, b);
  EXPECT_NE(a, c);
  auto sorted = a;
  std::sort(sorted.begin(), sorted.end());
  for (int i = 0; i < 100; ++i) EXPECT_EQ(sorted[i], i);
}

TEST(Datasets, BoxTensorMatchesBoxes) {
  auto dir = temp_dir("boxt");
  auto spec = small_spec();
  spec.sample_count = 6;
  generate_shapes_dataset(spec, dir.string());
  Dataset ds = load_dataset(dir.string());
  std::vector<int> idx{3, 0, 5};
  auto t = ds.box_tensor(idx);
  EXPECT_EQ(t.n(), 3);
  EXPECT_EQ(t.c(), 4);
  for (int k = 0; k < 3; ++k) {
    auto want = ds.boxes[idx[k]].as_array();
    for (int j = 0; j < 4; ++j) EXPECT_FLOAT_EQ(t.item(k)[j], static_cast<float>(want[j]));
  }
}

TEST(Specs, JsonRoundTripAndDefaults) {
  DatasetSpec s;
  s.class_count = 4;
  s.shapes = {"circle", "square", "triangle", "cross"};
  s.background = "noise";
  s.seed = 77;
  nlohmann::json j = s;
  auto back = j.get<DatasetSpec>();
  EXPECT_EQ(back.class_count, 4);
  EXPECT_EQ(back.background, "noise");
  EXPECT_EQ(back.seed, 77u);
  EXPECT_EQ(back.shapes, s.shapes);

  auto defaults = nlohmann::json::object().get<DatasetSpec>();
  EXPECT_EQ(defaults.class_count, 3);
  EXPECT_EQ(defaults.image_side, 64);
  EXPECT_EQ(defaults.sample_count, 600);
  EXPECT_EQ(defaults.background, "solid");
}

TEST(Specs, ValidateCatchesEveryKnob) {
  auto ok = small_spec();
  EXPECT_NO_THROW(ok.validate());
  auto bad = ok;
  bad.class_count = 1;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.sample_count = 0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.image_side = 8;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.size_min = 0.6;
  bad.size_max = 0.3;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.size_max = 1.0;
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.shapes = {"circle", "square"};
  EXPECT_THROW(bad.validate(), std::invalid_argument);  // fewer shapes than classes
  bad = ok;
  bad.background = "plaid";
  EXPECT_THROW(bad.validate(), std::invalid_argument);
  bad = ok;
  bad.shapes = {"circle", "square", "hexagon"};
  EXPECT_THROW(bad.validate(), std::invalid_argument);
}
