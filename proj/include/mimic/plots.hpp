#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

// see tensor.hpp: glibc resolv.h leaks `_res`, which breaks Eigen
#ifdef _res
#undef _res
#endif
#include <Eigen/Dense>

#include "mimic/data.hpp"
#include "mimic/image.hpp"
#include "mimic/tensor.hpp"

namespace mimic {

/// One item of an NHWC float tensor (values in [0,1]) as an 8-bit image.
inline Image tensor_to_image(const Tensor<float>& t, int item) {
  if (t.c() != 3) throw std::invalid_argument("tensor_to_image: expected 3 channels");
  if (item < 0 || item >= t.n()) throw std::out_of_range("tensor_to_image: item out of range");
  Image img(t.w(), t.h());
  for (int y = 0; y < t.h(); ++y)
    for (int x = 0; x < t.w(); ++x) {
      auto q = [&](int c) {
        const float v = std::clamp(t.at(item, y, x, c), 0.0f, 1.0f);
        return static_cast<std::uint8_t>(std::lround(v * 255.0f));
      };
      img.set(x, y, {q(0), q(1), q(2)});
    }
  return img;
}

namespace detail {

inline void draw_norm_box(Image& img, const std::array<double, 4>& box, Color c) {
  const NormalizedBox nb{box[0], box[1], box[2], box[3]};
  const auto px = denormalize_box(nb, img.width, img.height);
  const auto clampx = [&](double v) {
    return std::clamp(static_cast<int>(std::lround(v)), 0, img.width - 1);
  };
  const auto clampy = [&](double v) {
    return std::clamp(static_cast<int>(std::lround(v)), 0, img.height - 1);
  };
  draw_rect(img, clampx(px[0]), clampy(px[1]), clampx(px[2]), clampy(px[3]), c);
}

}  // namespace detail

/// Per-sample overlay renders: ground truth in green, victim prediction in
/// red, student prediction in white (red when no victim boxes are supplied).
/// Returns the written paths; one file per rendered sample.
inline std::vector<std::string> render_overlays(
    const Tensor<float>& images, const std::vector<std::array<double, 4>>& gt,
    const std::vector<std::array<double, 4>>& victim,
    const std::vector<std::array<double, 4>>& student, const std::string& out_dir,
    int count = -1) {
  const int n = images.n();
  if (static_cast<int>(gt.size()) != n)
    throw std::invalid_argument("render_overlays: ground-truth count does not match images");
  if (!victim.empty() && static_cast<int>(victim.size()) != n)
    throw std::invalid_argument("render_overlays: victim box count does not match images");
  if (!student.empty() && static_cast<int>(student.size()) != n)
    throw std::invalid_argument("render_overlays: student box count does not match images");
  if (count < 0 || count > n) count = n;
  std::filesystem::create_directories(out_dir);
  std::vector<std::string> paths;
  paths.reserve(count);
  for (int i = 0; i < count; ++i) {
    Image img = tensor_to_image(images, i);
    if (!victim.empty()) detail::draw_norm_box(img, victim[i], kRed);
    if (!student.empty())
      detail::draw_norm_box(img, student[i], victim.empty() ? kRed : kWhite);
    detail::draw_norm_box(img, gt[i], kGreen);
    char name[32];
    std::snprintf(name, sizeof(name), "overlay_%03d.png", i);
    auto path = (std::filesystem::path(out_dir) / name).string();
    write_png(path, img);
    paths.push_back(std::move(path));
  }
  return paths;
}

struct ScatterResult {
  std::vector<std::array<double, 2>> generated;  // projection of generated images
  std::vector<std::array<double, 2>> real;       // projection of real images
};

namespace detail {

inline void draw_dot(Image& img, int x, int y, Color c) {
  fill_rect(img, std::max(0, x - 2), std::max(0, y - 2), std::min(img.width - 1, x + 2),
            std::min(img.height - 1, y + 2), c);
}

}  // namespace detail

/// Two-dimensional principal-component projection of flattened pixels, fit on
/// the union of both sets; generated drawn red, real green. The projection is
/// computed from the N x N Gram matrix of the centered rows, so it stays
/// cheap even though images have thousands of pixels.
inline ScatterResult latent_scatter(const Tensor<float>& generated, const Tensor<float>& real,
                                    const std::string& out_file, int side = 480) {
  const int ng = generated.n(), nr = real.n();
  if (ng < 1 || nr < 1)
    throw std::invalid_argument("latent_scatter: both image sets must be nonempty");
  if (ng + nr < 2) throw std::invalid_argument("latent_scatter: need at least 2 samples");
  if (generated.per_item() != real.per_item())
    throw std::invalid_argument("latent_scatter: image sets have different flattened sizes");
  const int n = ng + nr;
  const auto d = static_cast<Eigen::Index>(generated.per_item());

  Eigen::MatrixXd x(n, d);
  for (int i = 0; i < ng; ++i) {
    auto row = generated.item(i);
    for (Eigen::Index j = 0; j < d; ++j) x(i, j) = row[j];
  }
  for (int i = 0; i < nr; ++i) {
    auto row = real.item(i);
    for (Eigen::Index j = 0; j < d; ++j) x(ng + i, j) = row[j];
  }
  x.rowwise() -= x.colwise().mean();

  Eigen::MatrixXd gram = x * x.transpose();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("latent_scatter: eigendecomposition failed");
  // eigenvalues ascend; the last two carry the top principal directions.
  // X = U S V^T gives X V = U S, so scores are eigvec * sqrt(eigval).
  Eigen::MatrixXd coords(n, 2);
  for (int k = 0; k < 2; ++k) {
    const Eigen::Index col = n - 1 - k;
    const double lam = std::max(es.eigenvalues()(col), 0.0);
    coords.col(k) = es.eigenvectors().col(col) * std::sqrt(lam);
  }

  ScatterResult res;
  for (int i = 0; i < ng; ++i) res.generated.push_back({coords(i, 0), coords(i, 1)});
  for (int i = 0; i < nr; ++i) res.real.push_back({coords(ng + i, 0), coords(ng + i, 1)});

  const double lo_x = coords.col(0).minCoeff(), hi_x = coords.col(0).maxCoeff();
  const double lo_y = coords.col(1).minCoeff(), hi_y = coords.col(1).maxCoeff();
  const double span_x = std::max(hi_x - lo_x, 1e-12);
  const double span_y = std::max(hi_y - lo_y, 1e-12);
  const int margin = 24;
  Image img(side, side, kWhite);
  draw_rect(img, margin - 4, margin - 4, side - margin + 4, side - margin + 4, kBlack);
  const auto to_px = [&](double v, double lo, double span) {
    return margin + static_cast<int>(std::lround((v - lo) / span * (side - 2 * margin)));
  };
  const auto plot = [&](const std::vector<std::array<double, 2>>& pts, Color c) {
    for (const auto& p : pts)
      detail::draw_dot(img, to_px(p[0], lo_x, span_x),
                       side - 1 - to_px(p[1], lo_y, span_y), c);
  };
  plot(res.real, kGreen);
  plot(res.generated, kRed);
  write_png(out_file, img);
  return res;
}

struct CurvePoint {
  double x = 0;  // queries consumed
  double y = 0;  // accuracy in [0,1]
};

/// Accuracy-versus-queries polyline. Y axis fixed to [0,1]; X spans the data.
inline void accuracy_curve(const std::vector<CurvePoint>& points, const std::string& out_file,
                           int width = 640, int height = 400) {
  if (points.empty()) throw std::invalid_argument("accuracy_curve: no points");
  const int margin = 32;
  Image img(width, height, kWhite);
  const double hi_x = std::max_element(points.begin(), points.end(), [](auto& a, auto& b) {
                        return a.x < b.x;
                      })->x;
  const double span_x = std::max(hi_x, 1e-12);
  const auto px = [&](double v) {
    return margin + static_cast<int>(std::lround(v / span_x * (width - 2 * margin)));
  };
  const auto py = [&](double v) {
    return height - margin -
           static_cast<int>(std::lround(std::clamp(v, 0.0, 1.0) * (height - 2 * margin)));
  };
  const Color grid{210, 210, 210};
  for (double g : {0.25, 0.5, 0.75})
    draw_line(img, margin, py(g), width - margin, py(g), grid);
  draw_line(img, margin, py(0), width - margin, py(0), kBlack);
  draw_line(img, margin, py(0), margin, py(1), kBlack);
  const Color trace{30, 90, 200};
  for (std::size_t i = 0; i + 1 < points.size(); ++i)
    draw_line(img, px(points[i].x), py(points[i].y), px(points[i + 1].x), py(points[i + 1].y),
              trace);
  for (const auto& p : points) detail::draw_dot(img, px(p.x), py(p.y), trace);
  write_png(out_file, img);
}

}  // namespace mimic
