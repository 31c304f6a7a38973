#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

// glibc's resolv.h (dragged in by networking headers) leaks a `_res` macro
// that mangles parameter names inside Eigen; neutralize it first.
#ifdef _res
#undef _res
#endif
#include <Eigen/Dense>

namespace mimic {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Dense rank-4 array in NHWC layout. Vectors (latents, head outputs) use
/// shape (n, 1, 1, d).
template <typename T>
struct Tensor {
  std::array<int, 4> shape{0, 0, 0, 0};
  std::vector<T> v;

  Tensor() = default;
  Tensor(int n, int h, int w, int c) : shape{n, h, w, c}, v(checked_size(n, h, w, c), T(0)) {}

  static Tensor vectors(int n, int d) { return Tensor(n, 1, 1, d); }

  int n() const { return shape[0]; }
  int h() const { return shape[1]; }
  int w() const { return shape[2]; }
  int c() const { return shape[3]; }

  std::size_t size() const { return v.size(); }
  std::size_t per_item() const {
    return static_cast<std::size_t>(shape[1]) * shape[2] * shape[3];
  }

  T* data() { return v.data(); }
  const T* data() const { return v.data(); }

  T& at(int in, int iy, int ix, int ic) {
    return v[((static_cast<std::size_t>(in) * shape[1] + iy) * shape[2] + ix) * shape[3] + ic];
  }
  const T& at(int in, int iy, int ix, int ic) const {
    return v[((static_cast<std::size_t>(in) * shape[1] + iy) * shape[2] + ix) * shape[3] + ic];
  }

  std::span<T> item(int in) { return {v.data() + in * per_item(), per_item()}; }
  std::span<const T> item(int in) const { return {v.data() + in * per_item(), per_item()}; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    return "(" + std::to_string(shape[0]) + "," + std::to_string(shape[1]) + "," +
           std::to_string(shape[2]) + "," + std::to_string(shape[3]) + ")";
  }

  /// View the n items as an (n x per_item) row-major matrix.
  Eigen::Map<RowMat<T>> as_rows() {
    return {v.data(), shape[0], static_cast<Eigen::Index>(per_item())};
  }
  Eigen::Map<const RowMat<T>> as_rows() const {
    return {v.data(), shape[0], static_cast<Eigen::Index>(per_item())};
  }

  /// Arbitrary 2-D view; rows*cols must cover the buffer exactly.
  Eigen::Map<RowMat<T>> as_matrix(Eigen::Index rows, Eigen::Index cols) {
    if (static_cast<std::size_t>(rows) * cols != size())
      throw std::invalid_argument("Tensor::as_matrix: size mismatch");
    return {v.data(), rows, cols};
  }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape[0], shape[1], shape[2], shape[3]);
    for (std::size_t i = 0; i < v.size(); ++i) out.v[i] = static_cast<U>(v[i]);
    return out;
  }

 private:
  static std::size_t checked_size(int n, int h, int w, int c) {
    if (n < 0 || h < 0 || w < 0 || c < 0) throw std::invalid_argument("Tensor: negative dim");
    return static_cast<std::size_t>(n) * h * w * c;
  }
};

/// Gather items along the batch axis: out item k = src item idx[k].
template <typename T>
Tensor<T> gather_items(const Tensor<T>& src, std::span<const int> idx) {
  Tensor<T> out(static_cast<int>(idx.size()), src.h(), src.w(), src.c());
  for (std::size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= src.n())
      throw std::out_of_range("gather_items: index " + std::to_string(idx[k]) +
                              " outside batch of " + std::to_string(src.n()));
    auto s = src.item(idx[k]);
    std::copy(s.begin(), s.end(), out.item(static_cast<int>(k)).begin());
  }
  return out;
}

}  // namespace mimic
