#pragma once

#include <cmath>
#include <cstring>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimic/rng.hpp"
#include "mimic/tensor.hpp"

namespace mimic::nn {

template <typename T>
struct ParamRef {
  std::string name;
  std::vector<T>* value;
  std::vector<T>* grad;
};

/// Spatial geometry of a (possibly strided, padded) convolution.
struct ConvGeom {
  int k = 3, stride = 1, pad = 0;
  int in_h = 0, in_w = 0;
  int out_h = 0, out_w = 0;

  static ConvGeom of(int k, int s, int p, int in_h, int in_w) {
    ConvGeom g{k, s, p, in_h, in_w, 0, 0};
    g.out_h = (in_h + 2 * p - k) / s + 1;
    g.out_w = (in_w + 2 * p - k) / s + 1;
    if (g.out_h <= 0 || g.out_w <= 0) throw std::invalid_argument("ConvGeom: empty output");
    return g;
  }
};

/// Lower (N,in_h,in_w,C) to a ((N*out_h*out_w) x (k*k*C)) patch matrix.
/// Column index is (ky*k + kx)*C + c so channel runs are contiguous copies.
template <typename T>
void im2col(const Tensor<T>& x, const ConvGeom& g, RowMat<T>& out) {
  const int N = x.n(), C = x.c();
  const int K = g.k * g.k * C;
  out.resize(static_cast<Eigen::Index>(N) * g.out_h * g.out_w, K);
  for (int n = 0; n < N; ++n) {
    for (int oy = 0; oy < g.out_h; ++oy) {
      for (int ox = 0; ox < g.out_w; ++ox) {
        T* row = out.data() + (static_cast<std::size_t>(n) * g.out_h * g.out_w +
                               static_cast<std::size_t>(oy) * g.out_w + ox) * K;
        for (int ky = 0; ky < g.k; ++ky) {
          const int sy = oy * g.stride - g.pad + ky;
          for (int kx = 0; kx < g.k; ++kx) {
            const int sx = ox * g.stride - g.pad + kx;
            T* dst = row + (ky * g.k + kx) * C;
            if (sy < 0 || sy >= g.in_h || sx < 0 || sx >= g.in_w) {
              std::memset(dst, 0, sizeof(T) * C);
            } else {
              const T* src = &x.at(n, sy, sx, 0);
              std::memcpy(dst, src, sizeof(T) * C);
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatter-add patch rows back into an image tensor.
template <typename T>
void col2im(const RowMat<T>& cols, const ConvGeom& g, Tensor<T>& x) {
  const int N = x.n(), C = x.c();
  const int K = g.k * g.k * C;
  std::fill(x.v.begin(), x.v.end(), T(0));
  for (int n = 0; n < N; ++n) {
    for (int oy = 0; oy < g.out_h; ++oy) {
      for (int ox = 0; ox < g.out_w; ++ox) {
        const T* row = cols.data() + (static_cast<std::size_t>(n) * g.out_h * g.out_w +
                                      static_cast<std::size_t>(oy) * g.out_w + ox) * K;
        for (int ky = 0; ky < g.k; ++ky) {
          const int sy = oy * g.stride - g.pad + ky;
          if (sy < 0 || sy >= g.in_h) continue;
          for (int kx = 0; kx < g.k; ++kx) {
            const int sx = ox * g.stride - g.pad + kx;
            if (sx < 0 || sx >= g.in_w) continue;
            const T* src = row + (ky * g.k + kx) * C;
            T* dst = &x.at(n, sy, sx, 0);
            for (int c = 0; c < C; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

template <typename T>
class Layer {
 public:
  virtual ~Layer() = default;
  /// training=true retains whatever backward() needs; training=false keeps
  /// the layer state untouched apart from scratch buffers.
  virtual Tensor<T> forward(const Tensor<T>& x, bool training) = 0;
  /// Consumes the gradient w.r.t. the last training-mode output, overwrites
  /// parameter gradients, returns the gradient w.r.t. the input.
  virtual Tensor<T> backward(const Tensor<T>& dy) = 0;
  virtual std::vector<ParamRef<T>> params() { return {}; }
  virtual std::string kind() const = 0;
  /// Per-item output shape for a given per-item input shape (h, w, c).
  virtual std::array<int, 3> out_hwc(std::array<int, 3> in) const = 0;
};

template <typename T>
class Dense : public Layer<T> {
 public:
  Dense(int in_features, int out_features, Rng& rng)
      : in_(in_features), out_(out_features), w_(std::size_t(in_features) * out_features),
        b_(out_features), dw_(w_.size()), db_(b_.size()) {
    const double std = std::sqrt(2.0 / in_features);
    for (auto& v : w_) v = static_cast<T>(rng.normal() * std);
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    if (static_cast<int>(x.per_item()) != in_)
      throw std::invalid_argument("Dense: expected " + std::to_string(in_) + " features, got " +
                                  x.shape_str());
    if (training) {
      x_ = x;
    }
    Tensor<T> y(x.n(), 1, 1, out_);
    Eigen::Map<const RowMat<T>> W(w_.data(), in_, out_);
    y.as_rows().noalias() = x.as_rows() * W;
    y.as_rows().rowwise() += Eigen::Map<const Eigen::RowVectorX<T>>(b_.data(), out_);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    Eigen::Map<const RowMat<T>> W(w_.data(), in_, out_);
    Eigen::Map<RowMat<T>> dW(dw_.data(), in_, out_);
    dW.noalias() = x_.as_rows().transpose() * dy.as_rows();
    Eigen::Map<Eigen::RowVectorX<T>>(db_.data(), out_) = dy.as_rows().colwise().sum();
    Tensor<T> dx(x_.shape[0], x_.shape[1], x_.shape[2], x_.shape[3]);
    dx.as_rows().noalias() = dy.as_rows() * W.transpose();
    return dx;
  }

  std::vector<ParamRef<T>> params() override {
    return {{"weight", &w_, &dw_}, {"bias", &b_, &db_}};
  }
  std::string kind() const override { return "dense"; }
  std::array<int, 3> out_hwc(std::array<int, 3> in) const override {
    if (in[0] * in[1] * in[2] != in_) throw std::invalid_argument("Dense: feature mismatch");
    return {1, 1, out_};
  }

 private:
  int in_, out_;
  std::vector<T> w_, b_, dw_, db_;
  Tensor<T> x_;
};

template <typename T>
class Conv2D : public Layer<T> {
 public:
  Conv2D(int in_ch, int out_ch, int k, int stride, int pad, Rng& rng)
      : ic_(in_ch), oc_(out_ch), k_(k), s_(stride), p_(pad),
        w_(std::size_t(k) * k * in_ch * out_ch), b_(out_ch), dw_(w_.size()), db_(b_.size()) {
    const double std = std::sqrt(2.0 / (k * k * in_ch));
    for (auto& v : w_) v = static_cast<T>(rng.normal() * std);
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    if (x.c() != ic_) throw std::invalid_argument("Conv2D: channel mismatch " + x.shape_str());
    const ConvGeom geom = ConvGeom::of(k_, s_, p_, x.h(), x.w());
    RowMat<T> local;
    RowMat<T>& cols = training ? cols_ : local;  // eval path leaves members untouched
    im2col(x, geom, cols);
    if (training) {
      geom_ = geom;
      in_shape_ = x.shape;
    }
    Tensor<T> y(x.n(), geom.out_h, geom.out_w, oc_);
    Eigen::Map<const RowMat<T>> W(w_.data(), k_ * k_ * ic_, oc_);
    auto Y = y.as_matrix(cols.rows(), oc_);
    Y.noalias() = cols * W;
    Y.rowwise() += Eigen::Map<const Eigen::RowVectorX<T>>(b_.data(), oc_);
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    const Eigen::Index rows = cols_.rows();
    Eigen::Map<const RowMat<T>> dY(dy.data(), rows, oc_);
    Eigen::Map<RowMat<T>> dW(dw_.data(), k_ * k_ * ic_, oc_);
    dW.noalias() = cols_.transpose() * dY;
    Eigen::Map<Eigen::RowVectorX<T>>(db_.data(), oc_) = dY.colwise().sum();
    RowMat<T> dcols(rows, k_ * k_ * ic_);
    Eigen::Map<const RowMat<T>> W(w_.data(), k_ * k_ * ic_, oc_);
    dcols.noalias() = dY * W.transpose();
    Tensor<T> dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    col2im(dcols, geom_, dx);
    return dx;
  }

  std::vector<ParamRef<T>> params() override {
    return {{"weight", &w_, &dw_}, {"bias", &b_, &db_}};
  }
  std::string kind() const override { return "conv"; }
  std::array<int, 3> out_hwc(std::array<int, 3> in) const override {
    auto g = ConvGeom::of(k_, s_, p_, in[0], in[1]);
    if (in[2] != ic_) throw std::invalid_argument("Conv2D: channel mismatch");
    return {g.out_h, g.out_w, oc_};
  }

 private:
  int ic_, oc_, k_, s_, p_;
  std::vector<T> w_, b_, dw_, db_;
  ConvGeom geom_;
  RowMat<T> cols_;
  std::array<int, 4> in_shape_{};
};

/// Fractionally strided convolution; output side is (h-1)*stride - 2*pad + k.
/// Implemented as the adjoint of a Conv2D that maps output-shaped tensors to
/// input-shaped ones, so it reuses im2col/col2im with the roles swapped.
template <typename T>
class TConv2D : public Layer<T> {
 public:
  TConv2D(int in_ch, int out_ch, int k, int stride, int pad, Rng& rng)
      : ic_(in_ch), oc_(out_ch), k_(k), s_(stride), p_(pad),
        w_(std::size_t(k) * k * out_ch * in_ch), b_(out_ch), dw_(w_.size()), db_(b_.size()) {
    const double std = std::sqrt(2.0 / (k * k * in_ch));
    for (auto& v : w_) v = static_cast<T>(rng.normal() * std);
  }

  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    if (x.c() != ic_) throw std::invalid_argument("TConv2D: channel mismatch " + x.shape_str());
    const int out_h = (x.h() - 1) * s_ - 2 * p_ + k_;
    const int out_w = (x.w() - 1) * s_ - 2 * p_ + k_;
    if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("TConv2D: empty output");
    const ConvGeom geom = ConvGeom::of(k_, s_, p_, out_h, out_w);  // adjoint conv: y -> x
    if (geom.out_h != x.h() || geom.out_w != x.w())
      throw std::invalid_argument("TConv2D: incompatible geometry");
    if (training) {
      geom_ = geom;
      x_ = x;
    }
    const Eigen::Index rows = static_cast<Eigen::Index>(x.n()) * x.h() * x.w();
    Eigen::Map<const RowMat<T>> X(x.data(), rows, ic_);
    Eigen::Map<const RowMat<T>> W(w_.data(), k_ * k_ * oc_, ic_);
    RowMat<T> cols(rows, k_ * k_ * oc_);
    cols.noalias() = X * W.transpose();
    Tensor<T> y(x.n(), out_h, out_w, oc_);
    col2im(cols, geom, y);
    T* yd = y.data();
    const std::size_t total = y.size();
    for (std::size_t i = 0; i < total; ++i) yd[i] += b_[i % oc_];
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    RowMat<T> dcols;
    im2col(dy, geom_, dcols);
    const Eigen::Index rows = static_cast<Eigen::Index>(x_.n()) * x_.h() * x_.w();
    Eigen::Map<const RowMat<T>> X(x_.data(), rows, ic_);
    Eigen::Map<RowMat<T>> dW(dw_.data(), k_ * k_ * oc_, ic_);
    dW.noalias() = dcols.transpose() * X;
    std::fill(db_.begin(), db_.end(), T(0));
    const T* dyd = dy.data();
    for (std::size_t i = 0; i < dy.size(); ++i) db_[i % oc_] += dyd[i];
    Tensor<T> dx(x_.shape[0], x_.shape[1], x_.shape[2], x_.shape[3]);
    Eigen::Map<RowMat<T>> dX(dx.data(), rows, ic_);
    Eigen::Map<const RowMat<T>> W(w_.data(), k_ * k_ * oc_, ic_);
    dX.noalias() = dcols * W;
    return dx;
  }

  std::vector<ParamRef<T>> params() override {
    return {{"weight", &w_, &dw_}, {"bias", &b_, &db_}};
  }
  std::string kind() const override { return "tconv"; }
  std::array<int, 3> out_hwc(std::array<int, 3> in) const override {
    if (in[2] != ic_) throw std::invalid_argument("TConv2D: channel mismatch");
    return {(in[0] - 1) * s_ - 2 * p_ + k_, (in[1] - 1) * s_ - 2 * p_ + k_, oc_};
  }

 private:
  int ic_, oc_, k_, s_, p_;
  std::vector<T> w_, b_, dw_, db_;
  ConvGeom geom_;
  Tensor<T> x_;
};

template <typename T>
class MaxPool2D : public Layer<T> {
 public:
  explicit MaxPool2D(int k = 2, int stride = 2) : k_(k), s_(stride) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    const int oh = (x.h() - k_) / s_ + 1, ow = (x.w() - k_) / s_ + 1;
    Tensor<T> y(x.n(), oh, ow, x.c());
    std::vector<std::size_t> local;
    auto& arg = training ? arg_ : local;
    arg.assign(y.size(), 0);
    if (training) in_shape_ = x.shape;
    std::size_t o = 0;
    for (int n = 0; n < x.n(); ++n)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox)
          for (int c = 0; c < x.c(); ++c, ++o) {
            T best = -std::numeric_limits<T>::infinity();
            std::size_t best_i = 0;
            for (int ky = 0; ky < k_; ++ky)
              for (int kx = 0; kx < k_; ++kx) {
                const int sy = oy * s_ + ky, sx = ox * s_ + kx;
                const std::size_t i =
                    ((static_cast<std::size_t>(n) * x.h() + sy) * x.w() + sx) * x.c() + c;
                if (x.v[i] > best) {
                  best = x.v[i];
                  best_i = i;
                }
              }
            y.v[o] = best;
            arg[o] = best_i;
          }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx(in_shape_[0], in_shape_[1], in_shape_[2], in_shape_[3]);
    for (std::size_t o = 0; o < dy.size(); ++o) dx.v[arg_[o]] += dy.v[o];
    return dx;
  }

  std::string kind() const override { return "maxpool"; }
  std::array<int, 3> out_hwc(std::array<int, 3> in) const override {
    return {(in[0] - k_) / s_ + 1, (in[1] - k_) / s_ + 1, in[2]};
  }

 private:
  int k_, s_;
  std::vector<std::size_t> arg_;
  std::array<int, 4> in_shape_{};
};

template <typename T>
class ReLU : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    Tensor<T> y = x;
    for (auto& v : y.v) v = v > T(0) ? v : T(0);
    if (training) y_ = y;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (y_.v[i] <= T(0)) dx.v[i] = T(0);
    return dx;
  }
  std::string kind() const override { return "relu"; }
  std::array<int, 3> out_hwc(std::array<int, 3> in) const override { return in; }

 private:
  Tensor<T> y_;
};

template <typename T>
class LeakyReLU : public Layer<T> {
 public:
  explicit LeakyReLU(double alpha = 0.2) : a_(static_cast<T>(alpha)) {}
  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    if (training) x_ = x;
    Tensor<T> y = x;
    for (auto& v : y.v) v = v > T(0) ? v : a_ * v;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i)
      if (x_.v[i] <= T(0)) dx.v[i] *= a_;
    return dx;
  }
  std::string kind() const override { return "lrelu"; }
  std::array<int, 3> out_hwc(std::array<int, 3> in) const override { return in; }

 private:
  T a_;
  Tensor<T> x_;
};

/// Numerically stable logistic function.
template <typename T>
inline T sigmoid(T v) {
  if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
  const T e = std::exp(v);
  return e / (T(1) + e);
}

template <typename T>
class Sigmoid : public Layer<T> {
 public:
  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    Tensor<T> y = x;
    for (auto& v : y.v) v = sigmoid(v);
    if (training) y_ = y;
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dx.size(); ++i) dx.v[i] *= y_.v[i] * (T(1) - y_.v[i]);
    return dx;
  }
  std::string kind() const override { return "sigmoid"; }
  std::array<int, 3> out_hwc(std::array<int, 3> in) const override { return in; }

 private:
  Tensor<T> y_;
};

/// Per-channel batch normalization over (N, H, W). Always normalizes with the
/// statistics of the batch at hand, so it carries no running state; callers
/// must feed at least two spatial-or-batch elements per channel.
template <typename T>
class BatchNorm : public Layer<T> {
 public:
  explicit BatchNorm(int channels, double eps = 1e-5)
      : c_(channels), eps_(static_cast<T>(eps)), gamma_(channels, T(1)), beta_(channels, T(0)),
        dgamma_(channels), dbeta_(channels) {}

  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    if (x.c() != c_) throw std::invalid_argument("BatchNorm: channel mismatch");
    const std::size_t m = x.size() / c_;
    if (m < 2) throw std::invalid_argument("BatchNorm: needs at least 2 elements per channel");
    Tensor<T> y = x;
    std::vector<T> mean(c_, T(0)), var(c_, T(0));
    for (std::size_t i = 0; i < x.size(); ++i) mean[i % c_] += x.v[i];
    for (int c = 0; c < c_; ++c) mean[c] /= static_cast<T>(m);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const T d = x.v[i] - mean[i % c_];
      var[i % c_] += d * d;
    }
    std::vector<T> inv_std(c_);
    for (int c = 0; c < c_; ++c) inv_std[c] = T(1) / std::sqrt(var[c] / static_cast<T>(m) + eps_);
    for (std::size_t i = 0; i < x.size(); ++i) {
      const int c = static_cast<int>(i % c_);
      y.v[i] = (x.v[i] - mean[c]) * inv_std[c];
    }
    if (training) {
      xhat_ = y;
      inv_std_ = inv_std;
    }
    for (std::size_t i = 0; i < y.size(); ++i) {
      const int c = static_cast<int>(i % c_);
      y.v[i] = gamma_[c] * y.v[i] + beta_[c];
    }
    return y;
  }

  Tensor<T> backward(const Tensor<T>& dy) override {
    const std::size_t m = dy.size() / c_;
    std::fill(dgamma_.begin(), dgamma_.end(), T(0));
    std::fill(dbeta_.begin(), dbeta_.end(), T(0));
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const int c = static_cast<int>(i % c_);
      dgamma_[c] += dy.v[i] * xhat_.v[i];
      dbeta_[c] += dy.v[i];
    }
    Tensor<T> dx = dy;
    for (std::size_t i = 0; i < dy.size(); ++i) {
      const int c = static_cast<int>(i % c_);
      dx.v[i] = gamma_[c] * inv_std_[c] / static_cast<T>(m) *
                (static_cast<T>(m) * dy.v[i] - dbeta_[c] - xhat_.v[i] * dgamma_[c]);
    }
    return dx;
  }

  std::vector<ParamRef<T>> params() override {
    return {{"gamma", &gamma_, &dgamma_}, {"beta", &beta_, &dbeta_}};
  }
  std::string kind() const override { return "batchnorm"; }
  std::array<int, 3> out_hwc(std::array<int, 3> in) const override { return in; }

 private:
  int c_;
  T eps_;
  std::vector<T> gamma_, beta_, dgamma_, dbeta_;
  Tensor<T> xhat_;
  std::vector<T> inv_std_;
};

template <typename T>
class Reshape : public Layer<T> {
 public:
  Reshape(int h, int w, int c) : h_(h), w_(w), c_(c) {}
  Tensor<T> forward(const Tensor<T>& x, bool training) override {
    if (x.per_item() != static_cast<std::size_t>(h_) * w_ * c_)
      throw std::invalid_argument("Reshape: size mismatch " + x.shape_str());
    if (training) in_shape_ = x.shape;
    Tensor<T> y = x;
    y.shape = {x.n(), h_, w_, c_};
    return y;
  }
  Tensor<T> backward(const Tensor<T>& dy) override {
    Tensor<T> dx = dy;
    dx.shape = in_shape_;
    return dx;
  }
  std::string kind() const override { return "reshape"; }
  std::array<int, 3> out_hwc(std::array<int, 3> in) const override {
    if (in[0] * in[1] * in[2] != h_ * w_ * c_)
      throw std::invalid_argument("Reshape: size mismatch");
    return {h_, w_, c_};
  }

 private:
  int h_, w_, c_;
  std::array<int, 4> in_shape_{};
};

}  // namespace mimic::nn
