#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "mimic/nn/layers.hpp"
#include "mimic/tensor.hpp"

namespace mimic {

/// One model opinion about one image: per-class probabilities (independent
/// logistic heads, so they need not sum to 1) plus a normalized corner box.
struct Detection {
  std::vector<double> probs;
  std::array<double, 4> box{};  // x_min, y_min, x_max, y_max in [0,1]

  int top_class() const {
    int best = 0;
    for (std::size_t i = 1; i < probs.size(); ++i)
      if (probs[i] > probs[best]) best = static_cast<int>(i);  // ties keep the lower index
    return best;
  }
};

namespace nn {

template <typename T>
class Sequential {
 public:
  Layer<T>& add(std::unique_ptr<Layer<T>> layer) {
    layers_.push_back(std::move(layer));
    return *layers_.back();
  }

  Tensor<T> forward(const Tensor<T>& x, bool training = false) {
    Tensor<T> h = x;
    for (auto& l : layers_) h = l->forward(h, training);
    return h;
  }

  /// Gradient w.r.t. the last training-mode forward; fills parameter grads.
  Tensor<T> backward(const Tensor<T>& dy) {
    Tensor<T> g = dy;
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
    return g;
  }

  std::vector<ParamRef<T>> params() {
    std::vector<ParamRef<T>> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      for (auto& p : layers_[i]->params())
        out.push_back({"L" + std::to_string(i) + "." + layers_[i]->kind() + "." + p.name,
                       p.value, p.grad});
    return out;
  }

  std::size_t param_count() {
    std::size_t n = 0;
    for (auto& p : params()) n += p.value->size();
    return n;
  }

  std::size_t layer_count() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

/// FNV-1a over the little-endian bytes of every parameter, in params() order.
/// Bit-identical weights give identical checksums; used to fingerprint models.
template <typename T>
std::uint64_t weights_checksum(std::vector<ParamRef<T>> params) {
  std::uint64_t h = 1469598103934665603ull;
  for (auto& p : params) {
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value->data());
    const std::size_t n = p.value->size() * sizeof(T);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

}  // namespace nn

template <typename T>
struct DetectorOutput {
  Tensor<T> pre_label;  // (N,1,1,C) raw class scores
  Tensor<T> label;      // sigmoid(pre_label)
  Tensor<T> box;        // (N,1,1,4) sigmoid-squashed corners
};

/// Single-object detector: a trunk ending in a Dense(C+4) layer whose output
/// is split into C class scores and 4 box coordinates, each squashed through
/// an independent logistic head.
template <typename T>
class Detector {
 public:
  Detector(int class_count, std::array<int, 3> input_hwc)
      : class_count_(class_count), input_hwc_(input_hwc) {
    if (class_count < 2) throw std::invalid_argument("Detector: need at least 2 classes");
  }

  nn::Sequential<T>& net() { return net_; }
  int class_count() const { return class_count_; }
  std::array<int, 3> input_hwc() const { return input_hwc_; }

  DetectorOutput<T> forward(const Tensor<T>& x, bool training = false) {
    check_input(x);
    Tensor<T> raw = net_.forward(x, training);
    if (static_cast<int>(raw.per_item()) != class_count_ + 4)
      throw std::logic_error("Detector: trunk must emit class_count+4 values");
    const int N = raw.n();
    DetectorOutput<T> out{Tensor<T>(N, 1, 1, class_count_), Tensor<T>(N, 1, 1, class_count_),
                          Tensor<T>(N, 1, 1, 4)};
    for (int n = 0; n < N; ++n) {
      auto r = raw.item(n);
      for (int c = 0; c < class_count_; ++c) {
        out.pre_label.item(n)[c] = r[c];
        out.label.item(n)[c] = nn::sigmoid(r[c]);
      }
      for (int k = 0; k < 4; ++k) out.box.item(n)[k] = nn::sigmoid(r[class_count_ + k]);
    }
    if (training) last_ = out;
    return out;
  }

  /// Backpropagate head gradients from the last training-mode forward.
  /// dpre adds straight onto the raw class scores (pre-sigmoid); pass an
  /// empty tensor to skip a branch. Returns the input gradient.
  Tensor<T> backward_heads(const Tensor<T>& dlabel, const Tensor<T>& dbox,
                           const Tensor<T>& dpre = {}) {
    const int N = last_.label.n();
    Tensor<T> draw(N, 1, 1, class_count_ + 4);
    for (int n = 0; n < N; ++n) {
      auto out = draw.item(n);
      for (int c = 0; c < class_count_; ++c) {
        T g = T(0);
        if (dlabel.size()) {
          const T y = last_.label.item(n)[c];
          g += dlabel.item(n)[c] * y * (T(1) - y);
        }
        if (dpre.size()) g += dpre.item(n)[c];
        out[c] = g;
      }
      for (int k = 0; k < 4; ++k) {
        T g = T(0);
        if (dbox.size()) {
          const T y = last_.box.item(n)[k];
          g = dbox.item(n)[k] * y * (T(1) - y);
        }
        out[class_count_ + k] = g;
      }
    }
    return net_.backward(draw);
  }

  std::vector<Detection> detect(const Tensor<T>& x) {
    auto out = forward(x, false);
    std::vector<Detection> dets(x.n());
    for (int n = 0; n < x.n(); ++n) {
      dets[n].probs.resize(class_count_);
      for (int c = 0; c < class_count_; ++c) dets[n].probs[c] = out.label.item(n)[c];
      for (int k = 0; k < 4; ++k) dets[n].box[k] = out.box.item(n)[k];
    }
    return dets;
  }

  std::vector<nn::ParamRef<T>> params() { return net_.params(); }
  std::uint64_t checksum() { return nn::weights_checksum(net_.params()); }

 private:
  void check_input(const Tensor<T>& x) const {
    if (x.h() != input_hwc_[0] || x.w() != input_hwc_[1] || x.c() != input_hwc_[2])
      throw std::invalid_argument("Detector: expected input " + std::to_string(input_hwc_[0]) +
                                  "x" + std::to_string(input_hwc_[1]) + "x" +
                                  std::to_string(input_hwc_[2]) + ", got " + x.shape_str());
  }

  int class_count_;
  std::array<int, 3> input_hwc_;
  nn::Sequential<T> net_;
  DetectorOutput<T> last_;
};

/// Latent-to-image network; the final layer must squash into [0,1].
template <typename T>
class Generator {
 public:
  Generator(int latent_dim, std::array<int, 3> out_hwc)
      : latent_dim_(latent_dim), out_hwc_(out_hwc) {
    if (latent_dim < 1) throw std::invalid_argument("Generator: latent_dim must be positive");
  }

  nn::Sequential<T>& net() { return net_; }
  int latent_dim() const { return latent_dim_; }
  std::array<int, 3> output_hwc() const { return out_hwc_; }

  Tensor<T> forward(const Tensor<T>& z, bool training = false) {
    if (static_cast<int>(z.per_item()) != latent_dim_)
      throw std::invalid_argument("Generator: expected latent dim " +
                                  std::to_string(latent_dim_) + ", got " + z.shape_str());
    Tensor<T> x = net_.forward(z, training);
    if (x.h() != out_hwc_[0] || x.w() != out_hwc_[1] || x.c() != out_hwc_[2])
      throw std::logic_error("Generator: produced " + x.shape_str());
    return x;
  }

  /// Gradient w.r.t. the latent of the last training-mode forward; fills
  /// parameter grads along the way.
  Tensor<T> backward(const Tensor<T>& dimage) { return net_.backward(dimage); }

  std::vector<nn::ParamRef<T>> params() { return net_.params(); }
  std::uint64_t checksum() { return nn::weights_checksum(net_.params()); }

 private:
  int latent_dim_;
  std::array<int, 3> out_hwc_;
  nn::Sequential<T> net_;
};

}  // namespace mimic
