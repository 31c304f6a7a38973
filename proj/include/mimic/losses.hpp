#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimic/nn/network.hpp"
#include "mimic/tensor.hpp"

namespace mimic {

/// Clamp floor shared by every log-based loss; sigmoid heads can saturate.
inline constexpr double kProbFloor = 1e-7;

struct LossWeights {
  double cls = 1.0;
  double reg = 1.0;
};

struct LossValues {
  double l_cls = 0.0;
  double l_reg = 0.0;
  double l_total = 0.0;  // always w.cls * l_cls + w.reg * l_reg
};

/// Classification distance for the extraction loss: either plain l1 on
/// probabilities, or l1 between raw student scores and the inverse-sigmoid of
/// clamped victim probabilities.
enum class ClsLossMode { Probability, LogitL1 };

inline ClsLossMode parse_cls_loss_mode(const std::string& s) {
  if (s == "probability") return ClsLossMode::Probability;
  if (s == "logit_l1") return ClsLossMode::LogitL1;
  throw std::invalid_argument("unknown cls_loss_mode '" + s + "' (probability | logit_l1)");
}

inline const char* to_string(ClsLossMode m) {
  return m == ClsLossMode::Probability ? "probability" : "logit_l1";
}

inline double clamp_prob(double p, double floor = kProbFloor) {
  return std::min(std::max(p, floor), 1.0 - floor);
}

inline double logit(double p, double floor = kProbFloor) {
  const double q = clamp_prob(p, floor);
  return std::log(q / (1.0 - q));
}

namespace detail {
template <typename T, typename U>
void check_pair(const Tensor<T>& a, const Tensor<U>& b, const char* who) {
  if (a.n() != b.n() || a.per_item() != b.per_item())
    throw std::invalid_argument(std::string(who) + ": shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  if (a.n() == 0) throw std::invalid_argument(std::string(who) + ": empty batch");
}
}  // namespace detail

/// Sum of absolute componentwise differences per item, averaged over the batch.
template <typename T>
double l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_pair(a, b, "l1_loss");
  double total = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    total += std::abs(static_cast<double>(a.v[i]) - static_cast<double>(b.v[i]));
  return total / a.n();
}

/// Sum of squared componentwise differences per item (no root, no per-element
/// mean), averaged over the batch.
template <typename T>
double mse_loss(const Tensor<T>& a, const Tensor<T>& b) {
  detail::check_pair(a, b, "mse_loss");
  double total = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a.v[i]) - static_cast<double>(b.v[i]);
    total += d * d;
  }
  return total / a.n();
}

/// Sum_i v_i * log(v_i / s_i) with both operands clamped, batch-averaged.
template <typename T>
double kl_loss(const Tensor<T>& v, const Tensor<T>& s, double floor = kProbFloor) {
  detail::check_pair(v, s, "kl_loss");
  double total = 0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double p = std::max(static_cast<double>(v.v[i]), floor);
    const double q = std::max(static_cast<double>(s.v[i]), floor);
    total += p * std::log(p / q);
  }
  return total / v.n();
}

/// -Sum_i target_i * log(pred_i) with predictions clamped, batch-averaged.
template <typename T>
double cross_entropy(const Tensor<T>& target, const Tensor<T>& pred, double floor = kProbFloor) {
  detail::check_pair(target, pred, "cross_entropy");
  double total = 0;
  for (std::size_t i = 0; i < target.size(); ++i)
    total -= static_cast<double>(target.v[i]) *
             std::log(std::max(static_cast<double>(pred.v[i]), floor));
  return total / target.n();
}

/// Per item: sqrt of the mean squared log1p difference over the coordinates;
/// batch-averaged. Components must be nonnegative.
template <typename T>
double rmsle(const Tensor<T>& pred, const Tensor<T>& truth) {
  detail::check_pair(pred, truth, "rmsle");
  const std::size_t k = pred.per_item();
  double total = 0;
  for (int n = 0; n < pred.n(); ++n) {
    auto p = pred.item(n);
    auto t = truth.item(n);
    double q = 0;
    for (std::size_t i = 0; i < k; ++i) {
      if (p[i] < T(0) || t[i] < T(0))
        throw std::domain_error("rmsle: negative component at item " + std::to_string(n));
      const double d = std::log1p(static_cast<double>(p[i])) -
                       std::log1p(static_cast<double>(t[i]));
      q += d * d;
    }
    total += std::sqrt(q / k);
  }
  return total / pred.n();
}

/// Unpack a batch of oracle answers into (N,1,1,C) and (N,1,1,4) tensors.
template <typename T>
void detections_to_tensors(const std::vector<Detection>& dets, int class_count, Tensor<T>& probs,
                           Tensor<T>& box) {
  probs = Tensor<T>(static_cast<int>(dets.size()), 1, 1, class_count);
  box = Tensor<T>(static_cast<int>(dets.size()), 1, 1, 4);
  for (std::size_t n = 0; n < dets.size(); ++n) {
    if (static_cast<int>(dets[n].probs.size()) != class_count)
      throw std::invalid_argument("detections_to_tensors: item " + std::to_string(n) + " has " +
                                  std::to_string(dets[n].probs.size()) + " probs, expected " +
                                  std::to_string(class_count));
    for (int c = 0; c < class_count; ++c) probs.item(static_cast<int>(n))[c] =
        static_cast<T>(dets[n].probs[c]);
    for (int k = 0; k < 4; ++k) box.item(static_cast<int>(n))[k] =
        static_cast<T>(dets[n].box[k]);
  }
}

/// Extraction loss against black-box victim answers: classification distance
/// plus squared box error, combined with the given weights.
template <typename T>
LossValues total_loss(const Tensor<T>& v_probs, const Tensor<T>& v_box,
                      const DetectorOutput<T>& s, const LossWeights& w = {},
                      ClsLossMode mode = ClsLossMode::Probability) {
  LossValues out;
  if (mode == ClsLossMode::Probability) {
    out.l_cls = l1_loss(v_probs, s.label);
  } else {
    Tensor<T> v_logit = v_probs;
    for (auto& p : v_logit.v) p = static_cast<T>(logit(p));
    out.l_cls = l1_loss(v_logit, s.pre_label);
  }
  out.l_reg = mse_loss(v_box, s.box);
  out.l_total = w.cls * out.l_cls + w.reg * out.l_reg;
  return out;
}

/// Same combination computed for one image from raw spans; the estimator calls
/// this thousands of times per step, always in double.
template <typename T>
double item_total_loss(std::span<const double> v_probs, std::span<const double> v_box,
                       std::span<const T> s_label, std::span<const T> s_pre,
                       std::span<const T> s_box, const LossWeights& w, ClsLossMode mode) {
  double cls = 0;
  if (mode == ClsLossMode::Probability) {
    for (std::size_t c = 0; c < v_probs.size(); ++c)
      cls += std::abs(v_probs[c] - static_cast<double>(s_label[c]));
  } else {
    for (std::size_t c = 0; c < v_probs.size(); ++c)
      cls += std::abs(logit(v_probs[c]) - static_cast<double>(s_pre[c]));
  }
  double reg = 0;
  for (std::size_t k = 0; k < 4; ++k) {
    const double d = v_box[k] - static_cast<double>(s_box[k]);
    reg += d * d;
  }
  return w.cls * cls + w.reg * reg;
}

template <typename T>
struct StudentGrads {
  LossValues values;
  Tensor<T> dlabel;  // d l_total / d S.label (empty in logit mode)
  Tensor<T> dbox;    // d l_total / d S.box
  Tensor<T> dpre;    // d l_total / d S.pre_label (empty in probability mode)
};

/// Value and head gradients of the extraction loss, treating victim answers as
/// constants. Gradients carry the 1/N batch-mean factor and the weights.
template <typename T>
StudentGrads<T> student_loss_grads(const Tensor<T>& v_probs, const Tensor<T>& v_box,
                                   const DetectorOutput<T>& s, const LossWeights& w = {},
                                   ClsLossMode mode = ClsLossMode::Probability) {
  StudentGrads<T> out;
  out.values = total_loss(v_probs, v_box, s, w, mode);
  const int N = v_probs.n();
  const double inv_n = 1.0 / N;
  if (mode == ClsLossMode::Probability) {
    out.dlabel = Tensor<T>(N, 1, 1, v_probs.c());
    for (std::size_t i = 0; i < v_probs.size(); ++i) {
      const double d = static_cast<double>(s.label.v[i]) - static_cast<double>(v_probs.v[i]);
      out.dlabel.v[i] = static_cast<T>(w.cls * inv_n * ((d > 0) - (d < 0)));
    }
  } else {
    out.dpre = Tensor<T>(N, 1, 1, v_probs.c());
    for (std::size_t i = 0; i < v_probs.size(); ++i) {
      const double d =
          static_cast<double>(s.pre_label.v[i]) - logit(static_cast<double>(v_probs.v[i]));
      out.dpre.v[i] = static_cast<T>(w.cls * inv_n * ((d > 0) - (d < 0)));
    }
  }
  out.dbox = Tensor<T>(N, 1, 1, 4);
  for (std::size_t i = 0; i < v_box.size(); ++i)
    out.dbox.v[i] = static_cast<T>(w.reg * inv_n * 2.0 *
                                   (static_cast<double>(s.box.v[i]) -
                                    static_cast<double>(v_box.v[i])));
  return out;
}

template <typename T>
struct SupervisedGrads {
  double cls = 0;    // cross-entropy term
  double reg = 0;    // box rmsle term
  double total = 0;  // cls + reg
  Tensor<T> dlabel;
  Tensor<T> dbox;
};

/// Ground-truth training loss for the victim: cross-entropy on one-hot labels
/// plus RMSLE on the normalized box, with head gradients. negative_term adds
/// the complementary -(1-t)log(1-p) pressure on non-target classes.
template <typename T>
SupervisedGrads<T> supervised_loss_grads(const std::vector<int>& labels,
                                         const Tensor<T>& target_box, const DetectorOutput<T>& s,
                                         bool negative_term = false) {
  const int N = s.label.n(), C = s.label.c();
  if (static_cast<int>(labels.size()) != N || target_box.n() != N)
    throw std::invalid_argument("supervised_loss_grads: batch size mismatch");
  SupervisedGrads<T> out;
  out.dlabel = Tensor<T>(N, 1, 1, C);
  out.dbox = Tensor<T>(N, 1, 1, 4);
  const double inv_n = 1.0 / N;
  for (int n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || y >= C)
      throw std::invalid_argument("supervised_loss_grads: label " + std::to_string(y) +
                                  " out of range at item " + std::to_string(n));
    for (int c = 0; c < C; ++c) {
      const double p = clamp_prob(static_cast<double>(s.label.item(n)[c]));
      if (c == y) {
        out.cls -= std::log(p) * inv_n;
        out.dlabel.item(n)[c] = static_cast<T>(-inv_n / p);
      } else if (negative_term) {
        out.cls -= std::log(1.0 - p) * inv_n;
        out.dlabel.item(n)[c] = static_cast<T>(inv_n / (1.0 - p));
      }
    }
    auto p = s.box.item(n);
    auto t = target_box.item(n);
    double q = 0;
    std::array<double, 4> d{};
    for (int k = 0; k < 4; ++k) {
      d[k] = std::log1p(static_cast<double>(p[k])) - std::log1p(static_cast<double>(t[k]));
      q += d[k] * d[k];
    }
    const double r = std::sqrt(q / 4.0);
    out.reg += r * inv_n;
    const double denom = std::max(r, 1e-12) * 4.0;
    for (int k = 0; k < 4; ++k)
      out.dbox.item(n)[k] =
          static_cast<T>(inv_n * d[k] / (denom * (1.0 + static_cast<double>(p[k]))));
  }
  out.total = out.cls + out.reg;
  return out;
}

}  // namespace mimic
