#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "mimic/losses.hpp"
#include "mimic/nn/network.hpp"
#include "mimic/oracle.hpp"
#include "mimic/rng.hpp"
#include "mimic/tensor.hpp"

namespace mimic {

enum class LatentDist { Gaussian, Laplacian };

inline LatentDist parse_latent_dist(const std::string& s) {
  if (s == "gaussian") return LatentDist::Gaussian;
  if (s == "laplacian") return LatentDist::Laplacian;
  throw std::invalid_argument("unknown latent distribution '" + s +
                              "' (gaussian | laplacian)");
}

inline const char* to_string(LatentDist d) {
  return d == LatentDist::Gaussian ? "gaussian" : "laplacian";
}

/// (count, d) i.i.d. draws from the standard normal or standard Laplace.
template <typename T = float>
Tensor<T> sample_latent(int count, int dim, LatentDist dist, Rng& rng) {
  if (count <= 0 || dim <= 0)
    throw std::invalid_argument("sample_latent: count and dim must be positive");
  Tensor<T> z = Tensor<T>::vectors(count, dim);
  if (dist == LatentDist::Gaussian)
    for (auto& v : z.v) v = static_cast<T>(rng.normal());
  else
    for (auto& v : z.v) v = static_cast<T>(rng.laplace());
  return z;
}

struct EstimatorConfig {
  int directions = 1;      // m
  double epsilon = 1e-3;   // perturbation step, small on the [0,1] pixel scale

  void validate() const {
    if (directions < 1) throw std::invalid_argument("EstimatorConfig: directions must be >= 1");
    if (!(epsilon > 0)) throw std::invalid_argument("EstimatorConfig: epsilon must be > 0");
  }
};

struct GradientEstimate {
  Tensor<float> grad;    // per image: estimated d l_total(item) / d x_item
  double base_loss = 0;  // batch-mean l_total at the unperturbed input
  long long queries = 0; // victim image-queries consumed: (m+1) * batch
};

namespace detail {

/// Orthonormalize `rows` vectors of length `dim` in place (modified
/// Gram-Schmidt, double accumulation). Each row stays a uniformly distributed
/// unit direction; jointly they form a random orthonormal frame, which makes
/// the forward-difference reconstruction exact for linear losses once the
/// frame spans the space.
inline void orthonormalize_rows(float* rows, int count, int dim, Rng& rng) {
  for (int j = 0; j < count; ++j) {
    float* rj = rows + static_cast<std::size_t>(j) * dim;
    for (int guard = 0;; ++guard) {
      for (int p = 0; p < j; ++p) {
        const float* rp = rows + static_cast<std::size_t>(p) * dim;
        double dot = 0;
        for (int k = 0; k < dim; ++k) dot += static_cast<double>(rj[k]) * rp[k];
        for (int k = 0; k < dim; ++k) rj[k] -= static_cast<float>(dot) * rp[k];
      }
      double norm2 = 0;
      for (int k = 0; k < dim; ++k) norm2 += static_cast<double>(rj[k]) * rj[k];
      if (norm2 > 1e-12) {
        const float inv = static_cast<float>(1.0 / std::sqrt(norm2));
        for (int k = 0; k < dim; ++k) rj[k] *= inv;
        break;
      }
      if (guard > 8) throw std::runtime_error("orthonormalize_rows: degenerate draw");
      for (int k = 0; k < dim; ++k) rj[k] = static_cast<float>(rng.normal());
    }
  }
}

}  // namespace detail

/// Zeroth-order estimate of the input gradient of the extraction loss.
///
/// The victim-dependent part is estimated by forward differences along m
/// random orthonormal unit directions per image, with the student's answers
/// held at their unperturbed values:
///   g_hat = (D / (m*eps)) * sum_i [loss(x + eps*u_i) - loss(x)] * u_i.
/// The student-dependent part is differentiated exactly through S and added.
/// Victim queries consumed: (m+1) * batch, atomically per sub-batch.
inline GradientEstimate estimate_input_gradient(Oracle& oracle, Detector<float>& student,
                                                const Tensor<float>& x, const LossWeights& w,
                                                ClsLossMode mode, const EstimatorConfig& cfg,
                                                Rng& rng) {
  cfg.validate();
  const int N = x.n();
  const int D = static_cast<int>(x.per_item());
  const int m = cfg.directions;
  const double eps = cfg.epsilon;

  GradientEstimate est;
  est.grad = Tensor<float>(x.shape[0], x.shape[1], x.shape[2], x.shape[3]);

  const auto base_dets = oracle.query(x);
  est.queries += N;
  auto s_out = student.forward(x, true);

  std::vector<double> base_loss(N);
  for (int i = 0; i < N; ++i) {
    base_loss[i] = item_total_loss<float>(base_dets[i].probs, base_dets[i].box,
                                          s_out.label.item(i), s_out.pre_label.item(i),
                                          s_out.box.item(i), w, mode);
    est.base_loss += base_loss[i] / N;
  }

  // Per-image accumulation in double; directions regenerated per block so a
  // frame never exceeds D vectors.
  std::vector<double> acc(static_cast<std::size_t>(N) * D, 0.0);
  std::vector<float> dirs;
  Tensor<float> xp(x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
  for (int done = 0; done < m;) {
    const int bs = std::min(m - done, D);
    dirs.resize(static_cast<std::size_t>(N) * bs * D);
    for (auto& v : dirs) v = static_cast<float>(rng.normal());
    for (int i = 0; i < N; ++i)
      detail::orthonormalize_rows(dirs.data() + static_cast<std::size_t>(i) * bs * D, bs, D,
                                  rng);
    for (int j = 0; j < bs; ++j) {
      for (int i = 0; i < N; ++i) {
        const float* u = dirs.data() + (static_cast<std::size_t>(i) * bs + j) * D;
        const float* xi = x.data() + static_cast<std::size_t>(i) * D;
        float* pi = xp.data() + static_cast<std::size_t>(i) * D;
        for (int k = 0; k < D; ++k) pi[k] = xi[k] + static_cast<float>(eps) * u[k];
      }
      const auto dets = oracle.query(xp);
      est.queries += N;
      for (int i = 0; i < N; ++i) {
        const double loss = item_total_loss<float>(dets[i].probs, dets[i].box,
                                                   s_out.label.item(i), s_out.pre_label.item(i),
                                                   s_out.box.item(i), w, mode);
        const double coef = loss - base_loss[i];
        const float* u = dirs.data() + (static_cast<std::size_t>(i) * bs + j) * D;
        double* a = acc.data() + static_cast<std::size_t>(i) * D;
        for (int k = 0; k < D; ++k) a[k] += coef * u[k];
      }
    }
    done += bs;
  }

  const double scale = static_cast<double>(D) / (m * eps);
  for (std::size_t k = 0; k < est.grad.size(); ++k)
    est.grad.v[k] = static_cast<float>(acc[k] * scale);

  // Exact student branch: d item-loss / d x through S, victim answers fixed.
  Tensor<float> v_probs, v_box;
  detections_to_tensors(base_dets, student.class_count(), v_probs, v_box);
  auto sg = student_loss_grads(v_probs, v_box, s_out, w, mode);
  // student_loss_grads carries the batch-mean 1/N factor; undo it to stay on
  // the per-image scale of the forward-difference term.
  auto upscale = [N](Tensor<float>& t) {
    for (auto& v : t.v) v *= static_cast<float>(N);
  };
  if (sg.dlabel.size()) upscale(sg.dlabel);
  if (sg.dbox.size()) upscale(sg.dbox);
  if (sg.dpre.size()) upscale(sg.dpre);
  Tensor<float> dx = student.backward_heads(sg.dlabel, sg.dbox, sg.dpre);
  for (std::size_t k = 0; k < est.grad.size(); ++k) est.grad.v[k] += dx.v[k];
  return est;
}

/// Chain an (estimated) image-space gradient through the attacker-owned
/// generator: fills parameter gradients, returns the latent gradient.
template <typename T>
Tensor<T> generator_backprop(Generator<T>& gen, const Tensor<T>& z,
                             const Tensor<T>& input_gradient) {
  Tensor<T> img = gen.forward(z, true);
  if (!img.same_shape(input_gradient))
    throw std::invalid_argument("generator_backprop: gradient shaped " +
                                input_gradient.shape_str() + ", generator output " +
                                img.shape_str());
  return gen.backward(input_gradient);
}

}  // namespace mimic
