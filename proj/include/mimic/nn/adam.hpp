#pragma once

#include <cmath>
#include <cstring>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "mimic/codec.hpp"
#include "mimic/nn/layers.hpp"

namespace mimic::nn {

/// Adam with bias correction. The learning rate is supplied per step so an
/// external schedule can drive it without touching optimizer state.
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<ParamRef<T>> params, double beta1 = 0.9, double beta2 = 0.999,
                double eps = 1e-8)
      : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(params_.size());
    v_.reserve(params_.size());
    for (auto& p : params_) {
      m_.emplace_back(p.value->size(), T(0));
      v_.emplace_back(p.value->size(), T(0));
    }
  }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& w = *params_[i].value;
      auto& g = *params_[i].grad;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = static_cast<T>(beta1_ * m[j] + (1.0 - beta1_) * g[j]);
        v[j] = static_cast<T>(beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j]);
        const double mh = m[j] / c1, vh = v[j] / c2;
        w[j] -= static_cast<T>(lr * mh / (std::sqrt(vh) + eps_));
      }
    }
  }

  long long steps() const { return t_; }

  nlohmann::json state_to_json() const {
    nlohmann::json moments = nlohmann::json::array();
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto enc = [](const std::vector<T>& v) {
        auto packed =
            zlib_compress(reinterpret_cast<const std::uint8_t*>(v.data()), v.size() * sizeof(T));
        return base64_encode(packed.data(), packed.size());
      };
      moments.push_back({{"name", params_[i].name}, {"m", enc(m_[i])}, {"v", enc(v_[i])}});
    }
    return {{"t", t_}, {"moments", moments}};
  }

  void restore_state(const nlohmann::json& j) {
    const auto& moments = j.at("moments");
    if (moments.size() != params_.size())
      throw std::runtime_error("Adam: state holds " + std::to_string(moments.size()) +
                               " tensors, optimizer has " + std::to_string(params_.size()));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      const auto& e = moments[i];
      if (e.at("name").get<std::string>() != params_[i].name)
        throw std::runtime_error("Adam: state name mismatch at " + params_[i].name);
      const auto dec = [](const std::string& s, std::vector<T>& out) {
        auto raw = zlib_decompress(base64_decode(s), out.size() * sizeof(T));
        if (raw.size() != out.size() * sizeof(T))
          throw std::runtime_error("Adam: state tensor size mismatch");
        std::memcpy(out.data(), raw.data(), raw.size());
      };
      dec(e.at("m").get<std::string>(), m_[i]);
      dec(e.at("v").get<std::string>(), v_[i]);
    }
    t_ = j.at("t").get<long long>();
  }

 private:
  std::vector<ParamRef<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  double beta1_, beta2_, eps_;
  long long t_ = 0;
};

}  // namespace mimic::nn
