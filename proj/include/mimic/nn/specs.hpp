#pragma once

#include <array>
#include <fstream>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "mimic/codec.hpp"
#include "mimic/nn/layers.hpp"
#include "mimic/nn/network.hpp"
#include "mimic/rng.hpp"

namespace mimic {

struct LayerSpec {
  std::string kind;                // conv | tconv | dense | relu | lrelu | sigmoid |
                                   // maxpool | batchnorm | reshape
  std::map<std::string, int> arg;  // conv/tconv: out,k,s,p; dense: units; reshape: h,w,c
};

/// Declarative network description. For victim/student roles `layers` is the
/// trunk only — a Dense(class_count+4) head with split sigmoid activations is
/// appended by the builder. For the generator role `layers` is the full stack
/// and must end in a sigmoid producing the dataset image shape.
struct NetworkSpec {
  std::string role;  // victim | student | generator
  std::string name;
  int class_count = 3;
  int latent_dim = 0;  // generator only
  int input_side = 64;
  int input_channels = 3;
  std::vector<LayerSpec> layers;
};

inline void to_json(nlohmann::json& j, const LayerSpec& l) {
  j = {{"kind", l.kind}, {"arg", l.arg}};
}
inline void from_json(const nlohmann::json& j, LayerSpec& l) {
  j.at("kind").get_to(l.kind);
  if (j.contains("arg")) j.at("arg").get_to(l.arg);
}
inline void to_json(nlohmann::json& j, const NetworkSpec& s) {
  j = {{"role", s.role},           {"name", s.name},
       {"class_count", s.class_count}, {"latent_dim", s.latent_dim},
       {"input_side", s.input_side},   {"input_channels", s.input_channels},
       {"layers", s.layers}};
}
inline void from_json(const nlohmann::json& j, NetworkSpec& s) {
  j.at("role").get_to(s.role);
  j.at("name").get_to(s.name);
  j.at("class_count").get_to(s.class_count);
  j.at("latent_dim").get_to(s.latent_dim);
  j.at("input_side").get_to(s.input_side);
  j.at("input_channels").get_to(s.input_channels);
  j.at("layers").get_to(s.layers);
}

namespace detail {

inline int need_arg(const LayerSpec& l, const std::string& key) {
  auto it = l.arg.find(key);
  if (it == l.arg.end())
    throw std::invalid_argument("layer '" + l.kind + "' missing argument '" + key + "'");
  return it->second;
}

inline int opt_arg(const LayerSpec& l, const std::string& key, int fallback) {
  auto it = l.arg.find(key);
  return it == l.arg.end() ? fallback : it->second;
}

/// Instantiate one layer, updating the running per-item shape.
template <typename T>
std::unique_ptr<nn::Layer<T>> make_layer(const LayerSpec& l, std::array<int, 3>& hwc, Rng& rng) {
  std::unique_ptr<nn::Layer<T>> out;
  if (l.kind == "conv") {
    out = std::make_unique<nn::Conv2D<T>>(hwc[2], need_arg(l, "out"), need_arg(l, "k"),
                                          need_arg(l, "s"), need_arg(l, "p"), rng);
  } else if (l.kind == "tconv") {
    out = std::make_unique<nn::TConv2D<T>>(hwc[2], need_arg(l, "out"), need_arg(l, "k"),
                                           need_arg(l, "s"), need_arg(l, "p"), rng);
  } else if (l.kind == "dense") {
    out = std::make_unique<nn::Dense<T>>(hwc[0] * hwc[1] * hwc[2], need_arg(l, "units"), rng);
  } else if (l.kind == "relu") {
    out = std::make_unique<nn::ReLU<T>>();
  } else if (l.kind == "lrelu") {
    out = std::make_unique<nn::LeakyReLU<T>>(0.2);
  } else if (l.kind == "sigmoid") {
    out = std::make_unique<nn::Sigmoid<T>>();
  } else if (l.kind == "maxpool") {
    out = std::make_unique<nn::MaxPool2D<T>>(opt_arg(l, "k", 2), opt_arg(l, "s", 2));
  } else if (l.kind == "batchnorm") {
    out = std::make_unique<nn::BatchNorm<T>>(hwc[2]);
  } else if (l.kind == "reshape") {
    out = std::make_unique<nn::Reshape<T>>(need_arg(l, "h"), need_arg(l, "w"), need_arg(l, "c"));
  } else {
    throw std::invalid_argument("unknown layer kind '" + l.kind + "'");
  }
  hwc = out->out_hwc(hwc);
  return out;
}

}  // namespace detail

/// Build a detector (victim or student) from its spec; weights drawn from the
/// given seed, so equal (spec, seed) pairs give bit-identical networks.
template <typename T = float>
Detector<T> build_detector(const NetworkSpec& spec, std::uint64_t seed) {
  if (spec.role != "victim" && spec.role != "student")
    throw std::invalid_argument("build_detector: role '" + spec.role + "' is not a detector");
  if (spec.class_count < 2) throw std::invalid_argument("build_detector: class_count < 2");
  Rng rng(derive_seed(seed, 0x6e657477));
  std::array<int, 3> hwc{spec.input_side, spec.input_side, spec.input_channels};
  Detector<T> det(spec.class_count, hwc);
  try {
    for (const auto& l : spec.layers) det.net().add(detail::make_layer<T>(l, hwc, rng));
    LayerSpec head{"dense", {{"units", spec.class_count + 4}}};
    det.net().add(detail::make_layer<T>(head, hwc, rng));
  } catch (const std::exception& e) {
    throw std::invalid_argument("spec '" + spec.name + "': " + e.what());
  }
  return det;
}

template <typename T = float>
Generator<T> build_generator(const NetworkSpec& spec, std::uint64_t seed) {
  if (spec.role != "generator")
    throw std::invalid_argument("build_generator: role '" + spec.role + "' is not a generator");
  if (spec.latent_dim < 1) throw std::invalid_argument("build_generator: latent_dim < 1");
  if (spec.layers.empty() || spec.layers.back().kind != "sigmoid")
    throw std::invalid_argument("build_generator: stack must end in sigmoid");
  Rng rng(derive_seed(seed, 0x67656e65));
  std::array<int, 3> hwc{1, 1, spec.latent_dim};
  Generator<T> gen(spec.latent_dim,
                   {spec.input_side, spec.input_side, spec.input_channels});
  try {
    for (const auto& l : spec.layers) gen.net().add(detail::make_layer<T>(l, hwc, rng));
  } catch (const std::exception& e) {
    throw std::invalid_argument("spec '" + spec.name + "': " + e.what());
  }
  if (hwc != std::array<int, 3>{spec.input_side, spec.input_side, spec.input_channels})
    throw std::invalid_argument("build_generator: spec '" + spec.name + "' produces " +
                                std::to_string(hwc[0]) + "x" + std::to_string(hwc[1]) + "x" +
                                std::to_string(hwc[2]) + ", dataset needs " +
                                std::to_string(spec.input_side) + "x" +
                                std::to_string(spec.input_side) + "x" +
                                std::to_string(spec.input_channels));
  return gen;
}

/// Named presets. Two distinct victims and two distinct students support
/// same-architecture and cross-architecture extraction pairs.
inline NetworkSpec preset_spec(const std::string& name) {
  auto conv = [](int out, int k, int s, int p) {
    return LayerSpec{"conv", {{"out", out}, {"k", k}, {"s", s}, {"p", p}}};
  };
  auto tconv = [](int out) {
    return LayerSpec{"tconv", {{"out", out}, {"k", 4}, {"s", 2}, {"p", 1}}};
  };
  auto dense = [](int units) { return LayerSpec{"dense", {{"units", units}}}; };
  const LayerSpec relu{"relu", {}};
  const LayerSpec bnorm{"batchnorm", {}};

  NetworkSpec s;
  s.name = name;
  if (name == "victim-a" || name == "student-a") {
    s.role = name == "victim-a" ? "victim" : "student";
    s.layers = {conv(8, 3, 2, 1),  relu, conv(16, 3, 2, 1), relu,
                conv(32, 3, 2, 1), relu, conv(32, 3, 2, 1), relu,
                dense(64),         relu};
  } else if (name == "victim-b") {
    s.role = "victim";
    s.layers = {conv(12, 3, 1, 1), relu, LayerSpec{"maxpool", {}},
                conv(24, 3, 1, 1), relu, LayerSpec{"maxpool", {}},
                conv(48, 3, 2, 1), relu, LayerSpec{"maxpool", {}},
                dense(96),         relu};
  } else if (name == "student-b") {
    s.role = "student";
    s.layers = {conv(6, 5, 2, 2),  relu, conv(12, 3, 2, 1), relu,
                conv(24, 3, 2, 1), relu, conv(48, 3, 2, 1), relu,
                dense(48),         relu};
  } else if (name == "generator-a") {
    s.role = "generator";
    s.latent_dim = 256;
    s.layers = {dense(4 * 4 * 64),
                LayerSpec{"reshape", {{"h", 4}, {"w", 4}, {"c", 64}}},
                bnorm, relu, tconv(32), bnorm, relu, tconv(16),
                bnorm, relu, tconv(8),  bnorm, relu, tconv(3),
                LayerSpec{"sigmoid", {}}};
  } else {
    throw std::invalid_argument("unknown network preset '" + name +
                                "' (victim-a, victim-b, student-a, student-b, generator-a)");
  }
  return s;
}

inline std::vector<std::string> preset_names() {
  return {"victim-a", "victim-b", "student-a", "student-b", "generator-a"};
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON with the embedded spec and zlib+base64 parameter blobs.

namespace detail {

template <typename T>
nlohmann::json params_to_json(std::vector<nn::ParamRef<T>> params) {
  nlohmann::json arr = nlohmann::json::array();
  for (auto& p : params) {
    auto packed = zlib_compress(reinterpret_cast<const std::uint8_t*>(p.value->data()),
                                p.value->size() * sizeof(T));
    arr.push_back({{"name", p.name},
                   {"dtype", dtype_name<T>()},
                   {"size", p.value->size()},
                   {"data", base64_encode(packed.data(), packed.size())}});
  }
  return arr;
}

template <typename T>
void params_from_json(const nlohmann::json& arr, std::vector<nn::ParamRef<T>> params,
                      const std::string& what) {
  if (arr.size() != params.size())
    throw std::runtime_error(what + ": holds " + std::to_string(arr.size()) +
                             " tensors, network has " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = arr[i];
    if (e.at("name").get<std::string>() != params[i].name)
      throw std::runtime_error(what + ": tensor '" + e.at("name").get<std::string>() +
                               "' does not match network parameter '" + params[i].name + "'");
    if (e.at("dtype").get<std::string>() != dtype_name<T>())
      throw std::runtime_error(what + ": dtype mismatch for " + params[i].name);
    if (e.at("size").get<std::size_t>() != params[i].value->size())
      throw std::runtime_error(what + ": size mismatch for " + params[i].name);
    auto raw = zlib_decompress(base64_decode(e.at("data").get<std::string>()),
                               params[i].value->size() * sizeof(T));
    if (raw.size() != params[i].value->size() * sizeof(T))
      throw std::runtime_error(what + ": payload size mismatch for " + params[i].name);
    std::memcpy(params[i].value->data(), raw.data(), raw.size());
  }
}

inline nlohmann::json read_checkpoint_file(const std::string& path, const std::string& role) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open checkpoint '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint '" + path + "' is not valid JSON: " + e.what());
  }
  if (j.value("format", "") != "mimic-ckpt-v1")
    throw std::runtime_error("checkpoint '" + path + "' has unknown format tag");
  const auto got = j.at("spec").at("role").get<std::string>();
  const bool ok = role == "detector" ? (got == "victim" || got == "student") : got == role;
  if (!ok)
    throw std::runtime_error("checkpoint '" + path + "' holds a " + got + ", expected " + role);
  return j;
}

inline void write_checkpoint_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint '" + path + "'");
  out << j.dump();
  out << '\n';
  if (!out) throw std::runtime_error("write failed for checkpoint '" + path + "'");
}

}  // namespace detail

template <typename T>
void save_detector(const std::string& path, const NetworkSpec& spec, Detector<T>& det) {
  nlohmann::json j{{"format", "mimic-ckpt-v1"},
                   {"spec", spec},
                   {"checksum", det.checksum()},
                   {"params", detail::params_to_json(det.params())}};
  detail::write_checkpoint_file(path, j);
}

template <typename T>
void save_generator(const std::string& path, const NetworkSpec& spec, Generator<T>& gen) {
  nlohmann::json j{{"format", "mimic-ckpt-v1"},
                   {"spec", spec},
                   {"checksum", gen.checksum()},
                   {"params", detail::params_to_json(gen.params())}};
  detail::write_checkpoint_file(path, j);
}

template <typename T = float>
struct LoadedDetector {
  NetworkSpec spec;
  Detector<T> net;
};

/// role: "victim", "student", or "detector" (accepts either detector role).
template <typename T = float>
LoadedDetector<T> load_detector(const std::string& path, const std::string& role = "detector") {
  auto j = detail::read_checkpoint_file(path, role);
  NetworkSpec spec = j.at("spec").get<NetworkSpec>();
  LoadedDetector<T> out{spec, build_detector<T>(spec, 0)};
  detail::params_from_json(j.at("params"), out.net.params(), "checkpoint '" + path + "'");
  if (j.contains("checksum") && j.at("checksum").get<std::uint64_t>() != out.net.checksum())
    throw std::runtime_error("checkpoint '" + path + "' failed its weight checksum");
  return out;
}

template <typename T = float>
struct LoadedGenerator {
  NetworkSpec spec;
  Generator<T> net;
};

template <typename T = float>
LoadedGenerator<T> load_generator(const std::string& path) {
  auto j = detail::read_checkpoint_file(path, "generator");
  NetworkSpec spec = j.at("spec").get<NetworkSpec>();
  LoadedGenerator<T> out{spec, build_generator<T>(spec, 0)};
  detail::params_from_json(j.at("params"), out.net.params(), "checkpoint '" + path + "'");
  if (j.contains("checksum") && j.at("checksum").get<std::uint64_t>() != out.net.checksum())
    throw std::runtime_error("checkpoint '" + path + "' failed its weight checksum");
  return out;
}

}  // namespace mimic
