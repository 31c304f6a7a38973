#pragma once

#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include <zlib.h>

#include <json.hpp>

#include "mimic/tensor.hpp"

namespace mimic {

inline std::string base64_encode(const std::uint8_t* data, std::size_t len) {
  static const char tbl[] = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((len + 2) / 3 * 4);
  std::size_t i = 0;
  for (; i + 2 < len; i += 3) {
    std::uint32_t v = (data[i] << 16) | (data[i + 1] << 8) | data[i + 2];
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(tbl[(v >> 6) & 63]);
    out.push_back(tbl[v & 63]);
  }
  if (i + 1 == len) {
    std::uint32_t v = data[i] << 16;
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out += "==";
  } else if (i + 2 == len) {
    std::uint32_t v = (data[i] << 16) | (data[i + 1] << 8);
    out.push_back(tbl[(v >> 18) & 63]);
    out.push_back(tbl[(v >> 12) & 63]);
    out.push_back(tbl[(v >> 6) & 63]);
    out.push_back('=');
  }
  return out;
}

inline std::vector<std::uint8_t> base64_decode(const std::string& s) {
  auto val = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<std::uint8_t> out;
  out.reserve(s.size() / 4 * 3);
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : s) {
    if (c == '=') break;
    int d = val(c);
    if (d < 0) throw std::invalid_argument("base64_decode: invalid character");
    acc = (acc << 6) | static_cast<std::uint32_t>(d);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<std::uint8_t>((acc >> bits) & 0xff));
    }
  }
  return out;
}

inline std::vector<std::uint8_t> zlib_compress(const std::uint8_t* data, std::size_t len) {
  uLongf bound = compressBound(static_cast<uLong>(len));
  std::vector<std::uint8_t> out(bound);
  if (compress2(out.data(), &bound, data, static_cast<uLong>(len), 6) != Z_OK)
    throw std::runtime_error("zlib_compress failed");
  out.resize(bound);
  return out;
}

inline std::vector<std::uint8_t> zlib_decompress(const std::vector<std::uint8_t>& in,
                                                 std::size_t expected_len) {
  std::vector<std::uint8_t> out(expected_len);
  uLongf n = static_cast<uLongf>(expected_len);
  if (uncompress(out.data(), &n, in.data(), static_cast<uLong>(in.size())) != Z_OK ||
      n != expected_len)
    throw std::runtime_error("zlib_decompress failed");
  return out;
}

template <typename T>
const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>) return "float32";
  else if constexpr (std::is_same_v<T, double>) return "float64";
  else return "unknown";
}

/// Wire/checkpoint encoding of a tensor: dtype, shape, zlib-compressed
/// little-endian payload in base64.
template <typename T>
nlohmann::json tensor_to_json(const Tensor<T>& t) {
  auto bytes = reinterpret_cast<const std::uint8_t*>(t.data());
  auto packed = zlib_compress(bytes, t.size() * sizeof(T));
  return {{"dtype", dtype_name<T>()},
          {"shape", {t.shape[0], t.shape[1], t.shape[2], t.shape[3]}},
          {"data", base64_encode(packed.data(), packed.size())}};
}

template <typename T>
Tensor<T> tensor_from_json(const nlohmann::json& j) {
  if (!j.contains("dtype") || !j.contains("shape") || !j.contains("data"))
    throw std::invalid_argument("tensor_from_json: missing field");
  if (j.at("dtype").get<std::string>() != dtype_name<T>())
    throw std::invalid_argument("tensor_from_json: dtype mismatch, expected " +
                                std::string(dtype_name<T>()) + " got " +
                                j.at("dtype").get<std::string>());
  auto shp = j.at("shape").get<std::vector<int>>();
  if (shp.size() != 4) throw std::invalid_argument("tensor_from_json: shape must have rank 4");
  Tensor<T> t(shp[0], shp[1], shp[2], shp[3]);
  auto packed = base64_decode(j.at("data").get<std::string>());
  auto raw = zlib_decompress(packed, t.size() * sizeof(T));
  std::memcpy(t.data(), raw.data(), raw.size());
  return t;
}

}  // namespace mimic
