#pragma once

// Tensor archive: magic "HTA1", u64 little-endian header length, a UTF-8
// JSON header mapping tensor names to {dtype, shape, offset, nbytes}, then
// the raw little-endian payload. Offsets are relative to the payload start.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "attnscope/error.hpp"
#include "attnscope/tensor.hpp"

namespace attnscope::archive {

static_assert(std::endian::native == std::endian::little,
              "archive I/O assumes a little-endian host");

inline constexpr char kMagic[4] = {'H', 'T', 'A', '1'};

enum class DType { F32, F64 };

inline const char* dtype_name(DType t) { return t == DType::F32 ? "f32" : "f64"; }

/// Name-sorted tensor collection; iteration order is the on-disk order.
using TensorMap = std::map<std::string, Tensor>;

inline std::string encode(const TensorMap& tensors, DType dtype = DType::F64) {
  const std::size_t width = dtype == DType::F32 ? 4 : 8;
  nlohmann::json header = nlohmann::json::object();
  std::string payload;
  for (const auto& [name, t] : tensors) {
    const std::size_t nbytes = t.numel() * width;
    header[name] = {{"dtype", dtype_name(dtype)},
                    {"shape", t.shape()},
                    {"offset", payload.size()},
                    {"nbytes", nbytes}};
    const std::size_t at = payload.size();
    payload.resize(at + nbytes);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      if (dtype == DType::F32) {
        const float v = static_cast<float>(t[i]);
        std::memcpy(payload.data() + at + i * 4, &v, 4);
      } else {
        const double v = t[i];
        std::memcpy(payload.data() + at + i * 8, &v, 8);
      }
    }
  }
  const std::string head = header.dump();
  std::string out(kMagic, 4);
  const std::uint64_t len = head.size();
  out.append(reinterpret_cast<const char*>(&len), 8);
  out += head;
  out += payload;
  return out;
}

/// Parses an archive image; f32 payloads are widened exactly to double.
inline TensorMap decode(const std::string& bytes, const std::string& origin = "archive") {
  if (bytes.size() < 12 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw FormatError(origin + ": missing HTA1 magic");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 4, 8);
  if (len > bytes.size() - 12) throw FormatError(origin + ": truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + static_cast<std::ptrdiff_t>(len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(origin + ": bad header JSON: " + e.what());
  }
  if (!header.is_object()) throw FormatError(origin + ": header is not an object");
  const std::size_t base = 12 + len;
  const std::size_t payload = bytes.size() - base;

  TensorMap out;
  for (const auto& [name, entry] : header.items()) {
    try {
      const auto dtype = entry.at("dtype").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::size_t>();
      const auto nbytes = entry.at("nbytes").get<std::size_t>();
      std::size_t width = 0;
      if (dtype == "f32") width = 4;
      else if (dtype == "f64") width = 8;
      else throw FormatError(origin + ": tensor '" + name + "' has unsupported dtype " + dtype);
      const std::size_t n = shape_numel(shape);
      if (nbytes != n * width) {
        throw FormatError(origin + ": tensor '" + name + "' nbytes " + std::to_string(nbytes) +
                          " inconsistent with shape " + shape_string(shape));
      }
      if (offset > payload || nbytes > payload - offset) {
        throw FormatError(origin + ": tensor '" + name + "' runs past end of file (truncated?)");
      }
      std::vector<double> data(n);
      const char* src = bytes.data() + base + offset;
      for (std::size_t i = 0; i < n; ++i) {
        if (width == 4) {
          float v;
          std::memcpy(&v, src + i * 4, 4);
          data[i] = static_cast<double>(v);
        } else {
          std::memcpy(&data[i], src + i * 8, 8);
        }
      }
      out.emplace(name, Tensor(shape, std::move(data)));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(origin + ": bad header entry '" + name + "': " + e.what());
    }
  }
  return out;
}

inline void write(const std::filesystem::path& path, const TensorMap& tensors,
                  DType dtype = DType::F64) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path.string() + " for writing");
  const std::string bytes = encode(tensors, dtype);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing " + path.string());
}

inline TensorMap read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode(ss.str(), path.string());
}

}  // namespace attnscope::archive
