#pragma once

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ecglang/common.hpp"
#include "ecglang/io.hpp"
#include "ecglang/nn.hpp"
#include "ecglang/tensor.hpp"

namespace ecglang::ckpt {

// Checkpoint layout: "ECGL" magic, u32 format version, u64 header length,
// JSON header, then one little-endian float32 blob holding every tensor at
// the offsets the header declares.

inline constexpr char kMagic[4] = {'E', 'C', 'G', 'L'};
inline constexpr uint32_t kVersion = 1;

struct Checkpoint {
  std::string kind;        // producer stage, e.g. "wave_ae", "encoder"
  nlohmann::json config;   // stage config snapshot
  nlohmann::json extra;    // optional metadata (loss history, seeds)
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const Tensor<float>& tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return t;
    throw DataError("checkpoint: missing tensor " + name);
  }
  bool has_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
      if (n == name) return true;
    return false;
  }
};

template <typename T>
inline Checkpoint make_checkpoint(const std::string& kind,
                                  const nlohmann::json& config,
                                  const nn::ParamStore<T>& params,
                                  const nlohmann::json& extra = {}) {
  Checkpoint c;
  c.kind = kind;
  c.config = config;
  c.extra = extra;
  for (const auto& e : params.entries())
    c.tensors.emplace_back(e.name, e.value.template cast<float>());
  return c;
}

inline void save_checkpoint(const Checkpoint& c,
                            const std::filesystem::path& path) {
  nlohmann::json header;
  header["kind"] = c.kind;
  header["config"] = c.config;
  if (!c.extra.is_null()) header["extra"] = c.extra;

  int64_t offset = 0;
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& [name, t] : c.tensors) {
    if (!t.all_finite())
      throw NumericError("checkpoint: non-finite tensor " + name);
    nlohmann::json entry;
    entry["name"] = name;
    entry["shape"] = t.shape();
    entry["offset"] = offset;
    entry["numel"] = t.numel();
    manifest.push_back(entry);
    offset += t.numel();
  }
  header["tensors"] = manifest;

  std::string hjson = header.dump();
  std::vector<uint8_t> out;
  out.reserve(16 + hjson.size() + static_cast<size_t>(offset) * 4);
  out.insert(out.end(), kMagic, kMagic + 4);
  io::append_u32le(out, kVersion);
  io::append_u64le(out, hjson.size());
  out.insert(out.end(), hjson.begin(), hjson.end());
  for (const auto& [name, t] : c.tensors)
    for (int64_t i = 0; i < t.numel(); ++i) io::append_f32le(out, t.data()[i]);
  io::write_binary_atomic(path, out.data(), out.size());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  auto bytes = io::read_binary(path);
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw DataError("not a checkpoint file: " + path.string());
  uint32_t version = io::read_u32le(bytes.data() + 4);
  if (version != kVersion)
    throw DataError(str_format("checkpoint %s: unsupported version %u",
                               path.string().c_str(), version));
  uint64_t hlen = io::read_u64le(bytes.data() + 8);
  if (16 + hlen > bytes.size())
    throw DataError("checkpoint header overruns file: " + path.string());

  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16,
                                   bytes.begin() + 16 + hlen);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint header in " + path.string() + ": " +
                    e.what());
  }

  Checkpoint c;
  const uint8_t* blob = bytes.data() + 16 + hlen;
  size_t blob_floats = (bytes.size() - 16 - hlen) / 4;
  try {
    c.kind = header.at("kind").get<std::string>();
    c.config = header.at("config");
    if (header.contains("extra")) c.extra = header["extra"];
    for (const auto& entry : header.at("tensors")) {
      std::string name = entry.at("name").get<std::string>();
      Shape shape = entry.at("shape").get<Shape>();
      int64_t offset = entry.at("offset").get<int64_t>();
      int64_t numel = entry.at("numel").get<int64_t>();
      Tensor<float> t(shape);
      if (t.numel() != numel)
        throw DataError("checkpoint tensor " + name + ": shape/numel mismatch");
      if (offset < 0 ||
          static_cast<uint64_t>(offset + numel) > blob_floats)
        throw DataError("checkpoint tensor " + name + ": blob overrun");
      for (int64_t i = 0; i < numel; ++i)
        t.data()[i] = io::read_f32le(blob + (offset + i) * 4);
      c.tensors.emplace_back(std::move(name), std::move(t));
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed checkpoint header in " + path.string() + ": " +
                    e.what());
  }
  return c;
}

// Restores checkpoint tensors into an already-built store. The store defines
// the expected names and shapes; the checkpoint must cover all of them.
template <typename T>
inline void load_into(const Checkpoint& c, nn::ParamStore<T>& params) {
  for (auto& e : params.entries()) {
    const Tensor<float>& src = c.tensor(e.name);
    if (src.shape() != e.value.shape())
      throw DataError("checkpoint tensor " + e.name + ": shape mismatch");
    for (int64_t i = 0; i < src.numel(); ++i)
      e.value.data()[i] = static_cast<T>(src.data()[i]);
  }
}

}  // namespace ecglang::ckpt
