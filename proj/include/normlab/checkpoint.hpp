// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <string>

#include "normlab/data.hpp"
#include "normlab/model.hpp"

// Checkpoint layout:
//   magic "NLCK1\0" (6 bytes)
//   u64 little-endian header length
//   JSON header: {"format", "config", "step", "tensors": [{name, shape, offset}]}
//   tensor data: little-endian f32, offsets in bytes from the start of this section
namespace normlab {

inline constexpr std::array<char, 6> kCheckpointMagic = {'N', 'L', 'C', 'K', '1', '\0'};

template <class Real>
struct LoadedCheckpoint {
  Model<Real> model;
  std::uint64_t step = 0;
  nlohmann::json header;
};

namespace detail {

inline void put_f32(std::string& out, float f) { put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(f)); }

// Writes to a sibling temp file, then renames over the target.
inline void write_atomic(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace detail

template <class Real>
std::string encode_checkpoint(const Model<Real>& model, std::uint64_t step) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& p : model.params()) {
    tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}});
    offset += 4 * p.value.size();
  }
  const nlohmann::json header = {
      {"format", "NLCK1"}, {"config", model.config().to_json()}, {"step", step}, {"tensors", tensors}};
  const std::string hs = header.dump();
  std::string out(kCheckpointMagic.begin(), kCheckpointMagic.end());
  detail::put_le<std::uint64_t>(out, hs.size());
  out += hs;
  out.reserve(out.size() + offset);
  for (const auto& p : model.params())
    for (Real v : p.value.values()) detail::put_f32(out, static_cast<float>(v));
  return out;
}

template <class Real>
void save_checkpoint(const Model<Real>& model, std::uint64_t step, const std::filesystem::path& path) {
  detail::write_atomic(path, encode_checkpoint(model, step));
}

template <class Real>
LoadedCheckpoint<Real> decode_checkpoint(std::string_view data, const std::string& source = "checkpoint") {
  if (data.size() < 14 || std::memcmp(data.data(), kCheckpointMagic.data(), kCheckpointMagic.size()) != 0)
    throw FormatError(source + ": bad checkpoint magic");
  const auto* p = reinterpret_cast<const unsigned char*>(data.data());
  const auto hlen = detail::get_le<std::uint64_t>(p + 6);
  if (hlen > data.size() - 14) throw FormatError(source + ": header length exceeds file size");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(data.substr(14, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(source + ": corrupt checkpoint header: " + e.what());
  }
  if (header.value("format", "") != "NLCK1" || !header.contains("config") || !header.contains("tensors"))
    throw FormatError(source + ": checkpoint header is missing fields");
  ModelConfig cfg;
  try {
    cfg = ModelConfig::from_json(header.at("config"));
    cfg.validate();
  } catch (const ConfigError& e) {
    throw FormatError(source + ": " + e.what());
  }
  LoadedCheckpoint<Real> out{Model<Real>(cfg, 0), header.value("step", std::uint64_t{0}), header};
  const auto& dir = header.at("tensors");
  auto& params = out.model.params();
  if (dir.size() != params.size())
    throw FormatError(source + ": checkpoint has " + std::to_string(dir.size()) + " tensors, config implies " +
                      std::to_string(params.size()));
  const std::size_t base = 14 + hlen;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = dir[i];
    auto& prm = params[i];
    const auto name = e.value("name", std::string());
    const auto shape = e.value("shape", Shape{});
    if (name != prm.name || shape != prm.value.shape())
      throw FormatError(source + ": tensor '" + name + "' " + to_string(shape) + " does not match '" + prm.name +
                        "' " + to_string(prm.value.shape()) + " implied by the config");
    const std::size_t off = base + e.value("offset", std::size_t{0});
    if (off + 4 * prm.value.size() > data.size()) throw FormatError(source + ": tensor '" + name + "' is truncated");
    Real* dst = prm.value.data();
    for (std::size_t k = 0; k < prm.value.size(); ++k)
      dst[k] = static_cast<Real>(std::bit_cast<float>(detail::get_le<std::uint32_t>(p + off + 4 * k)));
  }
  return out;
}

template <class Real>
LoadedCheckpoint<Real> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<Real>(detail::read_file(path), path.string());
}

}  // namespace normlab
