// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <unistd.h>

#include "normlab/normlab.hpp"

namespace normlab::test {

inline Tensor<double> randn(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  CounterRng rng(seed);
  for (double& v : t.values()) v = scale * rng.normal();
  return t;
}

inline Tensor<float> randn_f(Shape shape, std::uint64_t seed, double scale = 1.0) {
  Tensor<float> t(std::move(shape));
  CounterRng rng(seed);
  for (float& v : t.values()) v = static_cast<float>(scale * rng.normal());
  return t;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("normlab_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline ModelConfig micro_config(std::size_t layers = 1, std::size_t d = 8, std::size_t heads = 2,
                                std::size_t vocab = 11, std::size_t block = 6) {
  ModelConfig c;
  c.n_layer = layers;
  c.d_model = d;
  c.n_head = heads;
  c.vocab_size = vocab;
  c.block_size = block;
  return c;
}

}  // namespace normlab::test
