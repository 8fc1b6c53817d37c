#pragma once

#include <unistd.h>

#include <filesystem>
#include <random>
#include <string>

#include "patchtl/rng.hpp"
#include "patchtl/tensor.hpp"

namespace testing_support {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("patchtl_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline patchtl::Tensor random_tensor(patchtl::Shape shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  patchtl::Rng rng(seed);
  patchtl::Tensor t(std::move(shape));
  for (auto& v : t.vec()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

}  // namespace testing_support
