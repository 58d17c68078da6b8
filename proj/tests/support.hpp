#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <unistd.h>

#include "resad/featio.hpp"

namespace resad::test {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("resad_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
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

inline std::string slurp(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void spit(const std::filesystem::path& p, const std::string& bytes) {
  std::ofstream os(p, std::ios::binary);
  os << bytes;
}

inline featio::FeatureStack random_stack(const std::vector<featio::LevelDims>& dims, std::mt19937_64& rng,
                                         double sigma = 1.0) {
  std::normal_distribution<double> g(0.0, sigma);
  featio::FeatureStack s;
  for (const auto& d : dims) {
    featio::FeatureMap m{d, std::vector<float>(d.size())};
    for (auto& v : m.data) v = float(g(rng));
    s.levels.push_back(std::move(m));
  }
  return s;
}

}  // namespace resad::test
