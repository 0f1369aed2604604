#pragma once

#include <atomic>
#include <filesystem>
#include <random>
#include <string>
#include <unistd.h>

#include "cellstyle/imaging.hpp"

namespace cellstyle::testing {

/// Unique scratch directory removed on destruction.
class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("cellstyle_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
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

inline void paint_rect(InstanceMask& m, int r0, int c0, int h, int w, std::int32_t label) {
  for (int r = r0; r < r0 + h; ++r)
    for (int c = c0; c < c0 + w; ++c) m.at(r, c) = label;
}

/// Random label image with up to max_objects axis-aligned rectangles
/// (later rectangles overwrite earlier ones).
inline InstanceMask random_rect_mask(std::mt19937& rng, int size, int max_objects) {
  InstanceMask m(size, size);
  std::uniform_int_distribution<int> count(0, max_objects);
  std::uniform_int_distribution<int> pos(0, size - 2);
  const int n = count(rng);
  for (int k = 1; k <= n; ++k) {
    const int r = pos(rng), c = pos(rng);
    std::uniform_int_distribution<int> hd(1, size - r), wd(1, size - c);
    paint_rect(m, r, c, std::min(hd(rng), 12), std::min(wd(rng), 12), k);
  }
  return m;
}

}  // namespace cellstyle::testing
