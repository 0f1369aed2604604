#pragma once

// Image and instance-mask rasters: file I/O, rescaling, connected components
// and per-instance shape statistics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>

#include "cellstyle/error.hpp"

namespace cellstyle {

/// Row-major 2D array.
template <class T>
class Grid {
 public:
  Grid() = default;
  Grid(int height, int width, T fill = T{}) : height_(height), width_(width) {
    if (height < 1 || width < 1)
      throw InvalidArgument("grid dimensions must be positive, got " +
                            std::to_string(height) + "x" + std::to_string(width));
    data_.assign(static_cast<std::size_t>(height) * width, fill);
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T& at(int r, int c) { return data_[static_cast<std::size_t>(r) * width_ + c]; }
  const T& at(int r, int c) const {
    return data_[static_cast<std::size_t>(r) * width_ + c];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  bool operator==(const Grid&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<T> data_;
};

using BinaryMask = Grid<std::uint8_t>;

/// Label map; 0 is background, every positive value is one instance.
class InstanceMask : public Grid<std::int32_t> {
 public:
  using Grid<std::int32_t>::Grid;
  InstanceMask() = default;
  explicit InstanceMask(Grid<std::int32_t> g) : Grid<std::int32_t>(std::move(g)) {}

  /// Sorted distinct positive labels.
  std::vector<std::int32_t> labels() const {
    std::vector<std::int32_t> out;
    for (auto v : values())
      if (v > 0) out.push_back(v);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
  std::size_t instance_count() const { return labels().size(); }
};

/// H x W x C raster with values in [0, 1], channels interleaved.
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels = 1, float fill = 0.f)
      : height_(height), width_(width), channels_(channels) {
    if (height < 1 || width < 1)
      throw InvalidArgument("image dimensions must be positive");
    if (channels != 1 && channels != 3)
      throw InvalidArgument("image must have 1 or 3 channels, got " +
                            std::to_string(channels));
    data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
  }

  int height() const noexcept { return height_; }
  int width() const noexcept { return width_; }
  int channels() const noexcept { return channels_; }
  bool empty() const noexcept { return data_.empty(); }

  float& at(int r, int c, int ch = 0) {
    return data_[(static_cast<std::size_t>(r) * width_ + c) * channels_ + ch];
  }
  float at(int r, int c, int ch = 0) const {
    return data_[(static_cast<std::size_t>(r) * width_ + c) * channels_ + ch];
  }

  std::span<float> pixels() noexcept { return data_; }
  std::span<const float> pixels() const noexcept { return data_; }

  const std::string& source_path() const noexcept { return source_path_; }
  void set_source_path(std::string p) { source_path_ = std::move(p); }

  /// Clamps to [0,1]; non-finite values become an error.
  void normalize() {
    for (auto& v : data_) {
      if (!std::isfinite(v)) throw ComputeError("image contains non-finite values");
      v = std::clamp(v, 0.f, 1.f);
    }
  }

 private:
  int height_ = 0;
  int width_ = 0;
  int channels_ = 0;
  std::vector<float> data_;
  std::string source_path_;
};

struct InstanceStats {
  std::int32_t label = 0;
  std::int64_t area = 0;
  double equivalent_diameter = 0.0;
  double centroid_row = 0.0;
  double centroid_col = 0.0;
};

enum class Interpolation { nearest, bilinear };

inline double equivalent_diameter(double area) {
  return 2.0 * std::sqrt(area / std::numbers::pi);
}

namespace detail {

inline void require_exists(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FileNotFound(path.string());
}

inline void write_mat(const cv::Mat& m, const std::filesystem::path& path) {
  bool ok = false;
  try {
    ok = cv::imwrite(path.string(), m);
  } catch (const cv::Exception& e) {
    throw WriteError("cannot write " + path.string() + ": " + e.what());
  }
  if (!ok) throw WriteError("cannot write " + path.string());
}

// Source coordinate for output index i with half-pixel centers.
inline double source_coord(int i, double scale) { return (i + 0.5) * scale - 0.5; }

}  // namespace detail

inline Image load_image(const std::filesystem::path& path) {
  detail::require_exists(path);
  cv::Mat m;
  try {
    m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    throw DecodeError("cannot decode " + path.string() + ": " + e.what());
  }
  if (m.empty()) throw DecodeError("cannot decode " + path.string());

  double max_value = 0.0;
  switch (m.depth()) {
    case CV_8U: max_value = 255.0; break;
    case CV_16U: max_value = 65535.0; break;
    default:
      throw UnsupportedBitDepth("unsupported pixel depth in " + path.string() +
                                " (only 8- and 16-bit integer rasters)");
  }
  const int in_ch = m.channels();
  if (in_ch != 1 && in_ch != 3 && in_ch != 4)
    throw DecodeError("unsupported channel count " + std::to_string(in_ch) + " in " +
                      path.string());
  const int out_ch = in_ch == 1 ? 1 : 3;

  cv::Mat as_double;
  m.convertTo(as_double, CV_MAKETYPE(CV_64F, in_ch), 1.0 / max_value);
  Image img(m.rows, m.cols, out_ch);
  for (int r = 0; r < m.rows; ++r) {
    const double* row = as_double.ptr<double>(r);
    for (int c = 0; c < m.cols; ++c) {
      if (out_ch == 1) {
        img.at(r, c) = static_cast<float>(row[c]);
      } else {
        // OpenCV stores BGR(A).
        for (int ch = 0; ch < 3; ++ch)
          img.at(r, c, ch) = static_cast<float>(row[c * in_ch + (2 - ch)]);
      }
    }
  }
  img.set_source_path(path.string());
  return img;
}

inline void save_image(const Image& image, const std::filesystem::path& path,
                       int bit_depth = 16) {
  if (bit_depth != 8 && bit_depth != 16)
    throw UnsupportedBitDepth("bit depth must be 8 or 16, got " + std::to_string(bit_depth));
  if (image.empty()) throw InvalidArgument("cannot save an empty image");
  const double max_value = bit_depth == 8 ? 255.0 : 65535.0;
  const int ch = image.channels();
  cv::Mat m(image.height(), image.width(),
            CV_MAKETYPE(bit_depth == 8 ? CV_8U : CV_16U, ch));
  for (int r = 0; r < image.height(); ++r) {
    for (int c = 0; c < image.width(); ++c) {
      for (int k = 0; k < ch; ++k) {
        const float v = image.at(r, c, ch == 1 ? 0 : 2 - k);
        const double q = std::round(std::clamp(static_cast<double>(v), 0.0, 1.0) * max_value);
        if (bit_depth == 8)
          m.ptr<std::uint8_t>(r)[c * ch + k] = static_cast<std::uint8_t>(q);
        else
          m.ptr<std::uint16_t>(r)[c * ch + k] = static_cast<std::uint16_t>(q);
      }
    }
  }
  detail::write_mat(m, path);
}

inline InstanceMask load_mask(const std::filesystem::path& path) {
  detail::require_exists(path);
  cv::Mat m;
  try {
    m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  } catch (const cv::Exception& e) {
    throw DecodeError("cannot decode " + path.string() + ": " + e.what());
  }
  if (m.empty()) throw DecodeError("cannot decode " + path.string());
  if (m.channels() != 1)
    throw NotALabelImage(path.string() + " has " + std::to_string(m.channels()) +
                         " channels; label images are single-channel");
  if (m.depth() != CV_8U && m.depth() != CV_16U && m.depth() != CV_32S)
    throw NotALabelImage(path.string() + " does not hold integer labels");
  cv::Mat labels;
  m.convertTo(labels, CV_32S);
  InstanceMask mask(m.rows, m.cols);
  for (int r = 0; r < m.rows; ++r)
    for (int c = 0; c < m.cols; ++c) mask.at(r, c) = labels.at<std::int32_t>(r, c);
  return mask;
}

/// Writes a 16-bit single-channel label raster.
inline void save_mask(const InstanceMask& mask, const std::filesystem::path& path) {
  if (mask.empty()) throw InvalidArgument("cannot save an empty mask");
  cv::Mat m(mask.height(), mask.width(), CV_16UC1);
  for (int r = 0; r < mask.height(); ++r) {
    for (int c = 0; c < mask.width(); ++c) {
      const auto v = mask.at(r, c);
      if (v < 0 || v > 65535)
        throw InvalidArgument("label " + std::to_string(v) + " does not fit a 16-bit raster");
      m.at<std::uint16_t>(r, c) = static_cast<std::uint16_t>(v);
    }
  }
  detail::write_mat(m, path);
}

inline std::pair<int, int> rescaled_dims(int height, int width, double factor) {
  if (!(factor > 0.0) || !std::isfinite(factor))
    throw InvalidArgument("rescale factor must be positive and finite");
  const auto h = static_cast<long>(std::lround(height * factor));
  const auto w = static_cast<long>(std::lround(width * factor));
  if (h < 1 || w < 1)
    throw InvalidArgument("rescaled dimensions round to zero (factor " +
                          std::to_string(factor) + ")");
  return {static_cast<int>(h), static_cast<int>(w)};
}

/// Resamples to exactly out_h x out_w.
inline Image resize_image(const Image& image, int out_h, int out_w,
                          Interpolation interpolation = Interpolation::bilinear) {
  Image out(out_h, out_w, image.channels());
  const double sy = static_cast<double>(image.height()) / out_h;
  const double sx = static_cast<double>(image.width()) / out_w;
  const int ch = image.channels();
  if (interpolation == Interpolation::nearest) {
    for (int r = 0; r < out_h; ++r) {
      const int yr = std::min(image.height() - 1, static_cast<int>((r + 0.5) * sy));
      for (int c = 0; c < out_w; ++c) {
        const int xc = std::min(image.width() - 1, static_cast<int>((c + 0.5) * sx));
        for (int k = 0; k < ch; ++k) out.at(r, c, k) = image.at(yr, xc, k);
      }
    }
    return out;
  }
  for (int r = 0; r < out_h; ++r) {
    const double y = std::clamp(detail::source_coord(r, sy), 0.0,
                                static_cast<double>(image.height() - 1));
    const int y0 = static_cast<int>(y);
    const int y1 = std::min(y0 + 1, image.height() - 1);
    const float fy = static_cast<float>(y - y0);
    for (int c = 0; c < out_w; ++c) {
      const double x = std::clamp(detail::source_coord(c, sx), 0.0,
                                  static_cast<double>(image.width() - 1));
      const int x0 = static_cast<int>(x);
      const int x1 = std::min(x0 + 1, image.width() - 1);
      const float fx = static_cast<float>(x - x0);
      for (int k = 0; k < ch; ++k) {
        // lerp form keeps constant regions exactly constant
        const float a = image.at(y0, x0, k), b = image.at(y0, x1, k);
        const float cc = image.at(y1, x0, k), d = image.at(y1, x1, k);
        const float top = a + fx * (b - a);
        const float bottom = cc + fx * (d - cc);
        out.at(r, c, k) = top + fy * (bottom - top);
      }
    }
  }
  return out;
}

/// Output dims are round(H*factor) x round(W*factor).
inline Image rescale_image(const Image& image, double factor,
                           Interpolation interpolation = Interpolation::bilinear) {
  const auto [h, w] = rescaled_dims(image.height(), image.width(), factor);
  if (h == image.height() && w == image.width()) return image;
  auto out = resize_image(image, h, w, interpolation);
  out.set_source_path(image.source_path());
  return out;
}

inline InstanceMask resize_mask(const InstanceMask& mask, int out_h, int out_w) {
  InstanceMask out(out_h, out_w);
  const double sy = static_cast<double>(mask.height()) / out_h;
  const double sx = static_cast<double>(mask.width()) / out_w;
  for (int r = 0; r < out_h; ++r) {
    const int yr = std::min(mask.height() - 1, static_cast<int>((r + 0.5) * sy));
    for (int c = 0; c < out_w; ++c) {
      const int xc = std::min(mask.width() - 1, static_cast<int>((c + 0.5) * sx));
      out.at(r, c) = mask.at(yr, xc);
    }
  }
  return out;
}

/// Nearest-neighbour only, so labels are never blended.
inline InstanceMask rescale_mask(const InstanceMask& mask, double factor) {
  const auto [h, w] = rescaled_dims(mask.height(), mask.width(), factor);
  return resize_mask(mask, h, w);
}

/// Labels are assigned 1..n in raster-scan order of each component's first pixel.
inline InstanceMask connected_components(const BinaryMask& binary, int connectivity = 8) {
  if (connectivity != 4 && connectivity != 8)
    throw InvalidArgument("connectivity must be 4 or 8");
  InstanceMask out(binary.height(), binary.width());
  static constexpr int kDr[] = {-1, 1, 0, 0, -1, -1, 1, 1};
  static constexpr int kDc[] = {0, 0, -1, 1, -1, 1, -1, 1};
  std::int32_t next = 0;
  std::vector<std::pair<int, int>> stack;
  for (int r = 0; r < binary.height(); ++r) {
    for (int c = 0; c < binary.width(); ++c) {
      if (!binary.at(r, c) || out.at(r, c) != 0) continue;
      ++next;
      out.at(r, c) = next;
      stack.emplace_back(r, c);
      while (!stack.empty()) {
        const auto [pr, pc] = stack.back();
        stack.pop_back();
        for (int k = 0; k < connectivity; ++k) {
          const int nr = pr + kDr[k], nc = pc + kDc[k];
          if (nr < 0 || nc < 0 || nr >= binary.height() || nc >= binary.width()) continue;
          if (!binary.at(nr, nc) || out.at(nr, nc) != 0) continue;
          out.at(nr, nc) = next;
          stack.emplace_back(nr, nc);
        }
      }
    }
  }
  return out;
}

/// One entry per positive label, sorted by label.
inline std::vector<InstanceStats> instance_stats(const InstanceMask& mask) {
  struct Acc {
    std::int64_t area = 0;
    double sum_r = 0, sum_c = 0;
  };
  std::map<std::int32_t, Acc> acc;
  for (int r = 0; r < mask.height(); ++r) {
    for (int c = 0; c < mask.width(); ++c) {
      const auto v = mask.at(r, c);
      if (v <= 0) continue;
      auto& a = acc[v];
      ++a.area;
      a.sum_r += r;
      a.sum_c += c;
    }
  }
  std::vector<InstanceStats> out;
  out.reserve(acc.size());
  for (const auto& [label, a] : acc) {
    const auto area = static_cast<double>(a.area);
    out.push_back({label, a.area, equivalent_diameter(area), a.sum_r / area, a.sum_c / area});
  }
  return out;
}

/// Rec. 601 luma for RGB; copy for grayscale.
inline Grid<float> to_luminance(const Image& image) {
  Grid<float> out(image.height(), image.width());
  for (int r = 0; r < image.height(); ++r) {
    for (int c = 0; c < image.width(); ++c) {
      out.at(r, c) = image.channels() == 1
                         ? image.at(r, c)
                         : 0.299f * image.at(r, c, 0) + 0.587f * image.at(r, c, 1) +
                               0.114f * image.at(r, c, 2);
    }
  }
  return out;
}

inline Image to_channels(const Image& image, int channels) {
  if (image.channels() == channels) return image;
  Image out(image.height(), image.width(), channels);
  if (channels == 1) {
    const auto lum = to_luminance(image);
    std::copy(lum.values().begin(), lum.values().end(), out.pixels().begin());
  } else {
    for (int r = 0; r < image.height(); ++r)
      for (int c = 0; c < image.width(); ++c)
        for (int k = 0; k < channels; ++k) out.at(r, c, k) = image.at(r, c);
  }
  out.set_source_path(image.source_path());
  return out;
}

inline constexpr int kHistogramBins = 256;

inline int histogram_bin(float v) {
  return std::clamp(static_cast<int>(v * kHistogramBins), 0, kHistogramBins - 1);
}

/// Otsu's threshold over 256 bins on [0,1]. Pixels whose bin exceeds the
/// returned bin index are foreground. Ties resolve to the middle of the
/// maximal plateau.
inline int otsu_bin(const Grid<float>& values) {
  std::vector<double> hist(kHistogramBins, 0.0);
  for (float v : values.values()) hist[histogram_bin(v)] += 1.0;
  const double total = static_cast<double>(values.size());
  double sum_all = 0.0;
  for (int i = 0; i < kHistogramBins; ++i) sum_all += i * hist[i];

  std::vector<double> between(kHistogramBins - 1, 0.0);
  double w0 = 0.0, sum0 = 0.0;
  for (int k = 0; k < kHistogramBins - 1; ++k) {
    w0 += hist[k];
    sum0 += k * hist[k];
    const double w1 = total - w0;
    if (w0 == 0.0 || w1 == 0.0) continue;
    const double m0 = sum0 / w0;
    const double m1 = (sum_all - sum0) / w1;
    between[k] = w0 * w1 * (m0 - m1) * (m0 - m1) / (total * total);
  }
  const double best = *std::max_element(between.begin(), between.end());
  if (best <= 0.0) return kHistogramBins - 1;  // single-valued image: nothing is foreground
  const double tol = best * 1e-12;
  int first = -1, last = -1;
  for (int k = 0; k < kHistogramBins - 1; ++k) {
    if (between[k] >= best - tol) {
      if (first < 0) first = k;
      last = k;
    } else if (first >= 0) {
      break;
    }
  }
  return (first + last) / 2;
}

/// Threshold value on [0,1] corresponding to otsu_bin: upper edge of the bin.
inline double otsu_threshold(const Grid<float>& values) {
  return static_cast<double>(otsu_bin(values) + 1) / kHistogramBins;
}

}  // namespace cellstyle
