#pragma once

// Cell size ratio between two datasets and geometric preparation of targets.

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include <unistd.h>

#include "cellstyle/error.hpp"
#include "cellstyle/imaging.hpp"

namespace cellstyle {

struct Detector {
  std::string id;
  std::function<InstanceMask(const Image&)> fn;

  InstanceMask operator()(const Image& image) const {
    if (!fn) throw ConfigError("detector '" + id + "' has no implementation");
    InstanceMask m = fn(image);
    if (m.height() != image.height() || m.width() != image.width())
      throw ComputeError("detector '" + id + "' returned a " + std::to_string(m.height()) + "x" +
                         std::to_string(m.width()) + " mask for a " + std::to_string(image.height()) +
                         "x" + std::to_string(image.width()) + " image");
    return m;
  }
};

struct OtsuThreshold {};
using Threshold = std::variant<OtsuThreshold, double>;

/// Global threshold on luminance followed by 8-connected labelling.
inline InstanceMask naive_detector(const Image& image, const Threshold& threshold = OtsuThreshold{}) {
  const Grid<float> lum = to_luminance(image);
  BinaryMask fg(lum.height(), lum.width());
  if (std::holds_alternative<OtsuThreshold>(threshold)) {
    const int bin = otsu_bin(lum);
    for (int r = 0; r < lum.height(); ++r)
      for (int c = 0; c < lum.width(); ++c) fg.at(r, c) = histogram_bin(lum.at(r, c)) > bin;
  } else {
    const double t = std::get<double>(threshold);
    for (int r = 0; r < lum.height(); ++r)
      for (int c = 0; c < lum.width(); ++c) fg.at(r, c) = lum.at(r, c) > t;
  }
  return connected_components(fg, 8);
}

inline Detector make_naive_detector(const Threshold& threshold = OtsuThreshold{}) {
  std::string id = "naive-otsu";
  if (const double* v = std::get_if<double>(&threshold)) {
    std::ostringstream s;
    s << "naive-fixed:" << *v;
    id = s.str();
  }
  return {id, [threshold](const Image& img) { return naive_detector(img, threshold); }};
}

namespace detail {

inline std::string shell_quote(const std::string& s) {
  std::string out = "'";
  for (char c : s) {
    if (c == '\'')
      out += "'\\''";
    else
      out += c;
  }
  return out + "'";
}

}  // namespace detail

/// Runs `command <input.tif> <output.tif>` per image and reads back the label
/// raster. A nonzero exit status is a detector failure.
inline Detector make_command_detector(const std::string& command,
                                      std::filesystem::path scratch = std::filesystem::temp_directory_path()) {
  return {"command:" + command, [command, scratch](const Image& img) {
            static std::atomic<unsigned long> counter{0};
            const auto tag = std::to_string(::getpid()) + "_" + std::to_string(counter++);
            const auto in = scratch / ("cellstyle_det_in_" + tag + ".tif");
            const auto out = scratch / ("cellstyle_det_out_" + tag + ".tif");
            save_image(img, in);
            const std::string cmd =
                command + " " + detail::shell_quote(in.string()) + " " + detail::shell_quote(out.string());
            const int status = std::system(cmd.c_str());
            std::error_code ec;
            std::filesystem::remove(in, ec);
            if (status != 0) {
              std::filesystem::remove(out, ec);
              throw ComputeError("detector command failed with status " + std::to_string(status) +
                                 ": " + command);
            }
            InstanceMask m = load_mask(out);
            std::filesystem::remove(out, ec);
            return m;
          }};
}

/// Mean equivalent diameter over every instance of every mask.
inline double average_cell_length(const std::vector<InstanceMask>& masks) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& m : masks)
    for (const auto& s : instance_stats(m)) {
      sum += s.equivalent_diameter;
      ++n;
    }
  if (n == 0) throw ComputeError("no cells detected");
  return sum / static_cast<double>(n);
}

inline std::size_t total_instances(const std::vector<InstanceMask>& masks) {
  std::size_t n = 0;
  for (const auto& m : masks) n += m.instance_count();
  return n;
}

struct SizeRatio {
  double r = 1.0;
  double mean_len_src = 0.0;
  double mean_len_tgt = 0.0;
  std::size_t n_src_instances = 0;
  std::size_t n_tgt_instances = 0;
  bool inverted = false;  // r = mean_len_tgt / mean_len_src
};

inline SizeRatio compute_size_ratio(const std::vector<InstanceMask>& src_masks,
                                    const std::vector<InstanceMask>& tgt_masks, bool inverted = false) {
  if (src_masks.empty()) throw InvalidArgument("no source masks");
  if (tgt_masks.empty()) throw InvalidArgument("no target masks");
  SizeRatio out;
  out.mean_len_src = average_cell_length(src_masks);
  out.mean_len_tgt = average_cell_length(tgt_masks);
  out.n_src_instances = total_instances(src_masks);
  out.n_tgt_instances = total_instances(tgt_masks);
  out.inverted = inverted;
  out.r = inverted ? out.mean_len_tgt / out.mean_len_src : out.mean_len_src / out.mean_len_tgt;
  return out;
}

/// Runs `detector` over the target images first.
inline SizeRatio compute_size_ratio(const std::vector<InstanceMask>& src_masks,
                                    const std::vector<Image>& tgt_images, const Detector& detector,
                                    bool inverted = false) {
  std::vector<InstanceMask> tgt;
  tgt.reserve(tgt_images.size());
  for (const auto& img : tgt_images) tgt.push_back(detector(img));
  return compute_size_ratio(src_masks, tgt, inverted);
}

namespace detail {

// Mirror index without repeating the edge sample, for any distance.
inline int reflect101(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace detail

/// Crops (centered) or reflect-pads each axis independently to (height, width).
inline Image fit_to(const Image& image, int height, int width) {
  if (height < 1 || width < 1) throw InvalidArgument("working size must be positive");
  const int off_r = image.height() >= height ? (image.height() - height) / 2 : -((height - image.height()) / 2);
  const int off_c = image.width() >= width ? (image.width() - width) / 2 : -((width - image.width()) / 2);
  Image out(height, width, image.channels());
  for (int r = 0; r < height; ++r) {
    const int sr = detail::reflect101(r + off_r, image.height());
    for (int c = 0; c < width; ++c) {
      const int sc = detail::reflect101(c + off_c, image.width());
      for (int ch = 0; ch < image.channels(); ++ch) out.at(r, c, ch) = image.at(sr, sc, ch);
    }
  }
  out.set_source_path(image.source_path());
  return out;
}

/// Bilinear rescale by r, then fit to the working size.
inline Image prepare_target(const Image& image, double r, int height, int width) {
  if (!(r > 0.0) || !std::isfinite(r)) throw InvalidArgument("size ratio must be positive and finite");
  const Image scaled = rescale_image(image, r, Interpolation::bilinear);
  return fit_to(scaled, height, width);
}

}  // namespace cellstyle
