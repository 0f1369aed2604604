#pragma once

// Procedural "microscopy" fixtures: disk-shaped cells with a family-specific
// texture on a textured background, plus the matching label mask.

#include <cmath>
#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "cellstyle/imaging.hpp"

namespace cellstyle::synthetic {

struct TextureFamily {
  std::string name;
  float cell_mean = 0.7f;
  float background_mean = 0.2f;
  float stripe_amplitude = 0.0f;  // sinusoidal texture inside cells
  float stripe_period = 4.0f;     // pixels
  float noise_std = 0.03f;        // i.i.d. pixel noise everywhere
  float blotch_std = 0.0f;        // smooth mottling inside cells
  float blotch_sigma = 1.5f;      // pixels
  float optical_blur = 0.0f;      // Gaussian sigma applied before pixel noise
};

/// Bright cells with smooth mottling.
inline TextureFamily bright_mottled() { return {"bright-mottled", 0.78f, 0.12f, 0.0f, 4.0f, 0.004f, 0.08f, 1.5f}; }

/// Dim striped cells on a lifted background.
inline TextureFamily dim_striped() { return {"dim-striped", 0.45f, 0.28f, 0.10f, 6.0f, 0.004f}; }

inline std::map<std::string, TextureFamily> families() {
  std::map<std::string, TextureFamily> out;
  for (auto f : {bright_mottled(), dim_striped()}) out[f.name] = f;
  return out;
}

struct Sample {
  Image image;
  InstanceMask mask;
};

struct CellLayout {
  int count_min = 2;
  int count_max = 4;
  double radius_min = 3.0;
  double radius_max = 6.0;
};

/// Disks placed without overlap (best effort, bounded attempts).
inline InstanceMask random_disks(int size, std::mt19937_64& rng, const CellLayout& layout) {
  InstanceMask mask(size, size);
  std::uniform_int_distribution<int> count(layout.count_min, layout.count_max);
  std::uniform_real_distribution<double> radius(layout.radius_min, layout.radius_max);
  std::uniform_real_distribution<double> pos(0.0, static_cast<double>(size));
  struct Disk {
    double r, c, rad;
  };
  std::vector<Disk> placed;
  const int n = count(rng);
  for (int attempt = 0; attempt < 200 && static_cast<int>(placed.size()) < n; ++attempt) {
    const double rad = radius(rng);
    const double r = pos(rng), c = pos(rng);
    if (r < rad * 0.5 || c < rad * 0.5 || r > size - rad * 0.5 || c > size - rad * 0.5) continue;
    bool clash = false;
    for (const auto& d : placed)
      if (std::hypot(d.r - r, d.c - c) < d.rad + rad + 1.5) clash = true;
    if (clash) continue;
    placed.push_back({r, c, rad});
  }
  for (std::size_t k = 0; k < placed.size(); ++k)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        if (std::hypot(y + 0.5 - placed[k].r, x + 0.5 - placed[k].c) <= placed[k].rad)
          mask.at(y, x) = static_cast<std::int32_t>(k + 1);
  return mask;
}

/// Separable Gaussian blur with clamped borders.
inline Grid<float> gaussian_blur(const Grid<float>& g, float sigma) {
  const int h = g.height(), w = g.width();
  const int rad = std::max(1, static_cast<int>(std::ceil(3 * sigma)));
  std::vector<float> k(static_cast<std::size_t>(2 * rad + 1));
  for (int i = -rad; i <= rad; ++i) k[static_cast<std::size_t>(i + rad)] = std::exp(-0.5f * i * i / (sigma * sigma));
  float ksum = 0.f;
  for (float v : k) ksum += v;
  for (float& v : k) v /= ksum;
  auto pass = [&](const Grid<float>& in, bool rows) {
    Grid<float> out(h, w);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        float acc = 0.f;
        for (int i = -rad; i <= rad; ++i) {
          const int rr = rows ? r : std::clamp(r + i, 0, h - 1);
          const int cc = rows ? std::clamp(c + i, 0, w - 1) : c;
          acc += k[static_cast<std::size_t>(i + rad)] * in.at(rr, cc);
        }
        out.at(r, c) = acc;
      }
    return out;
  };
  return pass(pass(g, true), false);
}

/// White noise smoothed by a separable Gaussian and rescaled to unit std.
inline Grid<float> smooth_noise(int h, int w, float sigma, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.f, 1.f);
  Grid<float> g(h, w);
  for (auto& v : g.values()) v = n(rng);
  g = gaussian_blur(g, sigma);
  double sq = 0.0;
  for (float v : g.values()) sq += double(v) * v;
  const float sd = static_cast<float>(std::sqrt(sq / static_cast<double>(g.size())));
  for (auto& v : g.values()) v /= sd > 0.f ? sd : 1.f;
  return g;
}

/// Paints `family` onto the geometry of `mask`.
inline Image render(const InstanceMask& mask, const TextureFamily& family, std::mt19937_64& rng) {
  const Grid<float> blotch = smooth_noise(mask.height(), mask.width(), family.blotch_sigma, rng);
  std::uniform_real_distribution<float> phase(0.f, 6.2831853f);
  const float ph = phase(rng);
  const float w = 6.2831853f / family.stripe_period;
  Grid<float> clean(mask.height(), mask.width());
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) {
      float v = family.background_mean;
      if (mask.at(y, x) > 0)
        v = family.cell_mean + family.stripe_amplitude * std::sin(w * (x + y) * 0.7071f + ph) +
            family.blotch_std * blotch.at(y, x);
      clean.at(y, x) = v;
    }
  if (family.optical_blur > 0.f) clean = gaussian_blur(clean, family.optical_blur);
  Image img(mask.height(), mask.width(), 1);
  std::normal_distribution<float> noise(0.f, 1.f);
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x) {
      const float n = family.noise_std > 0.f ? family.noise_std * noise(rng) : 0.f;
      img.at(y, x) = std::clamp(clean.at(y, x) + n, 0.f, 1.f);
    }
  return img;
}

inline Sample make_sample(int size, const TextureFamily& family, std::uint64_t seed,
                          const CellLayout& layout = {}) {
  std::mt19937_64 rng(seed);
  Sample s{Image(size, size), random_disks(size, rng, layout)};
  s.image = render(s.mask, family, rng);
  return s;
}

inline std::vector<Sample> make_samples(int count, int size, const TextureFamily& family,
                                        std::uint64_t seed, const CellLayout& layout = {}) {
  std::vector<Sample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i)
    out.push_back(make_sample(size, family, seed * 1000003ULL + static_cast<std::uint64_t>(i), layout));
  return out;
}

/// Mean image value over the foreground pixels of `mask`.
inline double foreground_mean(const Image& image, const InstanceMask& mask) {
  double sum = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (mask.at(y, x) > 0) {
        sum += image.at(y, x);
        ++n;
      }
  return n ? sum / static_cast<double>(n) : 0.0;
}

/// Mean over instances of the per-instance mean intensity.
inline double mean_cell_intensity(const Image& image, const InstanceMask& mask) {
  std::map<std::int32_t, std::pair<double, std::size_t>> acc;
  for (int y = 0; y < mask.height(); ++y)
    for (int x = 0; x < mask.width(); ++x)
      if (mask.at(y, x) > 0) {
        auto& a = acc[mask.at(y, x)];
        a.first += image.at(y, x);
        ++a.second;
      }
  if (acc.empty()) return 0.0;
  double total = 0.0;
  for (const auto& [label, a] : acc) total += a.first / static_cast<double>(a.second);
  return total / static_cast<double>(acc.size());
}

}  // namespace cellstyle::synthetic
