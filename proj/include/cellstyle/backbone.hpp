#pragma once

// The denoiser contract shared by the toy pixel-space UNet, the test stubs and
// the pretrained latent-diffusion bridge.

#include <optional>
#include <string>
#include <vector>

#include "cellstyle/imaging.hpp"
#include "cellstyle/schedule.hpp"
#include "cellstyle/tensor.hpp"

namespace cellstyle {

struct AttentionSite {
  std::string layer;
  int timestep = 0;
};

/// Observes (and may replace) a self-attention sub-layer. Hooks are owned by
/// a single job; backbones never retain them past the predict_noise call.
class AttentionHook {
 public:
  virtual ~AttentionHook() = default;

  /// Receives the live projections. Returning a tensor replaces the layer's
  /// attention output (heads, n_q, d); returning nullopt keeps it.
  virtual std::optional<HeadTensor> on_attention(const AttentionSite& site, const HeadTensor& q,
                                                 const HeadTensor& k, const HeadTensor& v) = 0;
};

class Backbone {
 public:
  virtual ~Backbone() = default;

  /// Shape of the state tensors this backbone denoises.
  virtual StateShape state_shape() const = 0;

  /// Image size and channel count accepted by encode().
  virtual int image_height() const = 0;
  virtual int image_width() const = 0;
  virtual int image_channels() const = 0;

  /// Deterministic given (x_t, t, hook behaviour, parameters). Must be safe to
  /// call concurrently with distinct hooks.
  virtual StateTensor predict_noise(const StateTensor& x_t, int t, AttentionHook* hook) const = 0;

  virtual StateTensor encode(const Image& image) const = 0;
  virtual Image decode(const StateTensor& state) const = 0;

  /// Self-attention sub-layers in forward order.
  virtual std::vector<std::string> attention_layers() const = 0;

  /// Declared bound on ||decode(encode(x)) - x|| / ||x||.
  virtual double reconstruction_tolerance() const = 0;

  /// Schedule the backbone was trained with, when known.
  virtual std::optional<ScheduleConfig> training_schedule() const { return std::nullopt; }

  virtual std::string identifier() const = 0;
};

/// Pixel-space encoding used by backbones without an autoencoder:
/// [0,1] pixels map affinely onto [-1,1] states.
inline StateTensor pixels_to_state(const Image& image) {
  StateTensor s(StateShape{image.channels(), image.height(), image.width()});
  const int hw = image.height() * image.width();
  for (int r = 0; r < image.height(); ++r)
    for (int c = 0; c < image.width(); ++c)
      for (int k = 0; k < image.channels(); ++k)
        s[static_cast<std::size_t>(k) * hw + r * image.width() + c] =
            2.0 * static_cast<double>(image.at(r, c, k)) - 1.0;
  return s;
}

inline Image state_to_pixels(const StateTensor& s) {
  const auto& sh = s.shape();
  Image img(sh.height, sh.width, sh.channels);
  const int hw = sh.height * sh.width;
  for (int r = 0; r < sh.height; ++r)
    for (int c = 0; c < sh.width; ++c)
      for (int k = 0; k < sh.channels; ++k) {
        const double v = 0.5 * (s[static_cast<std::size_t>(k) * hw + r * sh.width + c] + 1.0);
        img.at(r, c, k) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
  return img;
}

}  // namespace cellstyle
