#pragma once

// Training objective, deterministic sampling and toy-backbone training.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <vector>

#include "cellstyle/backbone.hpp"
#include "cellstyle/error.hpp"
#include "cellstyle/schedule.hpp"
#include "cellstyle/toy_unet.hpp"

namespace cellstyle {

/// || eps - eps_theta(x_t, t) ||^2 averaged over elements, x_t = add_noise(x0, eps, t).
inline double diffusion_loss(const Backbone& backbone, const StateTensor& x0,
                             const StateTensor& eps, int t, const NoiseSchedule& sched) {
  const StateTensor x_t = add_noise(x0, eps, t, sched);
  const StateTensor pred = backbone.predict_noise(x_t, t, nullptr);
  require_same_shape(pred, eps, "diffusion_loss");
  return (pred.data() - eps.data()).squaredNorm() / static_cast<double>(eps.size());
}

/// Runs the reverse chain over sched.ddim_steps from x_T down to t = 0.
inline StateTensor ddim_sample(const Backbone& backbone, const StateTensor& x_T,
                               const NoiseSchedule& sched, AttentionHook* hook = nullptr) {
  if (!(x_T.shape() == backbone.state_shape()))
    throw InvalidArgument("ddim_sample: x_T shape " + x_T.shape().str() +
                          " does not match backbone state " + backbone.state_shape().str());
  StateTensor x = x_T;
  for (std::size_t i = sched.ddim_steps.size(); i-- > 0;) {
    const int t = sched.ddim_steps[i];
    const StateTensor eps = backbone.predict_noise(x, t, hook);
    x = ddim_step(x, eps, t, sched.previous(i), sched);
    if (!x.all_finite()) throw NonFiniteError("sampling produced non-finite values", t);
  }
  return x;
}

/// eps_hat = theta * x_t. Used to check the objective's gradient.
class LinearDenoiser final : public Backbone {
 public:
  LinearDenoiser(StateShape shape, double theta) : shape_(shape), theta_(theta) {}

  double theta() const noexcept { return theta_; }
  void set_theta(double t) noexcept { theta_ = t; }

  /// Analytic d(diffusion_loss)/d(theta).
  double loss_gradient(const StateTensor& x0, const StateTensor& eps, int t,
                       const NoiseSchedule& sched) const {
    const StateTensor x_t = add_noise(x0, eps, t, sched);
    const Eigen::VectorXd residual = theta_ * x_t.data() - eps.data();
    return 2.0 * residual.dot(x_t.data()) / static_cast<double>(eps.size());
  }

  StateShape state_shape() const override { return shape_; }
  int image_height() const override { return shape_.height; }
  int image_width() const override { return shape_.width; }
  int image_channels() const override { return shape_.channels; }
  StateTensor predict_noise(const StateTensor& x_t, int, AttentionHook*) const override {
    return StateTensor(x_t.shape(), theta_ * x_t.data());
  }
  StateTensor encode(const Image& image) const override { return pixels_to_state(image); }
  Image decode(const StateTensor& s) const override { return state_to_pixels(s); }
  std::vector<std::string> attention_layers() const override { return {}; }
  double reconstruction_tolerance() const override { return 0.0; }
  std::string identifier() const override { return "linear-denoiser"; }

 private:
  StateShape shape_;
  double theta_;
};

struct ToyTrainConfig {
  int image_size = 32;
  int epochs = 200;
  int batch_size = 16;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
  ToyArchitecture architecture;  // image_size above takes precedence
  ScheduleConfig schedule;
  bool augment = true;  // random flips and transposes
  bool cosine_lr = true;
  double ema_decay = 0.0;  // 0 disables weight averaging
  // Share of timesteps drawn from [1, low_t_max] instead of [1, T].
  double low_t_fraction = 0.0;
  int low_t_max = 100;
  std::function<void(int epoch, double mean_loss)> on_epoch;
};

inline std::vector<double> smoothed(const std::vector<double>& v, std::size_t window) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const std::size_t lo = i + 1 >= window ? i + 1 - window : 0;
    out[i] = std::accumulate(v.begin() + static_cast<long>(lo), v.begin() + static_cast<long>(i) + 1, 0.0) /
             static_cast<double>(i + 1 - lo);
  }
  return out;
}

namespace detail {

inline StateTensor augment_state(const StateTensor& s, int code) {
  if (code == 0) return s;
  const auto& sh = s.shape();
  StateTensor out(sh);
  const int H = sh.height, W = sh.width;
  for (int c = 0; c < sh.channels; ++c)
    for (int r = 0; r < H; ++r)
      for (int q = 0; q < W; ++q) {
        int sr = r, sq = q;
        if (code & 1) sq = W - 1 - sq;
        if (code & 2) sr = H - 1 - sr;
        if ((code & 4) && H == W) std::swap(sr, sq);
        out[static_cast<std::size_t>(c) * H * W + r * W + q] =
            s[static_cast<std::size_t>(c) * H * W + sr * W + sq];
      }
  return out;
}

}  // namespace detail

/// Trains the toy UNet on `dataset` with the standard noise-prediction
/// objective. Deterministic for a fixed seed on a given build (single-threaded
/// math, fixed sampling order).
inline std::unique_ptr<ToyUNet> train_toy_backbone(const std::vector<Image>& dataset,
                                                   const ToyTrainConfig& cfg) {
  if (dataset.empty()) throw InvalidArgument("empty dataset");
  if (dataset.size() < 16)
    throw InvalidArgument("toy training needs at least 16 images, got " +
                          std::to_string(dataset.size()));
  if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.learning_rate > 0.0) || cfg.image_size < 4)
    throw InvalidArgument("training config values must be positive");
  if (!(cfg.low_t_fraction >= 0.0 && cfg.low_t_fraction <= 1.0) || cfg.low_t_max < 1)
    throw InvalidArgument("low_t_fraction must lie in [0,1] and low_t_max be >= 1");

  ToyArchitecture arch = cfg.architecture;
  arch.image_size = cfg.image_size;
  std::vector<StateTensor> states;
  states.reserve(dataset.size());
  for (const auto& img : dataset) {
    if (img.height() != cfg.image_size || img.width() != cfg.image_size)
      throw InvalidArgument("training images must be " + std::to_string(cfg.image_size) + "x" +
                            std::to_string(cfg.image_size));
    states.push_back(pixels_to_state(to_channels(img, arch.channels)));
  }

  auto model = std::make_unique<ToyUNet>(arch, cfg.schedule, cfg.seed);
  model->set_train_seed(cfg.seed);
  const NoiseSchedule sched = make_noise_schedule(cfg.schedule);
  nn::AdamConfig adam_cfg;
  adam_cfg.lr = static_cast<float>(cfg.learning_rate);
  nn::Adam adam(model->parameters(), adam_cfg);

  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::uniform_int_distribution<int> pick_t(1, sched.train_steps());
  std::uniform_int_distribution<int> pick_aug(0, 7);
  std::bernoulli_distribution use_low(cfg.low_t_fraction);
  std::uniform_int_distribution<int> pick_low_t(1, std::clamp(cfg.low_t_max, 1, sched.train_steps()));
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::size_t> order(states.size());
  std::iota(order.begin(), order.end(), 0);

  const auto params = model->parameters();
  std::vector<nn::Mat> ema;
  if (cfg.ema_decay > 0.0)
    for (auto* p : params) ema.push_back(p->value);
  const long steps_per_epoch =
      (static_cast<long>(states.size()) + cfg.batch_size - 1) / cfg.batch_size;
  const double total_steps = static_cast<double>(steps_per_epoch) * cfg.epochs;
  long step = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const float scale = 1.f / static_cast<float>(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const StateTensor x0 =
            cfg.augment ? detail::augment_state(states[order[b]], pick_aug(rng)) : states[order[b]];
        const int t = cfg.low_t_fraction > 0.0 && use_low(rng) ? pick_low_t(rng) : pick_t(rng);
        StateTensor eps(x0.shape());
        for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = normal(rng);
        const double loss = model->loss_and_backward(add_noise(x0, eps, t, sched), eps, t, scale);
        if (!std::isfinite(loss)) {
          std::ostringstream msg;
          msg << "non-finite training loss at epoch " << epoch << ", sample " << b
              << ", timestep " << t << " (learning rate " << cfg.learning_rate << ")";
          throw ComputeError(msg.str());
        }
        epoch_loss += loss;
      }
      if (cfg.cosine_lr)
        adam.set_lr(static_cast<float>(cfg.learning_rate * 0.5 *
                                       (1.0 + std::cos(3.14159265358979 * double(step) / total_steps))));
      adam.step();
      ++step;
      if (!ema.empty()) {
        // bias toward fast tracking early on
        const float d = static_cast<float>(std::min(cfg.ema_decay, (1.0 + step) / (10.0 + step)));
        for (std::size_t i = 0; i < params.size(); ++i)
          ema[i] = d * ema[i] + (1.f - d) * params[i]->value;
      }
    }
    epoch_loss /= static_cast<double>(states.size());
    model->loss_history().push_back(epoch_loss);
    if (cfg.on_epoch) cfg.on_epoch(epoch, epoch_loss);
  }
  for (std::size_t i = 0; i < ema.size(); ++i) params[i]->value = ema[i];
  return model;
}

}  // namespace cellstyle
