#pragma once

// Variance schedule, forward noising and the deterministic (eta = 0) DDIM
// update.

#include <cmath>
#include <nlohmann/json.hpp>
#include <string>
#include <vector>

#include "cellstyle/error.hpp"
#include "cellstyle/tensor.hpp"

namespace cellstyle {

// scaled_linear: betas linear in sqrt space (the latent-diffusion convention).
enum class ScheduleKind { linear, scaled_linear };

inline std::string schedule_kind_name(ScheduleKind k) { return k == ScheduleKind::linear ? "linear" : "scaled_linear"; }

inline ScheduleKind parse_schedule_kind(const std::string& s) {
  if (s == "linear") return ScheduleKind::linear;
  if (s == "scaled_linear") return ScheduleKind::scaled_linear;
  throw InvalidArgument("unsupported schedule kind '" + s + "'");
}

struct ScheduleConfig {
  int train_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  ScheduleKind kind = ScheduleKind::linear;
  int sampling_steps = 50;
};

inline void to_json(nlohmann::json& j, const ScheduleConfig& s) {
  j = {{"train_steps", s.train_steps}, {"beta_start", s.beta_start},
       {"beta_end", s.beta_end}, {"kind", schedule_kind_name(s.kind)}, {"sampling_steps", s.sampling_steps}};
}

inline void from_json(const nlohmann::json& j, ScheduleConfig& s) {
  s.train_steps = j.at("train_steps");
  s.beta_start = j.at("beta_start");
  s.beta_end = j.at("beta_end");
  try {
    s.kind = parse_schedule_kind(j.value("kind", std::string("linear")));
  } catch (const InvalidArgument& e) {
    throw ConfigError(e.what());
  }
  s.sampling_steps = j.at("sampling_steps");
}

struct NoiseSchedule {
  ScheduleConfig config;
  // alpha_bar[0] = 1; alpha_bar[t] = prod_{i<=t} (1 - beta_i).
  std::vector<double> alpha_bar;
  // Strictly increasing timesteps visited by the sampler, in [1, train_steps].
  std::vector<int> ddim_steps;

  int train_steps() const noexcept { return config.train_steps; }
  int sampling_steps() const noexcept { return static_cast<int>(ddim_steps.size()); }

  double at(int t) const {
    if (t < 0 || t > config.train_steps)
      throw InvalidArgument("timestep " + std::to_string(t) + " outside [0, " +
                            std::to_string(config.train_steps) + "]");
    return alpha_bar[static_cast<std::size_t>(t)];
  }

  /// Timestep preceding ddim_steps[i] on the sampling chain (0 for the first).
  int previous(std::size_t i) const { return i == 0 ? 0 : ddim_steps[i - 1]; }
};

inline NoiseSchedule make_noise_schedule(const ScheduleConfig& cfg) {
  if (cfg.train_steps < 1) throw InvalidArgument("train_steps must be >= 1");
  if (!(cfg.beta_start > 0.0 && cfg.beta_start <= cfg.beta_end && cfg.beta_end < 1.0))
    throw InvalidArgument("betas must satisfy 0 < beta_start <= beta_end < 1");
  if (cfg.sampling_steps < 1 || cfg.sampling_steps > cfg.train_steps)
    throw InvalidArgument("sampling_steps must lie in [1, train_steps]");

  NoiseSchedule s;
  s.config = cfg;
  const int T = cfg.train_steps;
  s.alpha_bar.resize(static_cast<std::size_t>(T) + 1);
  s.alpha_bar[0] = 1.0;
  double prod = 1.0;
  for (int i = 1; i <= T; ++i) {
    const double frac = T == 1 ? 0.0 : static_cast<double>(i - 1) / (T - 1);
    double beta = cfg.beta_start + (cfg.beta_end - cfg.beta_start) * frac;
    if (cfg.kind == ScheduleKind::scaled_linear) {
      const double r = std::sqrt(cfg.beta_start) + (std::sqrt(cfg.beta_end) - std::sqrt(cfg.beta_start)) * frac;
      beta = r * r;
    }
    prod *= 1.0 - beta;
    s.alpha_bar[static_cast<std::size_t>(i)] = prod;
  }
  const int S = cfg.sampling_steps;
  s.ddim_steps.resize(static_cast<std::size_t>(S));
  for (int i = 0; i < S; ++i)
    s.ddim_steps[static_cast<std::size_t>(i)] =
        static_cast<int>((static_cast<long long>(i) * T) / S) + 1;
  return s;
}

inline NoiseSchedule make_noise_schedule(int train_steps, double beta_start, double beta_end,
                                         ScheduleKind kind, int sampling_steps) {
  return make_noise_schedule(ScheduleConfig{train_steps, beta_start, beta_end, kind, sampling_steps});
}

/// sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline StateTensor add_noise(const StateTensor& x0, const StateTensor& eps, int t,
                             const NoiseSchedule& sched) {
  require_same_shape(x0, eps, "add_noise");
  const double ab = sched.at(t);
  return StateTensor(x0.shape(), std::sqrt(ab) * x0.data() + std::sqrt(1.0 - ab) * eps.data());
}

namespace detail {

// Moves a state from timestep `from` to `to` along the deterministic DDIM
// path defined by eps_hat.
inline StateTensor ddim_transfer(const StateTensor& x, const StateTensor& eps_hat, int from,
                                 int to, const NoiseSchedule& sched) {
  require_same_shape(x, eps_hat, "ddim update");
  const double a_from = sched.at(from);
  const double a_to = sched.at(to);
  Eigen::VectorXd x0_hat =
      (x.data() - std::sqrt(1.0 - a_from) * eps_hat.data()) / std::sqrt(a_from);
  return StateTensor(x.shape(), std::sqrt(a_to) * x0_hat + std::sqrt(1.0 - a_to) * eps_hat.data());
}

}  // namespace detail

/// One denoising step t -> t_prev (t_prev < t).
inline StateTensor ddim_step(const StateTensor& x_t, const StateTensor& eps_hat, int t, int t_prev,
                             const NoiseSchedule& sched) {
  if (!(t_prev < t))
    throw InvalidArgument("ddim_step: timesteps out of order (t=" + std::to_string(t) +
                          ", t_prev=" + std::to_string(t_prev) + ")");
  return detail::ddim_transfer(x_t, eps_hat, t, t_prev, sched);
}

}  // namespace cellstyle
