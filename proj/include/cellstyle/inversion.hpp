#pragma once

// Deterministic DDIM inversion from t = 0 up to the last sampling step.

#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cellstyle/attention_control.hpp"
#include "cellstyle/backbone.hpp"
#include "cellstyle/error.hpp"
#include "cellstyle/schedule.hpp"

namespace cellstyle {

/// Inverse of ddim_step for the same eps_hat (t_next >= t; equal is identity).
inline StateTensor ddim_invert_step(const StateTensor& x_t, const StateTensor& eps_hat, int t,
                                    int t_next, const NoiseSchedule& sched) {
  if (t_next < t)
    throw InvalidArgument("ddim_invert_step: timesteps out of order (t=" + std::to_string(t) +
                          ", t_next=" + std::to_string(t_next) + ")");
  require_same_shape(x_t, eps_hat, "ddim_invert_step");
  if (t_next == t) return x_t;
  return detail::ddim_transfer(x_t, eps_hat, t, t_next, sched);
}

struct InversionResult {
  StateTensor z_T;
  std::optional<std::vector<StateTensor>> trajectory;  // states at ddim_steps[0..S-1]
  AttentionCache cache;
};

struct InversionOptions {
  RecordMode record = RecordMode::none;
  std::vector<std::string> layers;  // empty: every attention layer
  bool keep_trajectory = false;
};

/// Inverts an already encoded state. The noise at each step is predicted from
/// the current state and timestep; a final pass at the top timestep records
/// the attention seen there, so each recorded timestep t holds the tensors of
/// the state at t.
inline InversionResult invert_state(const Backbone& backbone, const StateTensor& x0,
                                    const NoiseSchedule& sched, const InversionOptions& opt = {}) {
  if (!(x0.shape() == backbone.state_shape()))
    throw InvalidArgument("invert: state shape " + x0.shape().str() +
                          " does not match backbone state " + backbone.state_shape().str());
  if (!x0.all_finite()) throw NonFiniteError("non-finite input state", 0);

  InversionResult result;
  const std::set<int> keep(sched.ddim_steps.begin(), sched.ddim_steps.end());
  RecordingHook recorder(result.cache, opt.record, opt.layers, keep);
  AttentionHook* hook = opt.record == RecordMode::none ? nullptr : &recorder;
  if (opt.keep_trajectory) result.trajectory.emplace();

  StateTensor x = x0;
  int t = 0;
  for (const int t_next : sched.ddim_steps) {
    const StateTensor eps = backbone.predict_noise(x, t, t == 0 ? nullptr : hook);
    if (!eps.all_finite()) throw NonFiniteError("non-finite noise prediction during inversion", t);
    x = ddim_invert_step(x, eps, t, t_next, sched);
    if (!x.all_finite()) throw NonFiniteError("inversion produced non-finite values", t_next);
    if (result.trajectory) result.trajectory->push_back(x);
    t = t_next;
  }
  if (hook) backbone.predict_noise(x, t, hook);
  result.z_T = std::move(x);
  return result;
}

inline InversionResult invert(const Backbone& backbone, const Image& x0, const NoiseSchedule& sched,
                              RecordMode record = RecordMode::none) {
  InversionOptions opt;
  opt.record = record;
  return invert_state(backbone, backbone.encode(x0), sched, opt);
}

inline InversionResult invert(const Backbone& backbone, const Image& x0, const NoiseSchedule& sched,
                              const InversionOptions& opt) {
  return invert_state(backbone, backbone.encode(x0), sched, opt);
}

}  // namespace cellstyle
