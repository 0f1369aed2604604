#pragma once

// Score scaling ratio between self and cross attention.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellstyle/attention.hpp"
#include "cellstyle/attention_control.hpp"
#include "cellstyle/backbone.hpp"
#include "cellstyle/error.hpp"
#include "cellstyle/inversion.hpp"
#include "cellstyle/parallel.hpp"

namespace cellstyle {

/// Population standard deviation over every entry of Q K^T / sqrt(d), all heads pooled.
inline double attention_score_std(const HeadTensor& q, const HeadTensor& k) {
  detail::check_attention_operands(q, k);
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim()));
  double n = 0.0, mean = 0.0, m2 = 0.0;
  for (std::size_t h = 0; h < q.heads.size(); ++h) {
    const Eigen::MatrixXd s =
        (q.heads[h].cast<double>() * k.heads[h].cast<double>().transpose()) * scale;
    for (Eigen::Index i = 0; i < s.size(); ++i) {
      n += 1.0;
      const double d = s.data()[i] - mean;
      mean += d / n;
      m2 += d * (s.data()[i] - mean);
    }
  }
  return n > 0.0 ? std::sqrt(std::max(0.0, m2 / n)) : 0.0;
}

namespace detail {

// Same as attention_score_std but pooled over several layers.
inline double pooled_score_std(const std::vector<std::pair<const HeadTensor*, const HeadTensor*>>& qk) {
  double n = 0.0, mean = 0.0, m2 = 0.0;
  for (const auto& [q, k] : qk) {
    check_attention_operands(*q, *k);
    const double scale = 1.0 / std::sqrt(static_cast<double>(q->dim()));
    for (std::size_t h = 0; h < q->heads.size(); ++h) {
      const Eigen::MatrixXd s =
          (q->heads[h].cast<double>() * k->heads[h].cast<double>().transpose()) * scale;
      for (Eigen::Index i = 0; i < s.size(); ++i) {
        n += 1.0;
        const double d = s.data()[i] - mean;
        mean += d / n;
        m2 += d * (s.data()[i] - mean);
      }
    }
  }
  return n > 0.0 ? std::sqrt(std::max(0.0, m2 / n)) : 0.0;
}

}  // namespace detail

struct AlphaEstimate {
  double alpha = 1.0;
  int n_pairs_sampled = 0;
  std::vector<int> timesteps;               // aligned with per_timestep_ratios
  std::vector<double> per_timestep_ratios;  // mean over pairs and layers
  std::vector<std::string> layers_used;
  std::map<std::string, double> per_layer_alpha;
  double pooled_alpha = 0.0;  // ratio of stds pooled across layers
  int excluded_ratios = 0;    // zero cross-score deviation
  int total_ratios = 0;
};

inline void to_json(nlohmann::json& j, const AlphaEstimate& a) {
  j = {{"alpha", a.alpha},
       {"n_pairs_sampled", a.n_pairs_sampled},
       {"timesteps", a.timesteps},
       {"per_timestep_ratios", a.per_timestep_ratios},
       {"layers_used", a.layers_used},
       {"per_layer_alpha", a.per_layer_alpha},
       {"pooled_alpha", a.pooled_alpha},
       {"excluded_ratios", a.excluded_ratios},
       {"total_ratios", a.total_ratios}};
}

inline void from_json(const nlohmann::json& j, AlphaEstimate& a) {
  a = AlphaEstimate{};
  j.at("alpha").get_to(a.alpha);
  a.n_pairs_sampled = j.value("n_pairs_sampled", 0);
  a.timesteps = j.value("timesteps", std::vector<int>{});
  a.per_timestep_ratios = j.value("per_timestep_ratios", std::vector<double>{});
  a.layers_used = j.value("layers_used", std::vector<std::string>{});
  a.per_layer_alpha = j.value("per_layer_alpha", std::map<std::string, double>{});
  a.pooled_alpha = j.value("pooled_alpha", 0.0);
  a.excluded_ratios = j.value("excluded_ratios", 0);
  a.total_ratios = j.value("total_ratios", 0);
  if (!(a.alpha > 0.0) || !std::isfinite(a.alpha)) throw ConfigError("alpha must be positive and finite");
}

/// Draws `count` (source, target) index pairs uniformly with replacement.
inline std::vector<std::pair<std::size_t, std::size_t>> sample_pairs(std::size_t n_src, std::size_t n_tgt,
                                                                     std::size_t count,
                                                                     std::uint64_t seed) {
  if (n_src == 0 || n_tgt == 0) throw InvalidArgument("cannot sample pairs from an empty set");
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> ds(0, n_src - 1), dt(0, n_tgt - 1);
  std::vector<std::pair<std::size_t, std::size_t>> out(count);
  for (auto& p : out) {
    p.first = ds(rng);
    p.second = dt(rng);
  }
  return out;
}

/// Pairs src[i % ns] with tgt[i % nt] for i < max(ns, nt). For every pair,
/// timestep and layer: ratio = std(Q_src K_src^T) / std(Q_src K_tgt^T).
/// alpha is the mean over timesteps of the per-timestep mean over pairs and
/// layers.
inline AlphaEstimate compute_alpha(const Backbone& backbone, const std::vector<Image>& src_samples,
                                   const std::vector<Image>& tgt_samples, const NoiseSchedule& sched,
                                   const std::vector<std::string>& layers, unsigned workers = 1) {
  if (src_samples.empty() || tgt_samples.empty())
    throw InvalidArgument("alpha needs at least one source and one target sample");
  if (layers.empty()) throw InvalidArgument("alpha needs at least one attention layer");
  const auto known = backbone.attention_layers();
  for (const auto& l : layers)
    if (std::find(known.begin(), known.end(), l) == known.end())
      throw InvalidArgument("unknown attention layer '" + l + "'");

  const std::size_t n_pairs = std::max(src_samples.size(), tgt_samples.size());
  const std::size_t n_t = sched.ddim_steps.size(), n_l = layers.size();
  // ratio[pair][t][layer], NaN when excluded
  std::vector<double> ratio(n_pairs * n_t * n_l, std::nan(""));
  std::vector<double> pooled(n_pairs * n_t, std::nan(""));

  InversionOptions src_opt;
  src_opt.record = RecordMode::all;
  src_opt.layers = layers;
  InversionOptions tgt_opt;
  tgt_opt.record = RecordMode::keys_values;
  tgt_opt.layers = layers;

  parallel_for(n_pairs, workers, [&](std::size_t p) {
    const auto src = invert(backbone, src_samples[p % src_samples.size()], sched, src_opt);
    const auto tgt = invert(backbone, tgt_samples[p % tgt_samples.size()], sched, tgt_opt);
    for (std::size_t ti = 0; ti < n_t; ++ti) {
      const int t = sched.ddim_steps[ti];
      std::vector<std::pair<const HeadTensor*, const HeadTensor*>> self, cross;
      for (std::size_t li = 0; li < n_l; ++li) {
        const HeadTensor& q = src.cache.get(t, layers[li], Role::Q);
        const HeadTensor& ks = src.cache.get(t, layers[li], Role::K);
        const HeadTensor& kt = tgt.cache.get(t, layers[li], Role::K);
        self.emplace_back(&q, &ks);
        cross.emplace_back(&q, &kt);
        const double den = attention_score_std(q, kt);
        if (den > 0.0) ratio[(p * n_t + ti) * n_l + li] = attention_score_std(q, ks) / den;
      }
      const double den = detail::pooled_score_std(cross);
      if (den > 0.0) pooled[p * n_t + ti] = detail::pooled_score_std(self) / den;
    }
  });

  AlphaEstimate est;
  est.n_pairs_sampled = static_cast<int>(n_pairs);
  est.layers_used = layers;
  est.total_ratios = static_cast<int>(ratio.size());
  for (double r : ratio)
    if (std::isnan(r)) ++est.excluded_ratios;

  for (std::size_t ti = 0; ti < n_t; ++ti) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t p = 0; p < n_pairs; ++p)
      for (std::size_t li = 0; li < n_l; ++li) {
        const double r = ratio[(p * n_t + ti) * n_l + li];
        if (!std::isnan(r)) {
          sum += r;
          ++n;
        }
      }
    if (n == 0) continue;
    est.timesteps.push_back(sched.ddim_steps[ti]);
    est.per_timestep_ratios.push_back(sum / n);
  }
  if (est.per_timestep_ratios.empty())
    throw ComputeError("alpha undefined for pair: every cross-attention score deviation is zero");
  double total = 0.0;
  for (double r : est.per_timestep_ratios) total += r;
  est.alpha = total / static_cast<double>(est.per_timestep_ratios.size());
  if (!std::isfinite(est.alpha) || !(est.alpha > 0.0))
    throw ComputeError("alpha is not a positive finite number");

  for (std::size_t li = 0; li < n_l; ++li) {
    double sum = 0.0;
    int n = 0;
    for (std::size_t k = 0; k < n_pairs * n_t; ++k) {
      const double r = ratio[k * n_l + li];
      if (!std::isnan(r)) {
        sum += r;
        ++n;
      }
    }
    if (n) est.per_layer_alpha[layers[li]] = sum / n;
  }
  double psum = 0.0;
  int pn = 0;
  for (double r : pooled)
    if (!std::isnan(r)) {
      psum += r;
      ++pn;
    }
  est.pooled_alpha = pn ? psum / pn : 0.0;
  return est;
}

}  // namespace cellstyle
