#pragma once

// Recording and substituting self-attention tensors through AttentionHook.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "cellstyle/attention.hpp"
#include "cellstyle/backbone.hpp"
#include "cellstyle/error.hpp"
#include "cellstyle/schedule.hpp"

namespace cellstyle {

enum class Role : std::uint8_t { Q = 0, K = 1, V = 2 };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::Q: return "Q";
    case Role::K: return "K";
    case Role::V: return "V";
  }
  return "?";
}

enum class RecordMode { none, queries, keys_values, all };

inline bool records(RecordMode mode, Role r) {
  switch (mode) {
    case RecordMode::none: return false;
    case RecordMode::queries: return r == Role::Q;
    case RecordMode::keys_values: return r != Role::Q;
    case RecordMode::all: return true;
  }
  return false;
}

inline RecordMode parse_record_mode(const std::string& s) {
  if (s == "none") return RecordMode::none;
  if (s == "queries") return RecordMode::queries;
  if (s == "keys_values") return RecordMode::keys_values;
  if (s == "all") return RecordMode::all;
  throw InvalidArgument("unknown record mode '" + s + "'");
}

struct CacheKey {
  int timestep = 0;
  std::string layer;
  Role role = Role::Q;

  auto operator<=>(const CacheKey& o) const {
    return std::tie(timestep, layer, role) <=> std::tie(o.timestep, o.layer, o.role);
  }
  bool operator==(const CacheKey&) const = default;
};

class AttentionCache {
 public:
  void put(int timestep, const std::string& layer, Role role, HeadTensor t) {
    if (!t.all_finite())
      throw NonFiniteError("non-finite " + std::string(role_name(role)) + " tensor at layer " + layer,
                           timestep);
    if (role != Role::Q) {
      const Role other = role == Role::K ? Role::V : Role::K;
      auto it = entries_.find({timestep, layer, other});
      if (it != entries_.end() &&
          (it->second.num_heads() != t.num_heads() || it->second.tokens() != t.tokens()))
        throw InvalidArgument("K and V disagree in heads/tokens at layer " + layer + ", t=" +
                              std::to_string(timestep));
    }
    entries_[{timestep, layer, role}] = std::move(t);
  }

  bool contains(int timestep, const std::string& layer, Role role) const {
    return entries_.count({timestep, layer, role}) > 0;
  }

  const HeadTensor& get(int timestep, const std::string& layer, Role role) const {
    auto it = entries_.find({timestep, layer, role});
    if (it == entries_.end())
      throw ComputeError("attention cache miss: timestep " + std::to_string(timestep) + ", layer " +
                         layer + ", role " + role_name(role));
    return it->second;
  }

  std::size_t size() const noexcept { return entries_.size(); }
  bool empty() const noexcept { return entries_.empty(); }

  std::size_t count(Role role) const {
    return static_cast<std::size_t>(std::count_if(
        entries_.begin(), entries_.end(), [&](const auto& e) { return e.first.role == role; }));
  }

  std::vector<int> timesteps() const {
    std::set<int> s;
    for (const auto& [k, v] : entries_) s.insert(k.timestep);
    return {s.begin(), s.end()};
  }

  std::vector<std::string> layers() const {
    std::set<std::string> s;
    for (const auto& [k, v] : entries_) s.insert(k.layer);
    return {s.begin(), s.end()};
  }

  const std::map<CacheKey, HeadTensor>& entries() const noexcept { return entries_; }
  void clear() { entries_.clear(); }

 private:
  std::map<CacheKey, HeadTensor> entries_;
};

namespace detail {

constexpr char kCacheMagic[8] = {'C', 'S', 'T', 'Y', 'A', 'T', 'T', 'N'};
constexpr std::uint32_t kCacheVersion = 1;

template <class T>
void put_pod(std::ostream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
void get_pod(std::istream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace detail

/// Binary spill file: one shape-tagged record per (timestep, layer, role).
inline void save_cache(const AttentionCache& cache, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw WriteError("cannot write attention cache " + path.string());
  out.write(detail::kCacheMagic, sizeof(detail::kCacheMagic));
  detail::put_pod(out, detail::kCacheVersion);
  detail::put_pod(out, static_cast<std::uint64_t>(cache.size()));
  for (const auto& [key, t] : cache.entries()) {
    detail::put_pod(out, static_cast<std::int32_t>(key.timestep));
    detail::put_pod(out, static_cast<std::uint32_t>(key.layer.size()));
    out.write(key.layer.data(), static_cast<std::streamsize>(key.layer.size()));
    detail::put_pod(out, static_cast<std::uint8_t>(key.role));
    detail::put_pod(out, static_cast<std::int32_t>(t.num_heads()));
    detail::put_pod(out, static_cast<std::int32_t>(t.tokens()));
    detail::put_pod(out, static_cast<std::int32_t>(t.dim()));
    for (const auto& h : t.heads)
      for (Eigen::Index r = 0; r < h.rows(); ++r)
        for (Eigen::Index c = 0; c < h.cols(); ++c) detail::put_pod(out, h(r, c));
  }
  if (!out) throw WriteError("failed while writing attention cache " + path.string());
}

inline AttentionCache load_cache(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw FileNotFound(path.string());
  std::ifstream in(path, std::ios::binary);
  char magic[8] = {};
  in.read(magic, sizeof(magic));
  if (!in || !std::equal(magic, magic + 8, detail::kCacheMagic))
    throw DecodeError(path.string() + " is not an attention cache file");
  std::uint32_t version = 0;
  detail::get_pod(in, version);
  if (version != detail::kCacheVersion)
    throw DecodeError("unsupported attention cache version " + std::to_string(version));
  std::uint64_t n = 0;
  detail::get_pod(in, n);
  AttentionCache cache;
  for (std::uint64_t i = 0; i < n; ++i) {
    std::int32_t t = 0, heads = 0, tokens = 0, dim = 0;
    std::uint32_t len = 0;
    std::uint8_t role = 0;
    detail::get_pod(in, t);
    detail::get_pod(in, len);
    if (!in || len > 4096) throw DecodeError("corrupt attention cache record in " + path.string());
    std::string layer(len, '\0');
    in.read(layer.data(), len);
    detail::get_pod(in, role);
    detail::get_pod(in, heads);
    detail::get_pod(in, tokens);
    detail::get_pod(in, dim);
    if (!in || role > 2 || heads < 0 || tokens < 0 || dim < 0)
      throw DecodeError("corrupt attention cache record in " + path.string());
    HeadTensor ht = HeadTensor::zeros(heads, tokens, dim);
    for (auto& h : ht.heads)
      for (Eigen::Index r = 0; r < h.rows(); ++r)
        for (Eigen::Index c = 0; c < h.cols(); ++c) detail::get_pod(in, h(r, c));
    if (!in) throw DecodeError("truncated attention cache " + path.string());
    cache.put(t, layer, static_cast<Role>(role), std::move(ht));
  }
  return cache;
}

/// Copies the live projections of the chosen layers into a cache. Only
/// timesteps in `keep` are stored when it is non-empty.
class RecordingHook final : public AttentionHook {
 public:
  RecordingHook(AttentionCache& cache, RecordMode mode, std::vector<std::string> layers = {},
                std::set<int> keep = {})
      : cache_(cache), mode_(mode), layers_(layers.begin(), layers.end()), keep_(std::move(keep)) {}

  std::optional<HeadTensor> on_attention(const AttentionSite& site, const HeadTensor& q,
                                         const HeadTensor& k, const HeadTensor& v) override {
    if (mode_ == RecordMode::none) return std::nullopt;
    if (!layers_.empty() && !layers_.count(site.layer)) return std::nullopt;
    if (!keep_.empty() && !keep_.count(site.timestep)) return std::nullopt;
    if (records(mode_, Role::Q)) cache_.put(site.timestep, site.layer, Role::Q, q);
    if (records(mode_, Role::K)) cache_.put(site.timestep, site.layer, Role::K, k);
    if (records(mode_, Role::V)) cache_.put(site.timestep, site.layer, Role::V, v);
    return std::nullopt;
  }

 private:
  AttentionCache& cache_;
  RecordMode mode_;
  std::set<std::string> layers_;
  std::set<int> keep_;
};

/// The final n_last self-attention layers in forward order.
inline std::vector<std::string> select_injection_layers(const Backbone& backbone, int n_last) {
  const auto all = backbone.attention_layers();
  if (n_last < 1 || n_last > static_cast<int>(all.size()))
    throw InvalidArgument("n_last must lie in [1, " + std::to_string(all.size()) + "], got " +
                          std::to_string(n_last));
  return {all.end() - n_last, all.end()};
}

/// softmax(alpha * Q K^T / sqrt(d)) V per head.
inline HeadTensor injected_attention(const HeadTensor& q, const HeadTensor& k, const HeadTensor& v,
                                     double alpha) {
  return scaled_attention(q, k, v, alpha);
}

struct InjectionPlan {
  std::vector<std::string> layers;
  double alpha = 1.0;
  const AttentionCache* source_cache = nullptr;  // Q role
  const AttentionCache* target_cache = nullptr;  // K and V roles
  bool replay_source_queries = false;

  /// Every planned (timestep, layer) must be present before generation starts.
  void validate(const NoiseSchedule& sched) const {
    if (!(alpha > 0.0) || !std::isfinite(alpha))
      throw InvalidArgument("alpha must be positive and finite");
    if (layers.empty()) return;
    if (!target_cache) throw InvalidArgument("injection plan has layers but no target cache");
    if (replay_source_queries && !source_cache)
      throw InvalidArgument("replaying source queries needs a source cache");
    for (int t : sched.ddim_steps)
      for (const auto& l : layers) {
        target_cache->get(t, l, Role::K);
        target_cache->get(t, l, Role::V);
        if (replay_source_queries) source_cache->get(t, l, Role::Q);
      }
  }
};

class InjectionHook final : public AttentionHook {
 public:
  explicit InjectionHook(const InjectionPlan& plan)
      : plan_(plan), layers_(plan.layers.begin(), plan.layers.end()) {}

  std::optional<HeadTensor> on_attention(const AttentionSite& site, const HeadTensor& q,
                                         const HeadTensor& k, const HeadTensor& v) override {
    (void)k;
    (void)v;
    if (!layers_.count(site.layer)) return std::nullopt;
    const HeadTensor& kt = plan_.target_cache->get(site.timestep, site.layer, Role::K);
    const HeadTensor& vt = plan_.target_cache->get(site.timestep, site.layer, Role::V);
    const HeadTensor& qs =
        plan_.replay_source_queries ? plan_.source_cache->get(site.timestep, site.layer, Role::Q) : q;
    return injected_attention(qs, kt, vt, plan_.alpha);
  }

 private:
  const InjectionPlan& plan_;
  std::set<std::string> layers_;
};

/// Reverse DDIM chain from x_T with the planned layers' attention replaced.
inline StateTensor run_with_injection(const Backbone& backbone, const StateTensor& x_T,
                                      const InjectionPlan& plan, const NoiseSchedule& sched) {
  plan.validate(sched);
  if (!(x_T.shape() == backbone.state_shape()))
    throw InvalidArgument("run_with_injection: x_T shape " + x_T.shape().str() +
                          " does not match backbone state " + backbone.state_shape().str());
  InjectionHook hook(plan);
  AttentionHook* h = plan.layers.empty() ? nullptr : &hook;
  StateTensor x = x_T;
  for (std::size_t i = sched.ddim_steps.size(); i-- > 0;) {
    const int t = sched.ddim_steps[i];
    const StateTensor eps = backbone.predict_noise(x, t, h);
    x = ddim_step(x, eps, t, sched.previous(i), sched);
    if (!x.all_finite()) throw NonFiniteError("styled generation produced non-finite values", t);
  }
  return x;
}

}  // namespace cellstyle
