#pragma once

// Size matching, dual inversion, alpha and injected generation for one pair,
// plus resumable batch production of a styled dataset.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellstyle/adaptive_alpha.hpp"
#include "cellstyle/attention_control.hpp"
#include "cellstyle/backbone.hpp"
#include "cellstyle/error.hpp"
#include "cellstyle/imaging.hpp"
#include "cellstyle/inversion.hpp"
#include "cellstyle/parallel.hpp"
#include "cellstyle/size_match.hpp"

namespace cellstyle {

namespace fs = std::filesystem;

/// Failure inside one stage of the per-record pipeline.
class StageError : public ComputeError {
 public:
  StageError(std::string stage, const std::string& what)
      : ComputeError(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

struct AlphaMode {
  bool adaptive = true;
  double value = 1.5;

  std::string str() const {
    if (adaptive) return "adaptive";
    std::ostringstream s;
    s << "fixed:" << value;
    return s.str();
  }

  static AlphaMode parse(const std::string& s) {
    if (s == "adaptive") return {};
    if (s.rfind("fixed:", 0) == 0) {
      AlphaMode m{false, 0.0};
      try {
        std::size_t used = 0;
        m.value = std::stod(s.substr(6), &used);
        if (used != s.size() - 6) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ConfigError("bad alpha mode '" + s + "'");
      }
      if (!(m.value > 0.0) || !std::isfinite(m.value))
        throw ConfigError("fixed alpha must be positive, got '" + s + "'");
      return m;
    }
    throw ConfigError("alpha mode must be 'adaptive' or 'fixed:<value>', got '" + s + "'");
  }
};

struct Ablation {
  bool use_size_match = true;
  AlphaMode alpha_mode;
  bool style_transfer = true;  // false: size matching only
  bool replay_source_queries = false;
};

inline void to_json(nlohmann::json& j, const Ablation& a) {
  j = {{"use_size_match", a.use_size_match},
       {"alpha_mode", a.alpha_mode.str()},
       {"style_transfer", a.style_transfer},
       {"replay_source_queries", a.replay_source_queries}};
}

inline void from_json(const nlohmann::json& j, Ablation& a) {
  a = Ablation{};
  a.use_size_match = j.value("use_size_match", true);
  a.alpha_mode = AlphaMode::parse(j.value("alpha_mode", std::string("adaptive")));
  a.style_transfer = j.value("style_transfer", true);
  a.replay_source_queries = j.value("replay_source_queries", false);
}

inline void to_json(nlohmann::json& j, const SizeRatio& r) {
  j = {{"r", r.r},
       {"mean_len_src", r.mean_len_src},
       {"mean_len_tgt", r.mean_len_tgt},
       {"n_src_instances", r.n_src_instances},
       {"n_tgt_instances", r.n_tgt_instances},
       {"inverted", r.inverted}};
}

inline void from_json(const nlohmann::json& j, SizeRatio& r) {
  r = SizeRatio{};
  j.at("r").get_to(r.r);
  r.mean_len_src = j.value("mean_len_src", 0.0);
  r.mean_len_tgt = j.value("mean_len_tgt", 0.0);
  r.n_src_instances = j.value("n_src_instances", std::size_t{0});
  r.n_tgt_instances = j.value("n_tgt_instances", std::size_t{0});
  r.inverted = j.value("inverted", false);
  if (!(r.r > 0.0) || !std::isfinite(r.r)) throw ConfigError("size ratio must be positive and finite");
}

inline constexpr const char* kManifestFormat = "cellstyle-pair-manifest";
inline constexpr int kManifestVersion = 1;

struct PairManifest {
  std::string pair_id = "0";
  std::vector<fs::path> src_images;
  std::vector<fs::path> src_masks;
  std::vector<fs::path> tgt_images;
  std::string detector_id = "naive-otsu";
  std::optional<SizeRatio> r;
  std::optional<AlphaEstimate> alpha;
  int n_combinations = 4000;
  std::uint64_t seed = 0;
  int working_height = 0;  // 0: backbone size
  int working_width = 0;
  int n_last = 6;
  int alpha_pairs = 8;
  bool invert_ratio = false;
  Ablation ablation;

  /// Structural checks; paths are checked separately.
  void validate() const {
    if (src_images.empty()) throw ConfigError("manifest lists no source images");
    if (tgt_images.empty()) throw ConfigError("manifest lists no target images");
    if (src_images.size() != src_masks.size())
      throw ConfigError("manifest has " + std::to_string(src_images.size()) + " source images but " +
                        std::to_string(src_masks.size()) + " source masks");
    if (n_combinations < 1) throw ConfigError("n_combinations must be >= 1");
    if (n_last < 1) throw ConfigError("n_last must be >= 1");
    if (alpha_pairs < 1) throw ConfigError("alpha_pairs must be >= 1");
    if (working_height < 0 || working_width < 0) throw ConfigError("working size must be non-negative");
  }

  void check_paths() const {
    for (const auto* list : {&src_images, &src_masks, &tgt_images})
      for (const auto& p : *list)
        if (!fs::exists(p)) throw ConfigError("manifest path does not exist: " + p.string());
  }
};

namespace detail {

inline std::vector<std::string> relative_paths(const std::vector<fs::path>& paths, const fs::path& base) {
  std::vector<std::string> out;
  for (const auto& p : paths) {
    std::error_code ec;
    const fs::path rel = base.empty() ? p : fs::relative(p, base, ec);
    out.push_back(ec || rel.empty() ? p.string() : rel.generic_string());
  }
  return out;
}

inline std::vector<fs::path> resolve_paths(const nlohmann::json& j, const char* key, const fs::path& base) {
  std::vector<fs::path> out;
  if (!j.contains(key)) return out;
  if (!j.at(key).is_array()) throw ConfigError(std::string("manifest field '") + key + "' must be a list");
  for (const auto& v : j.at(key)) {
    fs::path p = v.get<std::string>();
    out.push_back(p.is_absolute() || base.empty() ? p : base / p);
  }
  return out;
}

}  // namespace detail

/// Paths are written relative to `base` when possible.
inline nlohmann::json manifest_to_json(const PairManifest& m, const fs::path& base = {}) {
  nlohmann::json j;
  j["format"] = kManifestFormat;
  j["version"] = kManifestVersion;
  j["pair_id"] = m.pair_id;
  j["src_images"] = detail::relative_paths(m.src_images, base);
  j["src_masks"] = detail::relative_paths(m.src_masks, base);
  j["tgt_images"] = detail::relative_paths(m.tgt_images, base);
  j["detector_id"] = m.detector_id;
  j["r"] = m.r ? nlohmann::json(*m.r) : nlohmann::json(nullptr);
  j["alpha"] = m.alpha ? nlohmann::json(*m.alpha) : nlohmann::json(nullptr);
  j["n_combinations"] = m.n_combinations;
  j["seed"] = m.seed;
  j["working_size"] = {m.working_height, m.working_width};
  j["n_last"] = m.n_last;
  j["alpha_pairs"] = m.alpha_pairs;
  j["invert_ratio"] = m.invert_ratio;
  j["ablation"] = m.ablation;
  return j;
}

inline PairManifest manifest_from_json(const nlohmann::json& j, const fs::path& base = {}) {
  try {
    if (j.value("format", std::string()) != kManifestFormat)
      throw ConfigError("not a pair manifest (format field is missing or wrong)");
    const int version = j.value("version", 0);
    if (version != kManifestVersion)
      throw ConfigError("unsupported manifest version " + std::to_string(version));
    PairManifest m;
    m.pair_id = j.value("pair_id", std::string("0"));
    m.src_images = detail::resolve_paths(j, "src_images", base);
    m.src_masks = detail::resolve_paths(j, "src_masks", base);
    m.tgt_images = detail::resolve_paths(j, "tgt_images", base);
    m.detector_id = j.value("detector_id", std::string("naive-otsu"));
    if (j.contains("r") && !j.at("r").is_null()) m.r = j.at("r").get<SizeRatio>();
    if (j.contains("alpha") && !j.at("alpha").is_null()) m.alpha = j.at("alpha").get<AlphaEstimate>();
    m.n_combinations = j.value("n_combinations", 4000);
    m.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("working_size")) {
      const auto& ws = j.at("working_size");
      if (!ws.is_array() || ws.size() != 2) throw ConfigError("working_size must be [height, width]");
      m.working_height = ws[0].get<int>();
      m.working_width = ws[1].get<int>();
    }
    m.n_last = j.value("n_last", 6);
    m.alpha_pairs = j.value("alpha_pairs", 8);
    m.invert_ratio = j.value("invert_ratio", false);
    if (j.contains("ablation")) m.ablation = j.at("ablation").get<Ablation>();
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed manifest: ") + e.what());
  }
}

inline PairManifest load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("manifest not found: " + path.string());
  std::ifstream in(path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("cannot parse manifest " + path.string() + ": " + e.what());
  }
  return manifest_from_json(j, path.parent_path());
}

/// Writes through a temporary file so a crash never leaves a torn manifest.
inline void save_manifest(const PairManifest& m, const fs::path& path) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw WriteError("cannot write manifest " + path.string());
    out << manifest_to_json(m, path.parent_path()).dump(2) << '\n';
    if (!out) throw WriteError("failed while writing manifest " + path.string());
  }
  fs::rename(tmp, path);
}

/// n_last clipped to the backbone's attention layer count.
inline std::vector<std::string> injection_layers(const Backbone& backbone, int n_last) {
  const int total = static_cast<int>(backbone.attention_layers().size());
  return select_injection_layers(backbone, std::min(n_last, total));
}

inline std::pair<int, int> working_size(const PairManifest& m, const Backbone& backbone) {
  return {m.working_height > 0 ? m.working_height : backbone.image_height(),
          m.working_width > 0 ? m.working_width : backbone.image_width()};
}

inline std::vector<Image> load_images(const std::vector<fs::path>& paths) {
  std::vector<Image> out;
  out.reserve(paths.size());
  for (const auto& p : paths) out.push_back(load_image(p));
  return out;
}

inline std::vector<InstanceMask> load_masks(const std::vector<fs::path>& paths) {
  std::vector<InstanceMask> out;
  out.reserve(paths.size());
  for (const auto& p : paths) out.push_back(load_mask(p));
  return out;
}

inline Detector detector_from_id(const std::string& id) {
  if (id == "naive-otsu") return make_naive_detector();
  if (id.rfind("naive-fixed:", 0) == 0) {
    try {
      return make_naive_detector(std::stod(id.substr(12)));
    } catch (const std::exception&) {
      throw ConfigError("bad detector threshold in '" + id + "'");
    }
  }
  if (id.rfind("command:", 0) == 0) return make_command_detector(id.substr(8));
  throw ConfigError("unknown detector '" + id + "'");
}

/// Fills manifest.r from source masks and detector output on the targets.
inline SizeRatio resolve_ratio(PairManifest& m, const Detector& detector) {
  m.validate();
  m.check_paths();
  m.detector_id = detector.id;
  m.r = compute_size_ratio(load_masks(m.src_masks), load_images(m.tgt_images), detector, m.invert_ratio);
  return *m.r;
}

/// Scale applied to targets so their cells match the sources in working space.
inline double effective_target_scale(double r_used, const Image& src, int work_h) {
  return r_used * static_cast<double>(work_h) / static_cast<double>(src.height());
}

inline Image to_working(const Image& img, int h, int w, int channels) {
  Image out = to_channels(img, channels);
  if (out.height() != h || out.width() != w) out = resize_image(out, h, w, Interpolation::bilinear);
  return out;
}

/// Fills manifest.alpha from alpha_pairs seeded (source, target) draws.
inline AlphaEstimate resolve_alpha(PairManifest& m, const Backbone& backbone, const NoiseSchedule& sched,
                                   unsigned workers = 1) {
  m.validate();
  m.check_paths();
  const double r_used = m.ablation.use_size_match ? (m.r ? m.r->r : 1.0) : 1.0;
  if (m.ablation.use_size_match && !m.r) throw ConfigError("size ratio not resolved; run ratio first");
  const auto [h, w] = working_size(m, backbone);
  const auto pairs = sample_pairs(m.src_images.size(), m.tgt_images.size(),
                                  static_cast<std::size_t>(m.alpha_pairs), m.seed ^ 0xa1fa);
  std::vector<Image> src, tgt;
  for (const auto& [si, ti] : pairs) {
    const Image s = load_image(m.src_images[si]);
    const Image t = load_image(m.tgt_images[ti]);
    src.push_back(to_working(s, h, w, backbone.image_channels()));
    tgt.push_back(to_channels(prepare_target(t, effective_target_scale(r_used, s, h), h, w),
                              backbone.image_channels()));
  }
  m.alpha = compute_alpha(backbone, src, tgt, sched, injection_layers(backbone, m.n_last), workers);
  return *m.alpha;
}

struct StyleConfig {
  double alpha = 1.0;
  std::vector<std::string> layers;
  bool replay_source_queries = false;
};

/// Styled version of x_src. x_tgt must already be prepared at working size.
/// Output has the dimensions and channel count of x_src.
inline Image stylize_pair(const Backbone& backbone, const Image& x_src, const Image& x_tgt,
                          const InstanceMask& m_src, const StyleConfig& cfg, const NoiseSchedule& sched) {
  if (m_src.height() != x_src.height() || m_src.width() != x_src.width())
    throw StageError("load", "source image and mask dimensions differ");
  const int h = backbone.image_height(), w = backbone.image_width(), ch = backbone.image_channels();
  auto stage = [](const char* name, auto&& fn) {
    try {
      return fn();
    } catch (const StageError&) {
      throw;
    } catch (const std::exception& e) {
      throw StageError(name, e.what());
    }
  };

  const Image src_w = stage("prepare_source", [&] { return to_working(x_src, h, w, ch); });
  const Image tgt_w = stage("prepare_target", [&] {
    if (x_tgt.height() != h || x_tgt.width() != w)
      throw InvalidArgument("target is " + std::to_string(x_tgt.height()) + "x" +
                            std::to_string(x_tgt.width()) + ", expected working size " +
                            std::to_string(h) + "x" + std::to_string(w));
    return to_channels(x_tgt, ch);
  });

  InversionOptions src_opt;
  src_opt.record = cfg.replay_source_queries ? RecordMode::queries : RecordMode::none;
  src_opt.layers = cfg.layers;
  InversionOptions tgt_opt;
  tgt_opt.record = RecordMode::keys_values;
  tgt_opt.layers = cfg.layers;

  const auto src_inv = stage("invert_source", [&] { return invert(backbone, src_w, sched, src_opt); });
  const auto tgt_inv = stage("invert_target", [&] { return invert(backbone, tgt_w, sched, tgt_opt); });
  const StateTensor z0 = stage("generate", [&] {
    InjectionPlan plan{cfg.layers, cfg.alpha, &src_inv.cache, &tgt_inv.cache, cfg.replay_source_queries};
    return run_with_injection(backbone, src_inv.z_T, plan, sched);
  });
  return stage("decode", [&] {
    Image out = backbone.decode(z0);
    if (out.height() != x_src.height() || out.width() != x_src.width())
      out = resize_image(out, x_src.height(), x_src.width(), Interpolation::bilinear);
    return to_channels(out, x_src.channels());
  });
}

struct StyledRecord {
  int index = 0;
  std::string status = "ok";  // ok | error
  std::string styled_image_path;
  std::string mask_path;         // written next to the styled image
  std::string source_mask_path;  // original annotation
  int src_index = 0;
  int tgt_index = 0;
  double alpha_used = 1.0;
  double r_used = 1.0;
  std::uint64_t seed = 0;
  std::string error_stage;
  std::string error;
  Ablation ablation;
};

inline void to_json(nlohmann::json& j, const StyledRecord& r) {
  j = {{"index", r.index},
       {"status", r.status},
       {"styled_image_path", r.styled_image_path},
       {"mask_path", r.mask_path},
       {"source_mask_path", r.source_mask_path},
       {"src_index", r.src_index},
       {"tgt_index", r.tgt_index},
       {"alpha_used", r.alpha_used},
       {"r_used", r.r_used},
       {"seed", r.seed},
       {"ablation", r.ablation}};
  if (r.status != "ok") {
    j["error_stage"] = r.error_stage;
    j["error"] = r.error;
  }
}

inline void from_json(const nlohmann::json& j, StyledRecord& r) {
  r = StyledRecord{};
  r.index = j.at("index").get<int>();
  r.status = j.value("status", std::string("ok"));
  r.styled_image_path = j.value("styled_image_path", std::string());
  r.mask_path = j.value("mask_path", std::string());
  r.source_mask_path = j.value("source_mask_path", std::string());
  r.src_index = j.value("src_index", 0);
  r.tgt_index = j.value("tgt_index", 0);
  r.alpha_used = j.value("alpha_used", 1.0);
  r.r_used = j.value("r_used", 1.0);
  r.seed = j.value("seed", std::uint64_t{0});
  r.error_stage = j.value("error_stage", std::string());
  r.error = j.value("error", std::string());
  if (j.contains("ablation")) r.ablation = j.at("ablation").get<Ablation>();
}

struct Combination {
  int src_index = 0;
  int tgt_index = 0;
  std::uint64_t seed = 0;
};

/// Source index cycles; target index is drawn uniformly with replacement.
inline std::vector<Combination> sample_combinations(const PairManifest& m) {
  std::mt19937_64 rng(m.seed);
  std::uniform_int_distribution<int> tgt(0, static_cast<int>(m.tgt_images.size()) - 1);
  std::vector<Combination> out(static_cast<std::size_t>(m.n_combinations));
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].src_index = static_cast<int>(i % m.src_images.size());
    out[i].tgt_index = tgt(rng);
    out[i].seed = m.seed * 1000003ULL + i;
  }
  return out;
}

struct GenerateOptions {
  fs::path out_root;
  unsigned workers = 1;
  std::function<void(const StyledRecord&)> on_record;
};

struct GenerateSummary {
  std::vector<StyledRecord> records;  // one per combination, by index
  int generated = 0;
  int skipped = 0;
  int failed = 0;
  fs::path pair_dir;
};

inline fs::path pair_directory(const fs::path& out_root, const std::string& pair_id) {
  return out_root / ("pair_" + pair_id);
}

/// Latest journal line per index.
inline std::map<int, StyledRecord> read_journal(const fs::path& path) {
  std::map<int, StyledRecord> out;
  std::ifstream in(path);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      auto rec = nlohmann::json::parse(line).get<StyledRecord>();
      out[rec.index] = std::move(rec);
    } catch (const std::exception&) {
      // a torn final line from an interrupted run
    }
  }
  return out;
}

inline double resolved_alpha(const PairManifest& m) {
  if (!m.ablation.alpha_mode.adaptive) return m.ablation.alpha_mode.value;
  if (!m.alpha) throw ConfigError("alpha not resolved; run alpha first or use a fixed alpha mode");
  return m.alpha->alpha;
}

inline double resolved_ratio(const PairManifest& m) {
  if (!m.ablation.use_size_match) return 1.0;
  if (!m.r) throw ConfigError("size ratio not resolved; run ratio first or disable size matching");
  return m.r->r;
}

/// Produces n_combinations styled records under <out_root>/pair_<id>/. Records
/// already journaled as ok with both files present are kept.
inline GenerateSummary generate_dataset(const PairManifest& m, const Backbone& backbone,
                                        const NoiseSchedule& sched, const GenerateOptions& opt) {
  m.validate();
  m.check_paths();
  if (opt.out_root.empty()) throw ConfigError("no output directory given");
  const double alpha = m.ablation.style_transfer ? resolved_alpha(m) : 1.0;
  const double r_used = resolved_ratio(m);
  const auto [h, w] = working_size(m, backbone);
  if (h != backbone.image_height() || w != backbone.image_width())
    throw ConfigError("working size " + std::to_string(h) + "x" + std::to_string(w) +
                      " differs from the backbone's " + std::to_string(backbone.image_height()) + "x" +
                      std::to_string(backbone.image_width()));
  StyleConfig style{alpha, injection_layers(backbone, m.n_last), m.ablation.replay_source_queries};

  GenerateSummary summary;
  summary.pair_dir = pair_directory(opt.out_root, m.pair_id);
  fs::create_directories(summary.pair_dir / "images");
  fs::create_directories(summary.pair_dir / "masks");
  const fs::path journal_path = summary.pair_dir / "records.jsonl";
  const auto done = read_journal(journal_path);

  const auto combos = sample_combinations(m);
  summary.records.resize(combos.size());
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < combos.size(); ++i) {
    auto it = done.find(static_cast<int>(i));
    if (it != done.end() && it->second.status == "ok" &&
        fs::exists(summary.pair_dir / it->second.styled_image_path) &&
        fs::exists(summary.pair_dir / it->second.mask_path)) {
      summary.records[i] = it->second;
      ++summary.skipped;
    } else {
      todo.push_back(i);
    }
  }

  std::ofstream journal(journal_path, std::ios::app);
  if (!journal) throw WriteError("cannot open journal " + journal_path.string());
  std::mutex journal_mutex;

  parallel_for(todo.size(), opt.workers, [&](std::size_t k) {
    const std::size_t i = todo[k];
    const Combination& c = combos[i];
    StyledRecord rec;
    rec.index = static_cast<int>(i);
    rec.src_index = c.src_index;
    rec.tgt_index = c.tgt_index;
    rec.seed = c.seed;
    rec.alpha_used = alpha;
    rec.r_used = r_used;
    rec.ablation = m.ablation;
    rec.source_mask_path = m.src_masks[static_cast<std::size_t>(c.src_index)].string();
    char name[32];
    std::snprintf(name, sizeof(name), "%05zu.tif", i);
    rec.styled_image_path = (fs::path("images") / name).generic_string();
    rec.mask_path = (fs::path("masks") / name).generic_string();
    try {
      Image src;
      InstanceMask mask;
      Image tgt;
      try {
        src = load_image(m.src_images[static_cast<std::size_t>(c.src_index)]);
        mask = load_mask(m.src_masks[static_cast<std::size_t>(c.src_index)]);
        tgt = load_image(m.tgt_images[static_cast<std::size_t>(c.tgt_index)]);
      } catch (const std::exception& e) {
        throw StageError("load", e.what());
      }
      Image styled;
      if (m.ablation.style_transfer) {
        Image prepared;
        try {
          prepared = prepare_target(tgt, effective_target_scale(r_used, src, h), h, w);
        } catch (const std::exception& e) {
          throw StageError("prepare_target", e.what());
        }
        styled = stylize_pair(backbone, src, prepared, mask, style, sched);
      } else {
        // size matching only: sources shown at the target's cell scale
        try {
          styled = r_used == 1.0 ? src : rescale_image(src, 1.0 / r_used, Interpolation::bilinear);
          if (r_used != 1.0) mask = resize_mask(mask, styled.height(), styled.width());
        } catch (const std::exception& e) {
          throw StageError("rescale_source", e.what());
        }
      }
      try {
        save_image(styled, summary.pair_dir / rec.styled_image_path);
        save_mask(mask, summary.pair_dir / rec.mask_path);
      } catch (const std::exception& e) {
        throw StageError("write", e.what());
      }
    } catch (const StageError& e) {
      rec.status = "error";
      rec.error_stage = e.stage();
      rec.error = e.what();
    } catch (const std::exception& e) {
      rec.status = "error";
      rec.error_stage = "unknown";
      rec.error = e.what();
    }
    {
      std::lock_guard lock(journal_mutex);
      journal << nlohmann::json(rec).dump() << '\n';
      journal.flush();
      summary.records[i] = rec;
      if (rec.status == "ok")
        ++summary.generated;
      else
        ++summary.failed;
      if (opt.on_record) opt.on_record(rec);
    }
  });
  return summary;
}

}  // namespace cellstyle
