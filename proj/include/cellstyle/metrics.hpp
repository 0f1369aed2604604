#pragma once

// Frame-wise SEG / DET / OP_CSB scores following the Cell Tracking Challenge
// conventions: a GT object R is matched by the predicted object S covering
// strictly more than half of R.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellstyle/error.hpp"
#include "cellstyle/imaging.hpp"
#include "cellstyle/parallel.hpp"

namespace cellstyle::metrics {

struct Matching {
  std::vector<std::pair<std::int32_t, std::int32_t>> pairs;  // (gt, pred)
  std::vector<std::int32_t> unmatched_gt;
  std::vector<std::int32_t> unmatched_pred;
  // One event per extra GT object claimed by the same predicted region.
  std::int64_t split_events = 0;
};

struct DetWeights {
  double split = 5.0;
  double fn = 10.0;
  double fp = 1.0;
};

struct FrameScore {
  std::string frame_id;
  double seg = 0.0;
  double det = 0.0;
};

struct MetricReport {
  std::vector<FrameScore> per_frame;
  double seg = 0.0;
  double det = 0.0;
  double op_csb = 0.0;
  DetWeights weights;
  std::vector<std::string> missing_predictions;  // GT frames without a counterpart
  std::vector<std::string> empty_ground_truth;   // frames with no GT object

  std::size_t excluded_frames() const {
    return missing_predictions.size() + empty_ground_truth.size();
  }
};

namespace detail {

inline void require_same_dims(const InstanceMask& gt, const InstanceMask& pred) {
  if (gt.height() != pred.height() || gt.width() != pred.width())
    throw InvalidArgument("GT and prediction dimensions differ: " +
                          std::to_string(gt.height()) + "x" + std::to_string(gt.width()) +
                          " vs " + std::to_string(pred.height()) + "x" +
                          std::to_string(pred.width()));
}

struct Overlaps {
  std::map<std::int32_t, std::int64_t> gt_area;
  std::map<std::int32_t, std::int64_t> pred_area;
  std::map<std::pair<std::int32_t, std::int32_t>, std::int64_t> intersection;
};

inline Overlaps count_overlaps(const InstanceMask& gt, const InstanceMask& pred) {
  Overlaps o;
  const auto g = gt.values();
  const auto p = pred.values();
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (g[i] > 0) ++o.gt_area[g[i]];
    if (p[i] > 0) ++o.pred_area[p[i]];
    if (g[i] > 0 && p[i] > 0) ++o.intersection[{g[i], p[i]}];
  }
  return o;
}

}  // namespace detail

inline Matching match_objects(const InstanceMask& gt, const InstanceMask& pred) {
  detail::require_same_dims(gt, pred);
  const auto o = detail::count_overlaps(gt, pred);
  Matching m;
  std::map<std::int32_t, int> claims;
  for (const auto& [g, area] : o.gt_area) {
    std::optional<std::int32_t> match;
    // Intersections are ordered by (gt, pred), so this walks g's overlaps.
    for (auto it = o.intersection.lower_bound({g, 0});
         it != o.intersection.end() && it->first.first == g; ++it) {
      if (2 * it->second > area) {
        if (match)
          throw ComputeError("majority overlap is not unique for GT object " +
                             std::to_string(g));
        match = it->first.second;
      }
    }
    if (match) {
      m.pairs.emplace_back(g, *match);
      ++claims[*match];
    } else {
      m.unmatched_gt.push_back(g);
    }
  }
  for (const auto& [p, area] : o.pred_area) {
    const auto it = claims.find(p);
    if (it == claims.end())
      m.unmatched_pred.push_back(p);
    else
      m.split_events += it->second - 1;
  }
  return m;
}

/// Mean Jaccard over GT objects; unmatched objects contribute 0.
inline double seg_score(const InstanceMask& gt, const InstanceMask& pred) {
  detail::require_same_dims(gt, pred);
  const auto o = detail::count_overlaps(gt, pred);
  if (o.gt_area.empty()) throw InvalidArgument("SEG is undefined without GT objects");
  double total = 0.0;
  for (const auto& [g, area] : o.gt_area) {
    for (auto it = o.intersection.lower_bound({g, 0});
         it != o.intersection.end() && it->first.first == g; ++it) {
      if (2 * it->second > area) {
        const auto inter = it->second;
        const auto uni = area + o.pred_area.at(it->first.second) - inter;
        total += static_cast<double>(inter) / static_cast<double>(uni);
        break;
      }
    }
  }
  return total / static_cast<double>(o.gt_area.size());
}

inline double det_score(const InstanceMask& gt, const InstanceMask& pred,
                        const DetWeights& w = {}) {
  const auto m = match_objects(gt, pred);
  const auto n_gt = m.pairs.size() + m.unmatched_gt.size();
  if (n_gt == 0) throw InvalidArgument("DET is undefined without GT objects");
  const double aogm = w.fn * static_cast<double>(m.unmatched_gt.size()) +
                      w.fp * static_cast<double>(m.unmatched_pred.size()) +
                      w.split * static_cast<double>(m.split_events);
  const double aogm0 = w.fn * static_cast<double>(n_gt);
  return 1.0 - std::min(aogm, aogm0) / aogm0;
}

inline double op_csb(double seg, double det) {
  if (!(seg >= 0.0 && seg <= 1.0) || !(det >= 0.0 && det <= 1.0))
    throw InvalidArgument("SEG and DET must lie in [0,1]");
  return 0.5 * (seg + det);
}

inline bool is_raster_file(const std::filesystem::path& p) {
  auto ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), ::tolower);
  return ext == ".tif" || ext == ".tiff" || ext == ".png";
}

/// Frames are paired by file stem. Frames without a prediction, or whose GT
/// holds no object, are excluded and listed in the report.
inline MetricReport evaluate_dataset(const std::filesystem::path& gt_dir,
                                     const std::filesystem::path& pred_dir,
                                     const DetWeights& weights = {},
                                     unsigned workers = 1) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(gt_dir)) throw FileNotFound(gt_dir.string());
  if (!fs::is_directory(pred_dir)) throw FileNotFound(pred_dir.string());

  std::map<std::string, fs::path> gt_files, pred_files;
  for (const auto& e : fs::directory_iterator(gt_dir))
    if (e.is_regular_file() && is_raster_file(e.path()))
      gt_files[e.path().stem().string()] = e.path();
  for (const auto& e : fs::directory_iterator(pred_dir))
    if (e.is_regular_file() && is_raster_file(e.path()))
      pred_files[e.path().stem().string()] = e.path();

  MetricReport report;
  report.weights = weights;
  std::vector<std::pair<std::string, std::pair<fs::path, fs::path>>> jobs;
  for (const auto& [stem, path] : gt_files) {
    const auto it = pred_files.find(stem);
    if (it == pred_files.end())
      report.missing_predictions.push_back(stem);
    else
      jobs.push_back({stem, {path, it->second}});
  }

  std::vector<std::optional<FrameScore>> scores(jobs.size());
  parallel_for(jobs.size(), workers, [&](std::size_t i) {
    const auto gt = load_mask(jobs[i].second.first);
    const auto pred = load_mask(jobs[i].second.second);
    detail::require_same_dims(gt, pred);
    if (gt.instance_count() == 0) return;
    scores[i] = FrameScore{jobs[i].first, seg_score(gt, pred), det_score(gt, pred, weights)};
  });
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    if (scores[i])
      report.per_frame.push_back(*scores[i]);
    else
      report.empty_ground_truth.push_back(jobs[i].first);
  }
  if (report.per_frame.empty())
    throw ComputeError("no frame could be evaluated in " + gt_dir.string());

  for (const auto& f : report.per_frame) {
    report.seg += f.seg;
    report.det += f.det;
  }
  report.seg /= static_cast<double>(report.per_frame.size());
  report.det /= static_cast<double>(report.per_frame.size());
  report.op_csb = op_csb(report.seg, report.det);
  return report;
}

inline nlohmann::json to_json(const MetricReport& r) {
  nlohmann::json frames = nlohmann::json::array();
  for (const auto& f : r.per_frame)
    frames.push_back({{"frame", f.frame_id}, {"SEG", f.seg}, {"DET", f.det},
                      {"OP_CSB", op_csb(f.seg, f.det)}});
  return {
      {"format", "cellstyle-metric-report"},
      {"version", 1},
      {"weights", {{"w_split", r.weights.split}, {"w_fn", r.weights.fn}, {"w_fp", r.weights.fp}}},
      {"frames", frames},
      {"aggregate", {{"SEG", r.seg}, {"DET", r.det}, {"OP_CSB", r.op_csb}}},
      {"excluded",
       {{"missing_prediction", r.missing_predictions}, {"empty_ground_truth", r.empty_ground_truth}}},
  };
}

/// Comma-separated table: one row per frame, then an aggregate row.
inline std::string to_csv(const MetricReport& r) {
  std::ostringstream os;
  os << std::setprecision(6) << std::fixed;
  os << "frame,SEG,DET,OP_CSB\n";
  for (const auto& f : r.per_frame)
    os << f.frame_id << ',' << f.seg << ',' << f.det << ',' << op_csb(f.seg, f.det) << '\n';
  os << "aggregate," << r.seg << ',' << r.det << ',' << r.op_csb << '\n';
  return os.str();
}

inline std::string summary_line(const MetricReport& r) {
  std::ostringstream os;
  os << std::setprecision(3) << std::fixed << "SEG=" << r.seg << " DET=" << r.det
     << " OP=" << r.op_csb;
  return os.str();
}

}  // namespace cellstyle::metrics
