#pragma once

// Brute-force reference for majority matching and SEG: all-pairs overlap
// enumeration by full pixel scans, no shared code with the library.

#include <cstdint>
#include <set>
#include <vector>

#include "cellstyle/imaging.hpp"

namespace cellstyle::testing {

struct OracleMatch {
  std::vector<std::pair<std::int32_t, std::int32_t>> pairs;
  std::vector<std::int32_t> unmatched_gt;
  std::vector<std::int32_t> unmatched_pred;
  std::int64_t split_events = 0;
  double seg = 0.0;
};

inline std::set<std::int32_t> oracle_labels(const InstanceMask& m) {
  std::set<std::int32_t> s;
  for (int r = 0; r < m.height(); ++r)
    for (int c = 0; c < m.width(); ++c)
      if (m.at(r, c) > 0) s.insert(m.at(r, c));
  return s;
}

inline OracleMatch oracle_match(const InstanceMask& gt, const InstanceMask& pred) {
  OracleMatch out;
  const auto gl = oracle_labels(gt);
  const auto pl = oracle_labels(pred);
  std::set<std::int32_t> used;
  std::vector<std::int32_t> claimed;
  for (auto g : gl) {
    long area_g = 0;
    for (int r = 0; r < gt.height(); ++r)
      for (int c = 0; c < gt.width(); ++c) area_g += gt.at(r, c) == g;
    bool matched = false;
    for (auto p : pl) {
      long inter = 0, area_p = 0;
      for (int r = 0; r < gt.height(); ++r)
        for (int c = 0; c < gt.width(); ++c) {
          inter += gt.at(r, c) == g && pred.at(r, c) == p;
          area_p += pred.at(r, c) == p;
        }
      if (inter * 2 > area_g) {
        out.pairs.emplace_back(g, p);
        claimed.push_back(p);
        out.seg += double(inter) / double(area_g + area_p - inter);
        matched = true;
      }
    }
    if (!matched) out.unmatched_gt.push_back(g);
  }
  for (auto p : pl) {
    const auto n = std::count(claimed.begin(), claimed.end(), p);
    if (n == 0) out.unmatched_pred.push_back(p);
    if (n > 1) out.split_events += n - 1;
  }
  if (!gl.empty()) out.seg /= double(gl.size());
  return out;
}

}  // namespace cellstyle::testing
