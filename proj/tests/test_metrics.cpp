#include <gtest/gtest.h>

#include <fstream>
#include <random>

#include "cellstyle/metrics.hpp"
#include "metric_oracle.hpp"
#include "test_support.hpp"

namespace cs = cellstyle;
namespace m = cellstyle::metrics;
using cs::testing::paint_rect;
using cs::testing::TempDir;

TEST(MatchObjects, IdenticalMasks) {
  cs::InstanceMask gt(10, 10);
  paint_rect(gt, 0, 0, 3, 3, 1);
  paint_rect(gt, 5, 5, 4, 4, 2);
  const auto match = m::match_objects(gt, gt);
  EXPECT_EQ(match.pairs.size(), 2u);
  EXPECT_TRUE(match.unmatched_gt.empty());
  EXPECT_TRUE(match.unmatched_pred.empty());
  EXPECT_EQ(match.split_events, 0);
}

TEST(MatchObjects, ExactHalfIsNotAMatch) {
  cs::InstanceMask gt(4, 4), pred(4, 4);
  paint_rect(gt, 0, 0, 4, 4, 1);
  paint_rect(pred, 0, 0, 2, 4, 1);  // 8 of 16 pixels
  const auto match = m::match_objects(gt, pred);
  EXPECT_TRUE(match.pairs.empty());
  EXPECT_EQ(match.unmatched_gt.size(), 1u);
  EXPECT_EQ(cs::testing::oracle_match(gt, pred).pairs.size(), 0u);
}

TEST(MatchObjects, OneRegionCoveringTwoObjectsIsASplit) {
  cs::InstanceMask gt(6, 10), pred(6, 10);
  paint_rect(gt, 0, 0, 4, 4, 1);
  paint_rect(gt, 0, 5, 4, 4, 2);
  paint_rect(pred, 0, 0, 3, 10, 7);  // 12 of 16 pixels of each
  const auto match = m::match_objects(gt, pred);
  EXPECT_EQ(match.pairs.size(), 2u);
  EXPECT_EQ(match.split_events, 1);
  EXPECT_TRUE(match.unmatched_pred.empty());
}

TEST(MatchObjects, DimensionMismatch) {
  EXPECT_THROW(m::match_objects(cs::InstanceMask(3, 3), cs::InstanceMask(3, 4)),
               cs::InvalidArgument);
}

TEST(SegScore, Examples) {
  cs::InstanceMask gt(4, 4), pred(4, 4);
  paint_rect(gt, 0, 0, 4, 4, 1);
  EXPECT_EQ(m::seg_score(gt, gt), 1.0);
  paint_rect(pred, 0, 0, 3, 3, 2);  // 9 pixels inside a 16-pixel object
  EXPECT_DOUBLE_EQ(m::seg_score(gt, pred), 9.0 / 16.0);
  EXPECT_EQ(m::seg_score(gt, cs::InstanceMask(4, 4)), 0.0);
  EXPECT_THROW(m::seg_score(cs::InstanceMask(4, 4), gt), cs::InvalidArgument);
}

TEST(DetScore, Examples) {
  cs::InstanceMask gt(8, 8);
  paint_rect(gt, 0, 0, 3, 3, 1);
  EXPECT_EQ(m::det_score(gt, gt), 1.0);
  EXPECT_EQ(m::det_score(gt, cs::InstanceMask(8, 8)), 0.0);

  paint_rect(gt, 4, 4, 3, 3, 2);
  auto pred = gt;
  pred.at(7, 0) = 9;  // one spurious object
  EXPECT_DOUBLE_EQ(m::det_score(gt, pred), 0.95);
  EXPECT_THROW(m::det_score(cs::InstanceMask(8, 8), gt), cs::InvalidArgument);
}

TEST(DetScore, CustomWeights) {
  cs::InstanceMask gt(8, 8);
  paint_rect(gt, 0, 0, 3, 3, 1);
  auto pred = gt;
  pred.at(7, 7) = 4;
  EXPECT_DOUBLE_EQ(m::det_score(gt, pred, {5.0, 10.0, 2.5}), 0.75);
}

TEST(OpCsb, Values) {
  EXPECT_NEAR(m::op_csb(0.79, 0.93), 0.86, 1e-12);
  EXPECT_EQ(m::op_csb(0, 0), 0.0);
  EXPECT_EQ(m::op_csb(1, 1), 1.0);
  EXPECT_THROW(m::op_csb(1.2, 0.5), cs::InvalidArgument);
  EXPECT_THROW(m::op_csb(0.5, -0.1), cs::InvalidArgument);
}

TEST(MetricProperties, RandomMasksAgreeWithOracle) {
  std::mt19937 rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const auto gt = cs::testing::random_rect_mask(rng, 32, 6);
    const auto pred = cs::testing::random_rect_mask(rng, 32, 6);
    const auto oracle = cs::testing::oracle_match(gt, pred);
    const auto got = m::match_objects(gt, pred);
    EXPECT_EQ(got.pairs, oracle.pairs);
    EXPECT_EQ(got.unmatched_gt, oracle.unmatched_gt);
    EXPECT_EQ(got.unmatched_pred, oracle.unmatched_pred);
    EXPECT_EQ(got.split_events, oracle.split_events);
    if (gt.instance_count() == 0) continue;
    EXPECT_EQ(m::seg_score(gt, pred), oracle.seg);
    const double det = m::det_score(gt, pred);
    EXPECT_GE(det, 0.0);
    EXPECT_LE(det, 1.0);

    // an extra spurious object never raises DET
    auto more = pred;
    bool placed = false;
    for (std::size_t i = 0; i < more.size() && !placed; ++i)
      if (more[i] == 0 && gt[i] == 0) {
        more[i] = 1000;
        placed = true;
      }
    if (placed) EXPECT_LE(m::det_score(gt, more), det);
  }
}

TEST(EvaluateDataset, PerfectFrameAndMissingCounterpart) {
  TempDir dir;
  std::filesystem::create_directories(dir / "gt");
  std::filesystem::create_directories(dir / "pred");
  cs::InstanceMask a(8, 8), b(8, 8);
  paint_rect(a, 0, 0, 4, 4, 1);
  paint_rect(b, 2, 2, 4, 4, 3);
  cs::save_mask(a, dir / "gt" / "f000.tif");
  cs::save_mask(a, dir / "pred" / "f000.tif");
  cs::save_mask(b, dir / "gt" / "f001.tif");
  auto half = b;
  for (int c = 2; c < 6; ++c) half.at(2, c) = 0;  // 12 of 16 pixels -> Jaccard 0.75
  cs::save_mask(half, dir / "pred" / "f001.png");
  cs::save_mask(a, dir / "gt" / "f002.tif");

  const auto report = m::evaluate_dataset(dir / "gt", dir / "pred");
  ASSERT_EQ(report.per_frame.size(), 2u);
  EXPECT_EQ(report.missing_predictions, std::vector<std::string>{"f002"});
  EXPECT_EQ(report.excluded_frames(), 1u);
  EXPECT_DOUBLE_EQ(report.seg, (1.0 + 0.75) / 2.0);
  EXPECT_DOUBLE_EQ(report.det, 1.0);
  EXPECT_NEAR(report.op_csb, 0.5 * (report.seg + report.det), 1e-12);

  const auto json = m::to_json(report);
  EXPECT_EQ(json["frames"].size(), 2u);
  EXPECT_EQ(json["weights"]["w_fn"], 10.0);
  const auto csv = m::to_csv(report);
  EXPECT_NE(csv.find("frame,SEG,DET,OP_CSB"), std::string::npos);
  EXPECT_NE(csv.find("aggregate,"), std::string::npos);
}

TEST(EvaluateDataset, MeanOfTwoFrames) {
  TempDir dir;
  std::filesystem::create_directories(dir / "gt");
  std::filesystem::create_directories(dir / "pred");
  cs::InstanceMask gt(4, 4), pred(4, 4);
  paint_rect(gt, 0, 0, 4, 4, 1);
  paint_rect(pred, 0, 0, 3, 3, 1);  // Jaccard 9/16
  cs::save_mask(gt, dir / "gt" / "a.tif");
  cs::save_mask(gt, dir / "pred" / "a.tif");
  cs::save_mask(gt, dir / "gt" / "b.tif");
  cs::save_mask(pred, dir / "pred" / "b.tif");
  const auto report = m::evaluate_dataset(dir / "gt", dir / "pred", {}, 2);
  EXPECT_DOUBLE_EQ(report.seg, (1.0 + 9.0 / 16.0) / 2.0);
  EXPECT_EQ(m::summary_line(m::evaluate_dataset(dir / "gt", dir / "gt")),
            "SEG=1.000 DET=1.000 OP=1.000");
}
