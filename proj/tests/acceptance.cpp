// Acceptance suite: one PASS/FAIL line per criterion, tolerances pinned below.
// Exit status is the number of failed criteria.
//
//   acceptance [--cli <path to cellstyle>] [--work <dir>] [--report-only]
//
// --report-only always exits 0 (the verdict lines are unchanged).

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <sys/wait.h>
#include <thread>

#include "CLI11.hpp"
#include "cellstyle/adaptive_alpha.hpp"
#include "cellstyle/diffusion.hpp"
#include "cellstyle/inversion.hpp"
#include "cellstyle/metrics.hpp"
#include "cellstyle/size_match.hpp"
#include "cellstyle/stylize.hpp"
#include "cellstyle/synthetic.hpp"
#include "metric_oracle.hpp"
#include "stub_backbone.hpp"
#include "test_support.hpp"

namespace cs = cellstyle;
namespace sy = cellstyle::synthetic;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

// Tolerances and budgets.
constexpr double kMetricSeconds = 10.0;
constexpr double kOpCsb = 0.86;
constexpr double kRoundTrip = 0.05;
constexpr double kInverseIdentity = 1e-6;
constexpr double kSelfStyle = 1e-3;
constexpr double kAlphaHalved = 1e-6;
constexpr double kScoreStd = 0.35355;
constexpr double kScoreStdTol = 1e-5;
constexpr double kRatioTol = 1e-9;
constexpr double kMinIoU = 0.5;
constexpr double kTrainSeconds = 600.0;
constexpr double kBatchSeconds = 900.0;
constexpr double kGradTol = 1e-4;

// Toy backbone recipe.
constexpr int kImage = 32;
constexpr int kTrainPerFamily = 32;
constexpr int kHeldPerFamily = 8;

int failures = 0;

void verdict(const std::string& name, bool ok, const std::string& detail) {
  std::cout << (ok ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
  if (!ok) ++failures;
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os << std::setprecision(prec) << v;
  return os.str();
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ||a - b|| / ||b|| on raw pixel values.
double pixel_rel_l2(const std::vector<double>& a, const std::vector<double>& b) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    num += (a[i] - b[i]) * (a[i] - b[i]);
    den += b[i] * b[i];
  }
  return std::sqrt(num / den);
}

std::vector<double> pixels_of(const cs::Image& img) { return {img.pixels().begin(), img.pixels().end()}; }

// The toy works on s = 2p - 1; undo it without clamping.
std::vector<double> pixels_of(const cs::StateTensor& s) {
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) out[i] = 0.5 * (s[i] + 1.0);
  return out;
}

// ---------------------------------------------------------------- metrics

struct DetCase {
  std::string name;
  cs::InstanceMask gt, pred;
  int fn, fp, splits, n_gt;
};

std::vector<DetCase> det_cases() {
  using cs::testing::paint_rect;
  std::vector<DetCase> out;
  auto base = [] {
    cs::InstanceMask m(16, 16);
    paint_rect(m, 0, 0, 4, 4, 1);
    paint_rect(m, 0, 8, 4, 4, 2);
    return m;
  };
  {
    auto gt = base(), pred = gt;
    pred.at(15, 0) = 9;
    out.push_back({"two exact + one spurious", gt, pred, 0, 1, 0, 2});
  }
  out.push_back({"perfect", base(), base(), 0, 0, 0, 2});
  out.push_back({"empty prediction", base(), cs::InstanceMask(16, 16), 2, 0, 0, 2});
  {
    auto pred = base();
    for (int r = 0; r < 4; ++r)
      for (int c = 8; c < 12; ++c) pred.at(r, c) = 0;
    out.push_back({"one missed", base(), pred, 1, 0, 0, 2});
  }
  {
    cs::InstanceMask gt(8, 12), pred(8, 12);
    paint_rect(gt, 0, 0, 4, 4, 1);
    paint_rect(gt, 0, 5, 4, 4, 2);
    paint_rect(pred, 0, 0, 3, 12, 5);
    out.push_back({"one region over two objects", gt, pred, 0, 0, 1, 2});
  }
  {
    cs::InstanceMask gt(8, 20), pred(8, 20);
    for (int k = 0; k < 3; ++k) paint_rect(gt, 0, 6 * k, 4, 4, k + 1);
    paint_rect(pred, 0, 0, 3, 20, 4);
    out.push_back({"one region over three objects", gt, pred, 0, 0, 2, 3});
  }
  {
    auto gt = base(), pred = gt;
    pred.at(15, 0) = 9;
    pred.at(15, 15) = 10;
    pred.at(10, 5) = 11;
    out.push_back({"three spurious", gt, pred, 0, 3, 0, 2});
  }
  {
    cs::InstanceMask gt(4, 4), pred(4, 4);
    paint_rect(gt, 0, 0, 4, 4, 1);
    paint_rect(pred, 0, 0, 2, 4, 1);
    out.push_back({"exactly half overlap", gt, pred, 1, 1, 0, 1});
  }
  {
    cs::InstanceMask gt(4, 4), pred(4, 4);
    paint_rect(gt, 0, 0, 4, 4, 1);
    paint_rect(pred, 0, 0, 3, 3, 2);
    out.push_back({"nine of sixteen", gt, pred, 0, 0, 0, 1});
  }
  {
    cs::InstanceMask gt(4, 4), pred(4, 4);
    paint_rect(gt, 0, 0, 4, 4, 1);
    paint_rect(pred, 0, 0, 2, 4, 1);
    paint_rect(pred, 2, 0, 2, 4, 2);
    out.push_back({"object cut in halves", gt, pred, 1, 2, 0, 1});
  }
  {
    auto gt = base();
    cs::InstanceMask pred(16, 16);
    paint_rect(pred, 8, 8, 4, 4, 3);
    out.push_back({"prediction elsewhere", gt, pred, 2, 1, 0, 2});
  }
  {
    cs::InstanceMask gt(10, 10), pred(10, 10);
    paint_rect(gt, 0, 0, 10, 10, 1);
    paint_rect(pred, 0, 0, 10, 10, 1);
    paint_rect(pred, 0, 0, 1, 1, 2);
    out.push_back({"tiny fragment inside", gt, pred, 0, 1, 0, 1});
  }
  {
    cs::InstanceMask gt(6, 6);
    paint_rect(gt, 0, 0, 2, 2, 1);
    paint_rect(gt, 4, 4, 2, 2, 2);
    paint_rect(gt, 0, 4, 2, 2, 3);
    out.push_back({"all missed of three", gt, cs::InstanceMask(6, 6), 3, 0, 0, 3});
  }
  {
    cs::InstanceMask gt(4, 4), pred(4, 4);
    paint_rect(gt, 0, 0, 1, 1, 1);
    for (int k = 0; k < 12; ++k) pred.at(1 + k / 4, k % 4) = k + 2;
    out.push_back({"cost clamps at zero", gt, pred, 1, 12, 0, 1});
  }
  {
    auto gt = base(), pred = base();
    paint_rect(pred, 0, 0, 4, 4, 2);  // both objects share one label
    out.push_back({"shared label", gt, pred, 0, 0, 1, 2});
  }
  {
    cs::InstanceMask gt(8, 8), pred(8, 8);
    paint_rect(gt, 0, 0, 8, 8, 4);
    paint_rect(pred, 0, 0, 8, 5, 1);
    out.push_back({"large partial", gt, pred, 0, 0, 0, 1});
  }
  {
    cs::InstanceMask gt(8, 8), pred(8, 8);
    paint_rect(gt, 0, 0, 8, 8, 4);
    paint_rect(pred, 0, 0, 8, 4, 1);
    out.push_back({"large exact half", gt, pred, 1, 1, 0, 1});
  }
  {
    cs::InstanceMask gt(6, 12), pred(6, 12);
    paint_rect(gt, 0, 0, 4, 4, 1);
    paint_rect(gt, 0, 5, 4, 4, 2);
    paint_rect(pred, 0, 0, 3, 12, 5);
    pred.at(5, 11) = 6;
    out.push_back({"split plus spurious", gt, pred, 0, 1, 1, 2});
  }
  {
    cs::InstanceMask gt(6, 12), pred(6, 12);
    paint_rect(gt, 0, 0, 4, 4, 1);
    paint_rect(gt, 0, 5, 4, 4, 2);
    paint_rect(gt, 5, 0, 1, 12, 3);
    paint_rect(pred, 0, 0, 3, 12, 5);
    out.push_back({"split plus missed", gt, pred, 1, 0, 1, 3});
  }
  {
    cs::InstanceMask gt(4, 8), pred(4, 8);
    paint_rect(gt, 0, 0, 4, 4, 1);
    paint_rect(gt, 0, 4, 4, 4, 2);
    paint_rect(pred, 0, 0, 4, 4, 2);
    paint_rect(pred, 0, 4, 4, 4, 1);
    out.push_back({"swapped labels", gt, pred, 0, 0, 0, 2});
  }
  return out;
}

void metric_oracle() {
  const auto t0 = Clock::now();
  std::mt19937 rng(2024);
  int mismatches = 0, pairs = 0;
  for (int i = 0; i < 200; ++i) {
    const auto gt = cs::testing::random_rect_mask(rng, 32, 6);
    const auto pred = cs::testing::random_rect_mask(rng, 32, 6);
    const auto o = cs::testing::oracle_match(gt, pred);
    const auto m = cs::metrics::match_objects(gt, pred);
    bool same = m.pairs == o.pairs && m.unmatched_gt == o.unmatched_gt && m.unmatched_pred == o.unmatched_pred &&
                m.split_events == o.split_events;
    if (gt.instance_count() > 0) same = same && std::abs(cs::metrics::seg_score(gt, pred) - o.seg) <= 1e-12;
    mismatches += !same;
    ++pairs;
  }
  int det_bad = 0;
  bool has_095 = false;
  const auto cases = det_cases();
  for (const auto& c : cases) {
    const double cost = 10.0 * c.fn + 1.0 * c.fp + 5.0 * c.splits, full = 10.0 * c.n_gt;
    const double expected = 1.0 - std::min(cost, full) / full;
    const double got = cs::metrics::det_score(c.gt, c.pred);
    if (std::abs(got - expected) > 1e-12) {
      ++det_bad;
      std::cout << "    DET case '" << c.name << "': got " << got << ", hand count " << expected << "\n";
    }
    has_095 |= c.name == "two exact + one spurious" && std::abs(got - 0.95) < 1e-12;
  }
  const double secs = seconds_since(t0);
  verdict("metric oracle", mismatches == 0 && det_bad == 0 && has_095 && secs < kMetricSeconds,
          std::to_string(pairs - mismatches) + "/" + std::to_string(pairs) + " random pairs agree, " +
              std::to_string(cases.size() - det_bad) + "/" + std::to_string(cases.size()) +
              " DET cases match hand counts (DET=0.95 case " + (has_095 ? "ok" : "wrong") + "), " + fmt(secs, 3) +
              " s (limit " + fmt(kMetricSeconds) + " s)");
}

void op_csb_check() {
  const double v = cs::metrics::op_csb(0.79, 0.93);
  const bool ok = std::abs(v - kOpCsb) <= 1e-12 && std::round(v * 100.0) / 100.0 == kOpCsb;
  verdict("OP_CSB value", ok, "op_csb(0.79, 0.93) = " + fmt(v, 17) + ", expected " + fmt(kOpCsb));
}

// ---------------------------------------------------------------- toy backbone

struct Toy {
  std::unique_ptr<cs::ToyUNet> model;
  cs::NoiseSchedule sched;
  std::vector<sy::Sample> held_bright, held_dim;
  double train_seconds = 0.0;
  fs::path checkpoint;
};

Toy train_toy(const fs::path& work) {
  Toy toy;
  std::vector<cs::Image> data;
  for (auto& s : sy::make_samples(kTrainPerFamily, kImage, sy::bright_mottled(), 1)) data.push_back(s.image);
  for (auto& s : sy::make_samples(kTrainPerFamily, kImage, sy::dim_striped(), 2)) data.push_back(s.image);
  cs::ToyTrainConfig cfg;
  cfg.image_size = kImage;
  cfg.epochs = 60;
  cfg.batch_size = 16;
  cfg.learning_rate = 2e-3;
  cfg.ema_decay = 0.995;
  cfg.seed = 7;
  cfg.architecture.base_channels = 16;
  const auto t0 = Clock::now();
  toy.model = cs::train_toy_backbone(data, cfg);
  toy.train_seconds = seconds_since(t0);
  toy.sched = cs::make_noise_schedule(cfg.schedule);
  toy.held_bright = sy::make_samples(kHeldPerFamily, kImage, sy::bright_mottled(), 101);
  toy.held_dim = sy::make_samples(kHeldPerFamily, kImage, sy::dim_striped(), 102);
  toy.checkpoint = work / "toy.ckpt";
  toy.model->save(toy.checkpoint);
  std::cout << "  toy backbone: " << 2 * kTrainPerFamily << " images, " << cfg.epochs << " epochs, final loss "
            << fmt(toy.model->loss_history().back()) << ", " << fmt(toy.train_seconds, 3) << " s\n";
  return toy;
}

void round_trip(const Toy& toy) {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst_identity = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    cs::StateTensor x(toy.model->state_shape()), eps(toy.model->state_shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
      x[i] = n(rng);
      eps[i] = n(rng);
    }
    const std::size_t k = static_cast<std::size_t>(trial) % toy.sched.ddim_steps.size();
    const int t = toy.sched.ddim_steps[k], tp = toy.sched.previous(k);
    const auto back = cs::ddim_invert_step(cs::ddim_step(x, eps, t, tp, toy.sched), eps, tp, t, toy.sched);
    worst_identity = std::max(worst_identity, cs::relative_l2(back, x));
  }

  double worst = 0, mean = 0, worst_state = 0;
  std::vector<double> errs;
  for (const auto* set : {&toy.held_bright, &toy.held_dim})
    for (const auto& s : *set) {
      const auto inv = cs::invert(*toy.model, s.image, toy.sched);
      const auto rec = cs::ddim_sample(*toy.model, inv.z_T, toy.sched);
      const double e = pixel_rel_l2(pixels_of(rec), pixels_of(s.image));
      errs.push_back(e);
      worst = std::max(worst, e);
      mean += e / 16.0;
      worst_state = std::max(worst_state, cs::relative_l2(rec, toy.model->encode(s.image)));
    }
  std::ostringstream detail;
  detail << "worst " << fmt(worst) << ", mean " << fmt(mean) << " over 16 held-out images (limit " << kRoundTrip
         << " per image; worst in the [-1,1] state encoding " << fmt(worst_state) << "); step identity "
         << fmt(worst_identity, 3) << " (limit " << kInverseIdentity << ")";
  verdict("DDIM inversion round trip", worst <= kRoundTrip && worst_identity <= kInverseIdentity, detail.str());
  std::cout << "    per image:";
  for (double e : errs) std::cout << ' ' << fmt(e, 3);
  std::cout << "\n";
}

void self_style(const Toy& toy) {
  const auto layers = cs::injection_layers(*toy.model, 6);
  double worst = 0.0;
  for (int i = 0; i < 4; ++i) {
    const auto& s = i < 2 ? toy.held_bright[std::size_t(i)] : toy.held_dim[std::size_t(i - 2)];
    const auto plain = toy.model->decode(cs::ddim_sample(*toy.model, cs::invert(*toy.model, s.image, toy.sched).z_T, toy.sched));
    const auto styled = cs::stylize_pair(*toy.model, s.image, s.image, s.mask, {1.0, layers, false}, toy.sched);
    worst = std::max(worst, pixel_rel_l2(pixels_of(styled), pixels_of(plain)));
  }
  verdict("self-style identity", worst <= kSelfStyle,
          "worst relative L2 to plain reconstruction " + fmt(worst) + " over 4 images (limit " + fmt(kSelfStyle) + ")");
}

// ---------------------------------------------------------------- alpha

void alpha_checks() {
  const auto sched = cs::make_noise_schedule(cs::ScheduleConfig{});
  std::mt19937_64 rng(4);
  std::vector<cs::Image> src, half;
  for (int i = 0; i < 4; ++i) {
    cs::Image img(6, 6);
    for (auto& p : img.pixels()) p = std::uniform_real_distribution<float>(0.1f, 1.f)(rng);
    cs::Image h = img;
    for (auto& p : h.pixels()) p *= 0.5f;
    src.push_back(img);
    half.push_back(h);
  }
  const cs::testing::LinearStubBackbone stub(6, {"a", "b"});
  const double same = cs::compute_alpha(stub, src, src, sched, {"a", "b"}).alpha;
  const double halved = cs::compute_alpha(stub, src, half, sched, {"a", "b"}).alpha;

  cs::HeadTensor eye = cs::HeadTensor::zeros(1, 2, 2);
  eye.heads[0] = Eigen::MatrixXf::Identity(2, 2);
  const double sd = cs::attention_score_std(eye, eye);
  verdict("alpha correctness",
          same == 1.0 && std::abs(halved - 2.0) <= kAlphaHalved && std::abs(sd - kScoreStd) <= kScoreStdTol,
          "identical samples " + fmt(same, 17) + " (exact 1), halved keys " + fmt(halved, 12) + " (2 +- " +
              fmt(kAlphaHalved) + "), identity score std " + fmt(sd, 8) + " (" + fmt(kScoreStd, 6) + " +- " +
              fmt(kScoreStdTol) + ")");
}

// ---------------------------------------------------------------- size matching

void size_checks() {
  using cs::testing::paint_rect;
  cs::InstanceMask big(32, 32), small(32, 32);
  paint_rect(big, 2, 2, 8, 8, 1);
  paint_rect(big, 16, 16, 8, 8, 2);
  paint_rect(small, 2, 2, 4, 4, 1);
  paint_rect(small, 20, 10, 4, 4, 2);
  paint_rect(small, 10, 24, 4, 4, 3);
  const double r = cs::compute_size_ratio(std::vector{big}, std::vector{small}).r;
  const double back = cs::compute_size_ratio(std::vector{small}, std::vector{big}).r;

  std::mt19937 rng(9);
  double worst_recip = std::abs(r * back - 1.0);
  for (int i = 0; i < 50; ++i) {
    const auto a = cs::testing::random_rect_mask(rng, 32, 6), b = cs::testing::random_rect_mask(rng, 32, 6);
    if (!a.instance_count() || !b.instance_count()) continue;
    worst_recip = std::max(worst_recip, std::abs(cs::compute_size_ratio(std::vector{a}, std::vector{b}).r *
                                                     cs::compute_size_ratio(std::vector{b}, std::vector{a}).r -
                                                 1.0));
  }

  bool dims_ok = true;
  for (double rr : {0.5, 1.0, 2.0, 3.0})
    for (auto [h, w] : {std::pair{32, 32}, std::pair{17, 40}, std::pair{64, 24}}) {
      const auto out = cs::prepare_target(cs::Image(29, 35), rr, h, w);
      dims_ok &= out.height() == h && out.width() == w;
    }
  verdict("size matching", std::abs(r - 2.0) <= kRatioTol && worst_recip <= 1e-12 && dims_ok,
          "r(8x8 vs 4x4) = " + fmt(r, 17) + ", worst |r*r'-1| = " + fmt(worst_recip, 3) +
              ", prepare_target dims for r in {0.5,1,2,3}: " + (dims_ok ? "ok" : "wrong"));
}

// ---------------------------------------------------------------- style effect

double foreground_iou(const cs::Image& img, const cs::InstanceMask& mask) {
  const auto fg = cs::naive_detector(img);
  long inter = 0, uni = 0;
  for (int r = 0; r < mask.height(); ++r)
    for (int c = 0; c < mask.width(); ++c) {
      const bool a = fg.at(r, c) > 0, b = mask.at(r, c) > 0;
      inter += a && b;
      uni += a || b;
    }
  return uni ? double(inter) / double(uni) : 1.0;
}

void style_effect(const Toy& toy) {
  std::vector<cs::Image> src, tgt;
  std::vector<cs::InstanceMask> src_masks;
  double tgt_mean = 0.0;
  for (const auto& s : toy.held_bright) {
    src.push_back(s.image);
    src_masks.push_back(s.mask);
  }
  for (const auto& s : toy.held_dim) {
    tgt.push_back(s.image);
    tgt_mean += sy::mean_cell_intensity(s.image, s.mask) / double(toy.held_dim.size());
  }
  const auto layers = cs::injection_layers(*toy.model, 6);
  const auto ratio = cs::compute_size_ratio(src_masks, tgt, cs::make_naive_detector());
  const auto alpha = cs::compute_alpha(*toy.model, src, tgt, toy.sched, layers);

  int closer = 0, shaped = 0;
  double worst_iou = 1.0;
  std::ostringstream rows;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const auto prepared = cs::prepare_target(tgt[i], ratio.r, kImage, kImage);
    const auto sty =
        cs::stylize_pair(*toy.model, src[i], prepared, src_masks[i], {alpha.alpha, layers, false}, toy.sched);
    const double before = std::abs(sy::mean_cell_intensity(src[i], src_masks[i]) - tgt_mean);
    const double after = std::abs(sy::mean_cell_intensity(sty, src_masks[i]) - tgt_mean);
    const double iou = foreground_iou(sty, src_masks[i]);
    closer += after < before;
    shaped += iou >= kMinIoU;
    worst_iou = std::min(worst_iou, iou);
    rows << ' ' << fmt(sy::mean_cell_intensity(sty, src_masks[i]), 3) << '/' << fmt(iou, 3);
  }
  const int n = static_cast<int>(src.size());
  verdict("style transfer effect", closer == n && shaped == n,
          std::to_string(closer) + "/" + std::to_string(n) + " styled images closer to the target cell mean " +
              fmt(tgt_mean, 3) + " than their sources, " + std::to_string(shaped) + "/" + std::to_string(n) +
              " with foreground IoU >= " + fmt(kMinIoU) + " (worst " + fmt(worst_iou, 3) + "); alpha " +
              fmt(alpha.alpha, 4) + ", r " + fmt(ratio.r, 4));
  std::cout << "    styled cell mean/IoU:" << rows.str() << "\n";
}

// ---------------------------------------------------------------- batch + ablations

cs::PairManifest write_pair(const Toy& toy, const fs::path& dir, int n_src, int n_tgt) {
  fs::create_directories(dir / "src");
  fs::create_directories(dir / "tgt");
  cs::PairManifest m;
  const auto srcs = sy::make_samples(n_src, kImage, sy::bright_mottled(), 201);
  const auto tgts = sy::make_samples(n_tgt, kImage, sy::dim_striped(), 202);
  for (int i = 0; i < n_src; ++i) {
    const auto img = dir / "src" / ("img" + std::to_string(i) + ".tif");
    const auto msk = dir / "src" / ("mask" + std::to_string(i) + ".tif");
    cs::save_image(srcs[std::size_t(i)].image, img);
    cs::save_mask(srcs[std::size_t(i)].mask, msk);
    m.src_images.push_back(img);
    m.src_masks.push_back(msk);
  }
  for (int i = 0; i < n_tgt; ++i) {
    const auto img = dir / "tgt" / ("img" + std::to_string(i) + ".tif");
    cs::save_image(tgts[std::size_t(i)].image, img);
    m.tgt_images.push_back(img);
  }
  (void)toy;
  return m;
}

int run(const std::string& cmd) {
  const int rc = std::system((cmd + " > /dev/null 2>&1").c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string quote(const fs::path& p) { return cs::detail::shell_quote(p.string()); }

void ablations(const Toy& toy, const fs::path& work, const std::string& cli) {
  if (cli.empty()) {
    verdict("ablation plumbing", false, "no --cli given");
    return;
  }
  auto m = write_pair(toy, work / "abl", 4, 4);
  m.pair_id = "abl";
  m.n_combinations = 3;
  const fs::path manifest = work / "abl" / "pair.json";
  cs::save_manifest(m, manifest);
  const std::string base = quote(cli);
  const std::string common = " --manifest " + quote(manifest) + " --backbone " + quote(toy.checkpoint);

  int rc = run(base + " ratio --manifest " + quote(manifest));
  rc |= run(base + " alpha" + common);

  struct Config {
    const char* name;
    const char* flags;
    bool size_match;
    std::string alpha_mode;
    bool style;
  };
  const Config configs[] = {{"r_only", "--no-style", true, "adaptive", false},
                            {"fixed_alpha", "--alpha-mode fixed:1.5", true, "fixed:1.5", true},
                            {"no_r", "--no-size-match", false, "adaptive", true}};
  std::ostringstream detail;
  bool ok = rc == 0;
  for (const auto& c : configs) {
    // a fresh copy of the resolved manifest per configuration
    auto pm = cs::load_manifest(manifest);
    pm.pair_id = c.name;
    const fs::path mp = work / "abl" / (std::string(c.name) + ".json");
    cs::save_manifest(pm, mp);
    const int crc = run(base + " stylize --manifest " + quote(mp) + " --backbone " + quote(toy.checkpoint) + " --out " +
                        quote(work / "abl_out") + " " + c.flags);
    const auto journal = cs::read_journal(cs::pair_directory(work / "abl_out", c.name) / "records.jsonl");
    bool cfg_ok = crc == 0 && journal.size() == 3;
    for (const auto& [i, rec] : journal) {
      cfg_ok &= rec.status == "ok" && rec.ablation.use_size_match == c.size_match &&
                rec.ablation.alpha_mode.str() == c.alpha_mode && rec.ablation.style_transfer == c.style;
      if (!c.size_match) cfg_ok &= rec.r_used == 1.0;
      if (c.alpha_mode == "fixed:1.5") cfg_ok &= rec.alpha_used == 1.5;
      if (c.size_match) cfg_ok &= rec.r_used == pm.r->r;
    }
    ok &= cfg_ok;
    detail << c.name << " [" << c.flags << "] " << (cfg_ok ? "recorded" : "WRONG") << "; ";
  }
  verdict("ablation plumbing", ok, detail.str() + "journal fields checked per record");
}

void batch_contract(const Toy& toy, const fs::path& work) {
  auto m = write_pair(toy, work / "batch", 10, 6);
  m.pair_id = "batch";
  m.n_combinations = 50;
  m.ablation.use_size_match = true;
  const auto ratio = cs::resolve_ratio(m, cs::make_naive_detector());
  const auto t0 = Clock::now();
  cs::resolve_alpha(m, *toy.model, toy.sched);
  const unsigned workers = std::max(1u, std::thread::hardware_concurrency());
  const auto first = cs::generate_dataset(m, *toy.model, toy.sched, {work / "batch_out", workers, {}});
  const double secs = seconds_since(t0);

  bool aligned = first.generated == 50 && first.failed == 0;
  for (const auto& rec : first.records) {
    const auto img = cs::load_image(first.pair_dir / rec.styled_image_path);
    const auto mask = cs::load_mask(first.pair_dir / rec.mask_path);
    aligned &= img.height() == mask.height() && img.width() == mask.width() &&
               mask == cs::load_mask(rec.source_mask_path);
  }

  std::vector<std::vector<double>> before;
  for (int i : {3, 17, 29, 41, 48}) {
    const auto p = first.pair_dir / first.records[std::size_t(i)].styled_image_path;
    before.push_back(pixels_of(cs::load_image(p)));
    fs::remove(p);
  }
  const auto second = cs::generate_dataset(m, *toy.model, toy.sched, {work / "batch_out", workers, {}});
  bool resumed = second.generated == 5 && second.skipped == 45 && second.failed == 0;
  int k = 0;
  for (int i : {3, 17, 29, 41, 48})
    resumed &= pixels_of(cs::load_image(second.pair_dir / second.records[std::size_t(i)].styled_image_path)) ==
               before[std::size_t(k++)];

  verdict("batch contract", aligned && resumed && secs < kBatchSeconds,
          std::to_string(first.generated) + " aligned image/mask pairs in " + fmt(secs, 3) + " s (limit " +
              fmt(kBatchSeconds) + " s, r " + fmt(ratio.r, 3) + "); resume regenerated " +
              std::to_string(second.generated) + " deleted records bit-identically, skipped " +
              std::to_string(second.skipped));
}

// ---------------------------------------------------------------- gradient

void gradient_check() {
  const auto sched = cs::make_noise_schedule(cs::ScheduleConfig{});
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const cs::StateShape shape{1, 6, 6};
    cs::StateTensor x0(shape), eps(shape);
    for (std::size_t i = 0; i < x0.size(); ++i) {
      x0[i] = n(rng);
      eps[i] = n(rng);
    }
    const int t = 1 + trial * 97;
    const double theta = 0.3 * n(rng), h = 1e-5;
    cs::LinearDenoiser model(shape, theta);
    const double analytic = model.loss_gradient(x0, eps, t, sched);
    model.set_theta(theta + h);
    const double up = cs::diffusion_loss(model, x0, eps, t, sched);
    model.set_theta(theta - h);
    const double down = cs::diffusion_loss(model, x0, eps, t, sched);
    const double numeric = (up - down) / (2 * h);
    worst = std::max(worst, std::abs(analytic - numeric) / std::max(std::abs(numeric), 1e-12));
  }
  verdict("gradient check", worst <= kGradTol,
          "worst relative difference to central differences " + fmt(worst, 3) + " over 10 cases (limit " +
              fmt(kGradTol) + ")");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CellStyle acceptance suite"};
  std::string cli, work_arg;
  bool report_only = false;
  app.add_option("--cli", cli, "path to the cellstyle executable");
  app.add_option("--work", work_arg, "scratch directory (default: fresh temp dir)");
  app.add_flag("--report-only", report_only, "exit 0 regardless of verdicts");
  CLI11_PARSE(app, argc, argv);

  cs::testing::TempDir tmp;
  const fs::path work = work_arg.empty() ? tmp.path() : fs::path(work_arg);
  fs::create_directories(work);
  const auto t0 = Clock::now();

  try {
    metric_oracle();
    op_csb_check();
    alpha_checks();
    size_checks();
    gradient_check();
    const Toy toy = train_toy(work);
    verdict("toy training budget", toy.train_seconds < kTrainSeconds,
            fmt(toy.train_seconds, 3) + " s (limit " + fmt(kTrainSeconds) + " s)");
    round_trip(toy);
    self_style(toy);
    style_effect(toy);
    ablations(toy, work, cli);
    batch_contract(toy, work);
  } catch (const std::exception& e) {
    verdict("suite completed", false, e.what());
  }
  std::cout << failures << " criteria failed, " << fmt(seconds_since(t0), 4) << " s total" << std::endl;
  return report_only ? 0 : failures;
}
