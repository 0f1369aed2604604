// cellstyle: batch command-line front end.
//
//   cellstyle synth     --family bright-mottled --count 32 --out data/src
//   cellstyle train-toy --data data/train --out toy.ckpt
//   cellstyle init      --manifest pair.json --src-images ... --src-masks ... --tgt-images ...
//   cellstyle ratio     --manifest pair.json
//   cellstyle alpha     --manifest pair.json --backbone toy.ckpt
//   cellstyle stylize   --manifest pair.json --backbone toy.ckpt --out styled
//   cellstyle evaluate  --gt gt/ --pred pred/ --report report.json
//
// Exit codes: 0 ok, 2 configuration error, 3 compute failure.

#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "cellstyle/diffusion.hpp"
#include "cellstyle/metrics.hpp"
#include "cellstyle/sd_adapter.hpp"
#include "cellstyle/stylize.hpp"
#include "cellstyle/synthetic.hpp"
#include "cellstyle/toy_unet.hpp"

namespace cs = cellstyle;
namespace fs = std::filesystem;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitCompute = 3;

std::string one_decimal(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << v;
  return os.str();
}

std::vector<fs::path> rasters_in(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw cs::FileNotFound("not a directory: " + dir.string());
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && cs::metrics::is_raster_file(e.path())) out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

struct RunConfig {
  fs::path manifest;
  std::string backbone;
  fs::path out;
  std::optional<std::uint64_t> seed;
  unsigned workers = 1;
  std::string alpha_mode;
  bool no_size_match = false;
  bool no_style = false;
  bool replay = false;
  int steps = 0;
  std::string detector;
};

struct LoadedBackbone {
  std::unique_ptr<cs::Backbone> model;
  cs::NoiseSchedule schedule;
};

LoadedBackbone load_backbone(const std::string& spec, int steps) {
  if (spec.empty()) throw cs::ConfigError("--backbone is required");
  LoadedBackbone lb;
  if (spec.rfind("sd:", 0) == 0) {
    cs::AdapterConfig cfg;
    cfg.checkpoint = spec.substr(3);
    if (const char* w = std::getenv("CELLSTYLE_SD_WORKER")) cfg.worker_command = {"python3", w};
    lb.model = cs::load_pretrained(cfg);
  } else {
    if (!fs::exists(spec)) throw cs::FileNotFound("backbone checkpoint not found: " + spec);
    lb.model = cs::ToyUNet::load(spec);
  }
  cs::ScheduleConfig sc = lb.model->training_schedule().value_or(cs::ScheduleConfig{});
  if (steps > 0) sc.sampling_steps = steps;
  lb.schedule = cs::make_noise_schedule(sc);
  return lb;
}

cs::PairManifest open_manifest(const RunConfig& rc) {
  if (rc.manifest.empty()) throw cs::ConfigError("--manifest is required");
  auto m = cs::load_manifest(rc.manifest);
  if (rc.seed) m.seed = *rc.seed;
  if (!rc.alpha_mode.empty()) m.ablation.alpha_mode = cs::AlphaMode::parse(rc.alpha_mode);
  if (rc.no_size_match) m.ablation.use_size_match = false;
  if (rc.no_style) m.ablation.style_transfer = false;
  if (rc.replay) m.ablation.replay_source_queries = true;
  m.check_paths();
  return m;
}

int cmd_synth(const std::string& family, int count, int size, std::uint64_t seed, const fs::path& out) {
  const auto fams = cs::synthetic::families();
  const auto it = fams.find(family);
  if (it == fams.end()) throw cs::ConfigError("unknown texture family '" + family + "'");
  if (count < 1 || size < 8) throw cs::ConfigError("count must be >= 1 and size >= 8");
  fs::create_directories(out / "images");
  fs::create_directories(out / "masks");
  const auto samples = cs::synthetic::make_samples(count, size, it->second, seed);
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "%05d.tif", i);
    cs::save_image(samples[std::size_t(i)].image, out / "images" / name);
    cs::save_mask(samples[std::size_t(i)].mask, out / "masks" / name);
  }
  std::cout << "wrote " << count << " " << family << " samples to " << out.string() << "\n";
  return 0;
}

int cmd_train_toy(const fs::path& data, const fs::path& out, int epochs, int base, int batch, double lr,
                  double ema, std::uint64_t seed) {
  if (out.empty()) throw cs::ConfigError("--out is required");
  std::vector<cs::Image> images;
  for (const auto& p : rasters_in(data)) images.push_back(cs::load_image(p));
  if (images.empty()) throw cs::InvalidArgument("empty dataset: no images in " + data.string());
  cs::ToyTrainConfig cfg;
  cfg.image_size = images.front().height();
  cfg.epochs = epochs;
  cfg.batch_size = batch;
  cfg.learning_rate = lr;
  cfg.ema_decay = ema;
  cfg.seed = seed;
  cfg.architecture.base_channels = base;
  cfg.architecture.channels = images.front().channels() == 3 ? 3 : 1;
  cfg.on_epoch = [](int epoch, double loss) {
    std::cout << "epoch " << epoch + 1 << " loss " << std::setprecision(6) << loss << std::endl;
  };
  auto model = cs::train_toy_backbone(images, cfg);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  model->save(out);
  std::cout << "checkpoint " << out.string() << "\n";
  return 0;
}

int cmd_init(const RunConfig& rc, const fs::path& src_images, const fs::path& src_masks,
             const fs::path& tgt_images, const std::string& pair_id, int n_combinations) {
  if (rc.manifest.empty()) throw cs::ConfigError("--manifest is required");
  cs::PairManifest m;
  m.pair_id = pair_id;
  m.src_images = rasters_in(src_images);
  m.tgt_images = rasters_in(tgt_images);
  for (const auto& p : m.src_images) {
    const auto mask = src_masks / p.filename();
    if (!fs::exists(mask)) throw cs::ConfigError("no mask for " + p.filename().string() + " in " + src_masks.string());
    m.src_masks.push_back(mask);
  }
  m.n_combinations = n_combinations;
  if (rc.seed) m.seed = *rc.seed;
  if (!rc.alpha_mode.empty()) m.ablation.alpha_mode = cs::AlphaMode::parse(rc.alpha_mode);
  m.ablation.use_size_match = !rc.no_size_match;
  m.ablation.style_transfer = !rc.no_style;
  m.ablation.replay_source_queries = rc.replay;
  if (!rc.detector.empty()) m.detector_id = rc.detector;
  m.validate();
  cs::save_manifest(m, rc.manifest);
  std::cout << "pair=" << m.pair_id << " sources=" << m.src_images.size() << " targets=" << m.tgt_images.size()
            << "\n";
  return 0;
}

int cmd_ratio(const RunConfig& rc) {
  auto m = open_manifest(rc);
  if (!rc.detector.empty()) m.detector_id = rc.detector;
  const auto r = cs::resolve_ratio(m, cs::detector_from_id(m.detector_id));
  cs::save_manifest(m, rc.manifest);
  std::cout << "pair=" << m.pair_id << " r=" << one_decimal(r.r) << "\n";
  return 0;
}

int cmd_alpha(const RunConfig& rc) {
  auto m = open_manifest(rc);
  const auto bb = load_backbone(rc.backbone, rc.steps);
  const auto a = cs::resolve_alpha(m, *bb.model, bb.schedule, rc.workers);
  cs::save_manifest(m, rc.manifest);
  std::cout << "pair=" << m.pair_id << " alpha=" << one_decimal(a.alpha) << "\n";
  return 0;
}

int cmd_stylize(const RunConfig& rc) {
  auto m = open_manifest(rc);
  fs::path out = rc.out;
  if (out.empty())
    if (const char* env = std::getenv("CELLSTYLE_OUT")) out = env;
  if (out.empty()) throw cs::ConfigError("no output root: pass --out or set CELLSTYLE_OUT");
  const auto bb = load_backbone(rc.backbone, rc.steps);
  const auto sum = cs::generate_dataset(m, *bb.model, bb.schedule, {out, rc.workers, {}});
  // record the flags the batch actually ran with
  cs::save_manifest(m, rc.manifest);
  std::cout << "pair=" << m.pair_id << " r=" << one_decimal(cs::resolved_ratio(m))
            << " alpha=" << one_decimal(m.ablation.style_transfer ? cs::resolved_alpha(m) : 1.0)
            << " generated=" << sum.generated << " skipped=" << sum.skipped << " failed=" << sum.failed << "\n";
  return sum.failed > 0 ? kExitCompute : 0;
}

int cmd_evaluate(const fs::path& gt, const fs::path& pred, const std::vector<double>& weights,
                 const fs::path& report, unsigned workers) {
  cs::metrics::DetWeights w;
  if (!weights.empty()) {
    if (weights.size() != 3) throw cs::ConfigError("--weights takes w_split,w_fn,w_fp");
    w = cs::metrics::DetWeights{weights[0], weights[1], weights[2]};
  }
  const auto r = cs::metrics::evaluate_dataset(gt, pred, w, workers);
  if (!report.empty()) {
    if (report.has_parent_path()) fs::create_directories(report.parent_path());
    std::ofstream os(report);
    if (report.extension() == ".csv")
      os << cs::metrics::to_csv(r);
    else
      os << cs::metrics::to_json(r).dump(2) << "\n";
    if (!os) throw cs::WriteError("cannot write " + report.string());
  }
  std::cout << cs::metrics::summary_line(r) << "\n";
  return 0;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const cs::ConfigError*>(&e) || dynamic_cast<const cs::InvalidArgument*>(&e) ||
      dynamic_cast<const cs::FileNotFound*>(&e) || dynamic_cast<const cs::DecodeError*>(&e) ||
      dynamic_cast<const cs::UnsupportedBitDepth*>(&e) || dynamic_cast<const cs::NotALabelImage*>(&e))
    return kExitConfig;
  return kExitCompute;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CellStyle: styled training data for zero-shot cell segmentation"};
  app.require_subcommand(1);
  RunConfig rc;

  auto add_manifest = [&](CLI::App* c) { c->add_option("--manifest", rc.manifest, "pair manifest (JSON)")->required(); };
  auto add_seed = [&](CLI::App* c) { c->add_option("--seed", rc.seed, "seed for every stochastic choice"); };
  auto add_backbone = [&](CLI::App* c) {
    c->add_option("--backbone", rc.backbone, "toy checkpoint, or sd:<checkpoint dir>")->required();
    c->add_option("--steps", rc.steps, "DDIM steps (default: checkpoint's)");
    c->add_option("--workers", rc.workers, "worker threads")->check(CLI::PositiveNumber);
  };
  auto add_ablation = [&](CLI::App* c) {
    c->add_option("--alpha-mode", rc.alpha_mode, "adaptive | fixed:<v>");
    c->add_flag("--no-size-match", rc.no_size_match, "use r = 1");
    c->add_flag("--no-style", rc.no_style, "size matching only: rescaled sources, no style transfer");
    c->add_flag("--replay-source-queries", rc.replay, "inject cached source queries as well");
  };

  std::string family = "bright-mottled";
  int count = 32, size = 32;
  std::uint64_t synth_seed = 0;
  fs::path synth_out;
  auto* synth = app.add_subcommand("synth", "write a procedural image/mask dataset");
  synth->add_option("--family", family, "texture family")->check(CLI::IsMember({"bright-mottled", "dim-striped"}));
  synth->add_option("--count", count);
  synth->add_option("--size", size);
  synth->add_option("--seed", synth_seed);
  synth->add_option("--out", synth_out)->required();

  fs::path data, ckpt_out;
  int epochs = 60, base = 16, batch = 16;
  double lr = 2e-3, ema = 0.995;
  std::uint64_t train_seed = 0;
  auto* train = app.add_subcommand("train-toy", "train the toy backbone on a directory of images");
  train->add_option("--data", data, "directory of training images (all the same size)")->required();
  train->add_option("--out", ckpt_out, "checkpoint to write")->required();
  train->add_option("--epochs", epochs)->check(CLI::PositiveNumber);
  train->add_option("--base-channels", base)->check(CLI::PositiveNumber);
  train->add_option("--batch", batch)->check(CLI::PositiveNumber);
  train->add_option("--lr", lr)->check(CLI::PositiveNumber);
  train->add_option("--ema", ema, "weight averaging decay, 0 disables")->check(CLI::Range(0.0, 0.9999));
  train->add_option("--seed", train_seed);

  fs::path src_images, src_masks, tgt_images;
  std::string pair_id = "1";
  int n_comb = 4000;
  auto* init = app.add_subcommand("init", "create a pair manifest");
  add_manifest(init);
  add_seed(init);
  add_ablation(init);
  init->add_option("--src-images", src_images)->required();
  init->add_option("--src-masks", src_masks, "masks with the same file names")->required();
  init->add_option("--tgt-images", tgt_images)->required();
  init->add_option("--pair-id", pair_id);
  init->add_option("--n-combinations", n_comb)->check(CLI::PositiveNumber);
  init->add_option("--detector", rc.detector, "naive-otsu | naive-fixed:<t> | command:<cmd>");

  auto* ratio = app.add_subcommand("ratio", "estimate the cell size ratio r");
  add_manifest(ratio);
  ratio->add_option("--detector", rc.detector, "naive-otsu | naive-fixed:<t> | command:<cmd>");

  auto* alpha = app.add_subcommand("alpha", "estimate the attention score scaling ratio");
  add_manifest(alpha);
  add_seed(alpha);
  add_backbone(alpha);

  auto* stylize = app.add_subcommand("stylize", "generate the styled dataset");
  add_manifest(stylize);
  add_seed(stylize);
  add_backbone(stylize);
  add_ablation(stylize);
  stylize->add_option("--out", rc.out, "output root (default: $CELLSTYLE_OUT)");

  fs::path gt, pred, report;
  std::vector<double> weights;
  auto* evaluate = app.add_subcommand("evaluate", "SEG/DET/OP_CSB of predicted masks");
  evaluate->add_option("--gt", gt)->required();
  evaluate->add_option("--pred", pred)->required();
  evaluate->add_option("--weights", weights, "w_split,w_fn,w_fp")->delimiter(',')->expected(3);
  evaluate->add_option("--report", report, "write .json or .csv");
  evaluate->add_option("--workers", rc.workers)->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc_parse = app.exit(e);
    return rc_parse == 0 ? 0 : kExitConfig;
  }

  try {
    if (*synth) return cmd_synth(family, count, size, synth_seed, synth_out);
    if (*train) return cmd_train_toy(data, ckpt_out, epochs, base, batch, lr, ema, train_seed);
    if (*init) return cmd_init(rc, src_images, src_masks, tgt_images, pair_id, n_comb);
    if (*ratio) return cmd_ratio(rc);
    if (*alpha) return cmd_alpha(rc);
    if (*stylize) return cmd_stylize(rc);
    if (*evaluate) return cmd_evaluate(gt, pred, weights, report, rc.workers);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}
