#pragma once

// Small pixel-space UNet used as the desk-scale diffusion backbone.
//
//   conv_in -> enc1 (full res) -> down -> enc2 -> mid (half res)
//   decoder: [ResBlock, SelfAttention] x N at half res (hookable layers)
//   -> upsample -> conv -> dec1 (full res, skip from enc1) -> norm/silu/conv_out
//
// Training uses the explicit backward passes in nn/layers.hpp.

#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cellstyle/backbone.hpp"
#include "cellstyle/nn/layers.hpp"
#include "cellstyle/schedule.hpp"

namespace cellstyle {

struct ToyArchitecture {
  int image_size = 32;
  int channels = 1;
  int base_channels = 16;
  int groups = 4;
  int heads = 2;
  int attention_layers = 2;
  int time_dim = 64;

  bool operator==(const ToyArchitecture&) const = default;
};

inline void to_json(nlohmann::json& j, const ToyArchitecture& a) {
  j = {{"image_size", a.image_size}, {"channels", a.channels},
       {"base_channels", a.base_channels}, {"groups", a.groups},
       {"heads", a.heads}, {"attention_layers", a.attention_layers},
       {"time_dim", a.time_dim}};
}
inline void from_json(const nlohmann::json& j, ToyArchitecture& a) {
  a.image_size = j.at("image_size");
  a.channels = j.at("channels");
  a.base_channels = j.at("base_channels");
  a.groups = j.at("groups");
  a.heads = j.at("heads");
  a.attention_layers = j.at("attention_layers");
  a.time_dim = j.at("time_dim");
}

class ToyUNet final : public Backbone {
 public:
  static constexpr char kMagic[8] = {'C', 'S', 'T', 'Y', 'C', 'K', 'P', 'T'};
  static constexpr std::uint32_t kFormatVersion = 1;

  struct Cache {
    nn::Vec temb_in;
    nn::Mat temb_hidden;  // pre-activation of first time layer
    nn::Mat temb;         // output of second time layer
    nn::Mat temb_act;
    nn::Conv2d::Cache conv_in;
    nn::ResBlock::Cache enc1, enc2, mid, dec1;
    nn::Conv2d::Cache down, up_conv, conv_out;
    std::vector<nn::ResBlock::Cache> dec_res;
    std::vector<nn::SelfAttention::Cache> dec_attn;
    nn::GroupNorm::Cache out_norm;
    nn::Mat out_norm_y;
    int c1 = 0, c2 = 0, half = 0, full = 0;
  };

  explicit ToyUNet(ToyArchitecture arch, ScheduleConfig schedule = {}, std::uint64_t seed = 0)
      : arch_(arch), schedule_(schedule) {
    validate(arch);
    const int c1 = arch.base_channels, c2 = 2 * arch.base_channels;
    const int tin = arch.base_channels * 2;
    time1_ = nn::Linear("time.0", tin, arch.time_dim);
    time2_ = nn::Linear("time.1", arch.time_dim, arch.time_dim);
    conv_in_ = nn::Conv2d("conv_in", arch.channels, c1, 3);
    enc1_ = nn::ResBlock("enc1", c1, c1, arch.time_dim, arch.groups);
    down_ = nn::Conv2d("down", c1, c2, 3, 2);
    enc2_ = nn::ResBlock("enc2", c2, c2, arch.time_dim, arch.groups);
    mid_ = nn::ResBlock("mid", c2, c2, arch.time_dim, arch.groups);
    for (int i = 0; i < arch.attention_layers; ++i) {
      dec_res_.emplace_back("dec.res" + std::to_string(i), i == 0 ? 2 * c2 : c2, c2,
                            arch.time_dim, arch.groups);
      dec_attn_.emplace_back("dec.attn" + std::to_string(i), c2, arch.heads, arch.groups);
    }
    up_conv_ = nn::Conv2d("up", c2, c1, 3);
    dec1_ = nn::ResBlock("dec1", 2 * c1, c1, arch.time_dim, arch.groups);
    out_norm_ = nn::GroupNorm("out_norm", c1, arch.groups);
    conv_out_ = nn::Conv2d("conv_out", c1, arch.channels, 3);

    std::mt19937_64 rng(seed);
    time1_.init(rng);
    time2_.init(rng);
    conv_in_.init(rng);
    enc1_.init(rng);
    down_.init(rng);
    enc2_.init(rng);
    mid_.init(rng);
    for (std::size_t i = 0; i < dec_res_.size(); ++i) {
      dec_res_[i].init(rng);
      dec_attn_[i].init(rng);
    }
    up_conv_.init(rng);
    dec1_.init(rng);
    conv_out_.init(rng, 0.1f);
  }

  static void validate(const ToyArchitecture& a) {
    if (a.image_size < 4 || a.image_size % 2 != 0)
      throw InvalidArgument("toy backbone image_size must be even and >= 4");
    if (a.channels != 1 && a.channels != 3)
      throw InvalidArgument("toy backbone channels must be 1 or 3");
    if (a.base_channels < 1 || a.base_channels % a.groups != 0)
      throw InvalidArgument("base_channels must be a positive multiple of groups");
    if ((2 * a.base_channels) % a.heads != 0)
      throw InvalidArgument("2*base_channels must be divisible by heads");
    if (a.attention_layers < 1) throw InvalidArgument("toy backbone needs >= 1 attention layer");
    if (a.time_dim < 2) throw InvalidArgument("time_dim must be >= 2");
  }

  const ToyArchitecture& architecture() const noexcept { return arch_; }

  // Backbone -----------------------------------------------------------------

  StateShape state_shape() const override {
    return {arch_.channels, arch_.image_size, arch_.image_size};
  }
  int image_height() const override { return arch_.image_size; }
  int image_width() const override { return arch_.image_size; }
  int image_channels() const override { return arch_.channels; }

  StateTensor predict_noise(const StateTensor& x_t, int t, AttentionHook* hook) const override {
    if (!(x_t.shape() == state_shape()))
      throw InvalidArgument("toy backbone expects state " + state_shape().str() + ", got " +
                            x_t.shape().str());
    const nn::Mat out = forward(to_feature(x_t), t, hook, nullptr);
    return from_feature(out);
  }

  StateTensor encode(const Image& image) const override {
    if (image.height() != arch_.image_size || image.width() != arch_.image_size ||
        image.channels() != arch_.channels)
      throw InvalidArgument("toy backbone encodes " + std::to_string(arch_.image_size) + "x" +
                            std::to_string(arch_.image_size) + "x" +
                            std::to_string(arch_.channels) + " images");
    return pixels_to_state(image);
  }

  Image decode(const StateTensor& state) const override {
    if (!(state.shape() == state_shape())) throw InvalidArgument("toy decode: shape mismatch");
    return state_to_pixels(state);
  }

  std::vector<std::string> attention_layers() const override {
    std::vector<std::string> out;
    for (const auto& a : dec_attn_) out.push_back(a.name());
    return out;
  }

  double reconstruction_tolerance() const override { return 0.0; }

  std::optional<ScheduleConfig> training_schedule() const override { return schedule_; }

  std::string identifier() const override { return "toy-unet"; }

  // Training -----------------------------------------------------------------

  nn::ParamList parameters() {
    nn::ParamList p;
    time1_.collect(p);
    time2_.collect(p);
    conv_in_.collect(p);
    enc1_.collect(p);
    down_.collect(p);
    enc2_.collect(p);
    mid_.collect(p);
    for (std::size_t i = 0; i < dec_res_.size(); ++i) {
      dec_res_[i].collect(p);
      dec_attn_[i].collect(p);
    }
    up_conv_.collect(p);
    dec1_.collect(p);
    out_norm_.collect(p);
    conv_out_.collect(p);
    return p;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (auto* p : parameters()) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  /// Mean squared noise-prediction error for one sample. Adds
  /// grad_scale * d(loss)/d(theta) into the parameter gradients.
  double loss_and_backward(const StateTensor& x_t, const StateTensor& eps, int t,
                           float grad_scale = 1.f) {
    require_same_shape(x_t, eps, "loss_and_backward");
    Cache cache;
    const nn::Mat pred = forward(to_feature(x_t), t, nullptr, &cache);
    const nn::Mat target = to_feature(eps).x;
    const nn::Mat diff = pred - target;
    const double n = static_cast<double>(diff.size());
    const double loss = static_cast<double>(diff.cast<double>().squaredNorm()) / n;
    const nn::Mat dpred = diff * static_cast<float>(2.0 * grad_scale / n);
    backward(dpred, cache);
    return loss;
  }

  std::vector<double>& loss_history() noexcept { return loss_history_; }
  const std::vector<double>& loss_history() const noexcept { return loss_history_; }
  void set_train_seed(std::uint64_t s) { train_seed_ = s; }

  // Checkpoints --------------------------------------------------------------

  void save(const std::filesystem::path& path) const {
    auto* self = const_cast<ToyUNet*>(this);
    const auto params = self->parameters();
    nlohmann::json header;
    header["format"] = "cellstyle-toy-unet";
    header["architecture"] = arch_;
    header["schedule"] = schedule_;
    header["loss_history"] = loss_history_;
    header["train_seed"] = train_seed_;
    header["byte_order"] = "little";
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto* p : params)
      tensors.push_back({{"name", p->name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
    header["tensors"] = tensors;
    const std::string text = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw WriteError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kFormatVersion);
    write_pod(out, static_cast<std::uint64_t>(text.size()));
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto* p : params)
      out.write(reinterpret_cast<const char*>(p->value.data()),
                static_cast<std::streamsize>(p->value.size() * sizeof(float)));
    if (!out) throw WriteError("failed while writing checkpoint " + path.string());
  }

  static std::unique_ptr<ToyUNet> load(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path)) throw FileNotFound(path.string());
    std::ifstream in(path, std::ios::binary);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
      throw DecodeError(path.string() + " is not a cellstyle checkpoint");
    std::uint32_t version = 0;
    read_pod(in, version);
    if (version != kFormatVersion)
      throw DecodeError("checkpoint format version " + std::to_string(version) +
                        " is not supported (expected " + std::to_string(kFormatVersion) + ")");
    std::uint64_t len = 0;
    read_pod(in, len);
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) throw DecodeError("truncated checkpoint header in " + path.string());
    const auto header = nlohmann::json::parse(text);
    auto model = std::make_unique<ToyUNet>(header.at("architecture").get<ToyArchitecture>(),
                                           header.at("schedule").get<ScheduleConfig>());
    model->loss_history_ = header.value("loss_history", std::vector<double>{});
    model->train_seed_ = header.value("train_seed", std::uint64_t{0});
    const auto params = model->parameters();
    const auto& tensors = header.at("tensors");
    if (tensors.size() != params.size())
      throw DecodeError("checkpoint tensor count does not match the architecture");
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto* p = params[i];
      if (tensors[i].at("name") != p->name || tensors[i].at("rows") != p->value.rows() ||
          tensors[i].at("cols") != p->value.cols())
        throw DecodeError("checkpoint tensor " + tensors[i].at("name").get<std::string>() +
                          " does not match the architecture");
      in.read(reinterpret_cast<char*>(p->value.data()),
              static_cast<std::streamsize>(p->value.size() * sizeof(float)));
    }
    if (!in) throw DecodeError("truncated checkpoint data in " + path.string());
    return model;
  }

 private:
  template <class T>
  static void write_pod(std::ostream& o, const T& v) {
    o.write(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  template <class T>
  static void read_pod(std::istream& i, T& v) {
    i.read(reinterpret_cast<char*>(&v), sizeof(T));
  }

  nn::FeatureMap to_feature(const StateTensor& s) const {
    const auto& sh = s.shape();
    nn::FeatureMap f{nn::Mat(sh.channels, sh.height * sh.width), sh.height, sh.width};
    for (int c = 0; c < sh.channels; ++c)
      for (int p = 0; p < sh.height * sh.width; ++p)
        f.x(c, p) = static_cast<float>(s[static_cast<std::size_t>(c) * sh.height * sh.width + p]);
    return f;
  }

  StateTensor from_feature(const nn::Mat& m) const {
    StateTensor s(state_shape());
    const int hw = arch_.image_size * arch_.image_size;
    for (int c = 0; c < arch_.channels; ++c)
      for (int p = 0; p < hw; ++p) s[static_cast<std::size_t>(c) * hw + p] = m(c, p);
    return s;
  }

  static nn::FeatureMap concat(const nn::FeatureMap& a, const nn::FeatureMap& b) {
    nn::FeatureMap out{nn::Mat(a.x.rows() + b.x.rows(), a.x.cols()), a.h, a.w};
    out.x.topRows(a.x.rows()) = a.x;
    out.x.bottomRows(b.x.rows()) = b.x;
    return out;
  }

  nn::Mat forward(const nn::FeatureMap& x, int t, AttentionHook* hook, Cache* c) const {
    const nn::Vec temb_in = nn::timestep_embedding(t, arch_.base_channels * 2);
    const nn::Mat hidden = time1_.forward(temb_in);
    const nn::Mat temb = time2_.forward(nn::silu(hidden));
    const nn::Mat temb_act = nn::silu(temb);

    const auto h0 = conv_in_.forward(x, c ? &c->conv_in : nullptr);
    const auto e1 = enc1_.forward(h0, temb_act, c ? &c->enc1 : nullptr);
    const auto d = down_.forward(e1, c ? &c->down : nullptr);
    const auto e2 = enc2_.forward(d, temb_act, c ? &c->enc2 : nullptr);
    const auto m = mid_.forward(e2, temb_act, c ? &c->mid : nullptr);

    if (c) {
      c->dec_res.resize(dec_res_.size());
      c->dec_attn.resize(dec_attn_.size());
    }
    nn::FeatureMap h = concat(m, e2);
    for (std::size_t i = 0; i < dec_res_.size(); ++i) {
      h = dec_res_[i].forward(h, temb_act, c ? &c->dec_res[i] : nullptr);
      h = dec_attn_[i].forward(h, t, hook, c ? &c->dec_attn[i] : nullptr);
    }
    const auto up = up_conv_.forward(nn::upsample2(h), c ? &c->up_conv : nullptr);
    const auto o = dec1_.forward(concat(up, e1), temb_act, c ? &c->dec1 : nullptr);
    nn::Mat normed = out_norm_.forward(o.x, c ? &c->out_norm : nullptr);
    const auto out = conv_out_.forward({nn::silu(normed), o.h, o.w}, c ? &c->conv_out : nullptr);

    if (c) {
      c->temb_in = temb_in;
      c->temb_hidden = hidden;
      c->temb = temb;
      c->temb_act = temb_act;
      c->out_norm_y = std::move(normed);
      c->c1 = arch_.base_channels;
      c->c2 = 2 * arch_.base_channels;
      c->full = arch_.image_size;
      c->half = arch_.image_size / 2;
    }
    return out.x;
  }

  void backward(const nn::Mat& dout, Cache& c) {
    nn::Mat dtemb_act = nn::Mat::Zero(arch_.time_dim, 1);
    nn::Mat dnormed = nn::silu_backward(c.out_norm_y, conv_out_.backward(dout, c.conv_out));
    nn::Mat d_o = out_norm_.backward(dnormed, c.out_norm);
    nn::Mat dcat1 = dec1_.backward(d_o, c.dec1, dtemb_act);
    nn::Mat de1 = dcat1.bottomRows(c.c1);
    nn::Mat dup = up_conv_.backward(dcat1.topRows(c.c1), c.up_conv);
    nn::Mat dh = nn::upsample2_backward(dup, c.half, c.half);
    for (std::size_t i = dec_res_.size(); i-- > 0;) {
      dh = dec_attn_[i].backward(dh, c.dec_attn[i]);
      dh = dec_res_[i].backward(dh, c.dec_res[i], dtemb_act);
    }
    nn::Mat dm = dh.topRows(c.c2);
    nn::Mat de2 = dh.bottomRows(c.c2);
    de2 += mid_.backward(dm, c.mid, dtemb_act);
    nn::Mat dd = enc2_.backward(de2, c.enc2, dtemb_act);
    de1 += down_.backward(dd, c.down);
    nn::Mat dh0 = enc1_.backward(de1, c.enc1, dtemb_act);
    conv_in_.backward(dh0, c.conv_in);

    const nn::Mat dtemb = nn::silu_backward(c.temb, dtemb_act);
    const nn::Mat dhidden_act = time2_.backward(dtemb, nn::silu(c.temb_hidden));
    time1_.backward(nn::silu_backward(c.temb_hidden, dhidden_act), c.temb_in);
  }

  ToyArchitecture arch_;
  ScheduleConfig schedule_;
  std::vector<double> loss_history_;
  std::uint64_t train_seed_ = 0;

  nn::Linear time1_, time2_;
  nn::Conv2d conv_in_;
  nn::ResBlock enc1_;
  nn::Conv2d down_;
  nn::ResBlock enc2_, mid_;
  std::vector<nn::ResBlock> dec_res_;
  std::vector<nn::SelfAttention> dec_attn_;
  nn::Conv2d up_conv_;
  nn::ResBlock dec1_;
  nn::GroupNorm out_norm_;
  nn::Conv2d conv_out_;
};

}  // namespace cellstyle
