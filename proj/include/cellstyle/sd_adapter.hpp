#pragma once

// Backbone over an out-of-process denoiser (the pretrained latent-diffusion
// worker in tools/sd_worker.py, or the toy worker used by the contract tests).
//
// Wire format, both directions: u32 header length, JSON header, u64 payload
// length, raw little-endian payload. States travel as float64, attention
// operands and images as float32.
//
//   parent                          worker
//   hello{protocol}            ->   info{protocol, model, identifier, state_shape,
//                                        image, attention_layers, reconstruction_tolerance,
//                                        schedule?}
//   predict{t, hook} + x       ->   attention{layer, heads, n_q, n_k, d} + q|k|v  (0..n times)
//   keep | replace{...} + out  ->
//                              <-   eps + state
//   encode{h, w, c} + pixels   ->   state{shape} + data
//   decode{shape} + data       ->   image{h, w, c} + pixels
//   bye                        ->
// Any request may be answered by error{message}.

#include <fcntl.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <mutex>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "cellstyle/backbone.hpp"
#include "cellstyle/error.hpp"

namespace cellstyle {

inline constexpr int kBridgeProtocol = 1;

namespace bridge {

struct Message {
  nlohmann::json header;
  std::vector<unsigned char> payload;
};

inline void write_all(int fd, const void* data, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(data);
  while (n > 0) {
    const ssize_t w = ::write(fd, p, n);
    if (w < 0 && errno == EINTR) continue;
    if (w <= 0) throw ComputeError("bridge write failed: " + std::string(std::strerror(errno)));
    p += w;
    n -= static_cast<std::size_t>(w);
  }
}

inline void read_all(int fd, void* data, std::size_t n) {
  auto* p = static_cast<unsigned char*>(data);
  while (n > 0) {
    const ssize_t r = ::read(fd, p, n);
    if (r < 0 && errno == EINTR) continue;
    if (r == 0) throw ComputeError("bridge closed by peer");
    if (r < 0) throw ComputeError("bridge read failed: " + std::string(std::strerror(errno)));
    p += r;
    n -= static_cast<std::size_t>(r);
  }
}

inline void send(int fd, const nlohmann::json& header, const void* payload = nullptr, std::size_t bytes = 0) {
  const std::string h = header.dump();
  const auto hl = static_cast<std::uint32_t>(h.size());
  const auto pl = static_cast<std::uint64_t>(bytes);
  write_all(fd, &hl, sizeof hl);
  write_all(fd, h.data(), h.size());
  write_all(fd, &pl, sizeof pl);
  if (bytes) write_all(fd, payload, bytes);
}

inline Message receive(int fd) {
  std::uint32_t hl = 0;
  read_all(fd, &hl, sizeof hl);
  if (hl > (1u << 24)) throw ComputeError("bridge header too large");
  std::string h(hl, '\0');
  read_all(fd, h.data(), hl);
  std::uint64_t pl = 0;
  read_all(fd, &pl, sizeof pl);
  if (pl > (std::uint64_t{1} << 34)) throw ComputeError("bridge payload too large");
  Message m;
  try {
    m.header = nlohmann::json::parse(h);
  } catch (const nlohmann::json::exception& e) {
    throw ComputeError(std::string("bridge header is not JSON: ") + e.what());
  }
  m.payload.resize(pl);
  if (pl) read_all(fd, m.payload.data(), pl);
  if (m.header.value("op", "") == "error")
    throw ComputeError("worker: " + m.header.value("message", std::string("unknown error")));
  return m;
}

inline std::string op(const Message& m) { return m.header.value("op", std::string()); }

inline void expect(const Message& m, const char* name) {
  if (op(m) != name) throw ComputeError("bridge expected '" + std::string(name) + "', got '" + op(m) + "'");
}

template <class T>
std::vector<T> as(const Message& m, std::size_t count) {
  if (m.payload.size() != count * sizeof(T))
    throw ComputeError("bridge payload has " + std::to_string(m.payload.size()) + " bytes, expected " +
                       std::to_string(count * sizeof(T)));
  std::vector<T> out(count);
  std::memcpy(out.data(), m.payload.data(), m.payload.size());
  return out;
}

inline nlohmann::json shape_json(const StateShape& s) { return {s.channels, s.height, s.width}; }

inline StateShape shape_from(const nlohmann::json& j) {
  return StateShape{j.at(0).get<int>(), j.at(1).get<int>(), j.at(2).get<int>()};
}

inline void send_state(int fd, const char* name, const StateTensor& s) {
  send(fd, {{"op", name}, {"shape", shape_json(s.shape())}}, s.data().data(), s.size() * sizeof(double));
}

inline StateTensor state_from(const Message& m) {
  const StateShape shape = shape_from(m.header.at("shape"));
  const auto v = as<double>(m, shape.numel());
  return StateTensor(shape, Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
}

inline void send_image(int fd, const char* name, const Image& img) {
  send(fd, {{"op", name}, {"h", img.height()}, {"w", img.width()}, {"c", img.channels()}}, img.pixels().data(),
       img.pixels().size() * sizeof(float));
}

inline Image image_from(const Message& m) {
  const int h = m.header.at("h"), w = m.header.at("w"), c = m.header.at("c");
  Image img(h, w, c);
  const auto v = as<float>(m, static_cast<std::size_t>(h) * w * c);
  std::copy(v.begin(), v.end(), img.pixels().begin());
  return img;
}

// Row-major heads x tokens x dim.
inline void append_heads(std::vector<float>& out, const HeadTensor& t) {
  for (const auto& h : t.heads)
    for (int r = 0; r < h.rows(); ++r)
      for (int c = 0; c < h.cols(); ++c) out.push_back(h(r, c));
}

inline HeadTensor heads_from(const float* p, int heads, int tokens, int dim) {
  HeadTensor t = HeadTensor::zeros(heads, tokens, dim);
  for (auto& h : t.heads)
    for (int r = 0; r < tokens; ++r)
      for (int c = 0; c < dim; ++c) h(r, c) = *p++;
  return t;
}

// Forwards the worker's attention callbacks to a parent-side hook.
class RemoteHook final : public AttentionHook {
 public:
  RemoteHook(int in_fd, int out_fd) : in_(in_fd), out_(out_fd) {}

  std::optional<HeadTensor> on_attention(const AttentionSite& site, const HeadTensor& q, const HeadTensor& k,
                                         const HeadTensor& v) override {
    std::vector<float> buf;
    buf.reserve(q.numel() + k.numel() + v.numel());
    append_heads(buf, q);
    append_heads(buf, k);
    append_heads(buf, v);
    send(out_, {{"op", "attention"}, {"layer", site.layer}, {"t", site.timestep}, {"heads", q.num_heads()},
                {"n_q", q.tokens()}, {"n_k", k.tokens()}, {"d", q.dim()}, {"d_v", v.dim()}},
         buf.data(), buf.size() * sizeof(float));
    const Message reply = receive(in_);
    if (op(reply) == "keep") return std::nullopt;
    expect(reply, "replace");
    const int heads = reply.header.at("heads"), n = reply.header.at("n"), d = reply.header.at("d");
    const auto data = as<float>(reply, static_cast<std::size_t>(heads) * n * d);
    return heads_from(data.data(), heads, n, d);
  }

 private:
  int in_, out_;
};

}  // namespace bridge

/// Worker side: answers requests for `backbone` until bye or EOF.
inline void serve(const Backbone& backbone, int in_fd, int out_fd, const std::string& model) {
  using namespace bridge;
  for (;;) {
    Message req;
    try {
      req = receive(in_fd);
    } catch (const ComputeError&) {
      return;  // parent went away
    }
    const std::string name = op(req);
    try {
      if (name == "bye") return;
      if (name == "hello") {
        nlohmann::json info{{"op", "info"},
                            {"protocol", kBridgeProtocol},
                            {"model", model},
                            {"identifier", backbone.identifier()},
                            {"state_shape", shape_json(backbone.state_shape())},
                            {"image", {backbone.image_height(), backbone.image_width(), backbone.image_channels()}},
                            {"attention_layers", backbone.attention_layers()},
                            {"reconstruction_tolerance", backbone.reconstruction_tolerance()}};
        if (const auto s = backbone.training_schedule()) info["schedule"] = *s;
        send(out_fd, info);
      } else if (name == "predict") {
        const StateTensor x = state_from(req);
        RemoteHook hook(in_fd, out_fd);
        const bool hooked = req.header.value("hook", false);
        send_state(out_fd, "eps", backbone.predict_noise(x, req.header.at("t"), hooked ? &hook : nullptr));
      } else if (name == "encode") {
        send_state(out_fd, "state", backbone.encode(image_from(req)));
      } else if (name == "decode") {
        send_image(out_fd, "image", backbone.decode(state_from(req)));
      } else {
        throw InvalidArgument("unknown request '" + name + "'");
      }
    } catch (const std::exception& e) {
      send(out_fd, {{"op", "error"}, {"message", e.what()}});
    }
  }
}

struct AdapterConfig {
  std::filesystem::path checkpoint;  // local directory or file, never fetched
  std::string device = "cpu";
  int latent_size = 64;              // latent side; images are 8x this
  std::string conditioning = "unconditional";
  std::string expected_model = "stable-diffusion-v1-5";
  std::vector<std::string> worker_command = {"python3", "tools/sd_worker.py"};
  std::vector<std::string> layer_override;  // replaces the worker's enumeration when set
  int min_attention_layers = 6;
};

/// Backbone served by a child process. Requests are serialized, so
/// concurrent jobs share one worker.
class BridgeBackbone final : public Backbone {
 public:
  explicit BridgeBackbone(const std::vector<std::string>& argv) {
    if (argv.empty()) throw ConfigError("empty worker command");
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0 || ::pipe(from_child) != 0)
      throw ComputeError("pipe failed: " + std::string(std::strerror(errno)));
    pid_ = ::fork();
    if (pid_ < 0) throw ComputeError("fork failed: " + std::string(std::strerror(errno)));
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      std::vector<char*> args;
      for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
      args.push_back(nullptr);
      ::execvp(args[0], args.data());
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    out_ = to_child[1];
    in_ = from_child[0];
    ::signal(SIGPIPE, SIG_IGN);
    try {
      bridge::send(out_, {{"op", "hello"}, {"protocol", kBridgeProtocol}});
      const auto info = bridge::receive(in_);
      bridge::expect(info, "info");
      const auto& h = info.header;
      if (h.value("protocol", 0) != kBridgeProtocol)
        throw ConfigError("worker speaks protocol " + std::to_string(h.value("protocol", 0)) + ", expected " +
                          std::to_string(kBridgeProtocol));
      model_ = h.value("model", std::string());
      identifier_ = h.value("identifier", model_);
      shape_ = bridge::shape_from(h.at("state_shape"));
      image_h_ = h.at("image").at(0);
      image_w_ = h.at("image").at(1);
      image_c_ = h.at("image").at(2);
      layers_ = h.at("attention_layers").get<std::vector<std::string>>();
      tolerance_ = h.value("reconstruction_tolerance", 0.1);
      if (h.contains("schedule")) schedule_ = h["schedule"].get<ScheduleConfig>();
    } catch (const nlohmann::json::exception& e) {
      shutdown();
      throw ConfigError(std::string("malformed worker info: ") + e.what());
    } catch (...) {
      shutdown();
      throw;
    }
  }

  BridgeBackbone(const BridgeBackbone&) = delete;
  BridgeBackbone& operator=(const BridgeBackbone&) = delete;
  ~BridgeBackbone() override { shutdown(); }

  const std::string& model() const noexcept { return model_; }

  void override_layers(std::vector<std::string> layers) { layers_ = std::move(layers); }

  StateShape state_shape() const override { return shape_; }
  int image_height() const override { return image_h_; }
  int image_width() const override { return image_w_; }
  int image_channels() const override { return image_c_; }
  std::vector<std::string> attention_layers() const override { return layers_; }
  double reconstruction_tolerance() const override { return tolerance_; }
  std::optional<ScheduleConfig> training_schedule() const override { return schedule_; }
  std::string identifier() const override { return identifier_; }

  StateTensor predict_noise(const StateTensor& x, int t, AttentionHook* hook) const override {
    if (!(x.shape() == shape_)) throw InvalidArgument("state shape " + x.shape().str() + ", expected " + shape_.str());
    std::lock_guard lock(mu_);
    bridge::send(out_, {{"op", "predict"}, {"t", t}, {"hook", hook != nullptr}, {"shape", bridge::shape_json(x.shape())}},
                 x.data().data(), x.size() * sizeof(double));
    for (;;) {
      const auto m = bridge::receive(in_);
      if (bridge::op(m) == "eps") return bridge::state_from(m);
      bridge::expect(m, "attention");
      if (!hook) throw ComputeError("worker sent attention without a hook");
      const int heads = m.header.at("heads"), nq = m.header.at("n_q"), nk = m.header.at("n_k"),
                d = m.header.at("d"), dv = m.header.value("d_v", d);
      const std::size_t sq = static_cast<std::size_t>(heads) * nq * d, sk = static_cast<std::size_t>(heads) * nk * d,
                        sv = static_cast<std::size_t>(heads) * nk * dv;
      const auto buf = bridge::as<float>(m, sq + sk + sv);
      const HeadTensor q = bridge::heads_from(buf.data(), heads, nq, d);
      const HeadTensor k = bridge::heads_from(buf.data() + sq, heads, nk, d);
      const HeadTensor v = bridge::heads_from(buf.data() + sq + sk, heads, nk, dv);
      std::optional<HeadTensor> out;
      try {
        out = hook->on_attention(AttentionSite{m.header.at("layer"), m.header.value("t", t)}, q, k, v);
      } catch (...) {
        // keep the stream in sync before propagating
        bridge::send(out_, {{"op", "keep"}});
        drain_until_eps();
        throw;
      }
      if (!out) {
        bridge::send(out_, {{"op", "keep"}});
      } else {
        std::vector<float> flat;
        bridge::append_heads(flat, *out);
        bridge::send(out_, {{"op", "replace"}, {"heads", out->num_heads()}, {"n", out->tokens()}, {"d", out->dim()}},
                     flat.data(), flat.size() * sizeof(float));
      }
    }
  }

  StateTensor encode(const Image& image) const override {
    std::lock_guard lock(mu_);
    bridge::send_image(out_, "encode", image);
    const auto m = bridge::receive(in_);
    bridge::expect(m, "state");
    return bridge::state_from(m);
  }

  Image decode(const StateTensor& s) const override {
    std::lock_guard lock(mu_);
    bridge::send_state(out_, "decode", s);
    const auto m = bridge::receive(in_);
    bridge::expect(m, "image");
    return bridge::image_from(m);
  }

 private:
  void drain_until_eps() const {
    for (;;) {
      const auto m = bridge::receive(in_);
      if (bridge::op(m) == "eps") return;
      bridge::send(out_, {{"op", "keep"}});
    }
  }

  void shutdown() noexcept {
    if (pid_ <= 0) return;
    try {
      bridge::send(out_, {{"op", "bye"}});
    } catch (...) {
    }
    ::close(out_);
    ::close(in_);
    int status = 0;
    ::waitpid(pid_, &status, 0);
    pid_ = -1;
  }

  pid_t pid_ = -1;
  int in_ = -1, out_ = -1;
  mutable std::mutex mu_;
  std::string model_, identifier_;
  StateShape shape_;
  int image_h_ = 0, image_w_ = 0, image_c_ = 0;
  std::vector<std::string> layers_;
  double tolerance_ = 0.1;
  std::optional<ScheduleConfig> schedule_;
};

/// Starts the worker for a locally available checkpoint.
inline std::unique_ptr<BridgeBackbone> load_pretrained(const AdapterConfig& cfg) {
  if (cfg.checkpoint.empty() || !std::filesystem::exists(cfg.checkpoint))
    throw FileNotFound("checkpoint not found: " + cfg.checkpoint.string());
  if (cfg.conditioning != "unconditional")
    throw ConfigError("only unconditional conditioning is supported, got '" + cfg.conditioning + "'");
  if (cfg.latent_size < 8 || cfg.latent_size % 8 != 0)
    throw ConfigError("latent_size must be a positive multiple of 8");
  auto argv = cfg.worker_command;
  argv.insert(argv.end(), {"--checkpoint", cfg.checkpoint.string(), "--device", cfg.device, "--latent-size",
                           std::to_string(cfg.latent_size)});
  auto bb = std::make_unique<BridgeBackbone>(argv);
  if (bb->model() != cfg.expected_model)
    throw ConfigError("checkpoint is '" + bb->model() + "', expected '" + cfg.expected_model + "'");
  if (!cfg.layer_override.empty()) {
    const auto all = bb->attention_layers();
    for (const auto& l : cfg.layer_override)
      if (std::find(all.begin(), all.end(), l) == all.end())
        throw ConfigError("override layer '" + l + "' is not a self-attention layer of the checkpoint");
    bb->override_layers(cfg.layer_override);
  }
  if (static_cast<int>(bb->attention_layers().size()) < cfg.min_attention_layers)
    throw ConfigError("checkpoint exposes " + std::to_string(bb->attention_layers().size()) +
                      " self-attention layers, need at least " + std::to_string(cfg.min_attention_layers));
  return bb;
}

}  // namespace cellstyle
