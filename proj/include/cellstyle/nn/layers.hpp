#pragma once

// Minimal layers with explicit backward passes for the toy denoiser.
// Feature maps are (channels x pixels) float matrices, pixel index r*W + c.
// Every forward is const and takes an optional cache; backward consumes the
// cache and accumulates parameter gradients.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cellstyle/attention.hpp"
#include "cellstyle/backbone.hpp"
#include "cellstyle/error.hpp"

namespace cellstyle::nn {

using Mat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXf;

struct FeatureMap {
  Mat x;  // channels x (h*w)
  int h = 0;
  int w = 0;
};

struct Param {
  std::string name;
  Mat value;
  Mat grad;
  Mat adam_m;
  Mat adam_v;

  void resize(int rows, int cols) {
    value = Mat::Zero(rows, cols);
    grad = Mat::Zero(rows, cols);
    adam_m = Mat::Zero(rows, cols);
    adam_v = Mat::Zero(rows, cols);
  }
  void uniform(std::mt19937_64& rng, float bound) {
    std::uniform_real_distribution<float> u(-bound, bound);
    for (Eigen::Index i = 0; i < value.size(); ++i) value.data()[i] = u(rng);
  }
};

using ParamList = std::vector<Param*>;

inline float sigmoid(float x) { return 1.f / (1.f + std::exp(-x)); }

inline Mat silu(const Mat& x) {
  return (x.array() / (1.f + (-x.array()).exp())).matrix();
}

inline Mat silu_backward(const Mat& x, const Mat& dy) {
  const auto s = (1.f / (1.f + (-x.array()).exp())).eval();
  return (dy.array() * s * (1.f + x.array() * (1.f - s))).matrix();
}

class Conv2d {
 public:
  struct Cache {
    Mat cols;
    int in_h = 0, in_w = 0;
  };

  Conv2d() = default;
  Conv2d(std::string name, int in_ch, int out_ch, int kernel, int stride = 1)
      : in_(in_ch), out_(out_ch), k_(kernel), stride_(stride), pad_(kernel / 2) {
    weight_.name = name + ".weight";
    bias_.name = name + ".bias";
    weight_.resize(out_ch, in_ch * kernel * kernel);
    bias_.resize(out_ch, 1);
  }

  void init(std::mt19937_64& rng, float gain = 1.f) {
    const float bound = gain / std::sqrt(static_cast<float>(in_ * k_ * k_));
    weight_.uniform(rng, bound);
    bias_.uniform(rng, bound);
  }

  int out_size(int n) const { return (n + 2 * pad_ - k_) / stride_ + 1; }

  FeatureMap forward(const FeatureMap& in, Cache* cache) const {
    if (in.x.rows() != in_) throw InvalidArgument("conv: channel mismatch");
    const int oh = out_size(in.h), ow = out_size(in.w);
    Mat cols = im2col(in, oh, ow);
    FeatureMap out{weight_.value * cols, oh, ow};
    out.x.colwise() += bias_.value.col(0);
    if (cache) {
      cache->cols = std::move(cols);
      cache->in_h = in.h;
      cache->in_w = in.w;
    }
    return out;
  }

  Mat backward(const Mat& dy, const Cache& cache) {
    weight_.grad.noalias() += dy * cache.cols.transpose();
    bias_.grad.col(0) += dy.rowwise().sum();
    const Mat dcols = weight_.value.transpose() * dy;
    return col2im(dcols, cache.in_h, cache.in_w, out_size(cache.in_h), out_size(cache.in_w));
  }

  void collect(ParamList& p) {
    p.push_back(&weight_);
    p.push_back(&bias_);
  }

 private:
  Mat im2col(const FeatureMap& in, int oh, int ow) const {
    if (k_ == 1 && stride_ == 1) return in.x;
    Mat cols = Mat::Zero(in_ * k_ * k_, oh * ow);
    for (int c = 0; c < in_; ++c)
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          const int row = (c * k_ + ky) * k_ + kx;
          // valid output columns for this kernel offset
          const int x_lo = std::max(0, (pad_ - kx + stride_ - 1) / stride_);
          const int x_hi = std::min(ow, (in.w - 1 + pad_ - kx) / stride_ + 1);
          if (x_hi <= x_lo) continue;
          for (int y = 0; y < oh; ++y) {
            const int sy = y * stride_ + ky - pad_;
            if (sy < 0 || sy >= in.h) continue;
            const float* src = in.x.row(c).data() + sy * in.w;
            float* dst = cols.row(row).data() + y * ow;
            if (stride_ == 1) {
              std::copy(src + x_lo + kx - pad_, src + x_hi + kx - pad_, dst + x_lo);
            } else {
              for (int x = x_lo; x < x_hi; ++x) dst[x] = src[x * stride_ + kx - pad_];
            }
          }
        }
    return cols;
  }

  Mat col2im(const Mat& dcols, int h, int w, int oh, int ow) const {
    if (k_ == 1 && stride_ == 1) return dcols;
    Mat dx = Mat::Zero(in_, h * w);
    for (int c = 0; c < in_; ++c)
      for (int ky = 0; ky < k_; ++ky)
        for (int kx = 0; kx < k_; ++kx) {
          const int row = (c * k_ + ky) * k_ + kx;
          const int x_lo = std::max(0, (pad_ - kx + stride_ - 1) / stride_);
          const int x_hi = std::min(ow, (w - 1 + pad_ - kx) / stride_ + 1);
          if (x_hi <= x_lo) continue;
          for (int y = 0; y < oh; ++y) {
            const int sy = y * stride_ + ky - pad_;
            if (sy < 0 || sy >= h) continue;
            float* dst = dx.row(c).data() + sy * w;
            const float* src = dcols.row(row).data() + y * ow;
            for (int x = x_lo; x < x_hi; ++x) dst[x * stride_ + kx - pad_] += src[x];
          }
        }
    return dx;
  }

  int in_ = 0, out_ = 0, k_ = 1, stride_ = 1, pad_ = 0;
  Param weight_, bias_;
};

class GroupNorm {
 public:
  struct Cache {
    Mat xhat;
    Vec inv_std;  // per group
  };

  GroupNorm() = default;
  GroupNorm(std::string name, int channels, int groups, float eps = 1e-5f)
      : channels_(channels), groups_(groups), eps_(eps) {
    if (channels % groups != 0) throw InvalidArgument("groupnorm: channels % groups != 0");
    gamma_.name = name + ".gamma";
    beta_.name = name + ".beta";
    gamma_.resize(channels, 1);
    beta_.resize(channels, 1);
    gamma_.value.setOnes();
  }

  Mat forward(const Mat& x, Cache* cache) const {
    const int cg = channels_ / groups_;
    const auto n = static_cast<float>(cg * x.cols());
    Mat xhat(x.rows(), x.cols());
    Vec inv_std(groups_);
    for (int g = 0; g < groups_; ++g) {
      const auto block = x.middleRows(g * cg, cg);
      const float mean = block.sum() / n;
      const float var = (block.array() - mean).square().sum() / n;
      inv_std[g] = 1.f / std::sqrt(var + eps_);
      xhat.middleRows(g * cg, cg) = (block.array() - mean) * inv_std[g];
    }
    Mat y = (xhat.array().colwise() * gamma_.value.col(0).array()).matrix();
    y.colwise() += beta_.value.col(0);
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = std::move(inv_std);
    }
    return y;
  }

  Mat backward(const Mat& dy, const Cache& cache) {
    gamma_.grad.col(0) += (dy.array() * cache.xhat.array()).rowwise().sum().matrix();
    beta_.grad.col(0) += dy.rowwise().sum();
    const Mat dxhat = (dy.array().colwise() * gamma_.value.col(0).array()).matrix();
    const int cg = channels_ / groups_;
    const auto n = static_cast<float>(cg * dy.cols());
    Mat dx(dy.rows(), dy.cols());
    for (int g = 0; g < groups_; ++g) {
      const auto dxh = dxhat.middleRows(g * cg, cg).array();
      const auto xh = cache.xhat.middleRows(g * cg, cg).array();
      const float sum_d = dxh.sum();
      const float sum_dx = (dxh * xh).sum();
      dx.middleRows(g * cg, cg) =
          ((n * dxh - sum_d - xh * sum_dx) * (cache.inv_std[g] / n)).matrix();
    }
    return dx;
  }

  void collect(ParamList& p) {
    p.push_back(&gamma_);
    p.push_back(&beta_);
  }

 private:
  int channels_ = 0, groups_ = 1;
  float eps_ = 1e-5f;
  Param gamma_, beta_;
};

class Linear {
 public:
  Linear() = default;
  Linear(std::string name, int in, int out) : in_(in) {
    weight_.name = name + ".weight";
    bias_.name = name + ".bias";
    weight_.resize(out, in);
    bias_.resize(out, 1);
  }

  void init(std::mt19937_64& rng, float gain = 1.f) {
    const float bound = gain / std::sqrt(static_cast<float>(in_));
    weight_.uniform(rng, bound);
    bias_.uniform(rng, bound);
  }

  /// Applies to every column of x.
  Mat forward(const Mat& x) const {
    Mat y = weight_.value * x;
    y.colwise() += bias_.value.col(0);
    return y;
  }

  Mat backward(const Mat& dy, const Mat& x) {
    weight_.grad.noalias() += dy * x.transpose();
    bias_.grad.col(0) += dy.rowwise().sum();
    return weight_.value.transpose() * dy;
  }

  void collect(ParamList& p) {
    p.push_back(&weight_);
    p.push_back(&bias_);
  }

  Param& weight() { return weight_; }

 private:
  int in_ = 0;
  Param weight_, bias_;
};

/// Residual block with additive timestep conditioning.
class ResBlock {
 public:
  struct Cache {
    GroupNorm::Cache gn1, gn2;
    Mat gn1_out, gn2_out;
    Conv2d::Cache conv1, conv2, skip;
    Mat temb_act;  // silu(temb), temb_dim x 1
  };

  ResBlock() = default;
  ResBlock(const std::string& name, int in_ch, int out_ch, int temb_dim, int groups)
      : in_(in_ch),
        out_(out_ch),
        gn1_(name + ".gn1", in_ch, groups),
        conv1_(name + ".conv1", in_ch, out_ch, 3),
        temb_(name + ".temb", temb_dim, out_ch),
        gn2_(name + ".gn2", out_ch, groups),
        conv2_(name + ".conv2", out_ch, out_ch, 3) {
    if (in_ch != out_ch) skip_ = Conv2d(name + ".skip", in_ch, out_ch, 1);
  }

  void init(std::mt19937_64& rng) {
    conv1_.init(rng);
    temb_.init(rng);
    conv2_.init(rng, 0.5f);
    if (in_ != out_) skip_.init(rng);
  }

  /// temb_act is silu(time embedding), shared by all blocks.
  FeatureMap forward(const FeatureMap& x, const Mat& temb_act, Cache* c) const {
    Mat a = gn1_.forward(x.x, c ? &c->gn1 : nullptr);
    if (c) c->gn1_out = a;
    FeatureMap h = conv1_.forward({silu(a), x.h, x.w}, c ? &c->conv1 : nullptr);
    h.x.colwise() += temb_.forward(temb_act).col(0);
    Mat b = gn2_.forward(h.x, c ? &c->gn2 : nullptr);
    if (c) c->gn2_out = b;
    FeatureMap out = conv2_.forward({silu(b), h.h, h.w}, c ? &c->conv2 : nullptr);
    if (in_ != out_)
      out.x += skip_.forward(x, c ? &c->skip : nullptr).x;
    else
      out.x += x.x;
    if (c) c->temb_act = temb_act;
    return out;
  }

  /// Returns d(input); adds d(temb_act) into dtemb_act.
  Mat backward(const Mat& dy, const Cache& c, Mat& dtemb_act) {
    Mat dx = in_ != out_ ? skip_.backward(dy, c.skip) : dy;
    Mat db = silu_backward(c.gn2_out, conv2_.backward(dy, c.conv2));
    Mat dh = gn2_.backward(db, c.gn2);
    dtemb_act += temb_.backward(dh.rowwise().sum(), c.temb_act);
    Mat da = silu_backward(c.gn1_out, conv1_.backward(dh, c.conv1));
    dx += gn1_.backward(da, c.gn1);
    return dx;
  }

  void collect(ParamList& p) {
    gn1_.collect(p);
    conv1_.collect(p);
    temb_.collect(p);
    gn2_.collect(p);
    conv2_.collect(p);
    if (in_ != out_) skip_.collect(p);
  }

 private:
  int in_ = 0, out_ = 0;
  GroupNorm gn1_;
  Conv2d conv1_;
  Linear temb_;
  GroupNorm gn2_;
  Conv2d conv2_;
  Conv2d skip_;
};

/// Multi-head self-attention over pixels with a residual connection. The
/// attention core is the hookable sub-layer.
class SelfAttention {
 public:
  struct Cache {
    GroupNorm::Cache gn;
    Mat normed;
    HeadTensor q, k, v;
    std::vector<Mat> probs;
    Mat merged;  // channels x tokens, before the output projection
  };

  SelfAttention() = default;
  SelfAttention(std::string name, int channels, int heads, int groups)
      : name_(std::move(name)),
        channels_(channels),
        heads_(heads),
        gn_(name_ + ".gn", channels, groups),
        q_(name_ + ".q", channels, channels),
        k_(name_ + ".k", channels, channels),
        v_(name_ + ".v", channels, channels),
        out_(name_ + ".out", channels, channels) {
    if (channels % heads != 0) throw InvalidArgument("attention: channels % heads != 0");
  }

  void init(std::mt19937_64& rng) {
    q_.init(rng);
    k_.init(rng);
    v_.init(rng);
    out_.init(rng, 0.5f);
  }

  const std::string& name() const { return name_; }

  FeatureMap forward(const FeatureMap& x, int timestep, AttentionHook* hook, Cache* c) const {
    Mat normed = gn_.forward(x.x, c ? &c->gn : nullptr);
    HeadTensor q = split_heads(q_.forward(normed));
    HeadTensor k = split_heads(k_.forward(normed));
    HeadTensor v = split_heads(v_.forward(normed));

    HeadTensor attended;
    std::optional<HeadTensor> replaced;
    if (hook) replaced = hook->on_attention(AttentionSite{name_, timestep}, q, k, v);
    if (replaced) {
      if (replaced->num_heads() != heads_ || replaced->tokens() != q.tokens() ||
          replaced->dim() != q.dim())
        throw InvalidArgument("attention hook returned a tensor of the wrong shape at " + name_);
      attended = std::move(*replaced);
    } else if (c) {
      attended.heads.resize(q.heads.size());
      c->probs.resize(q.heads.size());
      for (std::size_t h = 0; h < q.heads.size(); ++h) {
        c->probs[h] = attention_weights(q.heads[h], k.heads[h], 1.0);
        attended.heads[h] = c->probs[h] * v.heads[h];
      }
    } else {
      attended = scaled_attention(q, k, v, 1.0);
    }

    Mat merged = merge_heads(attended);
    FeatureMap y{out_.forward(merged), x.h, x.w};
    y.x += x.x;
    if (c) {
      c->normed = std::move(normed);
      c->q = std::move(q);
      c->k = std::move(k);
      c->v = std::move(v);
      c->merged = std::move(merged);
    }
    return y;
  }

  Mat backward(const Mat& dy, const Cache& c) {
    Mat dx = dy;
    const Mat dmerged = out_.backward(dy, c.merged);
    const int d = channels_ / heads_;
    const float scale = 1.f / std::sqrt(static_cast<float>(d));
    Mat dq(channels_, dy.cols()), dk(channels_, dy.cols()), dv(channels_, dy.cols());
    for (int h = 0; h < heads_; ++h) {
      const Mat dout = dmerged.middleRows(h * d, d).transpose();  // tokens x d
      const Mat& p = c.probs[static_cast<std::size_t>(h)];
      const Mat dvh = p.transpose() * dout;
      const Mat dp = dout * c.v.heads[static_cast<std::size_t>(h)].transpose();
      const Vec row_dot = (dp.array() * p.array()).rowwise().sum();
      const Mat ds = (p.array() * (dp.colwise() - row_dot).array()).matrix();
      const Mat dqh = scale * ds * c.k.heads[static_cast<std::size_t>(h)];
      const Mat dkh = scale * ds.transpose() * c.q.heads[static_cast<std::size_t>(h)];
      dq.middleRows(h * d, d) = dqh.transpose();
      dk.middleRows(h * d, d) = dkh.transpose();
      dv.middleRows(h * d, d) = dvh.transpose();
    }
    Mat dnormed = q_.backward(dq, c.normed);
    dnormed += k_.backward(dk, c.normed);
    dnormed += v_.backward(dv, c.normed);
    dx += gn_.backward(dnormed, c.gn);
    return dx;
  }

  void collect(ParamList& p) {
    gn_.collect(p);
    q_.collect(p);
    k_.collect(p);
    v_.collect(p);
    out_.collect(p);
  }

 private:
  HeadTensor split_heads(const Mat& m) const {
    const int d = channels_ / heads_;
    HeadTensor t;
    t.heads.reserve(static_cast<std::size_t>(heads_));
    for (int h = 0; h < heads_; ++h) t.heads.push_back(m.middleRows(h * d, d).transpose());
    return t;
  }

  Mat merge_heads(const HeadTensor& t) const {
    const int d = channels_ / heads_;
    Mat m(channels_, t.tokens());
    for (int h = 0; h < heads_; ++h)
      m.middleRows(h * d, d) = t.heads[static_cast<std::size_t>(h)].transpose();
    return m;
  }

  std::string name_;
  int channels_ = 0, heads_ = 1;
  GroupNorm gn_;
  Linear q_, k_, v_, out_;
};

inline FeatureMap upsample2(const FeatureMap& in) {
  FeatureMap out{Mat(in.x.rows(), in.h * in.w * 4), in.h * 2, in.w * 2};
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < out.w; ++x) out.x.col(y * out.w + x) = in.x.col((y / 2) * in.w + x / 2);
  return out;
}

inline Mat upsample2_backward(const Mat& dy, int in_h, int in_w) {
  Mat dx = Mat::Zero(dy.rows(), in_h * in_w);
  const int ow = in_w * 2;
  for (int y = 0; y < in_h * 2; ++y)
    for (int x = 0; x < ow; ++x) dx.col((y / 2) * in_w + x / 2) += dy.col(y * ow + x);
  return dx;
}

inline Vec timestep_embedding(double t, int dim) {
  Vec e(dim);
  const int half = dim / 2;
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * i / half);
    e[i] = static_cast<float>(std::sin(t * freq));
    e[i + half] = static_cast<float>(std::cos(t * freq));
  }
  return e;
}

struct AdamConfig {
  float lr = 2e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float grad_clip = 1.0f;  // global norm; <= 0 disables
};

class Adam {
 public:
  Adam(ParamList params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {}

  void set_lr(float lr) noexcept { cfg_.lr = lr; }
  float lr() const noexcept { return cfg_.lr; }

  /// Returns the pre-clip global gradient norm.
  double step(float grad_scale = 1.f) {
    ++t_;
    double sq = 0.0;
    for (auto* p : params_) sq += static_cast<double>((p->grad * grad_scale).squaredNorm());
    const double norm = std::sqrt(sq);
    float clip = 1.f;
    if (cfg_.grad_clip > 0.f && norm > cfg_.grad_clip) clip = static_cast<float>(cfg_.grad_clip / norm);
    const float bc1 = 1.f - std::pow(cfg_.beta1, static_cast<float>(t_));
    const float bc2 = 1.f - std::pow(cfg_.beta2, static_cast<float>(t_));
    for (auto* p : params_) {
      const Mat g = p->grad * (grad_scale * clip);
      p->adam_m = cfg_.beta1 * p->adam_m + (1.f - cfg_.beta1) * g;
      p->adam_v = cfg_.beta2 * p->adam_v + (1.f - cfg_.beta2) * g.cwiseProduct(g);
      p->value.array() -= cfg_.lr * (p->adam_m.array() / bc1) /
                          ((p->adam_v.array() / bc2).sqrt() + cfg_.eps);
      p->grad.setZero();
    }
    return norm;
  }

 private:
  ParamList params_;
  AdamConfig cfg_;
  long t_ = 0;
};

}  // namespace cellstyle::nn
