#pragma once

// Scaled dot-product attention shared by every backbone layer and by the
// injection path, so that an unmodified layer and a self-injected layer run
// the exact same arithmetic.

#include <cmath>
#include <string>

#include <Eigen/Dense>

#include "cellstyle/error.hpp"
#include "cellstyle/tensor.hpp"

namespace cellstyle {

namespace detail {

inline void check_attention_operands(const HeadTensor& q, const HeadTensor& k) {
  if (q.num_heads() == 0) throw InvalidArgument("attention: no heads");
  if (q.num_heads() != k.num_heads())
    throw InvalidArgument("attention: head count mismatch (" + std::to_string(q.num_heads()) +
                          " vs " + std::to_string(k.num_heads()) + ")");
  if (q.dim() != k.dim())
    throw InvalidArgument("attention: head dim mismatch (" + std::to_string(q.dim()) + " vs " +
                          std::to_string(k.dim()) + ")");
  for (const auto& h : q.heads)
    if (h.rows() != q.tokens() || h.cols() != q.dim())
      throw InvalidArgument("attention: ragged query tensor");
  for (const auto& h : k.heads)
    if (h.rows() != k.tokens() || h.cols() != k.dim())
      throw InvalidArgument("attention: ragged key tensor");
}

/// Row-wise softmax, in place.
inline void softmax_rows(Eigen::MatrixXf& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const float mx = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - mx).exp();
    s.row(r) /= s.row(r).sum();
  }
}

}  // namespace detail

/// Attention scores alpha * Q K^T / sqrt(d) for one head.
inline Eigen::MatrixXf attention_logits(const Eigen::MatrixXf& q, const Eigen::MatrixXf& k,
                                        double alpha) {
  const float scale = static_cast<float>(alpha / std::sqrt(static_cast<double>(q.cols())));
  Eigen::MatrixXf s = q * k.transpose();
  s *= scale;
  return s;
}

/// Softmax weights for one head.
inline Eigen::MatrixXf attention_weights(const Eigen::MatrixXf& q, const Eigen::MatrixXf& k,
                                         double alpha) {
  Eigen::MatrixXf s = attention_logits(q, k, alpha);
  detail::softmax_rows(s);
  return s;
}

/// softmax(alpha * Q K^T / sqrt(d)) V per head; output is (heads, n_q, d_v).
inline HeadTensor scaled_attention(const HeadTensor& q, const HeadTensor& k, const HeadTensor& v,
                                   double alpha = 1.0) {
  detail::check_attention_operands(q, k);
  if (v.num_heads() != k.num_heads() || v.tokens() != k.tokens())
    throw InvalidArgument("attention: keys and values disagree on (heads, tokens)");
  if (!(alpha > 0.0) || !std::isfinite(alpha))
    throw InvalidArgument("attention: alpha must be positive and finite");
  HeadTensor out;
  out.heads.reserve(q.heads.size());
  for (std::size_t h = 0; h < q.heads.size(); ++h)
    out.heads.push_back(attention_weights(q.heads[h], k.heads[h], alpha) * v.heads[h]);
  return out;
}

}  // namespace cellstyle
