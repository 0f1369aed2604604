#pragma once

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cellstyle/error.hpp"

namespace cellstyle {

struct StateShape {
  int channels = 0;
  int height = 0;
  int width = 0;

  std::size_t numel() const noexcept {
    return static_cast<std::size_t>(channels) * height * width;
  }
  bool operator==(const StateShape&) const = default;
  std::string str() const {
    return std::to_string(channels) + "x" + std::to_string(height) + "x" + std::to_string(width);
  }
};

/// Diffusion state (pixels or latents), channel-major, double precision so
/// that DDIM inversion stays algebraically tight.
class StateTensor {
 public:
  StateTensor() = default;
  explicit StateTensor(StateShape shape, double fill = 0.0)
      : shape_(shape), data_(Eigen::VectorXd::Constant(static_cast<Eigen::Index>(shape.numel()), fill)) {}
  StateTensor(StateShape shape, Eigen::VectorXd data) : shape_(shape), data_(std::move(data)) {
    if (static_cast<std::size_t>(data_.size()) != shape.numel())
      throw InvalidArgument("state data size does not match shape " + shape.str());
  }

  const StateShape& shape() const noexcept { return shape_; }
  Eigen::VectorXd& data() noexcept { return data_; }
  const Eigen::VectorXd& data() const noexcept { return data_; }
  std::size_t size() const noexcept { return static_cast<std::size_t>(data_.size()); }

  double& operator[](std::size_t i) { return data_[static_cast<Eigen::Index>(i)]; }
  double operator[](std::size_t i) const { return data_[static_cast<Eigen::Index>(i)]; }

  bool all_finite() const { return data_.allFinite(); }
  double norm() const { return data_.norm(); }

 private:
  StateShape shape_;
  Eigen::VectorXd data_;
};

inline void require_same_shape(const StateTensor& a, const StateTensor& b, const char* what) {
  if (!(a.shape() == b.shape()))
    throw InvalidArgument(std::string(what) + ": shape mismatch " + a.shape().str() + " vs " +
                          b.shape().str());
}

/// ||a - b|| / ||b||
inline double relative_l2(const StateTensor& a, const StateTensor& b) {
  require_same_shape(a, b, "relative_l2");
  const double denom = b.norm();
  const double num = (a.data() - b.data()).norm();
  return denom == 0.0 ? num : num / denom;
}

/// Per-head attention operand: `heads[h]` is tokens x dim.
struct HeadTensor {
  std::vector<Eigen::MatrixXf> heads;

  int num_heads() const noexcept { return static_cast<int>(heads.size()); }
  int tokens() const noexcept { return heads.empty() ? 0 : static_cast<int>(heads[0].rows()); }
  int dim() const noexcept { return heads.empty() ? 0 : static_cast<int>(heads[0].cols()); }
  std::size_t numel() const noexcept {
    return static_cast<std::size_t>(num_heads()) * tokens() * dim();
  }

  bool all_finite() const {
    for (const auto& h : heads)
      if (!h.allFinite()) return false;
    return true;
  }

  static HeadTensor zeros(int n_heads, int tokens, int dim) {
    HeadTensor t;
    t.heads.assign(static_cast<std::size_t>(n_heads), Eigen::MatrixXf::Zero(tokens, dim));
    return t;
  }

  bool operator==(const HeadTensor& o) const {
    if (heads.size() != o.heads.size()) return false;
    for (std::size_t h = 0; h < heads.size(); ++h)
      if (heads[h].rows() != o.heads[h].rows() || heads[h].cols() != o.heads[h].cols() ||
          heads[h] != o.heads[h])
        return false;
    return true;
  }
};

}  // namespace cellstyle
