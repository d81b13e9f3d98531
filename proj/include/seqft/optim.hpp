#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "seqft/tensor.hpp"

namespace seqft {

template <typename Scalar>
using NamedTensors = std::vector<std::pair<std::string, Tensor<Scalar>>>;

struct AdamWOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

/// Adam with decoupled weight decay:
///   p <- p - lr * wd * p
///   m <- b1 m + (1 - b1) g,   v <- b2 v + (1 - b2) g^2
///   p <- p - lr * (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
template <typename Scalar>
class AdamW {
 public:
  AdamW(NamedTensors<Scalar> params, AdamWOptions options)
      : params_(std::move(params)), options_(options) {
    for (auto& [name, p] : params_) {
      if (options_.lr <= 0) throw ConfigError("AdamW: learning rate must be positive");
      first_.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
      second_.push_back(Matrix<Scalar>::Zero(p.rows(), p.cols()));
    }
  }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  void step() {
    for (auto& [name, p] : params_) {
      if (!p.has_grad()) throw ContractError("AdamW: parameter '" + name + "' has no gradient");
    }
    ++steps_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
    const auto b1 = static_cast<Scalar>(options_.beta1);
    const auto b2 = static_cast<Scalar>(options_.beta2);
    const auto lr = static_cast<Scalar>(options_.lr);
    const auto decay = static_cast<Scalar>(1.0 - options_.lr * options_.weight_decay);
    const auto inv_c1 = static_cast<Scalar>(1.0 / c1);
    const auto inv_c2 = static_cast<Scalar>(1.0 / c2);
    const auto eps = static_cast<Scalar>(options_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<Scalar>& p = params_[i].second;
      const auto& g = p.grad().array();
      auto m = first_[i].array();
      auto v = second_[i].array();
      m = b1 * m + (Scalar(1) - b1) * g;
      v = b2 * v + (Scalar(1) - b2) * g.square();
      if (options_.weight_decay != 0.0) p.data().array() *= decay;
      p.data().array() -= lr * (m * inv_c1) / ((v * inv_c2).sqrt() + eps);
    }
  }

  long steps() const { return steps_; }
  const NamedTensors<Scalar>& params() const { return params_; }

 private:
  NamedTensors<Scalar> params_;
  AdamWOptions options_;
  std::vector<Matrix<Scalar>> first_;
  std::vector<Matrix<Scalar>> second_;
  long steps_ = 0;
};

}  // namespace seqft
