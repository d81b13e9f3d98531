#pragma once

#include <map>
#include <span>
#include <string>

#include "seqft/model.hpp"

namespace seqft {

template <typename Scalar>
struct LossValue {
  Tensor<Scalar> total;
  std::map<std::string, double> components;
};

inline constexpr double kDiceSmoothing = 1e-5;

/// Dice + cross-entropy on cell logits [cells x classes]. Dice is the soft
/// Dice over foreground classes (background excluded), smoothed by
/// kDiceSmoothing; cross-entropy is the mean over cells.
template <typename Scalar>
LossValue<Scalar> seg_loss(const Tensor<Scalar>& logits, std::span<const std::int32_t> labels,
                           double eps = kDiceSmoothing) {
  Tensor<Scalar> dice = soft_dice_loss(logits, labels, eps);
  Tensor<Scalar> ce = cross_entropy(logits, labels);
  LossValue<Scalar> out;
  out.components["dice"] = static_cast<double>(dice.item());
  out.components["ce"] = static_cast<double>(ce.item());
  out.total = dice + ce;
  return out;
}

namespace detail {

template <typename Scalar>
Tensor<Scalar> feature_mse(const FeatureMap<Scalar>& student, const FeatureMap<Scalar>& teacher,
                           const char* what) {
  if (student.values.shape() != teacher.values.shape()) {
    throw DimensionError(std::string(what) + ": feature shapes " + to_string(student.values.shape()) +
                         " and " + to_string(teacher.values.shape()) + " differ");
  }
  // The teacher side never receives gradient.
  return mse(student.values, teacher.values.detach());
}

}  // namespace detail

/// Feature MSE against a frozen previous encoder.
template <typename Scalar>
Tensor<Scalar> kd_loss(const FeatureMap<Scalar>& student, const FeatureMap<Scalar>& teacher) {
  return detail::feature_mse(student, teacher, "kd_loss");
}

/// Feature MSE distilling a fine-tuned encoder into adapters.
template <typename Scalar>
Tensor<Scalar> refine_loss(const FeatureMap<Scalar>& adapted, const FeatureMap<Scalar>& target) {
  return detail::feature_mse(adapted, target, "refine_loss");
}

}  // namespace seqft
