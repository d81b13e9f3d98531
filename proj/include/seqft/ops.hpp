#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "seqft/tensor.hpp"

namespace seqft {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

inline std::string pair_str(const Shape& a, const Shape& b) {
  return to_string(a) + " and " + to_string(b);
}

}  // namespace detail

/// Standard matrix product of two rank <= 2 tensors.
template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require(a.ndim() <= 2 && b.ndim() <= 2 && a.cols() == b.rows(),
                  "matmul: incompatible shapes " + detail::pair_str(a.shape(), b.shape()));
  Matrix<Scalar> out = a.value() * b.value();
  Shape shape{out.rows(), out.cols()};
  return Tensor<Scalar>::make_result(
      std::move(shape), std::move(out), {a, b}, [a, b](const Matrix<Scalar>& g) {
        if (a.requires_grad()) detail::accumulate(*a.node(), g * b.value().transpose());
        if (b.requires_grad()) detail::accumulate(*b.node(), a.value().transpose() * g);
      });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& a) {
  detail::require(a.ndim() == 2, "transpose: expects rank 2, got " + to_string(a.shape()));
  Matrix<Scalar> out = a.value().transpose();
  Shape shape{out.rows(), out.cols()};
  return Tensor<Scalar>::make_result(std::move(shape), std::move(out), {a},
                                     [a](const Matrix<Scalar>& g) {
                                       detail::accumulate(*a.node(), g.transpose());
                                     });
}

/// y = x W^T + bias, with x [N x k], W [d x k], bias [d] (optional).
template <typename Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>* bias = nullptr) {
  detail::require(x.ndim() == 2 && weight.ndim() == 2 && x.cols() == weight.cols(),
                  "linear: incompatible shapes " + detail::pair_str(x.shape(), weight.shape()));
  if (bias) {
    detail::require(bias->size() == weight.rows(),
                    "linear: bias " + to_string(bias->shape()) + " for weight " +
                        to_string(weight.shape()));
  }
  Matrix<Scalar> out(x.rows(), weight.rows());
  out.noalias() = x.value() * weight.value().transpose();
  if (bias) out.rowwise() += bias->value().row(0);
  Shape shape{out.rows(), out.cols()};
  std::vector<Tensor<Scalar>> parents{x, weight};
  Tensor<Scalar> b = bias ? *bias : Tensor<Scalar>();
  if (bias) parents.push_back(b);
  return Tensor<Scalar>::make_result(
      std::move(shape), std::move(out), std::move(parents),
      [x, weight, b](const Matrix<Scalar>& g) {
        if (x.requires_grad()) {
          Matrix<Scalar> gx = g * weight.value();
          detail::accumulate(*x.node(), gx);
        }
        if (weight.requires_grad()) {
          Matrix<Scalar> gw = g.transpose() * x.value();
          detail::accumulate(*weight.node(), gw);
        }
        if (b.defined() && b.requires_grad()) {
          detail::accumulate(*b.node(), g.colwise().sum());
        }
      });
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require(a.shape() == b.shape(), "add: shape mismatch " + detail::pair_str(a.shape(), b.shape()));
  Matrix<Scalar> out = a.value() + b.value();
  return Tensor<Scalar>::make_result(a.shape(), std::move(out), {a, b},
                                     [a, b](const Matrix<Scalar>& g) {
                                       detail::accumulate(*a.node(), g);
                                       detail::accumulate(*b.node(), g);
                                     });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require(a.shape() == b.shape(), "sub: shape mismatch " + detail::pair_str(a.shape(), b.shape()));
  Matrix<Scalar> out = a.value() - b.value();
  return Tensor<Scalar>::make_result(a.shape(), std::move(out), {a, b},
                                     [a, b](const Matrix<Scalar>& g) {
                                       detail::accumulate(*a.node(), g);
                                       detail::accumulate(*b.node(), -g);
                                     });
}

/// Elementwise product.
template <typename Scalar>
Tensor<Scalar> cwise_product(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require(a.shape() == b.shape(),
                  "cwise_product: shape mismatch " + detail::pair_str(a.shape(), b.shape()));
  Matrix<Scalar> out = a.value().cwiseProduct(b.value());
  return Tensor<Scalar>::make_result(
      a.shape(), std::move(out), {a, b}, [a, b](const Matrix<Scalar>& g) {
        if (a.requires_grad()) detail::accumulate(*a.node(), g.cwiseProduct(b.value()));
        if (b.requires_grad()) detail::accumulate(*b.node(), g.cwiseProduct(a.value()));
      });
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar s) {
  Matrix<Scalar> out = a.value() * s;
  return Tensor<Scalar>::make_result(a.shape(), std::move(out), {a},
                                     [a, s](const Matrix<Scalar>& g) {
                                       detail::accumulate(*a.node(), g * s);
                                     });
}

/// Adds `block` to every consecutive group of block.rows() rows of `x`.
/// A [n] or [1 x n] block is a row broadcast; a [T x n] block tiles over a
/// batch of T-row items.
template <typename Scalar>
Tensor<Scalar> add_tiled(const Tensor<Scalar>& x, const Tensor<Scalar>& block) {
  const Index br = block.rows();
  detail::require(x.ndim() == 2 && block.cols() == x.cols() && x.rows() % br == 0,
                  "add_tiled: cannot tile " + to_string(block.shape()) + " over " +
                      to_string(x.shape()));
  Matrix<Scalar> out = x.value();
  const Index reps = x.rows() / br;
  for (Index r = 0; r < reps; ++r) out.middleRows(r * br, br) += block.value();
  return Tensor<Scalar>::make_result(
      x.shape(), std::move(out), {x, block}, [x, block, br, reps](const Matrix<Scalar>& g) {
        detail::accumulate(*x.node(), g);
        if (block.requires_grad()) {
          Matrix<Scalar> gb = Matrix<Scalar>::Zero(br, g.cols());
          for (Index r = 0; r < reps; ++r) gb += g.middleRows(r * br, br);
          detail::accumulate(*block.node(), gb);
        }
      });
}

/// Tanh-approximated GELU.
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  static constexpr Scalar c = Scalar(0.7978845608028654);  // sqrt(2/pi)
  static constexpr Scalar k = Scalar(0.044715);
  auto xa = x.value().array();
  Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t =
      (c * (xa + k * xa.cube())).tanh();
  Matrix<Scalar> out = (Scalar(0.5) * xa * (Scalar(1) + t)).matrix();
  return Tensor<Scalar>::make_result(
      x.shape(), std::move(out), {x}, [x, t](const Matrix<Scalar>& g) {
        auto xa = x.value().array();
        auto d = Scalar(0.5) * (Scalar(1) + t) +
                 Scalar(0.5) * xa * (Scalar(1) - t.square()) * c *
                     (Scalar(1) + Scalar(3) * k * xa.square());
        detail::accumulate(*x.node(), (g.array() * d).matrix());
      });
}

/// Row-wise layer normalization with affine gamma/beta of size cols.
template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
  const Index n = x.cols();
  detail::require(x.ndim() == 2 && gamma.size() == n && beta.size() == n,
                  "layer_norm: " + to_string(x.shape()) + " with gamma " + to_string(gamma.shape()));
  Matrix<Scalar> xhat(x.rows(), n);
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_std(x.rows());
  for (Index r = 0; r < x.rows(); ++r) {
    auto row = x.value().row(r);
    const Scalar mu = row.mean();
    const Scalar var = (row.array() - mu).square().mean();
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    xhat.row(r) = (row.array() - mu) * inv_std(r);
  }
  Matrix<Scalar> out = xhat;
  out.array().rowwise() *= gamma.value().row(0).array();
  out.rowwise() += beta.value().row(0);
  return Tensor<Scalar>::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat, inv_std, n](const Matrix<Scalar>& g) {
        if (gamma.requires_grad()) {
          detail::accumulate(*gamma.node(), g.cwiseProduct(xhat).colwise().sum());
        }
        if (beta.requires_grad()) detail::accumulate(*beta.node(), g.colwise().sum());
        if (x.requires_grad()) {
          Matrix<Scalar> dxhat = g;
          dxhat.array().rowwise() *= gamma.value().row(0).array();
          Matrix<Scalar> gx(x.rows(), n);
          for (Index r = 0; r < x.rows(); ++r) {
            const Scalar m1 = dxhat.row(r).mean();
            const Scalar m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).sum() / Scalar(n);
            gx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
          }
          detail::accumulate(*x.node(), gx);
        }
      });
}

namespace detail {

template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& z) {
  Matrix<Scalar> p(z.rows(), z.cols());
  for (Index r = 0; r < z.rows(); ++r) {
    const Scalar m = z.row(r).maxCoeff();
    p.row(r) = (z.row(r).array() - m).exp();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

}  // namespace detail

/// Row-wise softmax.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x) {
  Matrix<Scalar> p = detail::softmax_rows(x.value());
  Matrix<Scalar> saved = p;
  return Tensor<Scalar>::make_result(
      x.shape(), std::move(p), {x}, [x, saved](const Matrix<Scalar>& g) {
        Matrix<Scalar> dot = g.cwiseProduct(saved).rowwise().sum();
        Matrix<Scalar> gx = saved.cwiseProduct(g - dot.replicate(1, g.cols()));
        detail::accumulate(*x.node(), gx);
      });
}

/// Same data, new shape. Element count must agree.
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  detail::require(numel(shape) == x.size(),
                  "reshape: " + to_string(x.shape()) + " to " + to_string(shape));
  Matrix<Scalar> out = Eigen::Map<const Matrix<Scalar>>(x.value().data(), view_rows(shape),
                                                        view_cols(shape));
  return Tensor<Scalar>::make_result(
      shape, std::move(out), {x}, [x](const Matrix<Scalar>& g) {
        Matrix<Scalar> gx = Eigen::Map<const Matrix<Scalar>>(g.data(), x.rows(), x.cols());
        detail::accumulate(*x.node(), gx);
      });
}

/// Rows where mask is true are replaced by `token` ([n] or [1 x n]).
template <typename Scalar>
Tensor<Scalar> replace_rows(const Tensor<Scalar>& x, const std::vector<bool>& mask,
                            const Tensor<Scalar>& token) {
  detail::require(static_cast<Index>(mask.size()) == x.rows() && token.size() == x.cols(),
                  "replace_rows: mask of " + std::to_string(mask.size()) + " over " +
                      to_string(x.shape()));
  Matrix<Scalar> out = x.value();
  for (Index r = 0; r < x.rows(); ++r) {
    if (mask[r]) out.row(r) = token.value().row(0);
  }
  return Tensor<Scalar>::make_result(
      x.shape(), std::move(out), {x, token}, [x, token, mask](const Matrix<Scalar>& g) {
        if (x.requires_grad()) {
          Matrix<Scalar> gx = g;
          for (Index r = 0; r < gx.rows(); ++r) {
            if (mask[r]) gx.row(r).setZero();
          }
          detail::accumulate(*x.node(), gx);
        }
        if (token.requires_grad()) {
          Matrix<Scalar> gt = Matrix<Scalar>::Zero(1, g.cols());
          for (Index r = 0; r < g.rows(); ++r) {
            if (mask[r]) gt += g.row(r);
          }
          detail::accumulate(*token.node(), gt);
        }
      });
}

/// out.row(i) = x.row(index[i]).
template <typename Scalar>
Tensor<Scalar> gather_rows(const Tensor<Scalar>& x, std::vector<Index> index) {
  Matrix<Scalar> out(static_cast<Index>(index.size()), x.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::require(index[i] >= 0 && index[i] < x.rows(),
                    "gather_rows: index " + std::to_string(index[i]) + " out of " +
                        to_string(x.shape()));
    out.row(static_cast<Index>(i)) = x.value().row(index[i]);
  }
  Shape shape{out.rows(), out.cols()};
  return Tensor<Scalar>::make_result(
      std::move(shape), std::move(out), {x}, [x, index](const Matrix<Scalar>& g) {
        Matrix<Scalar> gx = Matrix<Scalar>::Zero(x.rows(), x.cols());
        for (std::size_t i = 0; i < index.size(); ++i) gx.row(index[i]) += g.row(static_cast<Index>(i));
        detail::accumulate(*x.node(), gx);
      });
}

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  const double s = x.value().template cast<double>().sum();
  Matrix<Scalar> out = Matrix<Scalar>::Constant(1, 1, static_cast<Scalar>(s));
  return Tensor<Scalar>::make_result(Shape{}, std::move(out), {x},
                                     [x](const Matrix<Scalar>& g) {
                                       detail::accumulate(
                                           *x.node(), Matrix<Scalar>::Constant(x.rows(), x.cols(), g(0, 0)));
                                     });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  const double n = static_cast<double>(x.size());
  const double s = x.value().template cast<double>().sum() / n;
  Matrix<Scalar> out = Matrix<Scalar>::Constant(1, 1, static_cast<Scalar>(s));
  return Tensor<Scalar>::make_result(
      Shape{}, std::move(out), {x}, [x, n](const Matrix<Scalar>& g) {
        detail::accumulate(*x.node(), Matrix<Scalar>::Constant(x.rows(), x.cols(),
                                                               static_cast<Scalar>(g(0, 0) / n)));
      });
}

/// Mean squared difference. Gradient flows to both arguments when they
/// require it; pass a detached tensor for one-sided distillation.
template <typename Scalar>
Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  detail::require(a.shape() == b.shape(), "mse: shape mismatch " + detail::pair_str(a.shape(), b.shape()));
  const double n = static_cast<double>(a.size());
  Matrix<Scalar> diff = a.value() - b.value();
  const double s = diff.template cast<double>().squaredNorm() / n;
  Matrix<Scalar> out = Matrix<Scalar>::Constant(1, 1, static_cast<Scalar>(s));
  return Tensor<Scalar>::make_result(
      Shape{}, std::move(out), {a, b}, [a, b, diff, n](const Matrix<Scalar>& g) {
        const Scalar k = static_cast<Scalar>(2.0 * g(0, 0) / n);
        if (a.requires_grad()) detail::accumulate(*a.node(), diff * k);
        if (b.requires_grad()) detail::accumulate(*b.node(), diff * (-k));
      });
}

namespace detail {

inline void check_labels(std::span<const std::int32_t> labels, Index rows, Index classes) {
  if (static_cast<Index>(labels.size()) != rows) {
    throw DimensionError("label count " + std::to_string(labels.size()) + " does not match " +
                         std::to_string(rows) + " cells");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= classes) {
      throw DataError("label " + std::to_string(labels[i]) + " at cell " + std::to_string(i) +
                      " outside [0, " + std::to_string(classes) + ")");
    }
  }
}

}  // namespace detail

/// Mean cross-entropy of row logits [cells x classes] against integer labels.
template <typename Scalar>
Tensor<Scalar> cross_entropy(const Tensor<Scalar>& logits, std::span<const std::int32_t> labels) {
  detail::check_labels(labels, logits.rows(), logits.cols());
  Matrix<Scalar> p = detail::softmax_rows(logits.value());
  double total = 0.0;
  for (Index r = 0; r < p.rows(); ++r) {
    const auto& z = logits.value().row(r);
    const double m = z.maxCoeff();
    double lse = 0.0;
    for (Index c = 0; c < z.cols(); ++c) lse += std::exp(static_cast<double>(z(c)) - m);
    total += m + std::log(lse) - static_cast<double>(z(labels[r]));
  }
  const double n = static_cast<double>(p.rows());
  Matrix<Scalar> out = Matrix<Scalar>::Constant(1, 1, static_cast<Scalar>(total / n));
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  return Tensor<Scalar>::make_result(
      Shape{}, std::move(out), {logits}, [logits, p, lab, n](const Matrix<Scalar>& g) {
        Matrix<Scalar> gz = p;
        for (Index r = 0; r < gz.rows(); ++r) gz(r, lab[r]) -= Scalar(1);
        gz *= static_cast<Scalar>(g(0, 0) / n);
        detail::accumulate(*logits.node(), gz);
      });
}

/// 1 - mean over foreground classes (1..C-1) of the smoothed soft Dice
/// (2 I + eps) / (S + eps), where I = sum p*t and S = sum p + sum t are taken
/// over all cells, and p = softmax(logits).
template <typename Scalar>
Tensor<Scalar> soft_dice_loss(const Tensor<Scalar>& logits, std::span<const std::int32_t> labels,
                              double eps = 1e-5) {
  const Index classes = logits.cols();
  detail::check_labels(labels, logits.rows(), classes);
  if (classes < 2) throw DimensionError("soft_dice_loss needs at least 2 classes");
  Matrix<Scalar> p = detail::softmax_rows(logits.value());
  std::vector<double> inter(classes, 0.0), denom(classes, 0.0);
  for (Index r = 0; r < p.rows(); ++r) {
    for (Index c = 1; c < classes; ++c) {
      const double pc = p(r, c);
      const double tc = labels[r] == c ? 1.0 : 0.0;
      inter[c] += pc * tc;
      denom[c] += pc + tc;
    }
  }
  double dice = 0.0;
  for (Index c = 1; c < classes; ++c) dice += (2.0 * inter[c] + eps) / (denom[c] + eps);
  const double fg = static_cast<double>(classes - 1);
  dice /= fg;
  Matrix<Scalar> out = Matrix<Scalar>::Constant(1, 1, static_cast<Scalar>(1.0 - dice));
  std::vector<std::int32_t> lab(labels.begin(), labels.end());
  return Tensor<Scalar>::make_result(
      Shape{}, std::move(out), {logits},
      [logits, p, lab, inter, denom, eps, fg, classes](const Matrix<Scalar>& g) {
        // dL/dp, then through the softmax Jacobian.
        Matrix<Scalar> dp = Matrix<Scalar>::Zero(p.rows(), classes);
        for (Index c = 1; c < classes; ++c) {
          const double s = denom[c] + eps;
          const double num = 2.0 * inter[c] + eps;
          for (Index r = 0; r < p.rows(); ++r) {
            const double tc = lab[r] == c ? 1.0 : 0.0;
            dp(r, c) = static_cast<Scalar>(-(2.0 * tc * s - num) / (s * s) / fg * g(0, 0));
          }
        }
        Matrix<Scalar> dot = dp.cwiseProduct(p).rowwise().sum();
        Matrix<Scalar> gz = p.cwiseProduct(dp - dot.replicate(1, classes));
        detail::accumulate(*logits.node(), gz);
      });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return add(a, b);
}

template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return sub(a, b);
}

template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& a) {
  return scale(a, s);
}

}  // namespace seqft
