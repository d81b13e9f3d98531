// Helpers shared by the unit tests and the acceptance binary.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <set>
#include <vector>

#include "seqft/ops.hpp"
#include "seqft/rng.hpp"

namespace seqft::testing {

inline Tensor<double> random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                                    bool requires_grad = true) {
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor<double>::from_values(std::move(shape), v, requires_grad);
}

/// Largest relative error between analytic and central-difference gradients
/// over all inputs: max_i |a - n|_inf / max(|a|_inf, |n|_inf, 1e-8).
inline double gradcheck(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                        double h = 1e-5) {
  for (auto& t : inputs) t.zero_grad();
  f().backward();
  double worst = 0.0;
  for (auto& t : inputs) {
    Matrix<double> analytic =
        t.has_grad() ? t.grad() : Matrix<double>::Zero(t.rows(), t.cols());
    Matrix<double> numeric(t.rows(), t.cols());
    {
      NoGradGuard no_grad;
      for (Index i = 0; i < t.size(); ++i) {
        double& x = t.data().data()[i];
        const double saved = x;
        x = saved + h;
        const double fp = f().item();
        x = saved - h;
        const double fm = f().item();
        x = saved;
        numeric.data()[i] = (fp - fm) / (2 * h);
      }
    }
    const double scale = std::max({analytic.cwiseAbs().maxCoeff(), numeric.cwiseAbs().maxCoeff(), 1e-8});
    worst = std::max(worst, (analytic - numeric).cwiseAbs().maxCoeff() / scale);
  }
  return worst;
}

/// Brute-force Dice per class in percent (set counting over cell indices).
inline double brute_dice(const std::vector<std::uint8_t>& p, const std::vector<std::uint8_t>& t, int cls) {
  std::set<std::size_t> sp, st;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] == cls) sp.insert(i);
    if (t[i] == cls) st.insert(i);
  }
  if (sp.empty() && st.empty()) return 100.0;
  std::size_t inter = 0;
  for (auto i : sp) inter += st.count(i);
  return 100.0 * 2.0 * static_cast<double>(inter) / static_cast<double>(sp.size() + st.size());
}

/// Brute-force HD95: explicit boundary sets, all pairwise distances, sorted
/// percentile with linear interpolation.
inline double brute_hd95(const std::vector<std::uint8_t>& p, const std::vector<std::uint8_t>& t, int cls,
                         int h, int w) {
  auto boundary = [&](const std::vector<std::uint8_t>& m) {
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (m[y * w + x] != cls) continue;
        bool edge = y == 0 || x == 0 || y == h - 1 || x == w - 1;
        const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
        for (int k = 0; k < 4 && !edge; ++k) edge = m[(y + dy[k]) * w + (x + dx[k])] != cls;
        if (edge) out.emplace_back(y, x);
      }
    }
    return out;
  };
  const auto bp = boundary(p), bt = boundary(t);
  if (bp.empty() && bt.empty()) return 0.0;
  if (bp.empty() || bt.empty()) return std::sqrt(double((h - 1) * (h - 1) + (w - 1) * (w - 1)));
  std::vector<double> d;
  auto nearest = [](const auto& from, const auto& to) {
    std::vector<double> out;
    for (auto [y, x] : from) {
      double best = 1e300;
      for (auto [v, u] : to) best = std::min(best, std::hypot(double(y - v), double(x - u)));
      out.push_back(best);
    }
    return out;
  };
  for (double x : nearest(bp, bt)) d.push_back(x);
  for (double x : nearest(bt, bp)) d.push_back(x);
  std::sort(d.begin(), d.end());
  const double pos = 0.95 * static_cast<double>(d.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, d.size() - 1);
  return d[lo] + (pos - static_cast<double>(lo)) * (d[hi] - d[lo]);
}

/// Random mask of a few axis-aligned rectangles, each with a random class.
inline std::vector<std::uint8_t> random_mask(Rng& rng, int h, int w, int classes) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(h * w), 0);
  const int rects = static_cast<int>(rng.below(4));
  for (int r = 0; r < rects; ++r) {
    const int y0 = static_cast<int>(rng.below(h)), x0 = static_cast<int>(rng.below(w));
    const int y1 = std::min(h, y0 + 1 + static_cast<int>(rng.below(h / 2)));
    const int x1 = std::min(w, x0 + 1 + static_cast<int>(rng.below(w / 2)));
    const auto c = static_cast<std::uint8_t>(1 + rng.below(static_cast<std::uint64_t>(classes - 1)));
    for (int y = y0; y < y1; ++y) {
      for (int x = x0; x < x1; ++x) m[y * w + x] = c;
    }
  }
  // Sprinkle isolated cells so boundaries are irregular.
  const int dots = static_cast<int>(rng.below(6));
  for (int i = 0; i < dots; ++i) {
    m[rng.below(static_cast<std::uint64_t>(h * w))] =
        static_cast<std::uint8_t>(rng.below(static_cast<std::uint64_t>(classes)));
  }
  return m;
}

}  // namespace seqft::testing
