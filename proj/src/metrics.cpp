#include "seqft/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

namespace seqft {
namespace {

void check_same(LabelView a, LabelView b, const char* what) {
  if (a.size() != b.size()) {
    throw DimensionError(std::string(what) + ": mask sizes " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()) + " differ");
  }
}

constexpr double kInf = std::numeric_limits<double>::infinity();

// Exact 1-D squared Euclidean distance transform of a sampled function
// (lower envelope of parabolas).
void edt_1d(const std::vector<double>& f, std::vector<double>& d) {
  const int n = static_cast<int>(f.size());
  std::vector<int> v(n);
  std::vector<double> z(n + 1);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    double s;
    while (true) {
      s = ((f[q] + double(q) * q) - (f[v[k]] + double(v[k]) * v[k])) / (2.0 * q - 2.0 * v[k]);
      if (s <= z[k] && k > 0) {
        --k;
      } else {
        break;
      }
    }
    if (s <= z[k]) {
      // k == 0 and the new parabola dominates everywhere.
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
      continue;
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  d.assign(n, kInf);
  if (k < 0) return;
  int j = 0;
  for (int q = 0; q < n; ++q) {
    while (z[j + 1] < q) ++j;
    d[q] = double(q - v[j]) * (q - v[j]) + f[v[j]];
  }
}

// Squared distance from every cell to the nearest seed cell.
std::vector<double> squared_distance_field(const std::vector<std::pair<int, int>>& seeds, int h,
                                           int w) {
  std::vector<double> grid(static_cast<std::size_t>(h * w), kInf);
  for (auto [y, x] : seeds) grid[y * w + x] = 0.0;
  std::vector<double> f, d;
  for (int x = 0; x < w; ++x) {
    f.resize(h);
    for (int y = 0; y < h; ++y) f[y] = grid[y * w + x];
    edt_1d(f, d);
    for (int y = 0; y < h; ++y) grid[y * w + x] = d[y];
  }
  for (int y = 0; y < h; ++y) {
    f.assign(grid.begin() + y * w, grid.begin() + (y + 1) * w);
    edt_1d(f, d);
    std::copy(d.begin(), d.end(), grid.begin() + y * w);
  }
  return grid;
}

// Symmetric boundary distance set, or nullopt-like flags for empty cases.
struct DistanceSet {
  std::vector<double> values;
  bool pred_empty = false;
  bool target_empty = false;
};

DistanceSet boundary_distances(LabelView pred, LabelView target, int cls, int h, int w) {
  check_same(pred, target, "hd95");
  if (static_cast<std::size_t>(h) * w != pred.size()) {
    throw DimensionError("hd95: mask of " + std::to_string(pred.size()) + " cells is not " +
                         std::to_string(h) + "x" + std::to_string(w));
  }
  DistanceSet out;
  const auto bp = boundary_cells(pred, cls, h, w);
  const auto bt = boundary_cells(target, cls, h, w);
  out.pred_empty = bp.empty();
  out.target_empty = bt.empty();
  if (bp.empty() || bt.empty()) return out;
  const auto dt = squared_distance_field(bt, h, w);
  const auto dp = squared_distance_field(bp, h, w);
  out.values.reserve(bp.size() + bt.size());
  for (auto [y, x] : bp) out.values.push_back(std::sqrt(dt[y * w + x]));
  for (auto [y, x] : bt) out.values.push_back(std::sqrt(dp[y * w + x]));
  return out;
}

}  // namespace

std::vector<double> dice_score(LabelView pred, LabelView target, int classes) {
  check_same(pred, target, "dice_score");
  std::vector<long> inter(classes, 0), np(classes, 0), nt(classes, 0);
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const int p = pred[i], t = target[i];
    if (p < classes) ++np[p];
    if (t < classes) ++nt[t];
    if (p == t && p < classes) ++inter[p];
  }
  std::vector<double> out(classes);
  for (int c = 0; c < classes; ++c) {
    const long denom = np[c] + nt[c];
    out[c] = denom == 0 ? 100.0 : 100.0 * 2.0 * static_cast<double>(inter[c]) / static_cast<double>(denom);
  }
  return out;
}

std::vector<std::pair<int, int>> boundary_cells(LabelView mask, int cls, int h, int w) {
  std::vector<std::pair<int, int>> out;
  auto in = [&](int y, int x) { return mask[y * w + x] == cls; };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!in(y, x)) continue;
      const bool edge = y == 0 || x == 0 || y == h - 1 || x == w - 1 || !in(y - 1, x) ||
                        !in(y + 1, x) || !in(y, x - 1) || !in(y, x + 1);
      if (edge) out.emplace_back(y, x);
    }
  }
  return out;
}

double percentile_linear(std::vector<double> values, double q) {
  if (values.empty()) throw ContractError("percentile of an empty set");
  std::sort(values.begin(), values.end());
  const double h = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(h));
  if (lo + 1 >= values.size()) return values.back();
  return values[lo] + (h - static_cast<double>(lo)) * (values[lo + 1] - values[lo]);
}

double hd95(LabelView pred, LabelView target, int cls, int h, int w) {
  const auto set = boundary_distances(pred, target, cls, h, w);
  if (set.pred_empty && set.target_empty) return 0.0;
  if (set.pred_empty || set.target_empty) return std::hypot(double(h - 1), double(w - 1));
  return percentile_linear(set.values, 0.95);
}

double hausdorff(LabelView pred, LabelView target, int cls, int h, int w) {
  const auto set = boundary_distances(pred, target, cls, h, w);
  if (set.pred_empty && set.target_empty) return 0.0;
  if (set.pred_empty || set.target_empty) return std::hypot(double(h - 1), double(w - 1));
  return *std::max_element(set.values.begin(), set.values.end());
}

std::vector<std::uint8_t> predict(const ModelState<float>& model, const Sample& sample) {
  NoGradGuard no_grad;
  const ArchMeta& arch = model.arch;
  const Tensor<float>* one[] = {&sample.image};
  Tensor<float> patches = patch_batch<float>(arch, std::span<const Tensor<float>* const>(one));
  const Matrix<float> logits = decode_cells(model, encode(model.encoder, arch, patches)).value();
  const auto idx = cell_index(arch);
  std::vector<std::uint8_t> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    Index best;
    logits.row(idx[i]).maxCoeff(&best);
    out[i] = static_cast<std::uint8_t>(best);
  }
  return out;
}

EvalResult evaluate(const ModelState<float>& model, std::span<const Sample> samples, int classes) {
  if (model.arch.classes != classes) {
    throw ConfigError("model has " + std::to_string(model.arch.classes) + " classes, task has " +
                      std::to_string(classes));
  }
  EvalResult out;
  out.per_class_dice.assign(classes - 1, 0.0);
  out.per_class_hd95.assign(classes - 1, 0.0);
  if (samples.empty()) return out;
  const int s = static_cast<int>(model.arch.image_size);
  for (const auto& smp : samples) {
    const auto pred = predict(model, smp);
    const auto dice = dice_score(pred, smp.mask, classes);
    for (int c = 1; c < classes; ++c) {
      out.per_class_dice[c - 1] += dice[c];
      out.per_class_hd95[c - 1] += hd95(pred, smp.mask, c, s, s);
    }
  }
  const double n = static_cast<double>(samples.size());
  for (auto& v : out.per_class_dice) v /= n;
  for (auto& v : out.per_class_hd95) v /= n;
  out.mean_dice = std::accumulate(out.per_class_dice.begin(), out.per_class_dice.end(), 0.0) / (classes - 1);
  out.mean_hd95 = std::accumulate(out.per_class_hd95.begin(), out.per_class_hd95.end(), 0.0) / (classes - 1);
  return out;
}

EvalResult evaluate(const ModelState<float>& model, const TaskDataset& task) {
  return evaluate(model, task.test, task.spec.class_count);
}

double TransferMatrix::backward_transfer(std::size_t t, std::size_t s) const {
  return grid.at(t).at(s).mean_dice - grid.at(s).at(s).mean_dice;
}

double TransferMatrix::mean_backward_transfer() const {
  if (grid.size() < 2) return 0.0;
  const std::size_t last = grid.size() - 1;
  double total = 0.0;
  for (std::size_t s = 0; s < last; ++s) total += backward_transfer(last, s);
  return total / static_cast<double>(last);
}

ModelState<float> compose(const Encoder<float>& encoder, const ModelState<float>& task_model) {
  ModelState<float> out = task_model;
  out.encoder = encoder;
  return out;
}

TransferMatrix transfer_matrix(const std::vector<Encoder<float>>& encoders,
                               const std::vector<ModelState<float>>& task_models,
                               const std::vector<const TaskDataset*>& tasks) {
  if (encoders.size() != tasks.size() || task_models.size() != tasks.size()) {
    throw ConfigError("transfer_matrix: need one encoder and one task model per task");
  }
  TransferMatrix out;
  for (std::size_t t = 0; t < tasks.size(); ++t) {
    std::vector<EvalResult> row;
    for (std::size_t s = 0; s <= t; ++s) {
      row.push_back(evaluate(compose(encoders[t], task_models[s]), *tasks[s]));
    }
    out.grid.push_back(std::move(row));
  }
  return out;
}

int encoder_depth_of(const std::string& name) {
  if (name.rfind("encoder.", 0) != 0) return -1;
  const std::string blocks = "encoder.blocks.";
  if (name.rfind(blocks, 0) == 0) return 1 + std::stoi(name.substr(blocks.size()));
  if (name.rfind("encoder.norm", 0) == 0) return 1000;
  return 0;
}

bool is_linear_weight(const std::string& name) {
  const std::string suffix = ".weight";
  if (name.size() < suffix.size() || name.compare(name.size() - suffix.size(), suffix.size(), suffix) != 0) {
    return false;
  }
  return name.find("norm") == std::string::npos;
}

ParamVariationReport param_variation(const NamedTensors<float>& before,
                                     const NamedTensors<float>& after) {
  std::map<std::string, const Tensor<float>*> a, b;
  for (const auto& [n, t] : before) a[n] = &t;
  for (const auto& [n, t] : after) b[n] = &t;
  std::string offenders;
  for (const auto& [n, t] : a) {
    auto it = b.find(n);
    if (it == b.end()) offenders += " missing-after:" + n;
    else if (it->second->shape() != t->shape()) offenders += " shape:" + n;
  }
  for (const auto& [n, t] : b) {
    if (!a.count(n)) offenders += " missing-before:" + n;
  }
  if (!offenders.empty()) throw DimensionError("param_variation mismatch:" + offenders);

  ParamVariationReport out;
  for (const auto& [n, t] : a) {
    const auto& x = t->value();
    const auto& y = b.at(n)->value();
    double total = 0.0;
    long changed = 0;
    for (Index i = 0; i < x.size(); ++i) {
      const double d = std::abs(static_cast<double>(y.data()[i]) - static_cast<double>(x.data()[i]));
      total += d;
      if (y.data()[i] != x.data()[i]) ++changed;
    }
    ParamVariationEntry e;
    e.name = n;
    e.depth = encoder_depth_of(n);
    e.linear_weight = is_linear_weight(n);
    e.mean_abs_change = total / static_cast<double>(x.size());
    e.changed_fraction = static_cast<double>(changed) / static_cast<double>(x.size());
    out.entries.push_back(std::move(e));
  }
  return out;
}

namespace {

std::vector<double> ranks(std::span<const double> v) {
  std::vector<std::size_t> order(v.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return v[i] < v[j]; });
  std::vector<double> r(v.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && v[order[j + 1]] == v[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

}  // namespace

double spearman(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size() || xs.size() < 2) throw ContractError("spearman: need >= 2 paired values");
  const auto rx = ranks(xs), ry = ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace seqft
