#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "seqft/data.hpp"

namespace seqft {

using LabelView = std::span<const std::uint8_t>;

/// Per-class Dice in percent, 100 * 2|P n T| / (|P| + |T|), for classes
/// 0..classes-1. A class absent from both masks scores 100.
std::vector<double> dice_score(LabelView pred, LabelView target, int classes);

/// Boundary cells of class `cls`: cells of the class with a 4-neighbour
/// outside the class or on the image border.
std::vector<std::pair<int, int>> boundary_cells(LabelView mask, int cls, int height, int width);

/// 95th percentile of the symmetric boundary-to-boundary nearest-neighbour
/// distance set, in cell units. Percentile uses linear interpolation between
/// order statistics: with sorted d[0..n-1] and h = 0.95 (n - 1), the value is
/// d[floor h] + (h - floor h)(d[floor h + 1] - d[floor h]).
/// Both masks empty for the class: 0. Exactly one empty: the image diagonal
/// sqrt((H-1)^2 + (W-1)^2).
double hd95(LabelView pred, LabelView target, int cls, int height, int width);

/// Maximum of the same distance set (classical Hausdorff distance).
double hausdorff(LabelView pred, LabelView target, int cls, int height, int width);

double percentile_linear(std::vector<double> values, double q);

/// Means are over foreground classes 1..C-1.
struct EvalResult {
  std::vector<double> per_class_dice;  // index 0 is class 1
  std::vector<double> per_class_hd95;
  double mean_dice = 0.0;
  double mean_hd95 = 0.0;
};

std::vector<std::uint8_t> predict(const ModelState<float>& model, const Sample& sample);

/// Per-image metrics averaged over `samples`. Throws ConfigError when the
/// model's class count differs from the task's.
EvalResult evaluate(const ModelState<float>& model, std::span<const Sample> samples, int classes);
EvalResult evaluate(const ModelState<float>& model, const TaskDataset& task);

/// grid[t][s]: model after task t evaluated on task s, s <= t.
struct TransferMatrix {
  std::vector<std::vector<EvalResult>> grid;

  std::size_t tasks() const { return grid.size(); }
  /// grid[t][s].mean_dice - grid[s][s].mean_dice
  double backward_transfer(std::size_t t, std::size_t s) const;
  /// Mean over s < n-1 of backward_transfer(n-1, s); 0 for a single task.
  double mean_backward_transfer() const;
};

/// Encoder of M_t with the decoder and head trained for task s.
ModelState<float> compose(const Encoder<float>& encoder, const ModelState<float>& task_model);

/// `encoders[t]` is E_t; `task_models[s]` supplies task s's decoder and
/// head.
TransferMatrix transfer_matrix(const std::vector<Encoder<float>>& encoders,
                               const std::vector<ModelState<float>>& task_models,
                               const std::vector<const TaskDataset*>& tasks);

struct ParamVariationEntry {
  std::string name;
  int depth = 0;                 // 0 = patch embedding, i = encoder block i-1, ...
  bool linear_weight = false;    // weight matrix of a linear layer
  double mean_abs_change = 0.0;
  double changed_fraction = 0.0;
};

struct ParamVariationReport {
  std::vector<ParamVariationEntry> entries;  // sorted by name
};

/// Per parameter tensor: mean |after - before| and fraction of changed
/// elements. Name sets and shapes must match.
ParamVariationReport param_variation(const NamedTensors<float>& before,
                                     const NamedTensors<float>& after);

/// Encoder block depth for a parameter name; -1 outside the encoder.
int encoder_depth_of(const std::string& name);
bool is_linear_weight(const std::string& name);

double spearman(std::span<const double> xs, std::span<const double> ys);

}  // namespace seqft
