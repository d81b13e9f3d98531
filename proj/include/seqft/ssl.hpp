#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "seqft/data.hpp"

namespace seqft {

inline constexpr double kDefaultMaskRatio = 0.6;
inline constexpr int kDefaultMdsRuns = 1000;

/// Seed for scoring one sample: a hash of the base seed and the sample id.
std::uint64_t sample_seed(std::uint64_t base_seed, const std::string& task_id, int index);

/// Masked-patch reconstruction MSE for a batch: mean over the masked patch
/// values of every item. `masks` holds one mask per image (B * tokens
/// entries, image-major).
Tensor<float> masked_reconstruction_loss(const ModelState<float>& model,
                                         std::span<const Tensor<float>* const> images,
                                         const std::vector<bool>& masks);

/// Per-run masked-reconstruction losses for `runs` independent mask draws
/// from Rng(seed). Evaluated in chunks; no parameter is touched.
std::vector<double> ssl_run_losses(const ModelState<float>& model, const Sample& sample, int runs,
                                   std::uint64_t seed, double mask_ratio = kDefaultMaskRatio);

/// Mean of ssl_run_losses. Throws ContractError for runs < 1.
double ssl_sample_loss(const ModelState<float>& model, const Sample& sample, int runs,
                       std::uint64_t seed, double mask_ratio = kDefaultMaskRatio);

}  // namespace seqft
