#include "seqft/ssl.hpp"

#include <algorithm>

namespace seqft {

std::uint64_t sample_seed(std::uint64_t base_seed, const std::string& task_id, int index) {
  return mix_seed(mix_seed(base_seed, task_id), static_cast<std::uint64_t>(index));
}

Tensor<float> masked_reconstruction_loss(const ModelState<float>& model,
                                         std::span<const Tensor<float>* const> images,
                                         const std::vector<bool>& masks) {
  const ArchMeta& arch = model.arch;
  Tensor<float> patches = patch_batch<float>(arch, images);
  if (static_cast<Index>(masks.size()) != patches.rows()) {
    throw DimensionError("masked_reconstruction_loss: " + std::to_string(masks.size()) +
                         " mask entries for " + std::to_string(patches.rows()) + " patches");
  }
  Tensor<float> recon = model.ssl_head(encode(model.encoder, arch, patches, &masks));
  std::vector<Index> rows;
  for (Index r = 0; r < patches.rows(); ++r) {
    if (masks[r]) rows.push_back(r);
  }
  if (rows.empty()) throw ContractError("masked_reconstruction_loss: no masked patches");
  Tensor<float> target = gather_rows(patches, rows);
  return mse(gather_rows(recon, rows), target);
}

std::vector<double> ssl_run_losses(const ModelState<float>& model, const Sample& sample, int runs,
                                   std::uint64_t seed, double mask_ratio) {
  if (runs < 1) throw ContractError("ssl_sample_loss: runs must be >= 1");
  const ArchMeta& arch = model.arch;
  const Index tokens = arch.tokens();
  const std::size_t count = masked_count(mask_ratio, tokens);
  if (count == 0) throw ContractError("ssl_sample_loss: mask ratio selects no patches");
  NoGradGuard no_grad;
  Rng rng(seed);
  const Matrix<float> patches = patchify<float>(arch, sample.image.value());
  constexpr int kChunk = 128;
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(runs));
  for (int start = 0; start < runs; start += kChunk) {
    const int n = std::min(kChunk, runs - start);
    Matrix<float> tiled(tokens * n, arch.patch_dim());
    std::vector<bool> masks;
    masks.reserve(static_cast<std::size_t>(tokens * n));
    for (int r = 0; r < n; ++r) {
      tiled.middleRows(r * tokens, tokens) = patches;
      auto m = rng.choose_mask(static_cast<std::size_t>(tokens), count);
      masks.insert(masks.end(), m.begin(), m.end());
    }
    Shape shape{tiled.rows(), tiled.cols()};
    Tensor<float> input(std::move(shape), std::move(tiled));
    const Matrix<float> recon =
        model.ssl_head(encode(model.encoder, arch, input, &masks)).value();
    for (int r = 0; r < n; ++r) {
      double acc = 0.0;
      for (Index t = 0; t < tokens; ++t) {
        if (!masks[static_cast<std::size_t>(r * tokens + t)]) continue;
        acc += (recon.row(r * tokens + t) - patches.row(t)).cast<double>().squaredNorm();
      }
      out.push_back(acc / (static_cast<double>(count) * static_cast<double>(arch.patch_dim())));
    }
  }
  return out;
}

double ssl_sample_loss(const ModelState<float>& model, const Sample& sample, int runs,
                       std::uint64_t seed, double mask_ratio) {
  const auto losses = ssl_run_losses(model, sample, runs, seed, mask_ratio);
  double total = 0.0;
  for (double l : losses) total += l;
  return total / static_cast<double>(losses.size());
}

}  // namespace seqft
