#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqft/model.hpp"

namespace seqft {

/// `mixed` draws a different family per sample; it is used for the SSL
/// pretraining corpus, never for a downstream task.
enum class ShapeFamily { disk, ring, bar, blob, checker, mixed };

std::string to_string(ShapeFamily family);
ShapeFamily parse_shape_family(const std::string& name);

struct TaskSpec {
  std::string task_id;
  int class_count = 2;
  ShapeFamily shape_family = ShapeFamily::disk;
  double intensity_shift = 0.0;
  double noise_sigma = 0.1;
  int n_train = 16;
  int n_test = 16;
  std::uint64_t seed = 0;
  int image_size = 32;

  void validate() const;
  bool operator==(const TaskSpec&) const = default;
};

void to_json(nlohmann::json& j, const TaskSpec& spec);
void from_json(const nlohmann::json& j, TaskSpec& spec);

struct Sample {
  Tensor<float> image;              // [1 x H x W], values in [0, 1]
  std::vector<std::uint8_t> mask;   // raster labels, H * W
  std::string task_id;
  int index = 0;
};

/// Train samples carry indices [0, n_train); test samples continue at
/// n_train, so the two index sets are disjoint.
struct TaskDataset {
  TaskSpec spec;
  std::vector<Sample> train;
  std::vector<Sample> test;

  const Sample& by_index(int index) const;
};

TaskDataset generate_task(const TaskSpec& spec);

/// Directory with manifest.json plus {index:05}.img (raw little-endian f32)
/// and {index:05}.msk (u8) per sample.
void save_dataset(const std::filesystem::path& dir, const TaskDataset& data);
TaskDataset load_dataset(const std::filesystem::path& dir);

/// Pointers to a slice of samples, as used for batching.
std::vector<const Tensor<float>*> images_of(std::span<const Sample* const> samples);

}  // namespace seqft
