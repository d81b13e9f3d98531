#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "seqft/buffer.hpp"
#include "seqft/data.hpp"

namespace seqft {

/// The ablation lattice. Every strategy is a set of stage toggles over the
/// same code path (see toggles_for).
enum class Strategy {
  fft_parallel,
  seqft_vanilla,
  seqft_random_buffer,
  seqft_mds_only,
  seqft_kgrft_only,
  medseqft,
};

std::string to_string(Strategy s);
Strategy parse_strategy(const std::string& name);
const std::vector<Strategy>& all_strategies();

enum class BufferSource { none, random, mds };

struct StageToggles {
  bool chain = true;         // start task t from M_{t-1} instead of M_0
  BufferSource buffer = BufferSource::none;
  bool kd = false;           // KD-constrained fine-tuning for t > 1
  bool lora_refine = false;  // LoRA distillation + merge after fine-tuning

  bool operator==(const StageToggles&) const = default;
};

StageToggles toggles_for(Strategy s);

struct PretrainConfig {
  int n_train = 256;
  int n_val = 32;
  double noise_sigma = 0.08;
};

struct PipelineConfig {
  ArchMeta arch;
  std::vector<TaskSpec> tasks;
  PretrainConfig pretrain;

  int K = 8;
  int mds_runs = 1000;
  int lora_rank = 2;
  double lora_scale = 1.0;
  double mask_ratio = 0.6;

  int iters_pretrain = 3000;
  int iters_fft = 1500;
  int iters_lora_kd = 600;
  int iters_calibration = 200;
  int batch_size = 8;

  double lr_pretrain = 1e-3;
  double lr_fft = 1e-3;
  double lr_lora = 3e-3;
  double weight_decay = 1e-4;

  int kd_every = 1;  // 0 disables the KD term
  BufferMixing buffer_mixing = BufferMixing::uniform;
  bool decoder_calibration = false;

  Strategy strategy = Strategy::medseqft;
  std::uint64_t master_seed = 0;

  void validate() const;
};

/// Five-task default suite: disk, ring, bar, blob, checker with
/// progressively larger intensity shift; train sizes 104/242/224/100/50
/// scaled down by four.
std::vector<TaskSpec> default_task_suite();
PipelineConfig default_config();

nlohmann::json to_json(const PipelineConfig& cfg);
/// Reads a config over the defaults. Unknown keys are rejected.
PipelineConfig config_from_json(const nlohmann::json& j);

/// Applies "dotted.key=value" to a JSON document. The value is parsed as
/// JSON when possible and taken as a string otherwise. Array elements are
/// addressed by index ("tasks.0.n_train=10").
void apply_override(nlohmann::json& doc, const std::string& assignment);

/// Task specs with per-run seeds (task seed mixed with the master seed) and
/// the architecture's image size.
std::vector<TaskSpec> resolved_tasks(const PipelineConfig& cfg);
TaskSpec pretrain_corpus_spec(const PipelineConfig& cfg);

std::uint64_t config_hash(const PipelineConfig& cfg);

}  // namespace seqft
