#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "seqft/buffer.hpp"
#include "seqft/config.hpp"
#include "seqft/lora.hpp"
#include "seqft/metrics.hpp"

namespace seqft {

// ---------------------------------------------------------------------------
// Stages

struct PretrainStats {
  double val_loss_init = 0.0;
  double val_loss_final = 0.0;
  std::vector<double> train_loss;
};

/// Masked-patch SSL pretraining of M_0 on `corpus` (encoder + SSL head).
/// The decoder and segmentation head stay at their initialization.
ModelState<float> pretrain_ssl(const ArchMeta& arch, const TaskDataset& corpus, int iters,
                               double lr, int batch, double mask_ratio, std::uint64_t seed,
                               PretrainStats* stats = nullptr);

/// Mean masked-reconstruction loss over `samples`, one fixed mask draw per
/// sample from `seed`.
double ssl_validation_loss(const ModelState<float>& model, std::span<const Sample> samples,
                           double mask_ratio, std::uint64_t seed);

/// Indices of the K smallest values; ties go to the lower index.
std::vector<int> select_lowest(std::span<const double> values, int K);

/// Average SSL loss of every training sample under M_0 (R mask draws each,
/// seeded per sample).
std::vector<double> mds_scores(const ModelState<float>& m0, const TaskDataset& task, int runs,
                               std::uint64_t seed, double mask_ratio);

/// The K training samples with the lowest average SSL loss under M_0.
std::vector<BufferEntry> mds_select(const ModelState<float>& m0, const TaskDataset& task, int K,
                                    int runs, std::uint64_t seed, double mask_ratio = 0.6);
std::vector<BufferEntry> mds_select_from_scores(const TaskDataset& task, std::span<const double> scores,
                                                int K);

/// K training samples drawn uniformly without replacement.
std::vector<BufferEntry> random_select(const TaskDataset& task, int K, std::uint64_t seed);

struct FineTuneOptions {
  int iters = 1500;
  int batch = 8;
  double lr = 1e-3;
  double weight_decay = 0.0;
  int kd_every = 1;  // 0: no KD steps
  BufferMixing mixing = BufferMixing::uniform;
};

struct FineTuneStats {
  std::vector<double> seg_loss;
  std::vector<double> kd_loss;
  double final_kd_loss = 0.0;  // mean KD loss over the whole pool after training
  std::uint64_t teacher_hash_before = 0;
  std::uint64_t teacher_hash_after = 0;
};

/// Fine-tunes M_{t-init} into M_{t-mid}. `m_init` already carries the task's
/// freshly initialized head. Each iteration takes a segmentation step on a
/// task batch (encoder, decoder and head). When `kd_pool` is non-null and
/// kd_every > 0, every kd_every iterations a separate step minimizes the
/// feature MSE between the current encoder and a frozen copy of m_init's
/// encoder on a pool batch, updating the encoder only.
ModelState<float> kd_fft(const ModelState<float>& m_init, const TaskDataset& task,
                         const Buffer* kd_pool, const FineTuneOptions& options, std::uint64_t seed,
                         FineTuneStats* stats = nullptr);

/// Mean KD loss of `student` against `teacher` over every entry of `pool`.
double kd_pool_loss(const Encoder<float>& student, const Encoder<float>& teacher,
                    const ArchMeta& arch, const Buffer& pool);

struct LoraKdOptions {
  int rank = 2;
  int iters = 600;
  int batch = 8;
  double lr = 3e-3;
  double scale = 1.0;
};

struct LoraKdResult {
  AdaptedEncoder<float> adapted;
  double initial_loss = 0.0;  // refine loss over the task with B = 0
  double final_loss = 0.0;
  std::vector<double> loss_history;
  std::uint64_t prev_hash_before = 0, prev_hash_after = 0;
  std::uint64_t mid_hash_before = 0, mid_hash_after = 0;
};

/// Distills E_{t-mid} into adapters on a frozen copy of E_{t-1} over the
/// task's training images.
LoraKdResult lora_kd(const Encoder<float>& e_prev, const Encoder<float>& e_mid, const ArchMeta& arch,
                     const TaskDataset& task, const LoraKdOptions& options, std::uint64_t seed);

/// Mean refine loss of the adapted encoder against `target` over the task's
/// training images.
double refine_pool_loss(const AdaptedEncoder<float>& adapted, const Encoder<float>& target,
                        const TaskDataset& task);

/// M_t: merged encoder, everything else from M_{t-mid}.
ModelState<float> reparameterize(const AdaptedEncoder<float>& adapted, const ModelState<float>& m_mid);

/// Decoder + head only training on the task, encoder frozen.
void calibrate_decoder(ModelState<float>& model, const TaskDataset& task, int iters, int batch,
                       double lr, std::uint64_t seed);

/// Checksum of an encoder's parameters (FNV-1a of its SQFT encoding).
std::uint64_t encoder_hash(const Encoder<float>& encoder);

// ---------------------------------------------------------------------------
// Sequence

struct TaskRecord {
  std::string task_id;
  EvalResult mid;    // M_{t-mid} on task t
  EvalResult final;  // M_t on task t
  FineTuneStats fft;
  std::optional<LoraKdResult> lora;
};

struct RunReport {
  Strategy strategy = Strategy::medseqft;
  std::uint64_t seed = 0;
  std::vector<TaskRecord> tasks;
  TransferMatrix transfer;
  double mean_final_dice() const;
  double mean_final_hd95() const;
  double mean_mid_dice() const;
};

struct RunOptions {
  bool resume = false;
  /// Shared directory for M_0 and MDS scores, reused across strategies with
  /// the same seed. Defaults to the run directory.
  std::optional<std::filesystem::path> shared_dir;
};

inline constexpr const char* kMetricsHeader = "strategy,task_id,eval_task_id,model_tag,dice,hd95,seed";

/// Loads M_0 from `dir/m0.sqft` or pretrains and saves it.
ModelState<float> obtain_m0(const PipelineConfig& cfg, const std::filesystem::path& dir);

/// MDS scores for task t, cached as `dir/mds_scores_<task>.json`.
std::vector<double> obtain_mds_scores(const PipelineConfig& cfg, const ModelState<float>& m0,
                                      const TaskDataset& task, const std::filesystem::path& dir);

/// Runs the full task sequence for cfg.strategy into `run_dir`:
/// config.json, manifest.json, per-task checkpoints, buffer.json,
/// metrics.csv and transfer.csv.
RunReport run_sequence(const PipelineConfig& cfg, const std::filesystem::path& run_dir,
                       const RunOptions& options = {});

/// metrics.csv rows for a report (no header).
std::vector<std::string> metrics_rows(const RunReport& report, const std::vector<TaskSpec>& tasks);

std::string format_number(double v);

// ---------------------------------------------------------------------------
// Ablation

struct AblationPlan {
  std::vector<Strategy> strategies;
  std::vector<std::uint64_t> seeds;
};

/// Reads {"ablation": {"strategies": [...], "seeds": [...]}} from a config
/// document; missing keys default to all strategies and seed 0.
AblationPlan ablation_plan_from_json(const nlohmann::json& doc);

/// Per-run scalars recovered from metrics.csv rows.
struct RunSummary {
  Strategy strategy = Strategy::medseqft;
  std::uint64_t seed = 0;
  double final_dice = 0.0;  // mean over tasks of M_t on task t
  double final_hd95 = 0.0;
  double mid_dice = 0.0;    // mean over tasks of M_{t-mid} on task t
  double bwt = 0.0;         // mean over s < T of grid[T][s] - grid[s][s]
};

struct StrategySummary {
  Strategy strategy = Strategy::medseqft;
  int runs = 0;
  double final_dice = 0.0, final_dice_sd = 0.0;
  double final_hd95 = 0.0;
  double mid_dice = 0.0;
  double bwt = 0.0;
};

/// Parses metrics.csv text (with header) into one summary per (strategy, seed).
std::vector<RunSummary> summarize_metrics(const std::string& csv);
/// Averages run summaries per strategy, in lattice order.
std::vector<StrategySummary> aggregate(const std::vector<RunSummary>& runs);
std::string summary_csv(const std::vector<StrategySummary>& rows);

/// Runs every (seed, strategy) pair into out_dir/<strategy>/seed<k>/, sharing
/// M_0 and MDS scores per seed under out_dir/shared/seed<k>/, then writes
/// out_dir/metrics.csv (all rows) and out_dir/summary.csv. `workers` > 1 runs
/// pairs in child processes.
std::vector<StrategySummary> run_ablation(const PipelineConfig& base, const AblationPlan& plan,
                                          const std::filesystem::path& out_dir, bool resume = false,
                                          int workers = 1);

}  // namespace seqft
