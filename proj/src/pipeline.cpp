#include "seqft/pipeline.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include <sys/wait.h>
#include <unistd.h>

#include "seqft/checkpoint.hpp"
#include "seqft/losses.hpp"
#include "seqft/ssl.hpp"

namespace seqft {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Patch rows and cell labels of a sample list, gathered per batch.
struct PatchCache {
  ArchMeta arch;
  Matrix<float> patches;                      // [N*tokens x patch_dim]
  std::vector<std::vector<std::int32_t>> labels;  // patch-major cell labels

  PatchCache(const ArchMeta& a, std::span<const Sample> samples, bool with_labels) : arch(a) {
    const Index t = arch.tokens();
    patches.resize(t * static_cast<Index>(samples.size()), arch.patch_dim());
    for (std::size_t i = 0; i < samples.size(); ++i) {
      patches.middleRows(static_cast<Index>(i) * t, t) = patchify<float>(arch, samples[i].image.value());
      if (with_labels) labels.push_back(labels_to_cells(arch, samples[i].mask));
    }
  }

  Tensor<float> batch(std::span<const int> idx) const {
    const Index t = arch.tokens();
    Matrix<float> out(t * static_cast<Index>(idx.size()), arch.patch_dim());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      out.middleRows(static_cast<Index>(i) * t, t) = patches.middleRows(idx[i] * t, t);
    }
    Shape shape{out.rows(), out.cols()};
    return Tensor<float>(std::move(shape), std::move(out));
  }

  std::vector<std::int32_t> batch_labels(std::span<const int> idx) const {
    std::vector<std::int32_t> out;
    for (int i : idx) out.insert(out.end(), labels[i].begin(), labels[i].end());
    return out;
  }
};

std::vector<int> draw_indices(Rng& rng, int n, int batch) {
  std::vector<int> idx(static_cast<std::size_t>(batch));
  for (auto& i : idx) i = static_cast<int>(rng.below(static_cast<std::uint64_t>(n)));
  return idx;
}

Tensor<float> patches_of(const ArchMeta& arch, std::span<const Sample* const> samples) {
  const auto images = images_of(samples);
  return patch_batch<float>(arch, std::span<const Tensor<float>* const>(images));
}

/// Encoder parameters that receive gradient without masking.
NamedTensors<float> unmasked_encoder_params(const Encoder<float>& e) {
  NamedTensors<float> out;
  for (auto& [n, t] : named_parameters(e)) {
    if (n != "encoder.mask_token") out.emplace_back(n, t);
  }
  return out;
}

NamedTensors<float> concat(NamedTensors<float> a, const NamedTensors<float>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

std::string now_iso8601() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& path, const json& j) {
  const fs::path tmp = path.string() + ".tmp";
  write_file(tmp, j.dump(2) + "\n");
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

std::uint64_t encoder_hash(const Encoder<float>& encoder) {
  return checkpoint_hash(named_parameters(encoder));
}

// ---------------------------------------------------------------------------

double ssl_validation_loss(const ModelState<float>& model, std::span<const Sample> samples,
                           double mask_ratio, std::uint64_t seed) {
  NoGradGuard no_grad;
  const std::size_t count = masked_count(mask_ratio, model.arch.tokens());
  Rng rng(seed);
  std::vector<const Tensor<float>*> images;
  std::vector<bool> masks;
  for (const auto& s : samples) {
    images.push_back(&s.image);
    auto m = rng.choose_mask(static_cast<std::size_t>(model.arch.tokens()), count);
    masks.insert(masks.end(), m.begin(), m.end());
  }
  return masked_reconstruction_loss(model, images, masks).item();
}

ModelState<float> pretrain_ssl(const ArchMeta& arch, const TaskDataset& corpus, int iters,
                               double lr, int batch, double mask_ratio, std::uint64_t seed,
                               PretrainStats* stats) {
  ModelState<float> model = init_model<float>(arch, mix_seed(seed, "init"));
  // The reconstruction head starts as the constant corpus-mean predictor.
  double pixel_mean = 0.0;
  for (const auto& s : corpus.train) pixel_mean += s.image.value().cast<double>().mean();
  pixel_mean /= static_cast<double>(std::max<std::size_t>(corpus.train.size(), 1));
  model.ssl_head.weight.tensor().data().setZero();
  model.ssl_head.bias.tensor().data().setConstant(static_cast<float>(pixel_mean));
  const std::uint64_t val_seed = mix_seed(seed, "val");
  if (stats) stats->val_loss_init = ssl_validation_loss(model, corpus.test, mask_ratio, val_seed);
  AdamW<float> opt(concat(named_parameters(model.encoder), named_parameters(model, {Group::ssl_head})),
                   {.lr = lr});
  Rng rng(mix_seed(seed, "batches"));
  const std::size_t count = masked_count(mask_ratio, arch.tokens());
  const int n = static_cast<int>(corpus.train.size());
  for (int it = 0; it < iters; ++it) {
    const auto idx = draw_indices(rng, n, batch);
    std::vector<const Tensor<float>*> images;
    std::vector<bool> masks;
    for (int i : idx) {
      images.push_back(&corpus.train[i].image);
      auto m = rng.choose_mask(static_cast<std::size_t>(arch.tokens()), count);
      masks.insert(masks.end(), m.begin(), m.end());
    }
    Tensor<float> loss = masked_reconstruction_loss(model, images, masks);
    opt.zero_grad();
    loss.backward();
    opt.step();
    if (stats) stats->train_loss.push_back(loss.item());
    if ((it + 1) % 500 == 0) spdlog::debug("pretrain iter {} loss {:.5f}", it + 1, loss.item());
  }
  if (stats) stats->val_loss_final = ssl_validation_loss(model, corpus.test, mask_ratio, val_seed);
  return model;
}

std::vector<int> select_lowest(std::span<const double> values, int K) {
  if (K < 0 || K > static_cast<int>(values.size())) {
    throw ConfigError("K = " + std::to_string(K) + " exceeds the " + std::to_string(values.size()) +
                      " available samples");
  }
  std::vector<int> order(values.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return values[a] < values[b]; });
  order.resize(static_cast<std::size_t>(K));
  return order;
}

std::vector<double> mds_scores(const ModelState<float>& m0, const TaskDataset& task, int runs,
                               std::uint64_t seed, double mask_ratio) {
  std::vector<double> out;
  out.reserve(task.train.size());
  for (const auto& s : task.train) {
    out.push_back(ssl_sample_loss(m0, s, runs, sample_seed(seed, s.task_id, s.index), mask_ratio));
  }
  return out;
}

std::vector<BufferEntry> mds_select_from_scores(const TaskDataset& task, std::span<const double> scores,
                                                int K) {
  if (scores.size() != task.train.size()) throw ContractError("mds: one score per training sample");
  std::vector<BufferEntry> out;
  for (int i : select_lowest(scores, K)) {
    out.push_back({task.train[i], task.spec.task_id, scores[i]});
  }
  return out;
}

std::vector<BufferEntry> mds_select(const ModelState<float>& m0, const TaskDataset& task, int K,
                                    int runs, std::uint64_t seed, double mask_ratio) {
  if (K > static_cast<int>(task.train.size())) {
    throw ConfigError("K = " + std::to_string(K) + " exceeds the training size of '" +
                      task.spec.task_id + "'");
  }
  const auto scores = mds_scores(m0, task, runs, seed, mask_ratio);
  return mds_select_from_scores(task, scores, K);
}

std::vector<BufferEntry> random_select(const TaskDataset& task, int K, std::uint64_t seed) {
  const int n = static_cast<int>(task.train.size());
  if (K > n) throw ConfigError("K exceeds the training size of '" + task.spec.task_id + "'");
  Rng rng(seed);
  const auto chosen = rng.choose_mask(static_cast<std::size_t>(n), static_cast<std::size_t>(K));
  std::vector<BufferEntry> out;
  for (int i = 0; i < n; ++i) {
    if (chosen[i]) out.push_back({task.train[i], task.spec.task_id, 0.0});
  }
  return out;
}

// ---------------------------------------------------------------------------

double kd_pool_loss(const Encoder<float>& student, const Encoder<float>& teacher,
                    const ArchMeta& arch, const Buffer& pool) {
  NoGradGuard no_grad;
  std::vector<const Sample*> samples;
  for (const auto& e : pool.entries()) samples.push_back(&e.sample);
  if (samples.empty()) return 0.0;
  Tensor<float> patches = patches_of(arch, samples);
  return kd_loss<float>({encode(student, arch, patches), "student"},
                        {encode(teacher, arch, patches), "teacher"})
      .item();
}

ModelState<float> kd_fft(const ModelState<float>& m_init, const TaskDataset& task,
                         const Buffer* kd_pool, const FineTuneOptions& options, std::uint64_t seed,
                         FineTuneStats* stats) {
  if (task.train.empty()) throw ConfigError("kd_fft: task '" + task.spec.task_id + "' has no training data");
  if (m_init.arch.classes != task.spec.class_count) {
    throw ConfigError("kd_fft: model head has " + std::to_string(m_init.arch.classes) +
                      " classes, task '" + task.spec.task_id + "' has " +
                      std::to_string(task.spec.class_count));
  }
  const ArchMeta& arch = m_init.arch;
  ModelState<float> model = m_init;
  const bool use_kd = kd_pool && !kd_pool->empty() && options.kd_every > 0;
  const Encoder<float> teacher = frozen_copy(m_init.encoder);
  const std::uint64_t teacher_before = use_kd ? encoder_hash(teacher) : 0;

  const auto enc_params = unmasked_encoder_params(model.encoder);
  AdamW<float> seg_opt(concat(enc_params, named_parameters(model, {Group::decoder, Group::seg_head})),
                       {.lr = options.lr, .weight_decay = options.weight_decay});
  AdamW<float> kd_opt(enc_params, {.lr = options.lr, .weight_decay = options.weight_decay});

  const PatchCache cache(arch, task.train, true);
  Rng seg_rng(mix_seed(seed, "seg"));
  Rng kd_rng(mix_seed(seed, "kd"));
  const int n = static_cast<int>(task.train.size());
  for (int it = 0; it < options.iters; ++it) {
    const auto idx = draw_indices(seg_rng, n, options.batch);
    const auto labels = cache.batch_labels(idx);
    Tensor<float> logits = decode_cells(model, encode(model.encoder, arch, cache.batch(idx)));
    auto loss = seg_loss(logits, labels);
    seg_opt.zero_grad();
    loss.total.backward();
    seg_opt.step();
    if (stats) stats->seg_loss.push_back(loss.total.item());

    if (use_kd && (it + 1) % options.kd_every == 0) {
      const auto samples = buffer_batch(*kd_pool, options.batch, kd_rng, options.mixing);
      Tensor<float> patches = patches_of(arch, samples);
      FeatureMap<float> target;
      {
        NoGradGuard no_grad;
        target = {encode(teacher, arch, patches), "teacher"};
      }
      Tensor<float> kd = kd_loss<float>({encode(model.encoder, arch, patches), "student"}, target);
      kd_opt.zero_grad();
      kd.backward();
      kd_opt.step();
      if (stats) stats->kd_loss.push_back(kd.item());
    }
  }
  if (stats) {
    if (kd_pool && !kd_pool->empty()) {
      stats->final_kd_loss = kd_pool_loss(model.encoder, teacher, arch, *kd_pool);
    }
    stats->teacher_hash_before = teacher_before;
    stats->teacher_hash_after = use_kd ? encoder_hash(teacher) : 0;
  }
  return model;
}

double refine_pool_loss(const AdaptedEncoder<float>& adapted, const Encoder<float>& target,
                        const TaskDataset& task) {
  NoGradGuard no_grad;
  const PatchCache cache(adapted.arch, task.train, false);
  Tensor<float> patches(Shape{cache.patches.rows(), cache.patches.cols()}, cache.patches);
  return refine_loss<float>({adapted_encode(adapted, patches), "adapted"},
                            {encode(target, adapted.arch, patches), "target"})
      .item();
}

LoraKdResult lora_kd(const Encoder<float>& e_prev, const Encoder<float>& e_mid, const ArchMeta& arch,
                     const TaskDataset& task, const LoraKdOptions& options, std::uint64_t seed) {
  const auto prev_params = named_parameters(e_prev);
  const auto mid_params = named_parameters(e_mid);
  if (prev_params.size() != mid_params.size()) {
    throw ConfigError("lora_kd: encoders have different architectures");
  }
  for (std::size_t i = 0; i < prev_params.size(); ++i) {
    const auto& [n, t] = prev_params[i];
    if (mid_params[i].first != n || mid_params[i].second.shape() != t.shape()) {
      throw ConfigError("lora_kd: encoders differ at parameter '" + n + "'");
    }
  }
  LoraKdResult result;
  const Encoder<float> teacher = frozen_copy(e_mid);
  result.prev_hash_before = encoder_hash(e_prev);
  result.mid_hash_before = encoder_hash(teacher);
  result.adapted = inject(e_prev, arch, options.rank, mix_seed(seed, "inject"),
                          static_cast<float>(options.scale));

  const PatchCache cache(arch, task.train, false);
  Matrix<float> targets;
  {
    NoGradGuard no_grad;
    Tensor<float> all(Shape{cache.patches.rows(), cache.patches.cols()}, cache.patches);
    targets = encode(teacher, arch, all).value();
  }
  result.initial_loss = refine_pool_loss(result.adapted, teacher, task);

  AdamW<float> opt(adapter_parameters(result.adapted), {.lr = options.lr});
  Rng rng(mix_seed(seed, "batches"));
  const int n = static_cast<int>(task.train.size());
  const Index t = arch.tokens();
  for (int it = 0; it < options.iters; ++it) {
    const auto idx = draw_indices(rng, n, options.batch);
    Matrix<float> target(t * static_cast<Index>(idx.size()), arch.width);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      target.middleRows(static_cast<Index>(i) * t, t) = targets.middleRows(idx[i] * t, t);
    }
    Shape target_shape{target.rows(), target.cols()};
    FeatureMap<float> target_map{Tensor<float>(std::move(target_shape), std::move(target)), "e_mid"};
    Tensor<float> loss =
        refine_loss<float>({adapted_encode(result.adapted, cache.batch(idx)), "adapted"}, target_map);
    opt.zero_grad();
    loss.backward();
    opt.step();
    result.loss_history.push_back(loss.item());
  }
  result.final_loss = refine_pool_loss(result.adapted, teacher, task);
  result.prev_hash_after = encoder_hash(result.adapted.base);
  result.mid_hash_after = encoder_hash(teacher);
  return result;
}

ModelState<float> reparameterize(const AdaptedEncoder<float>& adapted, const ModelState<float>& m_mid) {
  ModelState<float> out = m_mid;
  out.encoder = merge(adapted);
  return out;
}

void calibrate_decoder(ModelState<float>& model, const TaskDataset& task, int iters, int batch,
                       double lr, std::uint64_t seed) {
  AdamW<float> opt(named_parameters(model, {Group::decoder, Group::seg_head}), {.lr = lr});
  const PatchCache cache(model.arch, task.train, true);
  Matrix<float> features;
  {
    NoGradGuard no_grad;
    Tensor<float> all(Shape{cache.patches.rows(), cache.patches.cols()}, cache.patches);
    features = encode(model.encoder, model.arch, all).value();
  }
  Rng rng(seed);
  const Index t = model.arch.tokens();
  const int n = static_cast<int>(task.train.size());
  for (int it = 0; it < iters; ++it) {
    const auto idx = draw_indices(rng, n, batch);
    Matrix<float> f(t * static_cast<Index>(idx.size()), model.arch.width);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      f.middleRows(static_cast<Index>(i) * t, t) = features.middleRows(idx[i] * t, t);
    }
    Shape shape{f.rows(), f.cols()};
    Tensor<float> logits = decode_cells(model, Tensor<float>(std::move(shape), std::move(f)));
    auto loss = seg_loss(logits, cache.batch_labels(idx));
    opt.zero_grad();
    loss.total.backward();
    opt.step();
  }
}

// ---------------------------------------------------------------------------

double RunReport::mean_final_dice() const {
  std::vector<double> v;
  for (const auto& t : tasks) v.push_back(t.final.mean_dice);
  return mean_of(v);
}

double RunReport::mean_final_hd95() const {
  std::vector<double> v;
  for (const auto& t : tasks) v.push_back(t.final.mean_hd95);
  return mean_of(v);
}

double RunReport::mean_mid_dice() const {
  std::vector<double> v;
  for (const auto& t : tasks) v.push_back(t.mid.mean_dice);
  return mean_of(v);
}

namespace {

std::string pretrain_key(const PipelineConfig& cfg) {
  json j = to_json(cfg);
  json key = {{"arch", j["arch"]},         {"pretrain", j["pretrain"]},
              {"iters", cfg.iters_pretrain}, {"lr", cfg.lr_pretrain},
              {"batch", cfg.batch_size},   {"mask_ratio", cfg.mask_ratio},
              {"seed", cfg.master_seed}};
  return hex64(fnv1a(key.dump()));
}

std::uint64_t stage_seed(const PipelineConfig& cfg, const std::string& stage, const std::string& task) {
  return mix_seed(mix_seed(cfg.master_seed, stage), task);
}

json fft_stats_json(const FineTuneStats& s) {
  json out = {{"seg_loss_first", s.seg_loss.empty() ? 0.0 : s.seg_loss.front()},
              {"seg_loss_last", s.seg_loss.empty() ? 0.0 : s.seg_loss.back()},
              {"kd_steps", s.kd_loss.size()},
              {"final_kd_loss", s.final_kd_loss}};
  // Without KD there is no teacher to fingerprint.
  if (!s.kd_loss.empty()) {
    out["teacher_prev_hash_before"] = hex64(s.teacher_hash_before);
    out["teacher_prev_hash_after"] = hex64(s.teacher_hash_after);
  }
  return out;
}

}  // namespace

ModelState<float> obtain_m0(const PipelineConfig& cfg, const fs::path& dir) {
  const fs::path path = dir / ("m0_" + pretrain_key(cfg) + ".sqft");
  ArchMeta arch = cfg.arch;
  if (fs::exists(path)) {
    spdlog::info("loading M_0 from {}", path.string());
    return load_model(path, arch);
  }
  const TaskDataset corpus = generate_task(pretrain_corpus_spec(cfg));
  PretrainStats stats;
  const auto t0 = std::chrono::steady_clock::now();
  ModelState<float> m0 = pretrain_ssl(arch, corpus, cfg.iters_pretrain, cfg.lr_pretrain,
                                      cfg.batch_size, cfg.mask_ratio,
                                      mix_seed(cfg.master_seed, "pretrain"), &stats);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  spdlog::info("pretrained M_0: val SSL loss {:.5f} -> {:.5f} ({:.1f}s)", stats.val_loss_init,
               stats.val_loss_final, secs);
  fs::create_directories(dir);
  save_model(path, m0);
  write_json(path.string() + ".json", {{"val_loss_init", stats.val_loss_init},
                                       {"val_loss_final", stats.val_loss_final},
                                       {"iters", cfg.iters_pretrain}});
  return m0;
}

std::vector<double> obtain_mds_scores(const PipelineConfig& cfg, const ModelState<float>& m0,
                                      const TaskDataset& task, const fs::path& dir) {
  json key = {{"m0", pretrain_key(cfg)},
              {"task", task.spec},
              {"runs", cfg.mds_runs},
              {"mask_ratio", cfg.mask_ratio}};
  const fs::path path = dir / ("mds_scores_" + task.spec.task_id + "_" + hex64(fnv1a(key.dump())) + ".json");
  if (fs::exists(path)) return read_json(path).at("scores").get<std::vector<double>>();
  const auto t0 = std::chrono::steady_clock::now();
  auto scores = mds_scores(m0, task, cfg.mds_runs, stage_seed(cfg, "mds", task.spec.task_id),
                           cfg.mask_ratio);
  spdlog::info("MDS scores for {} ({} samples x {} runs) in {:.1f}s", task.spec.task_id,
               scores.size(), cfg.mds_runs,
               std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
  fs::create_directories(dir);
  write_json(path, {{"task_id", task.spec.task_id}, {"scores", scores}});
  return scores;
}

std::vector<std::string> metrics_rows(const RunReport& report, const std::vector<TaskSpec>& tasks) {
  std::vector<std::string> rows;
  const std::string strategy = to_string(report.strategy);
  const std::string seed = std::to_string(report.seed);
  auto row = [&](std::size_t t, std::size_t s, const char* tag, const EvalResult& r) {
    rows.push_back(strategy + "," + tasks[t].task_id + "," + tasks[s].task_id + "," + tag + "," +
                   format_number(r.mean_dice) + "," + format_number(r.mean_hd95) + "," + seed);
  };
  for (std::size_t t = 0; t < report.tasks.size(); ++t) {
    for (std::size_t s = 0; s <= t; ++s) row(t, s, "final", report.transfer.grid[t][s]);
    row(t, t, "mid", report.tasks[t].mid);
  }
  return rows;
}

RunReport run_sequence(const PipelineConfig& cfg, const fs::path& run_dir, const RunOptions& options) {
  cfg.validate();
  fs::create_directories(run_dir);
  const fs::path shared = options.shared_dir.value_or(run_dir);
  const std::string hash = hex64(config_hash(cfg));
  write_json(run_dir / "config.json", to_json(cfg));

  const fs::path manifest_path = run_dir / "manifest.json";
  json manifest;
  if (options.resume && fs::exists(manifest_path)) {
    manifest = read_json(manifest_path);
    if (manifest.value("config_hash", "") != hash) {
      throw ConfigError("cannot resume " + run_dir.string() + ": config differs from the manifest");
    }
    spdlog::info("resuming {} ({} stages done)", run_dir.string(), manifest["completed_stages"].size());
  } else {
    manifest = {{"config_hash", hash},
                {"strategy", to_string(cfg.strategy)},
                {"master_seed", cfg.master_seed},
                {"created", now_iso8601()},
                {"completed_stages", json::array()},
                {"checkpoints", json::object()},
                {"stages", json::object()}};
  }
  auto done = [&](const std::string& stage) {
    for (const auto& s : manifest["completed_stages"]) {
      if (s == stage) return true;
    }
    return false;
  };
  auto mark = [&](const std::string& stage) {
    if (!done(stage)) manifest["completed_stages"].push_back(stage);
    manifest["updated"] = now_iso8601();
    write_json(manifest_path, manifest);
  };
  json timing = manifest.value("timing", json::object());
  auto clock = [] { return std::chrono::steady_clock::now(); };
  auto seconds = [](auto a, auto b) { return std::chrono::duration<double>(b - a).count(); };

  const auto specs = resolved_tasks(cfg);
  std::vector<TaskDataset> data;
  for (const auto& s : specs) data.push_back(generate_task(s));

  const auto t_pre = clock();
  const ModelState<float> m0 = obtain_m0(cfg, shared);
  timing["pretrain"] = seconds(t_pre, clock());
  manifest["checkpoints"]["m0"] = fs::relative(shared / ("m0_" + pretrain_key(cfg) + ".sqft"), run_dir).string();
  mark("pretrain");

  const StageToggles toggles = toggles_for(cfg.strategy);
  RunReport report;
  report.strategy = cfg.strategy;
  report.seed = cfg.master_seed;

  Buffer buffer(cfg.K);
  ModelState<float> prev = m0;
  std::vector<ModelState<float>> mids, finals;
  for (std::size_t t = 0; t < data.size(); ++t) {
    const TaskDataset& task = data[t];
    const std::string id = task.spec.task_id;
    const std::string tag = "task" + std::to_string(t + 1) + "_" + id;
    const fs::path dir = run_dir / tag;
    fs::create_directories(dir);
    json& stage_info = manifest["stages"][id];
    TaskRecord record;
    record.task_id = id;
    ArchMeta task_arch = cfg.arch;
    task_arch.classes = task.spec.class_count;

    // 1. Fine-tuning (KD-constrained for t > 1 when enabled).
    ModelState<float> base = toggles.chain ? prev : m0;
    ModelState<float> m_mid;
    const auto t_fft = clock();
    if (done(tag + ".fft")) {
      m_mid = load_model(dir / "m_mid.sqft", task_arch);
    } else {
      ModelState<float> m_init = base;
      reinit_seg_head(m_init, task.spec.class_count, stage_seed(cfg, "head", id));
      const Buffer* pool = nullptr;
      Buffer task_pool(task.spec.n_train);
      if (t > 0 && toggles.kd) {
        if (toggles.buffer != BufferSource::none) {
          pool = &buffer;
        } else {
          std::vector<BufferEntry> all;
          for (const auto& s : task.train) all.push_back({s, id, 0.0});
          task_pool.add_task(id, std::move(all), task.spec.n_train);
          pool = &task_pool;
        }
      }
      FineTuneOptions fo{.iters = cfg.iters_fft,
                         .batch = cfg.batch_size,
                         .lr = cfg.lr_fft,
                         .weight_decay = cfg.weight_decay,
                         .kd_every = pool ? cfg.kd_every : 0,
                         .mixing = cfg.buffer_mixing};
      if (pool) save_checkpoint(dir / "teacher_prev.sqft", named_parameters(m_init.encoder));
      m_mid = kd_fft(m_init, task, pool, fo, stage_seed(cfg, "fft", id), &record.fft);
      save_model(dir / "m_mid.sqft", m_mid);
      stage_info["fft"] = fft_stats_json(record.fft);
      stage_info["fft"]["kd_pool"] = pool ? (pool == &buffer ? "buffer" : "task") : "none";
      manifest["checkpoints"][tag + "/m_mid"] = tag + "/m_mid.sqft";
      timing[tag + ".fft"] = seconds(t_fft, clock());
      mark(tag + ".fft");
    }

    // 2-3. LoRA distillation into E_{t-1} and merge.
    ModelState<float> m_final;
    if (toggles.lora_refine) {
      const auto t_lora = clock();
      if (done(tag + ".lora")) {
        m_final = load_model(dir / "m_final.sqft", task_arch);
      } else {
        save_checkpoint(dir / "teacher_mid.sqft", named_parameters(m_mid.encoder));
        if (!fs::exists(dir / "teacher_prev.sqft")) {
          save_checkpoint(dir / "teacher_prev.sqft", named_parameters(base.encoder));
        }
        LoraKdOptions lo{.rank = cfg.lora_rank,
                         .iters = cfg.iters_lora_kd,
                         .batch = cfg.batch_size,
                         .lr = cfg.lr_lora,
                         .scale = cfg.lora_scale};
        record.lora = lora_kd(base.encoder, m_mid.encoder, task_arch, task, lo, stage_seed(cfg, "lora", id));
        m_final = reparameterize(record.lora->adapted, m_mid);
        if (cfg.decoder_calibration) {
          calibrate_decoder(m_final, task, cfg.iters_calibration, cfg.batch_size, cfg.lr_fft,
                            stage_seed(cfg, "calibration", id));
        }
        save_checkpoint(dir / "adapters.sqft", adapter_parameters(record.lora->adapted));
        save_model(dir / "m_final.sqft", m_final);
        const auto& l = *record.lora;
        stage_info["lora"] = {{"initial_refine_loss", l.initial_loss},
                              {"final_refine_loss", l.final_loss},
                              {"teacher_prev_hash_before", hex64(l.prev_hash_before)},
                              {"teacher_prev_hash_after", hex64(l.prev_hash_after)},
                              {"teacher_mid_hash_before", hex64(l.mid_hash_before)},
                              {"teacher_mid_hash_after", hex64(l.mid_hash_after)}};
        manifest["checkpoints"][tag + "/m_final"] = tag + "/m_final.sqft";
        manifest["checkpoints"][tag + "/adapters"] = tag + "/adapters.sqft";
        timing[tag + ".lora"] = seconds(t_lora, clock());
        mark(tag + ".lora");
      }
    } else {
      m_final = m_mid;
      if (!done(tag + ".fft") || !fs::exists(dir / "m_final.sqft")) save_model(dir / "m_final.sqft", m_final);
      manifest["checkpoints"][tag + "/m_final"] = tag + "/m_final.sqft";
    }

    // 4. Buffer selection from D_t with M_0.
    if (toggles.buffer != BufferSource::none) {
      const auto t_sel = clock();
      const int k = std::min(cfg.K, static_cast<int>(task.train.size()));
      std::vector<BufferEntry> entries;
      if (toggles.buffer == BufferSource::mds) {
        const auto scores = obtain_mds_scores(cfg, m0, task, shared);
        entries = mds_select_from_scores(task, scores, k);
      } else {
        entries = random_select(task, k, stage_seed(cfg, "random_buffer", id));
      }
      buffer.add_task(id, std::move(entries), task.spec.n_train);
      write_json(dir / "buffer.json", buffer.to_json());
      timing[tag + ".select"] = seconds(t_sel, clock());
      mark(tag + ".select");
    }

    mids.push_back(m_mid);
    finals.push_back(m_final);
    report.tasks.push_back(std::move(record));
    prev = std::move(m_final);
    spdlog::info("[{} seed {}] finished {}", to_string(cfg.strategy), cfg.master_seed, tag);
  }

  // Evaluation: M_{t-mid} on its own task, and the transfer grid of M_t.
  const auto t_eval = clock();
  std::vector<Encoder<float>> encoders;
  std::vector<const TaskDataset*> task_ptrs;
  for (std::size_t t = 0; t < data.size(); ++t) {
    report.tasks[t].mid = evaluate(mids[t], data[t]);
    encoders.push_back(finals[t].encoder);
    task_ptrs.push_back(&data[t]);
  }
  report.transfer = transfer_matrix(encoders, finals, task_ptrs);
  for (std::size_t t = 0; t < data.size(); ++t) report.tasks[t].final = report.transfer.grid[t][t];
  timing["evaluate"] = seconds(t_eval, clock());

  std::string csv = std::string(kMetricsHeader) + "\n";
  for (const auto& r : metrics_rows(report, specs)) csv += r + "\n";
  write_file(run_dir / "metrics.csv", csv);
  std::string transfer = "model_t,task_s,dice,hd95\n";
  for (std::size_t t = 0; t < report.transfer.grid.size(); ++t) {
    for (std::size_t s = 0; s <= t; ++s) {
      const auto& r = report.transfer.grid[t][s];
      transfer += specs[t].task_id + "," + specs[s].task_id + "," + format_number(r.mean_dice) + "," +
                  format_number(r.mean_hd95) + "\n";
    }
  }
  write_file(run_dir / "transfer.csv", transfer);
  // Wall-clock numbers are not reproducible, so they live only in the manifest.
  manifest["timing"] = timing;
  mark("evaluate");
  return report;
}

// ---------------------------------------------------------------------------

AblationPlan ablation_plan_from_json(const json& doc) {
  AblationPlan plan;
  const json section = doc.contains("ablation") ? doc["ablation"] : json::object();
  if (section.contains("strategies")) {
    for (const auto& s : section["strategies"]) plan.strategies.push_back(parse_strategy(s.get<std::string>()));
  } else {
    plan.strategies = all_strategies();
  }
  if (section.contains("seeds")) {
    plan.seeds = section["seeds"].get<std::vector<std::uint64_t>>();
  } else {
    plan.seeds = {0};
  }
  if (plan.strategies.empty() || plan.seeds.empty()) {
    throw ConfigError("ablation: needs at least one strategy and one seed");
  }
  return plan;
}

std::vector<RunSummary> summarize_metrics(const std::string& csv) {
  struct Row {
    std::string task, eval, tag;
    double dice, hd95;
  };
  std::map<std::pair<std::string, std::uint64_t>, std::vector<Row>> runs;
  std::istringstream in(csv);
  std::string line;
  bool header = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (header) {
      if (line != kMetricsHeader) throw DataError("metrics: unexpected header '" + line + "'");
      header = false;
      continue;
    }
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 7) throw DataError("metrics: malformed row '" + line + "'");
    runs[{f[0], std::stoull(f[6])}].push_back({f[1], f[2], f[3], std::stod(f[4]), std::stod(f[5])});
  }
  std::vector<RunSummary> out;
  for (const auto& [key, rows] : runs) {
    RunSummary r;
    r.strategy = parse_strategy(key.first);
    r.seed = key.second;
    // Task order is the order of the diagonal final rows.
    std::vector<std::string> order;
    std::map<std::pair<std::string, std::string>, double> final_dice;
    std::vector<double> fd, fh, md;
    for (const auto& row : rows) {
      if (row.tag == "final") {
        final_dice[{row.task, row.eval}] = row.dice;
        if (row.task == row.eval) {
          order.push_back(row.task);
          fd.push_back(row.dice);
          fh.push_back(row.hd95);
        }
      } else if (row.tag == "mid") {
        md.push_back(row.dice);
      }
    }
    r.final_dice = mean_of(fd);
    r.final_hd95 = mean_of(fh);
    r.mid_dice = mean_of(md);
    std::vector<double> bwt;
    for (std::size_t s = 0; s + 1 < order.size(); ++s) {
      const auto it = final_dice.find({order.back(), order[s]});
      if (it == final_dice.end()) throw DataError("metrics: missing transfer row for " + order[s]);
      bwt.push_back(it->second - final_dice.at({order[s], order[s]}));
    }
    r.bwt = mean_of(bwt);
    out.push_back(r);
  }
  return out;
}

std::vector<StrategySummary> aggregate(const std::vector<RunSummary>& runs) {
  std::vector<StrategySummary> out;
  for (Strategy s : all_strategies()) {
    std::vector<double> fd, fh, md, bwt;
    for (const auto& r : runs) {
      if (r.strategy != s) continue;
      fd.push_back(r.final_dice);
      fh.push_back(r.final_hd95);
      md.push_back(r.mid_dice);
      bwt.push_back(r.bwt);
    }
    if (fd.empty()) continue;
    StrategySummary row;
    row.strategy = s;
    row.runs = static_cast<int>(fd.size());
    row.final_dice = mean_of(fd);
    if (fd.size() > 1) {
      double ss = 0.0;
      for (double v : fd) ss += (v - row.final_dice) * (v - row.final_dice);
      row.final_dice_sd = std::sqrt(ss / static_cast<double>(fd.size() - 1));
    }
    row.final_hd95 = mean_of(fh);
    row.mid_dice = mean_of(md);
    row.bwt = mean_of(bwt);
    out.push_back(row);
  }
  return out;
}

std::string summary_csv(const std::vector<StrategySummary>& rows) {
  std::string out = "strategy,runs,final_dice,final_dice_sd,final_hd95,mid_dice,bwt\n";
  for (const auto& r : rows) {
    out += to_string(r.strategy) + "," + std::to_string(r.runs) + "," + format_number(r.final_dice) + "," +
           format_number(r.final_dice_sd) + "," + format_number(r.final_hd95) + "," +
           format_number(r.mid_dice) + "," + format_number(r.bwt) + "\n";
  }
  return out;
}

std::vector<StrategySummary> run_ablation(const PipelineConfig& base, const AblationPlan& plan,
                                          const fs::path& out_dir, bool resume, int workers) {
  base.validate();
  fs::create_directories(out_dir);
  struct Job {
    PipelineConfig cfg;
    fs::path dir, shared;
  };
  std::vector<Job> jobs;
  for (std::uint64_t seed : plan.seeds) {
    const fs::path shared = out_dir / "shared" / ("seed" + std::to_string(seed));
    // Shared artifacts are produced up front so workers only read them.
    PipelineConfig cfg = base;
    cfg.master_seed = seed;
    const ModelState<float> m0 = obtain_m0(cfg, shared);
    const bool any_mds = std::any_of(plan.strategies.begin(), plan.strategies.end(), [](Strategy s) {
      return toggles_for(s).buffer == BufferSource::mds;
    });
    if (any_mds) {
      for (const auto& spec : resolved_tasks(cfg)) obtain_mds_scores(cfg, m0, generate_task(spec), shared);
    }
    for (Strategy s : plan.strategies) {
      cfg.strategy = s;
      jobs.push_back({cfg, out_dir / to_string(s) / ("seed" + std::to_string(seed)), shared});
    }
  }

  auto run_job = [&](const Job& job) {
    const bool finished = resume && fs::exists(job.dir / "metrics.csv") && fs::exists(job.dir / "manifest.json");
    if (finished && read_json(job.dir / "manifest.json").value("config_hash", "") == hex64(config_hash(job.cfg))) {
      spdlog::info("skipping finished run {}", job.dir.string());
      return;
    }
    run_sequence(job.cfg, job.dir, {.resume = resume, .shared_dir = job.shared});
  };

  if (workers <= 1) {
    for (const auto& job : jobs) run_job(job);
  } else {
    std::size_t next = 0;
    int running = 0;
    bool failed = false;
    auto reap = [&] {
      int status = 0;
      if (::wait(&status) > 0) {
        --running;
        if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) failed = true;
      }
    };
    while (next < jobs.size()) {
      if (running >= workers) reap();
      const pid_t pid = ::fork();
      if (pid < 0) throw Error("run_ablation: fork failed");
      if (pid == 0) {
        int code = 0;
        try {
          run_job(jobs[next]);
        } catch (const std::exception& e) {
          spdlog::error("{}: {}", jobs[next].dir.string(), e.what());
          code = 1;
        }
        std::fflush(nullptr);
        ::_exit(code);
      }
      ++running;
      ++next;
    }
    while (running > 0) reap();
    if (failed) throw Error("run_ablation: at least one worker failed");
  }

  std::string all = std::string(kMetricsHeader) + "\n";
  for (const auto& job : jobs) {
    const std::string text = read_file(job.dir / "metrics.csv");
    all += text.substr(text.find('\n') + 1);
  }
  write_file(out_dir / "metrics.csv", all);
  auto rows = aggregate(summarize_metrics(all));
  write_file(out_dir / "summary.csv", summary_csv(rows));
  return rows;
}

}  // namespace seqft
