#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "seqft/checkpoint.hpp"
#include "seqft/pipeline.hpp"
#include "seqft/ssl.hpp"

using namespace seqft;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

PipelineConfig tiny_config(int tasks = 2) {
  PipelineConfig cfg = default_config();
  cfg.tasks.resize(static_cast<std::size_t>(tasks));
  for (auto& t : cfg.tasks) {
    t.n_train = 6;
    t.n_test = 4;
  }
  cfg.pretrain.n_train = 16;
  cfg.pretrain.n_val = 4;
  cfg.K = 2;
  cfg.mds_runs = 4;
  cfg.iters_pretrain = 30;
  cfg.iters_fft = 20;
  cfg.iters_lora_kd = 20;
  cfg.batch_size = 4;
  return cfg;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("seqft_pipeline_" + name);
  fs::remove_all(p);
  return p;
}

TaskDataset small_task(int n_train = 12, std::uint64_t seed = 5, ShapeFamily family = ShapeFamily::disk) {
  TaskSpec s;
  s.task_id = "small";
  s.shape_family = family;
  s.n_train = n_train;
  s.n_test = 4;
  s.seed = seed;
  return generate_task(s);
}

Buffer buffer_of(const TaskDataset& d, int k) {
  Buffer b(k);
  std::vector<BufferEntry> e;
  for (int i = 0; i < k; ++i) e.push_back({d.train[i], d.spec.task_id, 0.0});
  b.add_task(d.spec.task_id, e, d.spec.n_train);
  return b;
}

void assign_by_name(const NamedTensors<float>& dst, const NamedTensors<float>& src) {
  REQUIRE(dst.size() == src.size());
  for (std::size_t i = 0; i < dst.size(); ++i) {
    REQUIRE(dst[i].first == src[i].first);
    Tensor<float> t = dst[i].second;
    t.data() = src[i].second.value();
  }
}

bool same(const NamedTensors<float>& a, const NamedTensors<float>& b) {
  return encode_checkpoint(a) == encode_checkpoint(b);
}

}  // namespace

TEST_CASE("pretraining lowers the SSL loss, is deterministic, and starts near the variance baseline") {
  const auto cfg = tiny_config();
  const auto corpus = generate_task(pretrain_corpus_spec(cfg));
  PretrainStats stats;
  const auto m0 = pretrain_ssl(cfg.arch, corpus, 200, 1e-3, 8, 0.6, 11, &stats);
  CHECK(stats.val_loss_final < stats.val_loss_init);
  const auto again = pretrain_ssl(cfg.arch, corpus, 200, 1e-3, 8, 0.6, 11);
  CHECK(same(named_parameters(m0), named_parameters(again)));

  double sum = 0.0, sq = 0.0, n = 0.0;
  for (const auto& s : corpus.test) {
    const auto v = s.image.value().cast<double>();
    sum += v.sum();
    sq += v.squaredNorm();
    n += static_cast<double>(v.size());
  }
  const double variance = sq / n - (sum / n) * (sum / n);
  CHECK(stats.val_loss_init == doctest::Approx(variance).epsilon(0.5));
}

TEST_CASE("MDS selection matches exhaustive re-scoring") {
  const auto task = small_task(16);
  const auto m0 = init_model<float>(ArchMeta{}, 2);
  const std::uint64_t seed = 99;
  const auto chosen = mds_select(m0, task, 5, 8, seed);
  std::vector<std::pair<double, int>> scored;
  for (const auto& s : task.train) {
    const auto runs = ssl_run_losses(m0, s, 8, sample_seed(seed, s.task_id, s.index));
    double acc = 0.0;
    for (double r : runs) acc += r;
    scored.emplace_back(acc / 8.0, s.index);
  }
  std::sort(scored.begin(), scored.end());
  REQUIRE(chosen.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(chosen[i].sample.index == scored[i].second);
    CHECK(chosen[i].avg_ssl_loss == doctest::Approx(scored[i].first).epsilon(1e-12));
  }
}

TEST_CASE("kd_fft: disabled KD reduces to plain fine-tuning, teacher stays frozen, KD lowers pool loss") {
  const auto task = small_task();
  auto m = init_model<float>(ArchMeta{}, 3);
  const auto pool = buffer_of(small_task(8, 77, ShapeFamily::ring), 4);
  FineTuneOptions plain{.iters = 25, .batch = 4, .lr = 1e-3, .weight_decay = 0.0, .kd_every = 0};
  FineTuneOptions with_kd = plain;
  with_kd.kd_every = 1;

  const auto a = kd_fft(m, task, nullptr, plain, 5);
  const auto b = kd_fft(m, task, &pool, plain, 5);
  CHECK(same(named_parameters(a), named_parameters(b)));

  FineTuneStats off, on;
  kd_fft(m, task, &pool, plain, 5, &off);
  const auto c = kd_fft(m, task, &pool, with_kd, 5, &on);
  CHECK(on.teacher_hash_before == on.teacher_hash_after);
  CHECK(on.teacher_hash_before == encoder_hash(m.encoder));
  CHECK(on.kd_loss.size() == 25);
  CHECK(on.final_kd_loss <= off.final_kd_loss);

  TaskDataset empty = task;
  empty.train.clear();
  CHECK_THROWS_AS(kd_fft(m, empty, nullptr, plain, 5), ConfigError);
}

TEST_CASE("lora_kd: identical teachers keep adapters near zero") {
  const auto task = small_task();
  const auto m = init_model<float>(ArchMeta{}, 4);
  const auto r = lora_kd(m.encoder, m.encoder, m.arch, task, {.rank = 2, .iters = 30, .batch = 4, .lr = 1e-2}, 3);
  CHECK(r.initial_loss == 0.0);
  CHECK(r.final_loss <= 1e-6);
  for (const auto& a : r.adapted.adapters) CHECK(a.delta().norm() < 1e-3);
  CHECK(r.prev_hash_before == r.prev_hash_after);
  CHECK(r.mid_hash_before == r.mid_hash_after);
}

TEST_CASE("lora_kd: refine loss falls on a smoothed window and ends below the initial gap") {
  const auto task = small_task();
  const auto m = init_model<float>(ArchMeta{}, 4);
  const auto mid = kd_fft(m, task, nullptr, {.iters = 40, .batch = 4, .lr = 3e-3}, 6);
  const int iters = 200;
  const auto r = lora_kd(m.encoder, mid.encoder, m.arch, task, {.rank = 2, .iters = iters, .batch = 4, .lr = 1e-2}, 7);
  CHECK(r.final_loss < r.initial_loss);
  std::vector<double> windows;
  for (int w = 0; w < 4; ++w) {
    double acc = 0.0;
    for (int i = w * 50; i < (w + 1) * 50; ++i) acc += r.loss_history[static_cast<std::size_t>(i)];
    windows.push_back(acc / 50);
  }
  for (std::size_t w = 1; w < windows.size(); ++w) CHECK(windows[w] < windows[w - 1]);
  CHECK(r.mid_hash_before == r.mid_hash_after);
  CHECK(r.prev_hash_before == r.prev_hash_after);

  ArchMeta other;
  other.width = 16;
  CHECK_THROWS_AS(lora_kd(m.encoder, init_model<float>(other, 1).encoder, m.arch, task, {}, 1), ConfigError);
}

TEST_CASE("reparameterize: zero adapters are a no-op and merged features match") {
  const auto m = init_model<float>(ArchMeta{}, 5);
  auto mid = m;
  reinit_seg_head(mid, 2, 8);
  const auto zero = inject(m.encoder, m.arch, 2, 1);
  const auto out = reparameterize(zero, mid);
  CHECK(same(named_parameters(out.encoder), named_parameters(m.encoder)));
  CHECK(same(named_parameters(out, {Group::decoder, Group::seg_head}),
             named_parameters(mid, {Group::decoder, Group::seg_head})));
  CHECK(parameter_count(named_parameters(out)) == parameter_count(named_parameters(mid)));

  auto trained = zero;
  Rng rng(2);
  for (auto& a : trained.adapters) {
    for (Index i = 0; i < a.B.tensor().size(); ++i) a.B.tensor().data().data()[i] = float(rng.uniform(-0.1, 0.1));
  }
  const auto merged = reparameterize(trained, mid);
  const auto task = small_task(2);
  const auto& img = task.train[0].image;
  const auto x = adapted_forward(trained, img).values.value();
  const auto y = forward_features(merged, img).values.value();
  CHECK(((x - y).array().abs() / (1.0f + x.array().abs())).maxCoeff() < 1e-5f);
}

TEST_CASE("single-task medseqft run equals fine-tuning + distillation + merge") {
  auto cfg = tiny_config(1);
  const fs::path dir = scratch("single");
  const auto report = run_sequence(cfg, dir);
  REQUIRE(report.tasks.size() == 1);
  CHECK(report.transfer.tasks() == 1);
  const fs::path task_dir = dir / ("task1_" + cfg.tasks[0].task_id);
  for (const char* f : {"m_mid.sqft", "m_final.sqft", "adapters.sqft", "teacher_prev.sqft", "teacher_mid.sqft", "buffer.json"}) {
    CHECK(fs::exists(task_dir / f));
  }
  // m_final encoder = merge(E_0, stored adapters).
  const ArchMeta arch = cfg.arch;
  const auto teacher = load_checkpoint(task_dir / "teacher_prev.sqft");
  ModelState<float> holder = init_model<float>(arch, 0);
  assign_by_name(named_parameters(holder.encoder), teacher);
  auto adapted = inject(holder.encoder, arch, 2, 0);
  assign_by_name(adapter_parameters(adapted), load_checkpoint(task_dir / "adapters.sqft"));
  const auto final_model = load_model(task_dir / "m_final.sqft", arch);
  CHECK(same(named_parameters(merge(adapted)), named_parameters(final_model.encoder)));
  const auto mid_model = load_model(task_dir / "m_mid.sqft", arch);
  CHECK(same(named_parameters(final_model, {Group::decoder, Group::seg_head}),
             named_parameters(mid_model, {Group::decoder, Group::seg_head})));
  const auto m0 = obtain_m0(cfg, dir);
  CHECK(same(named_parameters(m0.encoder), teacher));

  const auto manifest = json::parse(read_file(dir / "manifest.json"));
  CHECK(manifest["config_hash"] == hex64(config_hash(cfg)));
  CHECK(manifest["completed_stages"].size() >= 4);
  const auto& stage = manifest["stages"][cfg.tasks[0].task_id];
  CHECK(stage["fft"]["kd_pool"] == "none");
  CHECK_FALSE(stage["fft"].contains("teacher_prev_hash_before"));
  CHECK(stage["lora"]["teacher_prev_hash_before"] == hex64(checkpoint_hash(teacher)));
  CHECK(stage["lora"]["teacher_prev_hash_after"] == hex64(checkpoint_hash(teacher)));
  fs::remove_all(dir);
}

TEST_CASE("runs are deterministic and resume reproduces downstream checkpoints") {
  auto cfg = tiny_config(2);
  const fs::path a = scratch("a"), b = scratch("b");
  run_sequence(cfg, a);
  run_sequence(cfg, b);
  CHECK(read_file(a / "metrics.csv") == read_file(b / "metrics.csv"));
  CHECK(read_file(a / "transfer.csv") == read_file(b / "transfer.csv"));

  // Drop everything after the first task's fine-tuning stage and resume.
  auto manifest = json::parse(read_file(b / "manifest.json"));
  json kept = json::array();
  for (const auto& s : manifest["completed_stages"]) {
    kept.push_back(s);
    if (s.get<std::string>().find(".fft") != std::string::npos) break;
  }
  manifest["completed_stages"] = kept;
  write_file(b / "manifest.json", manifest.dump(2));
  const std::string task1 = "task1_" + cfg.tasks[0].task_id, task2 = "task2_" + cfg.tasks[1].task_id;
  fs::remove(b / task1 / "m_final.sqft");
  fs::remove_all(b / task2);
  fs::remove(b / "metrics.csv");
  run_sequence(cfg, b, {.resume = true, .shared_dir = std::nullopt});
  for (const auto& f : {task1 + "/m_final.sqft", task2 + "/m_mid.sqft", task2 + "/m_final.sqft"}) {
    CHECK(read_file(a / f) == read_file(b / f));
  }
  CHECK(read_file(a / "metrics.csv") == read_file(b / "metrics.csv"));

  auto changed = cfg;
  changed.K = 3;
  CHECK_THROWS_AS(run_sequence(changed, b, {.resume = true, .shared_dir = std::nullopt}), ConfigError);
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("fft_parallel starts every task from M_0 and keeps no buffer") {
  auto cfg = tiny_config(2);
  cfg.strategy = Strategy::fft_parallel;
  const fs::path dir = scratch("fft");
  run_sequence(cfg, dir);
  const std::string task2 = "task2_" + cfg.tasks[1].task_id;
  CHECK_FALSE(fs::exists(dir / task2 / "buffer.json"));
  CHECK_FALSE(fs::exists(dir / task2 / "adapters.sqft"));
  CHECK_FALSE(fs::exists(dir / task2 / "teacher_prev.sqft"));
  // Same seed, vanilla chaining differs only from the second task on.
  auto vanilla = cfg;
  vanilla.strategy = Strategy::seqft_vanilla;
  const fs::path vdir = scratch("vanilla");
  run_sequence(vanilla, vdir, {.resume = false, .shared_dir = dir});
  const std::string task1 = "task1_" + cfg.tasks[0].task_id;
  CHECK(read_file(dir / task1 / "m_mid.sqft") == read_file(vdir / task1 / "m_mid.sqft"));
  CHECK(read_file(dir / task2 / "m_mid.sqft") != read_file(vdir / task2 / "m_mid.sqft"));
  fs::remove_all(dir);
  fs::remove_all(vdir);
}

TEST_CASE("metrics summary parsing") {
  const std::string csv = std::string(kMetricsHeader) + "\n" +
                          "medseqft,a,a,final,80,2,0\n"
                          "medseqft,a,a,mid,82,2,0\n"
                          "medseqft,b,a,final,70,3,0\n"
                          "medseqft,b,b,final,90,1,0\n"
                          "medseqft,b,b,mid,91,1,0\n";
  const auto runs = summarize_metrics(csv);
  REQUIRE(runs.size() == 1);
  CHECK(runs[0].final_dice == 85.0);
  CHECK(runs[0].mid_dice == 86.5);
  CHECK(runs[0].bwt == -10.0);
  CHECK(runs[0].final_hd95 == 1.5);
  const auto agg = aggregate(runs);
  REQUIRE(agg.size() == 1);
  CHECK(agg[0].runs == 1);
  CHECK_THROWS_AS(summarize_metrics("bad header\n"), DataError);
}
