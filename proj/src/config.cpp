#include "seqft/config.hpp"

#include <set>

namespace seqft {

namespace {

using nlohmann::json;

const std::vector<std::pair<Strategy, const char*>>& strategy_names() {
  static const std::vector<std::pair<Strategy, const char*>> names = {
      {Strategy::fft_parallel, "fft_parallel"},
      {Strategy::seqft_vanilla, "seqft_vanilla"},
      {Strategy::seqft_random_buffer, "seqft_random_buffer"},
      {Strategy::seqft_mds_only, "seqft_mds_only"},
      {Strategy::seqft_kgrft_only, "seqft_kgrft_only"},
      {Strategy::medseqft, "medseqft"},
  };
  return names;
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown config key '" + where + key + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config key '") + key + "': " + e.what());
  }
}

}  // namespace

std::string to_string(Strategy s) {
  for (const auto& [v, n] : strategy_names()) {
    if (v == s) return n;
  }
  return "?";
}

Strategy parse_strategy(const std::string& name) {
  for (const auto& [v, n] : strategy_names()) {
    if (name == n) return v;
  }
  throw ConfigError("unknown strategy '" + name + "'");
}

const std::vector<Strategy>& all_strategies() {
  static const std::vector<Strategy> all = [] {
    std::vector<Strategy> v;
    for (const auto& [s, n] : strategy_names()) v.push_back(s);
    return v;
  }();
  return all;
}

StageToggles toggles_for(Strategy s) {
  switch (s) {
    case Strategy::fft_parallel: return {false, BufferSource::none, false, false};
    case Strategy::seqft_vanilla: return {true, BufferSource::none, false, false};
    case Strategy::seqft_random_buffer: return {true, BufferSource::random, true, false};
    case Strategy::seqft_mds_only: return {true, BufferSource::mds, true, false};
    // Without a replay buffer the KD term distills on the current task's
    // training images.
    case Strategy::seqft_kgrft_only: return {true, BufferSource::none, true, true};
    case Strategy::medseqft: return {true, BufferSource::mds, true, true};
  }
  throw ConfigError("unhandled strategy");
}

std::vector<TaskSpec> default_task_suite() {
  struct Row {
    const char* id;
    ShapeFamily family;
    int classes;
    double shift;
    int n_train;
  };
  const Row rows[] = {
      {"t1_disk", ShapeFamily::disk, 2, 0.00, 104 / 4},
      {"t2_ring", ShapeFamily::ring, 2, 0.10, 242 / 4},
      {"t3_bar", ShapeFamily::bar, 3, 0.20, 224 / 4},
      {"t4_blob", ShapeFamily::blob, 2, 0.30, 100 / 4},
      {"t5_checker", ShapeFamily::checker, 2, 0.40, 50 / 4},
  };
  std::vector<TaskSpec> out;
  std::uint64_t seed = 101;
  for (const auto& r : rows) {
    TaskSpec t;
    t.task_id = r.id;
    t.class_count = r.classes;
    t.shape_family = r.family;
    t.intensity_shift = r.shift;
    t.noise_sigma = 0.15;
    t.n_train = r.n_train;
    t.n_test = 24;
    t.seed = seed++;
    out.push_back(t);
  }
  return out;
}

PipelineConfig default_config() {
  PipelineConfig cfg;
  cfg.tasks = default_task_suite();
  return cfg;
}

void PipelineConfig::validate() const {
  arch.validate();
  if (tasks.empty()) throw ConfigError("config needs at least one task");
  std::set<std::string> ids;
  for (const auto& t : tasks) {
    t.validate();
    if (!ids.insert(t.task_id).second) throw ConfigError("duplicate task_id '" + t.task_id + "'");
    if (t.image_size != arch.image_size) {
      throw ConfigError(t.task_id + ": image_size " + std::to_string(t.image_size) +
                        " differs from arch image_size " + std::to_string(arch.image_size));
    }
  }
  if (K < 1) throw ConfigError("K must be >= 1");
  if (mds_runs < 1) throw ConfigError("mds_runs must be >= 1");
  if (lora_rank < 1) throw ConfigError("lora_rank must be >= 1");
  if (mask_ratio <= 0.0 || mask_ratio >= 1.0) throw ConfigError("mask_ratio must be in (0, 1)");
  if (iters_pretrain < 0 || iters_fft < 1 || iters_lora_kd < 0 || iters_calibration < 0) {
    throw ConfigError("iteration counts must be non-negative (iters_fft >= 1)");
  }
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (lr_pretrain <= 0 || lr_fft <= 0 || lr_lora <= 0) throw ConfigError("learning rates must be positive");
  if (weight_decay < 0) throw ConfigError("weight_decay must be >= 0");
  if (kd_every < 0) throw ConfigError("kd_every must be >= 0 (0 disables KD)");
  if (pretrain.n_train < 1 || pretrain.n_val < 1) throw ConfigError("pretrain sizes must be >= 1");
}

json to_json(const PipelineConfig& cfg) {
  const ArchMeta& a = cfg.arch;
  json j;
  j["arch"] = {{"image_size", a.image_size},       {"in_channels", a.in_channels},
               {"patch_size", a.patch_size},       {"width", a.width},
               {"mlp_hidden", a.mlp_hidden},       {"encoder_depth", a.encoder_depth},
               {"decoder_depth", a.decoder_depth}, {"pixel_channels", a.pixel_channels},
               {"use_norm", a.use_norm},
               {"activation", a.activation == Activation::gelu ? "gelu" : "identity"}};
  j["tasks"] = cfg.tasks;
  j["pretrain"] = {{"n_train", cfg.pretrain.n_train},
                   {"n_val", cfg.pretrain.n_val},
                   {"noise_sigma", cfg.pretrain.noise_sigma}};
  j["K"] = cfg.K;
  j["mds_runs"] = cfg.mds_runs;
  j["lora_rank"] = cfg.lora_rank;
  j["lora_scale"] = cfg.lora_scale;
  j["mask_ratio"] = cfg.mask_ratio;
  j["iters_pretrain"] = cfg.iters_pretrain;
  j["iters_fft"] = cfg.iters_fft;
  j["iters_lora_kd"] = cfg.iters_lora_kd;
  j["iters_calibration"] = cfg.iters_calibration;
  j["batch_size"] = cfg.batch_size;
  j["lr_pretrain"] = cfg.lr_pretrain;
  j["lr_fft"] = cfg.lr_fft;
  j["lr_lora"] = cfg.lr_lora;
  j["weight_decay"] = cfg.weight_decay;
  j["kd_every"] = cfg.kd_every;
  j["buffer_mixing"] = to_string(cfg.buffer_mixing);
  j["decoder_calibration"] = cfg.decoder_calibration;
  j["strategy"] = to_string(cfg.strategy);
  j["master_seed"] = cfg.master_seed;
  return j;
}

PipelineConfig config_from_json(const json& j) {
  PipelineConfig cfg = default_config();
  reject_unknown(j,
                 {"arch", "tasks", "pretrain", "K", "mds_runs", "lora_rank", "lora_scale",
                  "mask_ratio", "iters_pretrain", "iters_fft", "iters_lora_kd", "iters_calibration",
                  "batch_size", "lr_pretrain", "lr_fft", "lr_lora", "weight_decay", "kd_every",
                  "buffer_mixing", "decoder_calibration", "strategy", "master_seed"},
                 "");
  if (j.contains("arch")) {
    const json& a = j.at("arch");
    reject_unknown(a,
                   {"image_size", "in_channels", "patch_size", "width", "mlp_hidden",
                    "encoder_depth", "decoder_depth", "pixel_channels", "use_norm", "activation"},
                   "arch.");
    read(a, "image_size", cfg.arch.image_size);
    read(a, "in_channels", cfg.arch.in_channels);
    read(a, "patch_size", cfg.arch.patch_size);
    read(a, "width", cfg.arch.width);
    read(a, "mlp_hidden", cfg.arch.mlp_hidden);
    read(a, "encoder_depth", cfg.arch.encoder_depth);
    read(a, "decoder_depth", cfg.arch.decoder_depth);
    read(a, "pixel_channels", cfg.arch.pixel_channels);
    read(a, "use_norm", cfg.arch.use_norm);
    std::string act = cfg.arch.activation == Activation::gelu ? "gelu" : "identity";
    read(a, "activation", act);
    if (act == "gelu") cfg.arch.activation = Activation::gelu;
    else if (act == "identity") cfg.arch.activation = Activation::identity;
    else throw ConfigError("arch.activation must be gelu or identity");
  }
  if (j.contains("tasks")) {
    cfg.tasks.clear();
    for (const auto& t : j.at("tasks")) {
      reject_unknown(t,
                     {"task_id", "class_count", "shape_family", "intensity_shift", "noise_sigma",
                      "n_train", "n_test", "seed", "image_size"},
                     "tasks[].");
      try {
        cfg.tasks.push_back(t.get<TaskSpec>());
      } catch (const json::exception& e) {
        throw ConfigError(std::string("tasks: ") + e.what());
      }
    }
  }
  if (j.contains("pretrain")) {
    const json& p = j.at("pretrain");
    reject_unknown(p, {"n_train", "n_val", "noise_sigma"}, "pretrain.");
    read(p, "n_train", cfg.pretrain.n_train);
    read(p, "n_val", cfg.pretrain.n_val);
    read(p, "noise_sigma", cfg.pretrain.noise_sigma);
  }
  read(j, "K", cfg.K);
  read(j, "mds_runs", cfg.mds_runs);
  read(j, "lora_rank", cfg.lora_rank);
  read(j, "lora_scale", cfg.lora_scale);
  read(j, "mask_ratio", cfg.mask_ratio);
  read(j, "iters_pretrain", cfg.iters_pretrain);
  read(j, "iters_fft", cfg.iters_fft);
  read(j, "iters_lora_kd", cfg.iters_lora_kd);
  read(j, "iters_calibration", cfg.iters_calibration);
  read(j, "batch_size", cfg.batch_size);
  read(j, "lr_pretrain", cfg.lr_pretrain);
  read(j, "lr_fft", cfg.lr_fft);
  read(j, "lr_lora", cfg.lr_lora);
  read(j, "weight_decay", cfg.weight_decay);
  read(j, "kd_every", cfg.kd_every);
  read(j, "decoder_calibration", cfg.decoder_calibration);
  read(j, "master_seed", cfg.master_seed);
  if (j.contains("buffer_mixing")) {
    cfg.buffer_mixing = parse_buffer_mixing(j.at("buffer_mixing").get<std::string>());
  }
  if (j.contains("strategy")) cfg.strategy = parse_strategy(j.at("strategy").get<std::string>());
  for (std::size_t i = 0; i < cfg.tasks.size(); ++i) {
    if (!j.contains("tasks") || !j.at("tasks").at(i).contains("image_size")) {
      cfg.tasks[i].image_size = static_cast<int>(cfg.arch.image_size);
    }
  }
  cfg.validate();
  return cfg;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("override '" + assignment + "' is not of the form key=value");
  }
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw ConfigError("override key '" + key + "' has an empty component");
    const bool last = dot == std::string::npos;
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(part);
      } catch (...) {
        throw ConfigError("override key '" + key + "': '" + part + "' is not an array index");
      }
      if (idx >= node->size()) throw ConfigError("override key '" + key + "': index out of range");
      node = &(*node)[idx];
    } else {
      if (!node->is_object()) *node = json::object();
      node = &(*node)[part];
    }
    if (last) break;
    start = dot + 1;
  }
  *node = value;
}

std::vector<TaskSpec> resolved_tasks(const PipelineConfig& cfg) {
  std::vector<TaskSpec> out = cfg.tasks;
  for (auto& t : out) {
    t.seed = mix_seed(cfg.master_seed, t.seed);
    t.image_size = static_cast<int>(cfg.arch.image_size);
  }
  return out;
}

TaskSpec pretrain_corpus_spec(const PipelineConfig& cfg) {
  TaskSpec t;
  t.task_id = "pretrain";
  t.class_count = 2;
  t.shape_family = ShapeFamily::mixed;
  t.intensity_shift = 0.0;
  t.noise_sigma = cfg.pretrain.noise_sigma;
  t.n_train = cfg.pretrain.n_train;
  t.n_test = cfg.pretrain.n_val;
  t.seed = mix_seed(cfg.master_seed, "pretrain.corpus");
  t.image_size = static_cast<int>(cfg.arch.image_size);
  return t;
}

std::uint64_t config_hash(const PipelineConfig& cfg) { return fnv1a(to_json(cfg).dump()); }

}  // namespace seqft
