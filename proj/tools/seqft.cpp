// Command-line driver: task generation, pretraining, MDS selection,
// sequential fine-tuning runs, evaluation and analysis.
#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <json.hpp>

#include "seqft/checkpoint.hpp"
#include "seqft/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace seqft;

namespace {

struct Common {
  std::string config;
  std::string out = "runs/default";
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
};

bool encoder_only(const NamedTensors<float>& params) {
  for (const auto& [n, t] : params) {
    if (!n.starts_with("encoder.")) return false;
  }
  return true;
}

NamedTensors<float> encoder_part(const NamedTensors<float>& params) {
  NamedTensors<float> out;
  for (const auto& [n, t] : params) {
    if (n.starts_with("encoder.")) out.emplace_back(n, t);
  }
  return out;
}

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "JSON config file (defaults apply to missing keys)");
  cmd->add_option("--out", c.out, "output directory")->capture_default_str();
  cmd->add_option("--override", c.overrides, "dotted.key=value, repeatable");
  cmd->add_option("--seed", c.seed, "master seed");
}

json load_document(const Common& c) {
  json doc = json::object();
  if (!c.config.empty()) {
    if (!fs::is_regular_file(c.config)) throw ConfigError("config file not found: " + c.config);
    try {
      doc = json::parse(read_file(c.config));
    } catch (const json::exception& e) {
      throw ConfigError(c.config + ": " + e.what());
    }
  }
  for (const auto& o : c.overrides) {
    // Element overrides of the task list start from the default suite.
    if (o.rfind("tasks.", 0) == 0 && !doc.contains("tasks")) {
      doc["tasks"] = to_json(default_config())["tasks"];
      for (auto& t : doc["tasks"]) t.erase("image_size");
    }
    apply_override(doc, o);
  }
  if (c.seed) doc["master_seed"] = *c.seed;
  return doc;
}

PipelineConfig config_of(json doc) {
  doc.erase("ablation");
  PipelineConfig cfg = config_from_json(doc);
  cfg.validate();
  return cfg;
}

/// Loads the config and writes its resolved form before any work starts.
PipelineConfig prepare(const Common& c, json* doc_out = nullptr) {
  json doc = load_document(c);
  PipelineConfig cfg = config_of(doc);
  json resolved = to_json(cfg);
  if (doc.contains("ablation")) resolved["ablation"] = doc["ablation"];
  fs::create_directories(c.out);
  write_file(fs::path(c.out) / "config.resolved.json", resolved.dump(2) + "\n");
  if (doc_out) *doc_out = doc;
  return cfg;
}

std::string defaults_listing() {
  std::string out = "Defaults (override with --override key=value):\n";
  const json defaults = to_json(default_config());
  for (const auto& [k, v] : defaults.items()) {
    if (k == "tasks") {
      out += "  tasks: " + std::to_string(v.size()) + " entries (see --print-defaults)\n";
    } else if (v.is_object()) {
      for (const auto& [sub, value] : v.items()) out += "  " + k + "." + sub + " = " + value.dump() + "\n";
    } else {
      out += "  " + k + " = " + v.dump() + "\n";
    }
  }
  return out;
}

const TaskDataset& find_task(const std::vector<TaskDataset>& data, const std::string& id) {
  for (const auto& d : data) {
    if (d.spec.task_id == id) return d;
  }
  throw ConfigError("unknown task '" + id + "'");
}

void print_eval(const std::string& label, const EvalResult& r) {
  std::cout << label << " dice=" << format_number(r.mean_dice) << " hd95=" << format_number(r.mean_hd95)
            << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  if (const char* level = std::getenv("SEQFT_LOG")) {
    spdlog::set_level(spdlog::level::from_str(level));
  }
  spdlog::set_pattern("[%H:%M:%S] %v");

  CLI::App app{"Sequential fine-tuning of a small segmentation model.\n"
               "Without a subcommand, --config/--out run the seqft subcommand."};
  app.option_defaults()->always_capture_default();
  app.footer(defaults_listing());
  app.require_subcommand(0, 1);
  bool print_defaults = false;
  app.add_flag("--print-defaults", print_defaults, "print the default config as JSON");
  Common top_c;
  add_common(&app, top_c);

  Common gen_c, pre_c, mds_c, run_c, eval_c;
  auto* gen = app.add_subcommand("gen-tasks", "write the task datasets to --out/<task_id>/");
  add_common(gen, gen_c);

  auto* pre = app.add_subcommand("pretrain", "SSL pretraining of M_0 into --out");
  add_common(pre, pre_c);

  auto* mds = app.add_subcommand("mds", "MDS scores and buffer selection per task");
  add_common(mds, mds_c);

  auto* run = app.add_subcommand("seqft", "run a strategy over the task sequence (or an ablation preset)");
  add_common(run, run_c);
  std::string strategy;
  bool resume = false;
  int workers = 1;
  for (auto* cmd : {&app, run}) {
    cmd->add_option("--strategy", strategy, "strategy name, overrides the config");
    cmd->add_flag("--resume", resume, "continue from the manifest in --out");
    cmd->add_option("--parallel-baselines", workers, "ablation runs in parallel processes");
  }

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a task's test split");
  add_common(ev, eval_c);
  std::string ckpt, task_id;
  ev->add_option("--checkpoint", ckpt, "model checkpoint (.sqft)")->required();
  ev->add_option("--task", task_id, "task id")->required();

  auto* an = app.add_subcommand("analyze", "post-hoc analysis");
  an->require_subcommand(1);
  auto* pv = an->add_subcommand("param-variation", "per-parameter change between two checkpoints");
  std::string before, after, pv_out;
  pv->add_option("--before", before)->required();
  pv->add_option("--after", after)->required();
  pv->add_option("--out", pv_out, "CSV output (stdout if omitted)");
  auto* sm = an->add_subcommand("summary", "per-strategy summary of a metrics.csv");
  std::string metrics_path, sm_out;
  sm->add_option("--metrics", metrics_path)->required();
  sm->add_option("--out", sm_out, "CSV output (stdout if omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (print_defaults) {
      std::cout << to_json(default_config()).dump(2) << "\n";
      return 0;
    }
    if (gen->parsed()) {
      const PipelineConfig cfg = prepare(gen_c);
      for (const auto& spec : resolved_tasks(cfg)) {
        save_dataset(fs::path(gen_c.out) / spec.task_id, generate_task(spec));
        spdlog::info("wrote {}", (fs::path(gen_c.out) / spec.task_id).string());
      }
    } else if (pre->parsed()) {
      const PipelineConfig cfg = prepare(pre_c);
      const ModelState<float> m0 = obtain_m0(cfg, pre_c.out);
      save_model(fs::path(pre_c.out) / "m0.sqft", m0);
    } else if (mds->parsed()) {
      const PipelineConfig cfg = prepare(mds_c);
      const fs::path out = mds_c.out;
      const ModelState<float> m0 = obtain_m0(cfg, out);
      Buffer buffer(cfg.K);
      for (const auto& spec : resolved_tasks(cfg)) {
        const TaskDataset task = generate_task(spec);
        const auto scores = obtain_mds_scores(cfg, m0, task, out);
        buffer.add_task(spec.task_id,
                        mds_select_from_scores(task, scores, std::min<int>(cfg.K, spec.n_train)),
                        spec.n_train);
      }
      write_file(out / "buffer.json", buffer.to_json().dump(2) + "\n");
    } else if (run->parsed() || !top_c.config.empty() || app.count("--out") > 0) {
      const Common& c = run->parsed() ? run_c : top_c;
      json doc;
      PipelineConfig cfg = prepare(c, &doc);
      if (!strategy.empty()) cfg.strategy = parse_strategy(strategy);
      if (doc.contains("ablation")) {
        const auto rows = run_ablation(cfg, ablation_plan_from_json(doc), c.out, resume, workers);
        std::cout << summary_csv(rows);
      } else {
        const RunReport report = run_sequence(cfg, c.out, {.resume = resume, .shared_dir = std::nullopt});
        std::cout << to_string(report.strategy) << " seed " << report.seed
                  << " final dice " << format_number(report.mean_final_dice()) << " hd95 "
                  << format_number(report.mean_final_hd95()) << " BWT "
                  << format_number(report.transfer.mean_backward_transfer()) << "\n";
      }
    } else if (ev->parsed()) {
      const PipelineConfig cfg = prepare(eval_c);
      std::vector<TaskDataset> data;
      for (const auto& spec : resolved_tasks(cfg)) data.push_back(generate_task(spec));
      const TaskDataset& task = find_task(data, task_id);
      ArchMeta arch = cfg.arch;
      arch.classes = task.spec.class_count;
      print_eval(task_id, evaluate(load_model(ckpt, arch), task));
    } else if (pv->parsed()) {
      auto b = load_checkpoint(before), a = load_checkpoint(after);
      // An encoder-only snapshot (teacher_*.sqft) is compared against the encoder of a full model.
      if (encoder_only(b) != encoder_only(a)) {
        b = encoder_part(b);
        a = encoder_part(a);
      }
      const auto report = param_variation(b, a);
      std::string csv = "name,depth,linear_weight,mean_abs_change,changed_fraction\n";
      for (const auto& e : report.entries) {
        csv += e.name + "," + std::to_string(e.depth) + "," + (e.linear_weight ? "1" : "0") + "," +
               format_number(e.mean_abs_change) + "," + format_number(e.changed_fraction) + "\n";
      }
      if (pv_out.empty()) {
        std::cout << csv;
      } else {
        write_file(pv_out, csv);
      }
    } else if (sm->parsed()) {
      const std::string csv = summary_csv(aggregate(summarize_metrics(read_file(metrics_path))));
      if (sm_out.empty()) {
        std::cout << csv;
      } else {
        write_file(sm_out, csv);
      }
    } else {
      std::cout << app.help();
    }
  } catch (const ConfigError& e) {
    spdlog::error("config error: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
