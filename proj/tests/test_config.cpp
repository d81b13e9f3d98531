#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "seqft/checkpoint.hpp"
#include "seqft/config.hpp"
#include "seqft/pipeline.hpp"

using namespace seqft;
using nlohmann::json;
namespace fs = std::filesystem;

TEST_CASE("defaults") {
  const auto cfg = default_config();
  CHECK(cfg.lora_rank == 2);
  CHECK(cfg.mds_runs == 1000);
  CHECK(cfg.K == 8);
  CHECK(cfg.mask_ratio == 0.6);
  CHECK(cfg.kd_every == 1);
  CHECK_FALSE(cfg.decoder_calibration);
  REQUIRE(cfg.tasks.size() == 5);
  const int sizes[] = {26, 60, 56, 25, 12};  // 104/242/224/100/50 divided by 4
  for (int i = 0; i < 5; ++i) CHECK(cfg.tasks[i].n_train == sizes[i]);
  std::set<ShapeFamily> families;
  for (const auto& t : cfg.tasks) families.insert(t.shape_family);
  CHECK(families.size() == 5);
  for (int i = 1; i < 5; ++i) CHECK(cfg.tasks[i].intensity_shift > cfg.tasks[i - 1].intensity_shift);
}

TEST_CASE("config JSON round trip and hashing") {
  auto cfg = default_config();
  cfg.strategy = Strategy::seqft_mds_only;
  cfg.K = 5;
  cfg.buffer_mixing = BufferMixing::proportional;
  const auto back = config_from_json(to_json(cfg));
  CHECK(to_json(back) == to_json(cfg));
  CHECK(config_hash(back) == config_hash(cfg));
  auto other = cfg;
  other.K = 6;
  CHECK(config_hash(other) != config_hash(cfg));
}

TEST_CASE("unknown and invalid keys are config errors") {
  CHECK_THROWS_AS(config_from_json(json{{"k", 3}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"arch", {{"depth", 3}}}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"K", "three"}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"K", 0}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"strategy", "best"}}), ConfigError);
  CHECK_THROWS_AS(config_from_json(json{{"arch", {{"image_size", 30}}}}), ConfigError);
}

TEST_CASE("dotted overrides") {
  json doc = json::object();
  apply_override(doc, "strategy=seqft_vanilla");
  apply_override(doc, "K=4");
  apply_override(doc, "arch.width=16");
  CHECK(doc["strategy"] == "seqft_vanilla");
  CHECK(doc["K"] == 4);
  CHECK(doc["arch"]["width"] == 16);
  doc["tasks"] = to_json(default_config())["tasks"];
  apply_override(doc, "tasks.1.n_train=9");
  CHECK(doc["tasks"][1]["n_train"] == 9);
  const auto cfg = config_from_json(doc);
  CHECK(cfg.strategy == Strategy::seqft_vanilla);
  CHECK(cfg.arch.width == 16);
  CHECK(cfg.tasks[1].n_train == 9);
  CHECK_THROWS_AS(apply_override(doc, "novalue"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "tasks.x.n_train=1"), ConfigError);
  CHECK_THROWS_AS(apply_override(doc, "tasks.9.n_train=1"), ConfigError);
}

TEST_CASE("strategies differ only by stage toggles") {
  CHECK(toggles_for(Strategy::fft_parallel) == StageToggles{false, BufferSource::none, false, false});
  CHECK(toggles_for(Strategy::seqft_vanilla) == StageToggles{true, BufferSource::none, false, false});
  CHECK(toggles_for(Strategy::seqft_random_buffer) == StageToggles{true, BufferSource::random, true, false});
  CHECK(toggles_for(Strategy::seqft_mds_only) == StageToggles{true, BufferSource::mds, true, false});
  CHECK(toggles_for(Strategy::seqft_kgrft_only) == StageToggles{true, BufferSource::none, true, true});
  CHECK(toggles_for(Strategy::medseqft) == StageToggles{true, BufferSource::mds, true, true});
  for (Strategy s : all_strategies()) CHECK(parse_strategy(to_string(s)) == s);
  // The config documents of two strategies differ in the strategy key only.
  auto a = to_json(default_config()), b = a;
  b["strategy"] = "seqft_vanilla";
  CHECK(json::diff(a, b).size() == 1);
}

TEST_CASE("resolved task seeds depend on the master seed") {
  auto cfg = default_config();
  const auto a = resolved_tasks(cfg);
  cfg.master_seed = 1;
  const auto b = resolved_tasks(cfg);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i].seed != b[i].seed);
  CHECK(pretrain_corpus_spec(cfg).shape_family == ShapeFamily::mixed);
}

// ---------------------------------------------------------------------------
// Checkpoints

TEST_CASE("checkpoint round trip is bit exact") {
  const auto m = init_model<float>(ArchMeta{}, 9);
  const auto params = named_parameters(m);
  const std::string bytes = encode_checkpoint(params);
  CHECK(bytes.substr(0, 4) == "SQFT");
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);  // version, little-endian
  CHECK(bytes[5] == 0);
  const auto count = static_cast<unsigned char>(bytes[8]) | (static_cast<unsigned char>(bytes[9]) << 8);
  CHECK(count == static_cast<int>(params.size()));
  const auto back = decode_checkpoint(bytes);
  REQUIRE(back.size() == params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(back[i].first == params[i].first);
    CHECK(back[i].second.shape() == params[i].second.shape());
    CHECK(back[i].second.value() == params[i].second.value());
  }
  CHECK(encode_checkpoint(back) == bytes);
  CHECK(checkpoint_hash(back) == checkpoint_hash(params));

  const fs::path path = fs::temp_directory_path() / "seqft_test" / "m.sqft";
  save_model(path, m);
  const auto loaded = load_model(path, m.arch);
  CHECK(encode_checkpoint(named_parameters(loaded)) == bytes);
  fs::remove_all(path.parent_path());
}

TEST_CASE("corrupt checkpoints are rejected") {
  const auto params = named_parameters(init_model<float>(ArchMeta{}, 1).encoder);
  std::string bytes = encode_checkpoint(params);
  std::string flipped = bytes;
  flipped[40] ^= 0x01;
  CHECK_THROWS_AS(decode_checkpoint(flipped), DataError);
  CHECK_THROWS_AS(decode_checkpoint(bytes.substr(0, bytes.size() / 2)), DataError);
  CHECK_THROWS_AS(decode_checkpoint("JUNK"), DataError);
  CHECK_THROWS_AS(load_checkpoint("/nonexistent/seqft.sqft"), DataError);
}

TEST_CASE("loading into a mismatched architecture fails") {
  const auto m = init_model<float>(ArchMeta{}, 1);
  ArchMeta other;
  other.width = 16;
  const fs::path path = fs::temp_directory_path() / "seqft_test_mismatch.sqft";
  save_model(path, m);
  CHECK_THROWS_AS(load_model(path, other), DimensionError);
  fs::remove(path);
}
