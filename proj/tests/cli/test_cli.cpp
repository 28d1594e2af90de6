#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>

#include "json.hpp"
#include "palab/accounting.hpp"
#include "palab/checkpoint.hpp"
#include "palab/importance.hpp"
#include "palab/pruning.hpp"
#include "palab/tensor.hpp"

using namespace palab;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int status = 0;
  std::string output;
};

Result palab_cli(const std::string& args) {
  FILE* pipe = popen((std::string(PALAB_CLI) + " " + args + " 2>&1").c_str(), "r");
  REQUIRE(pipe != nullptr);
  Result r;
  std::array<char, 4096> buf;
  while (std::fgets(buf.data(), buf.size(), pipe) != nullptr) r.output += buf.data();
  r.status = pclose(pipe);
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

// Fresh directory holding a config; commands run with --config and --out.
struct Workspace {
  fs::path dir;
  std::string base;

  Workspace(const std::string& name, const json& config) {
    dir = fs::temp_directory_path() / ("palab_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::ofstream(dir / "run.json") << config.dump();
    base = "--config " + (dir / "run.json").string() + " --out " + (dir / "out").string() + " ";
  }
  Result run(const std::string& cmd) const { return palab_cli(base + cmd); }
  fs::path out(const std::string& file) const { return dir / "out" / file; }
};

json toy(json extra = json::object()) {
  json j{{"train_size", 96}, {"eval_size", 48}, {"epochs", 1}, {"learning_rate", 5e-4}, {"n_high", 2}};
  j.update(extra);
  return j;
}

}  // namespace

TEST_CASE("importance writes a valid, reproducible map") {
  Workspace ws("importance", toy());
  REQUIRE(ws.run("importance").status == 0);
  for (const char* f : {"importance.csv", "importance.ppm", "importance.json", "model.ckpt"}) {
    CHECK(fs::exists(ws.out(f)));
  }
  const Tensor m = import_importance_csv(ws.out("importance.csv"));
  CHECK(m.shape() == Shape{4, 4});
  for (double v : m.data()) CHECK((v >= 0.0 && v <= 1.0));
  const std::string csv = slurp(ws.out("importance.csv"));
  const std::string js = slurp(ws.out("importance.json"));
  REQUIRE(ws.run("importance").status == 0);
  CHECK(slurp(ws.out("importance.csv")) == csv);
  CHECK(slurp(ws.out("importance.json")) == js);

  Workspace one("importance_one", toy({{"importance_sample", 1}}));
  REQUIRE(one.run("importance").status == 0);
  CHECK(read_json(one.out("importance.json")).at("sample_size") == 1);
}

TEST_CASE("prune keeps the requested heads; mask and slice agree") {
  Workspace slice("prune_slice", toy({{"keep_count", 10}}));
  REQUIRE(slice.run("importance").status == 0);
  REQUIRE(slice.run("prune").status == 0);
  const auto plan = prune_plan_from_json(read_json(slice.out("prune_plan.json")));
  CHECK(plan.keep_count == 10);
  CHECK(std::count(plan.keep.begin(), plan.keep.end(), 1) == 10);

  Workspace mask("prune_mask", toy({{"keep_count", 10}, {"prune_mode", "mask"}}));
  REQUIRE(mask.run("importance").status == 0);
  REQUIRE(mask.run("prune").status == 0);
  CHECK(load_model(mask.out("pruned.ckpt")).mask.has_value());
  REQUIRE(slice.run("eval " + slice.out("pruned.ckpt").string() + " " + mask.out("pruned.ckpt").string()).status ==
          0);
  const auto results = read_json(slice.out("eval.json")).at("results");
  REQUIRE(results.size() == 2);
  double worst = 0.0;
  for (std::size_t i = 0; i < results[0]["logits"].size(); ++i) {
    for (std::size_t k = 0; k < results[0]["logits"][i].size(); ++k) {
      worst = std::max(worst, std::abs(results[0]["logits"][i][k].get<double>() -
                                       results[1]["logits"][i][k].get<double>()));
    }
  }
  CHECK(worst < 1e-9);
  CHECK(results[0]["predictions"] == results[1]["predictions"]);

  Workspace all("prune_all", toy({{"keep_count", 16}}));
  REQUIRE(all.run("importance").status == 0);
  REQUIRE(all.run("prune").status == 0);
  CHECK(weights_digest(load_model(all.out("pruned.ckpt")).weights) ==
        weights_digest(load_model(all.out("model.ckpt")).weights));
}

TEST_CASE("prune refuses an importance map from other weights") {
  Workspace ws("prune_stale", toy({{"keep_count", 8}}));
  REQUIRE(ws.run("importance").status == 0);
  REQUIRE(palab_cli(ws.base + "--seed 5 importance").status == 0);
  // model.ckpt now holds seed-5 weights; swap in a map from seed 0.
  Workspace other("prune_stale_other", toy());
  REQUIRE(other.run("importance").status == 0);
  fs::copy_file(other.out("importance.json"), ws.out("importance.json"), fs::copy_options::overwrite_existing);
  const auto r = ws.run("prune");
  CHECK(r.status != 0);
  CHECK(r.output.find("recompute importance") != std::string::npos);
}

TEST_CASE("zero epochs give an eval-only report") {
  Workspace ws("train_zero", toy({{"epochs", 0}}));
  REQUIRE(ws.run("train").status == 0);
  const auto rep = read_json(ws.out("train_report.json"));
  CHECK(rep.at("epochs").empty());
  CHECK(rep.at("steps") == 0);
  CHECK(rep.at("final_accuracy") == rep.at("initial_eval_accuracy"));
}

TEST_CASE("three regimes give comparable reports") {
  std::vector<json> reports;
  for (const char* regime : {"full_finetune", "lora", "prune_lora"}) {
    Workspace ws(std::string("regime_") + regime, toy({{"regime", regime}, {"keep_count", 12}}));
    REQUIRE(ws.run("train").status == 0);
    reports.push_back(read_json(ws.out("train_report.json")));
    if (std::string(regime) == "prune_lora") {
      const auto plan = prune_plan_from_json(read_json(ws.out("prune_plan.json")));
      const auto rp = rank_plan_from_json(reports.back().at("rank_plan"));
      CHECK(reports.back().at("trainable_params") ==
            count_params(ModelConfig::toy(), &plan, &rp).trainable_params);
      CHECK(reports.back().at("kept_heads") == 12);
    }
  }
  for (const auto& r : reports) {
    for (const auto& [key, value] : reports[0].items()) CHECK(r.contains(key));
  }
  CHECK(reports[0].at("trainable_params") == reports[0].at("total_params"));
  CHECK(reports[2].at("total_params") < reports[1].at("total_params"));
}

TEST_CASE("merge: fresh adapters, label agreement and the double-merge guard") {
  Workspace fresh("merge_fresh", toy({{"regime", "lora"}, {"epochs", 0}}));
  REQUIRE(fresh.run("train").status == 0);
  REQUIRE(fresh.run("merge").status == 0);
  const auto base = load_model(fresh.out("trained.ckpt")).weights;
  const auto merged = load_model(fresh.out("merged.ckpt")).weights;
  for (std::size_t l = 0; l < 4; ++l) CHECK(merged.blocks[l].value.weight == base.blocks[l].value.weight);

  Workspace ws("merge_trained", toy({{"regime", "prune_lora"}, {"keep_count", 12}, {"epochs", 2}}));
  REQUIRE(ws.run("train").status == 0);
  REQUIRE(ws.run("merge").status == 0);
  REQUIRE(ws.run("eval " + ws.out("trained.ckpt").string() + " --adapters " + ws.out("adapters.ckpt").string())
              .status == 0);
  const auto with_adapters = read_json(ws.out("eval.json")).at("results")[0];
  REQUIRE(ws.run("eval " + ws.out("merged.ckpt").string()).status == 0);
  const auto folded = read_json(ws.out("eval.json")).at("results")[0];
  CHECK(with_adapters.at("accuracy") == folded.at("accuracy"));
  CHECK(with_adapters.at("predictions") == folded.at("predictions"));

  const std::string again =
      "merge --base " + ws.out("merged.ckpt").string() + " --adapters " + ws.out("adapters.ckpt").string();
  const auto refused = ws.run(again);
  CHECK(refused.status != 0);
  CHECK(refused.output.find("twice") != std::string::npos);
  CHECK(ws.run(again + " --force").status == 0);
  CHECK(read_manifest(ws.out("merged.ckpt")).at("merge_count") == 2);
}

TEST_CASE("report breakdown sums to the total") {
  Workspace ws("report", toy({{"regime", "prune_lora"}, {"keep_count", 11}, {"epochs", 1}}));
  REQUIRE(ws.run("train").status == 0);
  REQUIRE(ws.run("report " + ws.out("trained.ckpt").string() + " --adapters " + ws.out("adapters.ckpt").string())
              .status == 0);
  const auto r = read_json(ws.out("report.json")).at("reports")[0];
  std::size_t sum = r.at("embeddings").get<std::size_t>() + r.at("embedding_norm").get<std::size_t>() +
                    r.at("pooler").get<std::size_t>() + r.at("classifier").get<std::size_t>();
  for (const auto& b : r.at("blocks")) {
    sum += b.at("attention").get<std::size_t>() + b.at("ffn").get<std::size_t>() +
           b.at("layernorm").get<std::size_t>() + b.at("adapters").get<std::size_t>();
  }
  CHECK(sum == r.at("total_params").get<std::size_t>());
  CHECK(r.at("regime").get<std::string>().starts_with("prune_lora"));
}

TEST_CASE("dry run and seed override") {
  Workspace ws("dry", toy());
  const auto r = ws.run("--dry-run train");
  CHECK(r.status == 0);
  CHECK_FALSE(fs::exists(ws.out("")));
  REQUIRE(ws.run("importance").status == 0);
  const std::string seed0 = slurp(ws.out("importance.csv"));
  REQUIRE(ws.run("importance --seed 9").status == 0);
  CHECK(slurp(ws.out("importance.csv")) != seed0);
  CHECK(palab_cli("frobnicate").status != 0);
  CHECK(palab_cli("").status != 0);
}
