// palab: importance | prune | train | merge | eval | report

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "palab/accounting.hpp"
#include "palab/checkpoint.hpp"
#include "palab/digest.hpp"
#include "palab/errors.hpp"
#include "palab/importance.hpp"
#include "palab/lora.hpp"
#include "palab/pruning.hpp"
#include "palab/run_config.hpp"
#include "palab/training.hpp"

namespace fs = std::filesystem;
using namespace palab;

namespace {

struct Options {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  bool dry_run = false;
  // merge
  std::string base;
  std::string adapters;
  bool force = false;
  // eval / report
  std::vector<std::string> checkpoints;
};

RunConfig resolve(const Options& o) {
  RunConfig c;
  if (!o.config_path.empty()) {
    c = load_run_config(o.config_path);
  } else {
    c.model = ModelConfig::toy();
    c.validate();
  }
  if (o.seed) c.set_seed(*o.seed);
  if (!o.out_dir.empty()) c.out_dir = o.out_dir;
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out << text;
  if (!out) throw FormatError("failed writing " + path.string());
}

void write_json(const fs::path& path, const nlohmann::json& j) { write_text(path, j.dump(2) + "\n"); }

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// Config checkpoint, or freshly initialized weights from the seed.
ModelCheckpoint input_model(const RunConfig& c) {
  if (c.checkpoint) return load_model(*c.checkpoint);
  return ModelCheckpoint{init_weights(c.model, c.seed), std::nullopt};
}

fs::path prepare_out(const RunConfig& c) {
  fs::create_directories(c.out_dir);
  return c.out_dir;
}

int cmd_importance(const Options& o) {
  const RunConfig c = resolve(o);
  if (o.dry_run) {
    std::printf("importance: %zu x %zu map from up to %zu training examples -> %s\n", c.model.num_layers,
                c.model.num_heads, c.importance_sample, c.out_dir.string().c_str());
    return 0;
  }
  const ModelCheckpoint model = input_model(c);
  const DatasetSplit data = load_data(c);
  ImportanceOptions io;
  io.batch_size = c.importance_batch;
  io.epsilon = c.importance_epsilon;
  const ImportanceMap map = compute_importance(model.weights, importance_sample(data.train, c.importance_sample), io);
  const fs::path out = prepare_out(c);
  if (!c.checkpoint) save_model(out / "model.ckpt", model.weights);
  export_importance_csv(map.final, out / "importance.csv");
  export_importance_ppm(map.final, out / "importance.ppm");
  write_json(out / "importance.json", importance_to_json(map, weights_digest(model.weights)));
  std::printf("importance: %zu examples, %zu tokens, map digest %s\n", map.sample_size, map.token_count,
              digest_hex(map.digest()).c_str());
  for (std::size_t l = 0; l < map.layers(); ++l) {
    std::printf("  block %2zu:", l);
    for (std::size_t h = 0; h < map.heads(); ++h) std::printf(" %.3f", map.final.at(l, h));
    std::printf("\n");
  }
  return 0;
}

int cmd_prune(const Options& o) {
  RunConfig c = resolve(o);
  if (!c.checkpoint && fs::exists(c.out_dir / "model.ckpt")) c.checkpoint = c.out_dir / "model.ckpt";
  const fs::path imp_path = c.importance ? *c.importance : c.out_dir / "importance.json";
  const std::size_t keep = c.keep_count == 0 ? c.model.total_heads() : c.keep_count;
  if (o.dry_run) {
    std::printf("prune: keep %zu of %zu heads (%s mode) using %s\n", keep, c.model.total_heads(),
                c.prune_mode.c_str(), imp_path.string().c_str());
    return 0;
  }
  const ModelCheckpoint model = input_model(c);
  const nlohmann::json imp = read_json(imp_path);
  const ImportanceMap map = importance_from_json(imp);
  const std::string expected = digest_hex(weights_digest(model.weights));
  if (imp.at("model_digest").get<std::string>() != expected) {
    throw InputError("prune: " + imp_path.string() + " was computed for weights " +
                     imp.at("model_digest").get<std::string>() + ", not " + expected + "; recompute importance");
  }
  const PrunePlan plan = select_heads(map, keep);
  const fs::path out = prepare_out(c);
  write_json(out / "prune_plan.json", to_json(plan));
  if (c.prune_mode == "mask") {
    const auto [weights, mask] = apply_mask_prune(model.weights, plan);
    save_model(out / "pruned.ckpt", weights, &mask);
  } else {
    save_model(out / "pruned.ckpt", apply_slice_prune(model.weights, plan));
  }
  std::printf("prune: kept %zu of %zu heads (%s mode)\n", plan.keep_count, plan.layers * plan.heads,
              c.prune_mode.c_str());
  for (std::size_t l = 0; l < plan.layers; ++l) {
    std::printf("  block %2zu: %zu heads kept\n", l, plan.kept_in_block(l));
  }
  return 0;
}

int cmd_train(const Options& o) {
  const RunConfig c = resolve(o);
  if (o.dry_run) {
    std::printf("train: regime %s, %zu epochs, lr %g, batch %zu -> %s\n", regime_name(c.train.regime),
                c.train.epochs, c.train.learning_rate, c.train.batch_size, c.out_dir.string().c_str());
    return 0;
  }
  const ModelCheckpoint model = input_model(c);
  const DatasetSplit data = load_data(c);
  std::printf("train: regime %s on %zu train / %zu eval examples\n", regime_name(c.train.regime),
              data.train.size(), data.eval.size());
  const TrainResult r = train(model.weights, c.train, data, [](const EpochRecord& e) {
    if (e.eval_accuracy) {
      std::printf("epoch %3zu  loss %.6f  acc %.4f\n", e.epoch, e.train_loss, *e.eval_accuracy);
    } else {
      std::printf("epoch %3zu  loss %.6f\n", e.epoch, e.train_loss);
    }
    std::fflush(stdout);
  });
  const fs::path out = prepare_out(c);
  write_json(out / "train_report.json", to_json(r.report));
  nlohmann::json timing = nlohmann::json::array();
  for (const auto& e : r.report.epochs) timing.push_back({{"epoch", e.epoch}, {"seconds", e.seconds}});
  write_json(out / "train_timing.json", {{"regime", regime_name(c.train.regime)}, {"epochs", timing}});
  save_model(out / "trained.ckpt", r.weights);
  if (r.adapters) save_adapters(out / "adapters.ckpt", *r.adapters, weights_digest(r.weights));
  if (r.plan) write_json(out / "prune_plan.json", to_json(*r.plan));
  std::printf("train: initial accuracy %.4f, final accuracy %.4f, %zu trainable of %zu params\n",
              r.report.initial_eval_accuracy, r.report.final_accuracy, r.report.trainable_params,
              r.report.total_params);
  return 0;
}

int cmd_merge(const Options& o) {
  const RunConfig c = resolve(o);
  const fs::path base = !o.base.empty() ? fs::path(o.base) : c.checkpoint ? *c.checkpoint : c.out_dir / "trained.ckpt";
  const fs::path adapters_path =
      !o.adapters.empty() ? fs::path(o.adapters) : c.adapters ? *c.adapters : c.out_dir / "adapters.ckpt";
  if (o.dry_run) {
    std::printf("merge: %s + %s -> %s\n", base.string().c_str(), adapters_path.string().c_str(),
                (c.out_dir / "merged.ckpt").string().c_str());
    return 0;
  }
  const ModelCheckpoint model = load_model(base);
  const AdapterCheckpoint ad = load_adapters(adapters_path);
  if (model.weights.merge_count > 0 && !o.force) {
    throw InputError("merge: " + base.string() + " already has " + std::to_string(model.weights.merge_count) +
                     " merge(s) folded in; merging again adds the delta twice (use --force)");
  }
  if (ad.base_digest != weights_digest(model.weights) && !o.force) {
    throw InputError("merge: adapters were trained against weights " + digest_hex(ad.base_digest) + ", not " +
                     digest_hex(weights_digest(model.weights)));
  }
  const TransformerWeights merged = merge_adapters(model.weights, ad.adapters);
  const fs::path out = prepare_out(c);
  save_model(out / "merged.ckpt", merged, model.mask ? &*model.mask : nullptr);
  std::printf("merge: wrote %s (merge count %zu)\n", (out / "merged.ckpt").string().c_str(), merged.merge_count);
  return 0;
}

int cmd_eval(const Options& o) {
  const RunConfig c = resolve(o);
  std::vector<fs::path> paths(o.checkpoints.begin(), o.checkpoints.end());
  if (paths.empty()) paths.push_back(c.checkpoint ? *c.checkpoint : c.out_dir / "trained.ckpt");
  std::optional<fs::path> adapters_path;
  if (!o.adapters.empty()) adapters_path = o.adapters;
  else if (c.adapters) adapters_path = *c.adapters;
  if (o.dry_run) {
    for (const auto& p : paths) std::printf("eval: %s\n", p.string().c_str());
    return 0;
  }
  const DatasetSplit data = load_data(c);
  std::optional<AdapterCheckpoint> ad;
  if (adapters_path) ad = load_adapters(*adapters_path);
  nlohmann::json results = nlohmann::json::array();
  for (const auto& p : paths) {
    const ModelCheckpoint m = load_model(p);
    const LoraAdapters* adapters = ad ? &ad->adapters : nullptr;
    nlohmann::json logits = nlohmann::json::array();
    std::vector<std::size_t> predictions;
    std::size_t hits = 0;
    for (const auto& batch : make_batches(data.eval, c.train.batch_size)) {
      const Tensor t = infer_logits(m.weights, batch, m.mask ? &*m.mask : nullptr, adapters);
      for (std::size_t r = 0; r < t.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (std::size_t k = 0; k < t.cols(); ++k) row.push_back(t.at(r, k));
        logits.push_back(std::move(row));
      }
      const auto p2 = argmax_rows(t);
      for (std::size_t r = 0; r < p2.size(); ++r) hits += p2[r] == batch.labels[r] ? 1 : 0;
      predictions.insert(predictions.end(), p2.begin(), p2.end());
    }
    const double acc = static_cast<double>(hits) / static_cast<double>(data.eval.size());
    std::printf("eval: %s accuracy %.4f on %zu examples\n", p.string().c_str(), acc, data.eval.size());
    results.push_back({{"checkpoint", p.filename().generic_string()},
                       {"accuracy", acc},
                       {"adapters", adapters != nullptr},
                       {"predictions", predictions},
                       {"logits", std::move(logits)}});
  }
  write_json(prepare_out(c) / "eval.json", {{"format", "palab-eval"}, {"results", std::move(results)}});
  return 0;
}

int cmd_report(const Options& o) {
  const RunConfig c = resolve(o);
  std::vector<ParamReport> reports;
  const std::size_t seq_len = c.train_tsv ? c.model.max_positions : std::min(c.task.seq_len + 1, c.model.max_positions);
  if (o.dry_run || o.checkpoints.empty()) {
    // Counts only; no weights are materialized.
    const ModelConfig& m = c.model;
    const std::size_t n_high = std::min(c.train.n_high, m.num_layers);
    const RankPlan rp = make_rank_plan(std::vector<double>(m.num_layers, 0.0), n_high, c.train.rank_high,
                                       c.train.rank_low);
    reports.push_back(count_params(m, nullptr, nullptr, seq_len));
    reports.push_back(count_params(m, nullptr, &rp, seq_len));
    if (c.keep_count != 0) {
      const PrunePlan plan = spread_plan(m, c.keep_count);
      reports.push_back(count_params(m, &plan, nullptr, seq_len));
      reports.push_back(count_params(m, &plan, &rp, seq_len));
    }
  } else {
    std::optional<AdapterCheckpoint> ad;
    if (!o.adapters.empty()) ad = load_adapters(o.adapters);
    for (const auto& p : o.checkpoints) {
      const ModelCheckpoint m = load_model(p);
      ParamReport r = count_params(m.weights, ad ? &ad->adapters : nullptr, seq_len);
      r.regime += " [" + fs::path(p).filename().string() + "]";
      reports.push_back(std::move(r));
    }
  }
  const std::string table = format_report_table(reports);
  std::string text = table;
  const bool reference_geometry = c.model == ModelConfig::reference();
  if (reference_geometry) text += "\n" + published_comparison(reports);
  std::fputs(text.c_str(), stdout);
  nlohmann::json j{{"format", "palab-report"}, {"config", to_json(c.model)}, {"reports", nlohmann::json::array()}};
  for (const auto& r : reports) j["reports"].push_back(to_json(r));
  if (!o.dry_run) {
    const fs::path out = prepare_out(c);
    write_json(out / "report.json", j);
    write_text(out / "report.txt", text);
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Head-importance pruning and rank-varied LoRA lab"};
  app.require_subcommand(1);
  // Global options may also follow the subcommand.
  app.fallthrough();
  Options o;
  std::uint64_t seed = 0;
  app.add_option("--config", o.config_path, "Run config (flat JSON)")->check(CLI::ExistingFile);
  app.add_option("--out", o.out_dir, "Output directory (overrides the config)");
  auto* seed_opt = app.add_option("--seed", seed, "Seed for every component (overrides the config)");
  app.add_flag("--dry-run", o.dry_run, "Validate and describe; report counts without materializing weights");

  auto* imp = app.add_subcommand("importance", "Head importance map (CSV, PPM, JSON)");
  auto* prune = app.add_subcommand("prune", "Select and remove the least important heads");
  auto* tr = app.add_subcommand("train", "Fine-tune under the configured regime");
  auto* merge = app.add_subcommand("merge", "Fold adapters into their base weights");
  merge->add_option("--base", o.base, "Base checkpoint");
  merge->add_option("--adapters", o.adapters, "Adapter checkpoint");
  merge->add_flag("--force", o.force, "Merge even if the base already holds a merge or digests differ");
  auto* ev = app.add_subcommand("eval", "Accuracy and logits on the eval split");
  ev->add_option("checkpoints", o.checkpoints, "Model checkpoints");
  ev->add_option("--adapters", o.adapters, "Adapter checkpoint applied to every model");
  auto* rep = app.add_subcommand("report", "Parameter, FLOPs and memory tables");
  rep->add_option("checkpoints", o.checkpoints, "Model checkpoints (counts from the config when absent)");
  rep->add_option("--adapters", o.adapters, "Adapter checkpoint");

  CLI11_PARSE(app, argc, argv);
  if (seed_opt->count() > 0) o.seed = seed;
  try {
    if (imp->parsed()) return cmd_importance(o);
    if (prune->parsed()) return cmd_prune(o);
    if (tr->parsed()) return cmd_train(o);
    if (merge->parsed()) return cmd_merge(o);
    if (ev->parsed()) return cmd_eval(o);
    if (rep->parsed()) return cmd_report(o);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "palab: diverged: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "palab: %s\n", e.what());
    return 1;
  }
  return 2;
}
