#include "palab/run_config.hpp"

#include <fstream>
#include <set>

#include "palab/errors.hpp"

namespace palab {

void RunConfig::set_seed(std::uint64_t s) {
  seed = s;
  task.seed = s;
  train.seed = s;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  if (model.num_classes == 0) {
    // Encoder without a task head: accounting only.
  } else if (!train_tsv) {
    task.validate();
    if (task.vocab_size > model.vocab_size) {
      throw InputError("run config: task vocab_size exceeds the model's vocab_size");
    }
    if (task.seq_len + 1 > model.max_positions) {
      throw InputError("run config: seq_len + 1 exceeds max_positions");
    }
    if (task.num_classes != model.num_classes) {
      throw InputError("run config: task num_classes differs from the model's");
    }
  } else if (!eval_tsv) {
    throw InputError("run config: train_tsv needs eval_tsv");
  }
  for (const auto& p : {train_tsv, eval_tsv, vocab, checkpoint, adapters, importance}) {
    if (p && !std::filesystem::exists(*p)) throw InputError("run config: no such file " + p->string());
  }
  if (keep_count > model.total_heads()) throw InputError("run config: keep_count exceeds the number of heads");
  if (prune_mode != "slice" && prune_mode != "mask") throw InputError("run config: prune_mode is slice or mask");
  if (importance_sample == 0 || importance_batch == 0) {
    throw InputError("run config: importance_sample and importance_batch must be positive");
  }
}

namespace {

const std::set<std::string> kKeys = {
    "preset",        "seed",          "num_layers",        "num_heads",          "hidden",
    "head_dim",      "ffn_dim",       "vocab_size",        "max_positions",      "type_vocab",
    "num_classes",   "layernorm_eps", "task",              "seq_len",            "train_size",
    "eval_size",     "train_tsv",     "eval_tsv",          "vocab",              "importance_sample",
    "importance_epsilon", "importance_batch", "keep_count", "prune_mode",        "regime",
    "epochs",        "learning_rate", "weight_decay",      "batch_size",         "eval_every",
    "max_steps",     "n_high",        "rank_high",         "rank_low",           "checkpoint",
    "adapters",      "importance",    "out_dir"};

template <class T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

std::optional<std::filesystem::path> read_path(const nlohmann::json& j, const char* key,
                                               const std::filesystem::path& base) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  std::filesystem::path p = j.at(key).get<std::string>();
  return p.is_absolute() ? p : base / p;
}

}  // namespace

RunConfig run_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir) {
  if (!j.is_object()) throw InputError("run config: expected a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (!kKeys.contains(key)) throw InputError("run config: unknown key '" + key + "'");
  }
  RunConfig c;
  try {
    read(j, "preset", c.preset);
    if (c.preset == "toy") {
      c.model = ModelConfig::toy();
    } else if (c.preset == "reference") {
      c.model = ModelConfig::reference();
    } else {
      throw InputError("run config: preset must be toy or reference");
    }
    read(j, "num_layers", c.model.num_layers);
    read(j, "num_heads", c.model.num_heads);
    read(j, "hidden", c.model.hidden);
    read(j, "head_dim", c.model.head_dim);
    read(j, "ffn_dim", c.model.ffn_dim);
    read(j, "vocab_size", c.model.vocab_size);
    read(j, "max_positions", c.model.max_positions);
    read(j, "type_vocab", c.model.type_vocab);
    read(j, "num_classes", c.model.num_classes);
    read(j, "layernorm_eps", c.model.layernorm_eps);

    std::uint64_t seed = 0;
    read(j, "seed", seed);
    if (j.contains("task")) c.task.kind = parse_task_kind(j.at("task").get<std::string>());
    read(j, "seq_len", c.task.seq_len);
    read(j, "train_size", c.task.train_size);
    read(j, "eval_size", c.task.eval_size);
    c.task.vocab_size = c.model.vocab_size;
    c.task.num_classes = c.model.num_classes;
    c.train_tsv = read_path(j, "train_tsv", base_dir);
    c.eval_tsv = read_path(j, "eval_tsv", base_dir);
    c.vocab = read_path(j, "vocab", base_dir);

    read(j, "importance_sample", c.importance_sample);
    read(j, "importance_epsilon", c.importance_epsilon);
    read(j, "importance_batch", c.importance_batch);
    read(j, "keep_count", c.keep_count);
    read(j, "prune_mode", c.prune_mode);

    if (j.contains("regime")) c.train.regime = parse_regime(j.at("regime").get<std::string>());
    read(j, "epochs", c.train.epochs);
    read(j, "learning_rate", c.train.learning_rate);
    read(j, "weight_decay", c.train.weight_decay);
    read(j, "batch_size", c.train.batch_size);
    read(j, "eval_every", c.train.eval_every);
    read(j, "max_steps", c.train.max_steps);
    read(j, "n_high", c.train.n_high);
    read(j, "rank_high", c.train.rank_high);
    read(j, "rank_low", c.train.rank_low);
    c.train.keep_count = c.keep_count;
    c.train.importance_sample = c.importance_sample;
    c.train.importance_epsilon = c.importance_epsilon;

    c.checkpoint = read_path(j, "checkpoint", base_dir);
    c.adapters = read_path(j, "adapters", base_dir);
    c.importance = read_path(j, "importance", base_dir);
    if (auto p = read_path(j, "out_dir", base_dir)) c.out_dir = *p;
    c.set_seed(seed);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("run config: ") + e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw InputError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j, path.parent_path());
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j = to_json(c.model);
  j["preset"] = c.preset;
  j["seed"] = c.seed;
  j["task"] = task_name(c.task.kind);
  j["seq_len"] = c.task.seq_len;
  j["train_size"] = c.task.train_size;
  j["eval_size"] = c.task.eval_size;
  auto path = [](const std::optional<std::filesystem::path>& p) {
    return p ? nlohmann::json(p->generic_string()) : nlohmann::json(nullptr);
  };
  j["train_tsv"] = path(c.train_tsv);
  j["eval_tsv"] = path(c.eval_tsv);
  j["vocab"] = path(c.vocab);
  j["importance_sample"] = c.importance_sample;
  j["importance_epsilon"] = c.importance_epsilon;
  j["importance_batch"] = c.importance_batch;
  j["keep_count"] = c.keep_count;
  j["prune_mode"] = c.prune_mode;
  j["regime"] = regime_name(c.train.regime);
  j["epochs"] = c.train.epochs;
  j["learning_rate"] = c.train.learning_rate;
  j["weight_decay"] = c.train.weight_decay;
  j["batch_size"] = c.train.batch_size;
  j["eval_every"] = c.train.eval_every;
  j["max_steps"] = c.train.max_steps;
  j["n_high"] = c.train.n_high;
  j["rank_high"] = c.train.rank_high;
  j["rank_low"] = c.train.rank_low;
  j["checkpoint"] = path(c.checkpoint);
  j["adapters"] = path(c.adapters);
  j["importance"] = path(c.importance);
  j["out_dir"] = c.out_dir.generic_string();
  return j;
}

DatasetSplit load_data(const RunConfig& c) {
  if (!c.train_tsv) return generate(c.task);
  DatasetSplit split;
  std::optional<Vocabulary> vocab;
  if (c.vocab) vocab = Vocabulary::load(*c.vocab);
  TsvDataset train = ingest_tsv(*c.train_tsv, vocab ? &*vocab : nullptr, c.model.max_positions);
  TsvDataset eval = ingest_tsv(*c.eval_tsv, &train.vocab, c.model.max_positions);
  if (train.vocab.size() > c.model.vocab_size) {
    throw InputError("vocabulary has " + std::to_string(train.vocab.size()) + " tokens but vocab_size is " +
                     std::to_string(c.model.vocab_size));
  }
  for (const auto* set : {&train.data, &eval.data}) {
    for (const auto& e : *set) {
      if (e.label >= c.model.num_classes) {
        throw InputError("label " + std::to_string(e.label) + " is not below num_classes");
      }
    }
  }
  split.train = std::move(train.data);
  split.eval = std::move(eval.data);
  return split;
}

}  // namespace palab
