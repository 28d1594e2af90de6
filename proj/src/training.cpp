#include "palab/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "palab/errors.hpp"
#include "palab/ops.hpp"
#include "palab/rng.hpp"

namespace palab {

const char* regime_name(Regime regime) {
  switch (regime) {
    case Regime::kFullFinetune: return "full_finetune";
    case Regime::kLora: return "lora";
    case Regime::kPruneLora: return "prune_lora";
  }
  return "unknown";
}

Regime parse_regime(std::string_view name) {
  for (Regime r : {Regime::kFullFinetune, Regime::kLora, Regime::kPruneLora}) {
    if (name == regime_name(r)) return r;
  }
  throw InputError("unknown regime '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (batch_size == 0) throw InputError("train: batch_size must be positive");
  if (eval_every == 0) throw InputError("train: eval_every must be positive");
  if (!(learning_rate > 0.0) || !(weight_decay >= 0.0)) {
    throw InputError("train: learning_rate must be positive and weight_decay non-negative");
  }
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0) || !(adam_eps > 0.0)) {
    throw InputError("train: AdamW betas must lie in [0,1) and eps must be positive");
  }
  if (regime != Regime::kFullFinetune && (rank_low < 1 || rank_high < rank_low)) {
    throw InputError("train: need rank_high >= rank_low >= 1");
  }
}

std::vector<Trainable> freeze_policy(TransformerWeights& w, LoraAdapters* adapters, Regime regime) {
  const bool full = regime == Regime::kFullFinetune;
  if (full != (adapters == nullptr)) {
    throw ContractError(std::string("freeze policy: regime ") + regime_name(regime) +
                        (full ? " takes no adapters" : " needs adapters"));
  }
  std::vector<Trainable> out;
  for_each_parameter(w, [&](const std::string& name, ParamRole role, Tensor& t) {
    const bool on = full || role == ParamRole::kLayerNorm || role == ParamRole::kClassifier;
    t.set_requires_grad(on);
    t.clear_grad();
    if (on) out.push_back({name, &t});
  });
  if (adapters != nullptr) {
    for_each_adapter_parameter(*adapters, [&](const std::string& name, Tensor& t) {
      t.set_requires_grad(true);
      t.clear_grad();
      out.push_back({name, &t});
    });
  }
  return out;
}

void AdamW::step(const std::vector<Trainable>& params) {
  if (step_ == 0) {
    m_.clear();
    v_.clear();
    for (const auto& p : params) {
      m_.emplace_back(p.tensor->size(), 0.0);
      v_.emplace_back(p.tensor->size(), 0.0);
    }
  }
  if (params.size() != m_.size()) throw ContractError("AdamW: parameter list changed between steps");
  ++step_;
  const double t = static_cast<double>(step_);
  const kernels::AdamWStep s{options_.learning_rate,
                             options_.weight_decay,
                             options_.beta1,
                             options_.beta2,
                             options_.eps,
                             1.0 - std::pow(options_.beta1, t),
                             1.0 - std::pow(options_.beta2, t)};
  const auto& k = kernels::active();
  std::vector<double> zeros;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& w = *params[i].tensor;
    if (m_[i].size() != w.size()) throw ContractError("AdamW: tensor " + params[i].name + " changed size");
    const double* g = nullptr;
    if (w.has_grad()) {
      g = w.grad().data();
    } else {
      zeros.assign(w.size(), 0.0);
      g = zeros.data();
    }
    k.adamw(w.size(), s, w.data().data(), g, m_[i].data(), v_[i].data());
  }
}

std::vector<std::size_t> predict(const TransformerWeights& w, const Dataset& data, std::size_t batch_size,
                                 const LoraAdapters* adapters) {
  std::vector<std::size_t> out;
  out.reserve(data.size());
  for (const auto& batch : make_batches(data, batch_size)) {
    const auto p = argmax_rows(infer_logits(w, batch, nullptr, adapters));
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

double evaluate_accuracy(const TransformerWeights& w, const Dataset& data, std::size_t batch_size,
                         const LoraAdapters* adapters) {
  if (data.empty()) throw ContractError("evaluate: empty dataset");
  const auto p = predict(w, data, batch_size, adapters);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < data.size(); ++i) hits += p[i] == data[i].label ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

TrainResult train(const TransformerWeights& initial, const TrainConfig& config, const DatasetSplit& data,
                  const EpochCallback& on_epoch) {
  config.validate();
  if (data.train.empty() || data.eval.empty()) throw InputError("train: train and eval splits must be non-empty");
  TrainResult result;
  result.weights = initial;
  TransformerWeights& w = result.weights;
  TrainReport& report = result.report;
  report.regime = config.regime;

  if (config.regime != Regime::kFullFinetune) {
    const auto sample = importance_sample(data.train, config.importance_sample);
    ImportanceOptions io;
    io.batch_size = config.batch_size;
    io.epsilon = config.importance_epsilon;
    ImportanceMap map = compute_importance(w, sample, io);
    if (config.regime == Regime::kPruneLora) {
      const std::size_t keep = config.keep_count == 0 ? w.config.total_heads() : config.keep_count;
      PrunePlan plan = select_heads(map, keep);
      w = apply_slice_prune(w, plan);
      result.plan = std::move(plan);
    }
    const RankPlan rp = make_rank_plan(block_importance(map), std::min(config.n_high, w.config.num_layers),
                                       config.rank_high, config.rank_low);
    result.adapters = init_adapters(w, rp, derive_seed(config.seed, 3));
    result.importance = std::move(map);
    report.rank_plan = rp;
  }
  LoraAdapters* adapters = result.adapters ? &*result.adapters : nullptr;
  const std::vector<Trainable> trainables = freeze_policy(w, adapters, config.regime);
  for (const auto& t : trainables) report.trainable_params += t.tensor->size();
  report.total_params = parameter_count(w) + (adapters != nullptr ? adapter_parameter_count(*adapters) : 0);
  report.kept_heads = w.kept_heads();

  AdamW opt(AdamWOptions{config.learning_rate, config.weight_decay, config.beta1, config.beta2, config.adam_eps});
  report.initial_eval_accuracy = evaluate_accuracy(w, data.eval, config.batch_size, adapters);
  report.final_accuracy = report.initial_eval_accuracy;

  Rng shuffle_rng(derive_seed(config.seed, 4));
  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<Example> batch_examples;
  bool stop = false;
  for (std::size_t epoch = 1; epoch <= config.epochs && !stop; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    // Fisher-Yates with the library's own integer draws.
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[shuffle_rng.below(i)]);
    EpochRecord rec;
    rec.epoch = epoch;
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t i = 0; i < order.size() && !stop; i += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - i);
      batch_examples.clear();
      for (std::size_t j = 0; j < n; ++j) batch_examples.push_back(data.train[order[i + j]]);
      const TokenBatch batch = make_batch(batch_examples);
      for (const auto& t : trainables) t.tensor->zero_grad();
      Graph g;
      Var logits = forward(g, w, batch, nullptr, adapters);
      Var loss = ops::cross_entropy(g, logits, batch.labels);
      const double value = g.value(loss)[0];
      if (!std::isfinite(value)) {
        throw DivergenceError(std::string("train: non-finite loss at epoch ") + std::to_string(epoch) + ", step " +
                              std::to_string(opt.steps() + 1) + " (" + regime_name(config.regime) + ")");
      }
      g.backward(loss);
      opt.step(trainables);
      loss_sum += value * static_cast<double>(n);
      seen += n;
      ++rec.steps;
      if (config.max_steps != 0 && opt.steps() >= config.max_steps) stop = true;
    }
    rec.train_loss = loss_sum / static_cast<double>(seen);
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (epoch % config.eval_every == 0 || epoch == config.epochs || stop) {
      rec.eval_accuracy = evaluate_accuracy(w, data.eval, config.batch_size, adapters);
      report.final_accuracy = *rec.eval_accuracy;
    }
    report.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  report.steps = opt.steps();
  for (const auto& t : trainables) t.tensor->clear_grad();
  return result;
}

nlohmann::json to_json(const TrainReport& report, bool include_timing) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : report.epochs) {
    nlohmann::json j{{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"steps", e.steps}};
    j["eval_accuracy"] = e.eval_accuracy ? nlohmann::json(*e.eval_accuracy) : nlohmann::json(nullptr);
    if (include_timing) j["seconds"] = e.seconds;
    epochs.push_back(std::move(j));
  }
  nlohmann::json j{{"format", "palab-train-report"},
                   {"regime", regime_name(report.regime)},
                   {"initial_eval_accuracy", report.initial_eval_accuracy},
                   {"final_accuracy", report.final_accuracy},
                   {"steps", report.steps},
                   {"trainable_params", report.trainable_params},
                   {"total_params", report.total_params},
                   {"trainable_fraction", report.total_params == 0
                                              ? 0.0
                                              : static_cast<double>(report.trainable_params) /
                                                    static_cast<double>(report.total_params)},
                   {"kept_heads", report.kept_heads},
                   {"epochs", std::move(epochs)}};
  j["rank_plan"] = report.rank_plan ? to_json(*report.rank_plan) : nlohmann::json(nullptr);
  return j;
}

}  // namespace palab
