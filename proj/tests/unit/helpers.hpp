#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "palab/data.hpp"
#include "palab/graph.hpp"
#include "palab/model.hpp"
#include "palab/rng.hpp"
#include "palab/tensor.hpp"

namespace palab::test {

inline Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(shape_size(shape));
  for (double& x : v) x = lo + (hi - lo) * rng.uniform();
  return Tensor(std::move(shape), std::move(v));
}

// Small geometry for exhaustive gradient checks.
inline ModelConfig micro_config() {
  ModelConfig c;
  c.num_layers = 2;
  c.num_heads = 2;
  c.hidden = 8;
  c.head_dim = 4;
  c.ffn_dim = 12;
  c.vocab_size = 10;
  c.max_positions = 8;
  c.num_classes = 3;
  return c;
}

// Weights with every tensor drawn from U(-0.5, 0.5) except LayerNorm gains
// near one, so gradients are not dominated by the 0.02 init scale.
inline TransformerWeights random_weights(const ModelConfig& c, std::uint64_t seed) {
  TransformerWeights w = init_weights(c, seed);
  Rng rng(seed + 1000);
  for_each_parameter(w, [&](const std::string& name, ParamRole role, Tensor& t) {
    const bool gain = name.ends_with("gamma");
    for (double& x : t.data()) x = gain ? 1.0 + 0.2 * (rng.uniform() - 0.5) : rng.uniform() - 0.5;
    (void)role;
  });
  return w;
}

// Random batch with row lengths in [min_len, seq_len]; the first token is [CLS].
inline TokenBatch random_batch(const ModelConfig& c, std::size_t batch, std::size_t seq_len, Rng& rng,
                               std::size_t min_len = 1) {
  Dataset d;
  for (std::size_t i = 0; i < batch; ++i) {
    Example e;
    const std::size_t len = min_len + rng.below(seq_len - min_len + 1);
    e.tokens.push_back(kClsId);
    while (e.tokens.size() < len) e.tokens.push_back(kFirstSymbolId + rng.below(c.vocab_size - kFirstSymbolId));
    e.label = rng.below(c.num_classes);
    d.push_back(std::move(e));
  }
  return make_batch(d);
}

inline double rel_err(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

// Largest relative error between reverse-mode gradients of `loss` with
// respect to each tensor in `params` and central differences with step h.
// Gradients may be near zero, so errors are taken relative to
// max(|analytic|, |numeric|, floor).
inline double gradient_check(const std::function<Var(Graph&)>& loss, std::vector<Tensor*> params, double h = 1e-5,
                             double floor = 1e-6, std::size_t stride = 1) {
  for (Tensor* p : params) {
    p->set_requires_grad(true);
    p->clear_grad();
  }
  {
    Graph g;
    g.backward(loss(g));
  }
  auto eval = [&] {
    Graph g(Graph::Mode::kNoGrad);
    return g.value(loss(g))[0];
  };
  double worst = 0.0;
  for (Tensor* p : params) {
    std::vector<double> analytic(p->grad().begin(), p->grad().end());
    for (std::size_t i = 0; i < p->size(); i += stride) {
      const double x = (*p)[i];
      (*p)[i] = x + h;
      const double up = eval();
      (*p)[i] = x - h;
      const double down = eval();
      (*p)[i] = x;
      worst = std::max(worst, rel_err(analytic[i], (up - down) / (2 * h), floor));
    }
    p->clear_grad();
  }
  return worst;
}

}  // namespace palab::test
