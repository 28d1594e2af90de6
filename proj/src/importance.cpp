#include "palab/importance.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "palab/digest.hpp"
#include "palab/errors.hpp"
#include "palab/graph.hpp"
#include "palab/ops.hpp"

namespace palab {

std::uint64_t ImportanceMap::digest() const {
  Fnv1a h;
  h.update(static_cast<std::uint64_t>(layers()));
  h.update(static_cast<std::uint64_t>(heads()));
  h.update(raw.data());
  h.update(final.data());
  h.update(static_cast<std::uint64_t>(token_count));
  h.update(static_cast<std::uint64_t>(sample_size));
  return h.value();
}

RawImportance estimate_raw_importance(const TransformerWeights& w, std::span<const Example> sample,
                                      const ImportanceOptions& options) {
  if (sample.empty()) throw ContractError("importance: sample must not be empty");
  if (options.batch_size == 0) throw ContractError("importance: batch size must be positive");
  const ModelConfig& c = w.config;

  HeadMask mask = HeadMask::ones(c);
  mask.xi.set_requires_grad(true);

  TransformerWeights tracked;
  if (options.track_weight_grads) {
    tracked = w;
    for_each_parameter(tracked, [](const std::string&, ParamRole, Tensor& t) { t.set_requires_grad(true); });
  }

  std::vector<double> total(c.total_heads(), 0.0);
  std::size_t tokens = 0;
  for (std::size_t i = 0; i < sample.size(); i += options.batch_size) {
    const std::size_t n = std::min(options.batch_size, sample.size() - i);
    const TokenBatch batch = make_batch(sample.subspan(i, n));
    Graph g;
    Var logits = options.track_weight_grads ? forward(g, tracked, batch, &mask)
                                            : forward_masked(g, w, batch, mask);
    Var loss = ops::cross_entropy(g, logits, batch.labels, ops::Reduction::kSum);
    if (options.loss_scale != 1.0) loss = ops::scale(g, loss, options.loss_scale);
    g.backward(loss);
    auto grad = mask.xi.grad();
    for (std::size_t h = 0; h < total.size(); ++h) total[h] += std::abs(grad[h]);
    mask.xi.zero_grad();
    tokens += batch.token_count();
  }
  const double inv = 1.0 / static_cast<double>(tokens);
  for (double& v : total) v *= inv;
  return RawImportance{Tensor({c.num_layers, c.num_heads}, std::move(total)), tokens, sample.size()};
}

Tensor l2_normalize(const Tensor& raw, double epsilon) {
  if (!(epsilon > 0.0)) throw ContractError("l2_normalize: epsilon must be positive");
  double sq = 0.0;
  for (double v : raw.data()) sq += v * v;
  const double denom = std::sqrt(sq) + epsilon;
  std::vector<double> out(raw.data().begin(), raw.data().end());
  for (double& v : out) v /= denom;
  return Tensor(raw.shape(), std::move(out));
}

Tensor minmax_normalize(const Tensor& values) {
  std::vector<double> out(values.size(), 0.0);
  if (!out.empty()) {
    const auto [lo, hi] = std::minmax_element(values.data().begin(), values.data().end());
    const double low = *lo;
    const double range = *hi - *lo;
    if (range > 0.0) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = (values[i] - low) / range;
    }
  }
  return Tensor(values.shape(), std::move(out));
}

ImportanceMap finalize_importance(const RawImportance& raw, double epsilon) {
  if (raw.token_count == 0) throw ContractError("importance: token count must be positive");
  ImportanceMap map;
  map.raw = raw.raw;
  map.l2_normalized = l2_normalize(raw.raw, epsilon);
  map.final = minmax_normalize(map.l2_normalized);
  map.token_count = raw.token_count;
  map.sample_size = raw.sample_size;
  map.epsilon = epsilon;
  return map;
}

ImportanceMap compute_importance(const TransformerWeights& w, std::span<const Example> sample,
                                 const ImportanceOptions& options) {
  return finalize_importance(estimate_raw_importance(w, sample, options), options.epsilon);
}

std::vector<double> block_importance(const ImportanceMap& map) {
  std::vector<double> out(map.layers(), 0.0);
  for (std::size_t l = 0; l < map.layers(); ++l) {
    double s = 0.0;
    for (std::size_t h = 0; h < map.heads(); ++h) s += map.final.at(l, h);
    out[l] = s / static_cast<double>(map.heads());
  }
  return out;
}

std::span<const Example> importance_sample(const Dataset& data, std::size_t limit) {
  return std::span(data).first(std::min(limit, data.size()));
}

namespace {

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw ContractError("spearman: need two equal-length samples");
  const auto ra = average_ranks(a);
  const auto rb = average_ranks(b);
  const double n = static_cast<double>(a.size());
  const double mean = (n + 1.0) / 2.0;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - mean) * (rb[i] - mean);
    saa += (ra[i] - mean) * (ra[i] - mean);
    sbb += (rb[i] - mean) * (rb[i] - mean);
  }
  if (saa == 0.0 || sbb == 0.0) return std::numeric_limits<double>::quiet_NaN();
  return sab / std::sqrt(saa * sbb);
}

// ---------------------------------------------------------------------------
// Files

void export_importance_csv(const Tensor& final, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  char buf[32];
  for (std::size_t l = 0; l < final.rows(); ++l) {
    for (std::size_t h = 0; h < final.cols(); ++h) {
      std::snprintf(buf, sizeof buf, "%.17g", final.at(l, h));
      if (h > 0) out << ',';
      out << buf;
    }
    out << '\n';
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

Tensor import_importance_csv(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::vector<double> values;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::size_t count = 0;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      char* end = nullptr;
      const double v = std::strtod(cell.c_str(), &end);
      if (end == cell.c_str() || *end != '\0') {
        throw FormatError(path.string() + ":" + std::to_string(rows + 1) + ": bad value '" + cell + "'");
      }
      values.push_back(v);
      ++count;
    }
    if (rows > 0 && count != cols) throw FormatError(path.string() + ": ragged rows");
    cols = count;
    ++rows;
  }
  if (rows == 0) throw FormatError(path.string() + ": empty importance file");
  return Tensor({rows, cols}, std::move(values));
}

void export_importance_ppm(const Tensor& final, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write " + path.string());
  out << "P6\n" << final.cols() << ' ' << final.rows() << "\n255\n";
  for (double v : final.data()) {
    const auto level = static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    out.put(static_cast<char>(level)).put(static_cast<char>(level)).put(static_cast<char>(level));
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

nlohmann::json importance_to_json(const ImportanceMap& map, std::uint64_t model_digest) {
  auto grid = [](const Tensor& t) {
    nlohmann::json rows = nlohmann::json::array();
    for (std::size_t r = 0; r < t.rows(); ++r) {
      nlohmann::json row = nlohmann::json::array();
      for (std::size_t c = 0; c < t.cols(); ++c) row.push_back(t.at(r, c));
      rows.push_back(std::move(row));
    }
    return rows;
  };
  return nlohmann::json{{"format", "palab-importance"},
                        {"version", 1},
                        {"layers", map.layers()},
                        {"heads", map.heads()},
                        {"token_count", map.token_count},
                        {"sample_size", map.sample_size},
                        {"epsilon", map.epsilon},
                        {"model_digest", digest_hex(model_digest)},
                        {"map_digest", digest_hex(map.digest())},
                        {"raw", grid(map.raw)},
                        {"l2_normalized", grid(map.l2_normalized)},
                        {"final", grid(map.final)}};
}

ImportanceMap importance_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "palab-importance") throw FormatError("not an importance file");
    const auto layers = j.at("layers").get<std::size_t>();
    const auto heads = j.at("heads").get<std::size_t>();
    auto read = [&](const char* key) {
      std::vector<double> v;
      const auto& rows = j.at(key);
      if (rows.size() != layers) throw FormatError(std::string("importance: ") + key + " has wrong row count");
      for (const auto& row : rows) {
        if (row.size() != heads) throw FormatError(std::string("importance: ") + key + " has wrong column count");
        for (const auto& x : row) v.push_back(x.get<double>());
      }
      return Tensor({layers, heads}, std::move(v));
    };
    ImportanceMap map;
    map.raw = read("raw");
    map.l2_normalized = read("l2_normalized");
    map.final = read("final");
    map.token_count = j.at("token_count").get<std::size_t>();
    map.sample_size = j.at("sample_size").get<std::size_t>();
    map.epsilon = j.at("epsilon").get<double>();
    if (j.at("map_digest").get<std::string>() != digest_hex(map.digest())) {
      throw FormatError("importance: map digest does not match its contents");
    }
    return map;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("importance: ") + e.what());
  }
}

}  // namespace palab
