#include "palab/checkpoint.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "palab/digest.hpp"
#include "palab/errors.hpp"

namespace palab {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr std::array<char, 8> kMagic = {'P', 'A', 'L', 'A', 'B', 'C', 'K', 'P'};

struct Entry {
  std::string name;
  const Tensor* tensor;
};

template <class T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

void write_file(const std::filesystem::path& path, nlohmann::json manifest, const std::vector<Entry>& entries) {
  nlohmann::json tensors = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : entries) {
    tensors.push_back({{"name", e.name}, {"shape", e.tensor->shape()}, {"offset", offset},
                       {"count", e.tensor->size()}});
    offset += e.tensor->size();
  }
  manifest["tensors"] = std::move(tensors);
  const std::string text = manifest.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(kMagic.data(), kMagic.size());
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, 0);
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const std::size_t header = kMagic.size() + 16 + text.size();
  static constexpr char kZeros[8] = {};
  out.write(kZeros, static_cast<std::streamsize>((8 - header % 8) % 8));
  for (const auto& e : entries) {
    const auto data = e.tensor->data();
    out.write(reinterpret_cast<const char*>(data.data()), static_cast<std::streamsize>(data.size_bytes()));
  }
  if (!out) throw FormatError("failed writing " + path.string());
}

struct RawFile {
  nlohmann::json manifest;
  std::vector<double> data;
  std::map<std::string, const nlohmann::json*> index;
};

template <class T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof v)) throw FormatError(path.string() + ": truncated header");
  return v;
}

nlohmann::json read_header(std::ifstream& in, const std::filesystem::path& path, std::size_t& header_bytes) {
  std::array<char, 8> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw FormatError(path.string() + ": not a palab checkpoint");
  }
  const auto version = get<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(version));
  }
  get<std::uint32_t>(in, path);
  const auto length = get<std::uint64_t>(in, path);
  if (length > (std::uint64_t{1} << 32)) throw FormatError(path.string() + ": implausible manifest length");
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) {
    throw FormatError(path.string() + ": truncated manifest");
  }
  header_bytes = kMagic.size() + 16 + length;
  header_bytes += (8 - header_bytes % 8) % 8;
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": manifest is not valid JSON: " + e.what());
  }
}

RawFile read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  RawFile f;
  std::size_t header = 0;
  f.manifest = read_header(in, path, header);
  in.seekg(0, std::ios::end);
  const auto size = static_cast<std::size_t>(in.tellg());
  if (size < header || (size - header) % sizeof(double) != 0) {
    throw FormatError(path.string() + ": data section is truncated");
  }
  f.data.resize((size - header) / sizeof(double));
  in.seekg(static_cast<std::streamoff>(header));
  in.read(reinterpret_cast<char*>(f.data.data()), static_cast<std::streamsize>(f.data.size() * sizeof(double)));
  if (!in) throw FormatError(path.string() + ": failed reading tensor data");
  try {
    for (const auto& t : f.manifest.at("tensors")) f.index[t.at("name").get<std::string>()] = &t;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad tensor table: " + e.what());
  }
  return f;
}

Tensor take(const RawFile& f, const std::string& name, const std::filesystem::path& path) {
  const auto it = f.index.find(name);
  if (it == f.index.end()) throw FormatError(path.string() + ": missing tensor " + name);
  const auto& t = *it->second;
  Shape shape;
  std::size_t offset = 0;
  std::size_t count = 0;
  try {
    shape = t.at("shape").get<Shape>();
    offset = t.at("offset").get<std::size_t>();
    count = t.at("count").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": tensor " + name + ": " + e.what());
  }
  if (shape_size(shape) != count || offset > f.data.size() || count > f.data.size() - offset) {
    throw FormatError(path.string() + ": tensor " + name + " does not fit the data section");
  }
  try {
    return Tensor(std::move(shape), std::vector<double>(f.data.begin() + static_cast<std::ptrdiff_t>(offset),
                                                        f.data.begin() + static_cast<std::ptrdiff_t>(offset + count)));
  } catch (const Error& e) {
    throw FormatError(path.string() + ": tensor " + name + ": " + e.what());
  }
}

}  // namespace

void save_model(const std::filesystem::path& path, const TransformerWeights& w, const HeadMask* mask) {
  validate_structure(w);
  std::vector<Entry> entries;
  for_each_parameter(w, [&](const std::string& name, ParamRole, const Tensor& t) { entries.push_back({name, &t}); });
  if (mask != nullptr) {
    if (mask->xi.shape() != Shape{w.config.num_layers, w.config.num_heads}) {
      throw ShapeError("head mask does not match the model");
    }
    entries.push_back({"head_mask", &mask->xi});
  }
  nlohmann::json head_map = nlohmann::json::array();
  for (const auto& b : w.blocks) head_map.push_back(b.heads);
  nlohmann::json m{{"format", "palab-checkpoint"},
                   {"version", kCheckpointVersion},
                   {"kind", "model"},
                   {"config", to_json(w.config)},
                   {"head_index_map", std::move(head_map)},
                   {"has_head_mask", mask != nullptr},
                   {"merge_count", w.merge_count},
                   {"digest", digest_hex(weights_digest(w))}};
  write_file(path, std::move(m), entries);
}

ModelCheckpoint load_model(const std::filesystem::path& path) {
  const RawFile f = read_file(path);
  ModelCheckpoint ck;
  TransformerWeights& w = ck.weights;
  bool has_mask = false;
  std::string digest;
  try {
    const auto& m = f.manifest;
    if (m.at("kind") != "model") throw FormatError(path.string() + ": not a model checkpoint");
    w.config = model_config_from_json(m.at("config"));
    const auto& head_map = m.at("head_index_map");
    if (head_map.size() != w.config.num_layers) throw FormatError(path.string() + ": head_index_map length");
    w.blocks.resize(w.config.num_layers);
    for (std::size_t l = 0; l < w.blocks.size(); ++l) w.blocks[l].heads = head_map[l].get<std::vector<std::size_t>>();
    w.merge_count = m.at("merge_count").get<std::size_t>();
    has_mask = m.at("has_head_mask").get<bool>();
    digest = m.at("digest").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": manifest: " + e.what());
  } catch (const InputError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  for_each_parameter(w, [&](const std::string& name, ParamRole, Tensor& t) { t = take(f, name, path); });
  try {
    validate_structure(w);
  } catch (const ShapeError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  if (has_mask) {
    ck.mask = HeadMask{take(f, "head_mask", path)};
    if (ck.mask->xi.shape() != Shape{w.config.num_layers, w.config.num_heads}) {
      throw FormatError(path.string() + ": head mask shape does not match the config");
    }
  }
  if (digest != digest_hex(weights_digest(w))) throw FormatError(path.string() + ": digest mismatch");
  return ck;
}

void save_adapters(const std::filesystem::path& path, const LoraAdapters& adapters, std::uint64_t base_digest) {
  std::vector<Entry> entries;
  for_each_adapter_parameter(adapters, [&](const std::string& name, const Tensor& t) { entries.push_back({name, &t}); });
  nlohmann::json m{{"format", "palab-checkpoint"},
                   {"version", kCheckpointVersion},
                   {"kind", "adapters"},
                   {"rank_plan", to_json(adapters.plan)},
                   {"scaling", adapters.scaling},
                   {"seed", adapters.seed},
                   {"base_digest", digest_hex(base_digest)}};
  write_file(path, std::move(m), entries);
}

AdapterCheckpoint load_adapters(const std::filesystem::path& path) {
  const RawFile f = read_file(path);
  AdapterCheckpoint ck;
  LoraAdapters& a = ck.adapters;
  try {
    const auto& m = f.manifest;
    if (m.at("kind") != "adapters") throw FormatError(path.string() + ": not an adapter checkpoint");
    a.plan = rank_plan_from_json(m.at("rank_plan"));
    a.scaling = m.at("scaling").get<double>();
    a.seed = m.at("seed").get<std::uint64_t>();
    ck.base_digest = parse_digest_hex(m.at("base_digest").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": manifest: " + e.what());
  }
  a.blocks.resize(a.plan.block_rank.size());
  for (std::size_t l = 0; l < a.blocks.size(); ++l) a.blocks[l].rank = a.plan.block_rank[l];
  for_each_adapter_parameter(a, [&](const std::string& name, Tensor& t) { t = take(f, name, path); });
  for (std::size_t l = 0; l < a.blocks.size(); ++l) {
    for (LoraTarget t : kLoraTargets) {
      const auto& p = a.blocks[l][t];
      if (p.a.rank() != 2 || p.b.rank() != 2 || p.a.cols() != a.blocks[l].rank || p.b.rows() != a.blocks[l].rank) {
        throw FormatError(path.string() + ": adapter block " + std::to_string(l) + " " + target_name(t) +
                          " does not match its rank");
      }
    }
  }
  return ck;
}

nlohmann::json read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read " + path.string());
  std::size_t header = 0;
  return read_header(in, path, header);
}

}  // namespace palab
