#include "palab/data.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>

#include "palab/errors.hpp"
#include "palab/rng.hpp"

namespace palab {

TokenBatch make_batch(std::span<const Example> examples) {
  if (examples.empty()) throw InputError("cannot build an empty batch");
  std::size_t longest = 0;
  for (const auto& e : examples) longest = std::max(longest, e.tokens.size());
  TokenBatch b;
  b.batch_size = examples.size();
  b.seq_len = longest;
  b.token_ids.assign(b.batch_size * longest, kPadId);
  b.attention_mask.assign(b.batch_size * longest, 0);
  b.labels.reserve(examples.size());
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& t = examples[i].tokens;
    std::copy(t.begin(), t.end(), b.token_ids.begin() + i * longest);
    std::fill_n(b.attention_mask.begin() + i * longest, t.size(), std::uint8_t{1});
    b.labels.push_back(examples[i].label);
  }
  return b;
}

std::vector<TokenBatch> make_batches(const Dataset& data, std::size_t batch_size) {
  if (batch_size == 0) throw ContractError("batch size must be positive");
  std::vector<TokenBatch> out;
  for (std::size_t i = 0; i < data.size(); i += batch_size) {
    const std::size_t n = std::min(batch_size, data.size() - i);
    out.push_back(make_batch(std::span(data).subspan(i, n)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic tasks

const char* task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::kParity: return "parity";
    case TaskKind::kMajorityToken: return "majority-token";
    case TaskKind::kFirstLastMatch: return "first-last-match";
    case TaskKind::kContainsPattern: return "contains-pattern";
  }
  return "unknown";
}

TaskKind parse_task_kind(std::string_view name) {
  for (TaskKind k : {TaskKind::kParity, TaskKind::kMajorityToken, TaskKind::kFirstLastMatch,
                     TaskKind::kContainsPattern}) {
    if (name == task_name(k)) return k;
  }
  throw InputError("unknown task kind '" + std::string(name) + "'");
}

void SyntheticTaskSpec::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw InputError("task spec: " + what);
  };
  require(seq_len >= 1, "seq_len must be positive");
  require(train_size >= 1 && eval_size >= 1, "train and eval sizes must be at least 1");
  require(vocab_size >= kFirstSymbolId + 2, "vocab_size leaves fewer than two symbols");
  const std::size_t symbols = vocab_size - kFirstSymbolId;
  if (kind == TaskKind::kMajorityToken) {
    require(num_classes >= 2 && num_classes <= symbols, "majority-token needs 2..symbols classes");
  } else {
    require(num_classes == 2, std::string(task_name(kind)) + " is a two-class task");
  }
  if (kind == TaskKind::kContainsPattern) require(seq_len >= 2, "contains-pattern needs seq_len >= 2");
}

std::optional<std::size_t> synthetic_label(TaskKind kind, std::span<const std::size_t> body,
                                           std::size_t num_classes) {
  auto symbol = [](std::size_t id) { return id - kFirstSymbolId; };
  switch (kind) {
    case TaskKind::kParity: {
      std::size_t ones = 0;
      for (std::size_t id : body) ones += symbol(id) == 1 ? 1 : 0;
      return ones % 2;
    }
    case TaskKind::kMajorityToken: {
      std::vector<std::size_t> counts(num_classes, 0);
      for (std::size_t id : body) {
        if (symbol(id) < num_classes) ++counts[symbol(id)];
      }
      const auto top = std::max_element(counts.begin(), counts.end());
      if (std::count(counts.begin(), counts.end(), *top) > 1) return std::nullopt;
      return static_cast<std::size_t>(top - counts.begin());
    }
    case TaskKind::kFirstLastMatch:
      return body.front() == body.back() ? 1 : 0;
    case TaskKind::kContainsPattern:
      for (std::size_t i = 0; i + 1 < body.size(); ++i) {
        if (symbol(body[i]) == 0 && symbol(body[i + 1]) == 1) return 1;
      }
      return 0;
  }
  return std::nullopt;
}

namespace {

Dataset generate_split(const SyntheticTaskSpec& spec, std::size_t size, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t c = spec.num_classes;
  const std::size_t alphabet =
      spec.kind == TaskKind::kMajorityToken ? c : spec.vocab_size - kFirstSymbolId;
  std::vector<std::size_t> quota(c, size / c);
  for (std::size_t k = 0; k < size % c; ++k) ++quota[k];

  Dataset out;
  out.reserve(size);
  std::vector<std::size_t> body(spec.seq_len);
  const std::size_t max_attempts = 10000 * size + 10000;
  for (std::size_t attempt = 0; out.size() < size; ++attempt) {
    if (attempt == max_attempts) {
      throw InputError(std::string("task ") + task_name(spec.kind) +
                       ": could not fill balanced classes; check seq_len and vocab_size");
    }
    for (auto& id : body) id = kFirstSymbolId + rng.below(alphabet);
    const auto label = synthetic_label(spec.kind, body, c);
    if (!label || quota[*label] == 0) continue;
    --quota[*label];
    Example e;
    e.tokens.reserve(body.size() + 1);
    e.tokens.push_back(kClsId);
    e.tokens.insert(e.tokens.end(), body.begin(), body.end());
    e.label = *label;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace

DatasetSplit generate(const SyntheticTaskSpec& spec) {
  spec.validate();
  return DatasetSplit{generate_split(spec, spec.train_size, derive_seed(spec.seed, 10)),
                      generate_split(spec, spec.eval_size, derive_seed(spec.seed, 11))};
}

// ---------------------------------------------------------------------------
// Text ingestion

Vocabulary::Vocabulary() {
  add("[PAD]");
  add("[UNK]");
  add("[CLS]");
}

std::size_t Vocabulary::add(const std::string& token) {
  auto [it, inserted] = ids_.emplace(token, tokens_.size());
  if (inserted) tokens_.push_back(token);
  return it->second;
}

std::size_t Vocabulary::id(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  return it == ids_.end() ? kUnkId : it->second;
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot write vocabulary " + path.string());
  for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
  if (!out) throw FormatError("failed writing vocabulary " + path.string());
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot read vocabulary " + path.string());
  Vocabulary v;
  v.tokens_.clear();
  v.ids_.clear();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    std::size_t id = 0;
    const char* first = line.data() + (tab == std::string::npos ? 0 : tab + 1);
    const char* last = line.data() + line.size();
    auto [ptr, ec] = std::from_chars(first, last, id);
    if (tab == std::string::npos || ec != std::errc() || ptr != last || id != v.tokens_.size()) {
      throw FormatError(path.string() + ":" + std::to_string(line_no) +
                        ": expected 'token<TAB>id' with consecutive ids");
    }
    v.add(line.substr(0, tab));
  }
  if (v.size() < 3 || v.tokens_[kPadId] != "[PAD]" || v.tokens_[kUnkId] != "[UNK]" ||
      v.tokens_[kClsId] != "[CLS]") {
    throw FormatError(path.string() + ": vocabulary must start with [PAD], [UNK], [CLS]");
  }
  return v;
}

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> words;
  std::string current;
  for (char ch : text) {
    const auto uc = static_cast<unsigned char>(ch);
    if (std::isspace(uc)) {
      if (!current.empty()) words.push_back(std::move(current));
      current.clear();
    } else {
      current.push_back(static_cast<char>(std::tolower(uc)));
    }
  }
  if (!current.empty()) words.push_back(std::move(current));
  return words;
}

std::vector<std::size_t> encode(const Vocabulary& vocab, std::string_view text,
                                std::size_t max_positions) {
  if (max_positions == 0) throw ContractError("max_positions must be positive");
  std::vector<std::size_t> ids{kClsId};
  for (const auto& w : tokenize(text)) {
    if (ids.size() == max_positions) break;
    ids.push_back(vocab.id(w));
  }
  return ids;
}

TsvDataset ingest_tsv(const std::filesystem::path& path, const Vocabulary* vocab,
                      std::size_t max_positions) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot read " + path.string());
  TsvDataset out;
  if (vocab != nullptr) out.vocab = *vocab;
  std::vector<std::pair<std::size_t, std::string>> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    std::size_t label = 0;
    const char* last = line.data() + (tab == std::string::npos ? line.size() : tab);
    auto [ptr, ec] = std::from_chars(line.data(), last, label);
    if (tab == std::string::npos || ec != std::errc() || ptr != last || tab == 0) {
      throw InputError(path.string() + ":" + std::to_string(line_no) +
                       ": expected 'label<TAB>text' with a non-negative integer label");
    }
    rows.emplace_back(label, line.substr(tab + 1));
  }
  if (vocab == nullptr) {
    for (const auto& [label, text] : rows) {
      for (const auto& w : tokenize(text)) out.vocab.add(w);
    }
  }
  out.data.reserve(rows.size());
  for (const auto& [label, text] : rows) {
    out.data.push_back(Example{encode(out.vocab, text, max_positions), label});
  }
  return out;
}

}  // namespace palab
