#pragma once

// Corpus ingestion: whitespace tokenizer, frequency vocabulary, fixed-length
// packing, MLM corruption, and the on-disk dataset cache.

#include "outlier_lab/rng.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace olab {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : text) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Documents are separated by one or more blank lines.
inline std::vector<std::string> split_documents(std::string_view text) {
  std::vector<std::string> docs;
  std::string cur;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    std::string_view line = text.substr(pos, nl - pos);
    const bool blank = std::all_of(line.begin(), line.end(),
                                   [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
    if (blank) {
      if (!cur.empty()) docs.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.append(line);
      cur.push_back('\n');
    }
    pos = nl + 1;
  }
  if (!cur.empty()) docs.push_back(std::move(cur));
  return docs;
}

class Vocab {
 public:
  static constexpr std::int32_t kPad = 0;
  static constexpr std::int32_t kMask = 1;
  static constexpr std::int32_t kCls = 2;
  static constexpr std::int32_t kSep = 3;
  static constexpr std::int32_t kUnk = 4;
  static constexpr std::int32_t kNumReserved = 5;

  Vocab() : Vocab(std::vector<std::string>{}) {}

  /// `words` are the non-reserved tokens in id order (ids start at 5).
  explicit Vocab(const std::vector<std::string>& words) {
    for (const char* r : {"[PAD]", "[MASK]", "[CLS]", "[SEP]", "[UNK]"}) add(r);
    for (const auto& w : words) {
      if (index_.contains(w)) throw DataError("duplicate vocabulary token: " + w);
      add(w);
    }
  }

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }

  std::int32_t id(const std::string& tok) const {
    auto it = index_.find(tok);
    return it == index_.end() ? kUnk : it->second;
  }

  static bool is_reserved(std::int32_t id) { return id < kNumReserved; }

  std::vector<std::int32_t> encode(std::string_view text) const {
    std::vector<std::int32_t> ids;
    for (const auto& t : tokenize(text)) ids.push_back(id(t));
    return ids;
  }

  std::string decode(std::span<const std::int32_t> ids) const {
    std::string out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) out.push_back(' ');
      out += token(ids[i]);
    }
    return out;
  }

  std::uint64_t hash() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& t : tokens_) h = fnv1a(t + '\n', h);
    return h;
  }

 private:
  void add(const std::string& t) {
    index_.emplace(t, static_cast<std::int32_t>(tokens_.size()));
    tokens_.push_back(t);
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::int32_t> index_;
};

/// The max_size - 5 most frequent lowercase whitespace tokens, ordered by
/// descending frequency then lexicographically, after the reserved ids.
inline Vocab build_vocab(std::string_view corpus, std::size_t max_size) {
  if (max_size <= static_cast<std::size_t>(Vocab::kNumReserved)) {
    throw DataError("vocab max_size must exceed the 5 reserved tokens");
  }
  std::map<std::string, std::size_t> freq;
  for (auto& t : tokenize(corpus)) ++freq[std::move(t)];
  for (const char* r : {"[pad]", "[mask]", "[cls]", "[sep]", "[unk]"}) freq.erase(r);
  if (freq.empty()) throw DataError("build_vocab: empty corpus");
  std::vector<std::pair<std::string, std::size_t>> items(freq.begin(), freq.end());
  std::stable_sort(items.begin(), items.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  const std::size_t keep = std::min(items.size(), max_size - Vocab::kNumReserved);
  std::vector<std::string> words;
  words.reserve(keep);
  for (std::size_t i = 0; i < keep; ++i) words.push_back(items[i].first);
  return Vocab(words);
}

enum class PackMode { Concat, PerDocument };

inline std::string to_string(PackMode m) { return m == PackMode::Concat ? "concat" : "per_document"; }

struct PackedDataset {
  std::size_t seq_len = 0;
  std::vector<std::int32_t> ids;  // n_sequences * seq_len, row-major
  std::uint64_t corpus_hash = 0;
  PackMode mode = PackMode::Concat;

  std::size_t size() const { return seq_len == 0 ? 0 : ids.size() / seq_len; }
  std::span<const std::int32_t> sequence(std::size_t i) const {
    return std::span<const std::int32_t>(ids).subspan(i * seq_len, seq_len);
  }
  std::uint64_t hash() const {
    std::uint64_t h = fnv1a(std::to_string(seq_len) + ":" + std::to_string(corpus_hash));
    for (std::int32_t v : ids) {
      h ^= static_cast<std::uint32_t>(v);
      h *= 0x100000001b3ULL;
    }
    return h;
  }
};

/// Chunks an id stream into consecutive length-T sequences, dropping the
/// remainder.
inline PackedDataset pack_ids(std::span<const std::int32_t> stream, std::size_t T,
                              std::uint64_t corpus_hash = 0) {
  if (T < 2) throw DataError("pack: sequence length must be >= 2");
  if (stream.size() < T) {
    throw DataError("pack: corpus has " + std::to_string(stream.size()) +
                    " tokens, fewer than sequence length " + std::to_string(T));
  }
  PackedDataset ds;
  ds.seq_len = T;
  ds.corpus_hash = corpus_hash;
  ds.ids.assign(stream.begin(), stream.begin() + static_cast<std::ptrdiff_t>(stream.size() / T * T));
  return ds;
}

inline PackedDataset pack(std::string_view corpus, const Vocab& vocab, std::size_t T,
                          PackMode mode = PackMode::Concat) {
  const std::uint64_t h = fnv1a(corpus);
  if (mode == PackMode::Concat) return pack_ids(vocab.encode(corpus), T, h);
  if (T < 2) throw DataError("pack: sequence length must be >= 2");
  PackedDataset ds;
  ds.seq_len = T;
  ds.corpus_hash = h;
  ds.mode = mode;
  for (const auto& doc : split_documents(corpus)) {
    auto ids = vocab.encode(doc);
    ds.ids.insert(ds.ids.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(ids.size() / T * T));
  }
  if (ds.ids.empty()) throw DataError("pack: no document reaches sequence length " + std::to_string(T));
  return ds;
}

/// Splits off the last `fraction` of sequences (at least one) as validation.
inline std::pair<PackedDataset, PackedDataset> split_validation(const PackedDataset& ds,
                                                                double fraction = 0.02) {
  if (ds.size() < 2) throw DataError("split_validation: need at least 2 sequences");
  std::size_t n_val = static_cast<std::size_t>(fraction * static_cast<double>(ds.size()));
  n_val = std::clamp<std::size_t>(n_val, 1, ds.size() - 1);
  const std::size_t cut = (ds.size() - n_val) * ds.seq_len;
  PackedDataset train = ds;
  PackedDataset val = ds;
  train.ids.assign(ds.ids.begin(), ds.ids.begin() + static_cast<std::ptrdiff_t>(cut));
  val.ids.assign(ds.ids.begin() + static_cast<std::ptrdiff_t>(cut), ds.ids.end());
  return {std::move(train), std::move(val)};
}

struct MaskedBatch {
  std::vector<std::int32_t> corrupted;
  std::vector<std::int32_t> labels;  // original id at selected positions, -1 elsewhere
  std::vector<std::size_t> positions;
};

/// Selects each non-reserved position with probability mlm_prob; selected
/// positions become [MASK] (80%), a uniform random non-reserved token (10%),
/// or stay unchanged (10%). `rng` needs uniform() in [0,1) and below(n).
template <class R>
MaskedBatch mask_batch(std::span<const std::int32_t> batch, std::size_t vocab_size,
                       double mlm_prob, R& rng) {
  MaskedBatch out{std::vector<std::int32_t>(batch.begin(), batch.end()),
                  std::vector<std::int32_t>(batch.size(), -1),
                  {}};
  const std::size_t n_regular = vocab_size - static_cast<std::size_t>(Vocab::kNumReserved);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (Vocab::is_reserved(batch[i])) continue;
    if (!(rng.uniform() < mlm_prob)) continue;
    out.labels[i] = batch[i];
    out.positions.push_back(i);
    const double branch = rng.uniform();
    if (branch < 0.8) {
      out.corrupted[i] = Vocab::kMask;
    } else if (branch < 0.9 && n_regular > 0) {
      out.corrupted[i] = Vocab::kNumReserved + static_cast<std::int32_t>(rng.below(n_regular));
    }
  }
  return out;
}

// ---- dataset cache: manifest.txt + ids.bin (int32 little-endian) ----

namespace detail {
inline void write_le32(std::ostream& os, std::span<const std::int32_t> v) {
  for (std::int32_t x : v) {
    const auto u = static_cast<std::uint32_t>(x);
    const char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                       static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
    os.write(b, 4);
  }
}
inline std::vector<std::int32_t> read_le32(std::istream& is, std::size_t n) {
  std::vector<unsigned char> raw(n * 4);
  is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (static_cast<std::size_t>(is.gcount()) != raw.size()) throw DataError("dataset cache: truncated ids");
  std::vector<std::int32_t> v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t u = raw[4 * i] | (raw[4 * i + 1] << 8) | (raw[4 * i + 2] << 16) |
                            (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
    v[i] = static_cast<std::int32_t>(u);
  }
  return v;
}
}  // namespace detail

inline void save_dataset_cache(const std::filesystem::path& dir, const PackedDataset& ds,
                               std::uint64_t vocab_hash) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream bin(dir / "ids.bin", std::ios::binary);
    detail::write_le32(bin, ds.ids);
    if (!bin) throw DataError("dataset cache: cannot write " + (dir / "ids.bin").string());
  }
  std::ofstream m(dir / "manifest.txt");
  m << "format outlier-lab-dataset\nversion 1\n"
    << "seq_len " << ds.seq_len << "\n"
    << "n_sequences " << ds.size() << "\n"
    << "n_tokens " << ds.ids.size() << "\n"
    << "pack_mode " << to_string(ds.mode) << "\n"
    << "corpus_hash " << ds.corpus_hash << "\n"
    << "vocab_hash " << vocab_hash << "\n";
  if (!m) throw DataError("dataset cache: cannot write manifest");
}

inline PackedDataset load_dataset_cache(const std::filesystem::path& dir,
                                        std::uint64_t expected_vocab_hash) {
  std::ifstream m(dir / "manifest.txt");
  if (!m) throw DataError("dataset cache: missing " + (dir / "manifest.txt").string());
  std::map<std::string, std::string> kv;
  std::string key;
  std::string value;
  while (m >> key >> value) kv[key] = value;
  auto need = [&](const std::string& k) -> const std::string& {
    auto it = kv.find(k);
    if (it == kv.end()) throw DataError("dataset cache manifest: missing field '" + k + "'");
    return it->second;
  };
  if (need("version") != "1") throw DataError("dataset cache manifest: unsupported version");
  if (std::stoull(need("vocab_hash")) != expected_vocab_hash) {
    throw DataError("dataset cache manifest: vocab_hash does not match the vocabulary");
  }
  PackedDataset ds;
  ds.seq_len = std::stoull(need("seq_len"));
  ds.corpus_hash = std::stoull(need("corpus_hash"));
  ds.mode = need("pack_mode") == "concat" ? PackMode::Concat : PackMode::PerDocument;
  const std::size_t n = std::stoull(need("n_tokens"));
  if (ds.seq_len == 0 || n != std::stoull(need("n_sequences")) * ds.seq_len) {
    throw DataError("dataset cache manifest: n_tokens inconsistent with n_sequences * seq_len");
  }
  std::ifstream bin(dir / "ids.bin", std::ios::binary);
  ds.ids = detail::read_le32(bin, n);
  return ds;
}

inline std::string read_text_files(const std::vector<std::filesystem::path>& paths) {
  std::string all;
  for (const auto& p : paths) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot read corpus file " + p.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    if (!all.empty()) all += "\n\n";
    all += ss.str();
  }
  return all;
}

}  // namespace olab
