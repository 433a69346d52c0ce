#pragma once

// Checkpoint file: a text header, then one little-endian binary blob.
//
//   outlier-lab-checkpoint
//   version 1
//   step <n>
//   dtype f64|f32
//   vocab_size <n>
//   vocab_hash <n>
//   adam_t <n>                  (only when optimizer state is stored)
//   config <bytes>\n<run config snapshot>
//   vocab <bytes>\n<non-reserved tokens, one per line>
//   arrays <n>
//   array <name> <dtype> <d0,d1,...> <offset> <nbytes>     (n lines)
//   end
//   <blob>
//
// Offsets are relative to the first blob byte. Optimizer moments are stored
// as arrays "adam.m.<param>" and "adam.v.<param>". f64 keeps training state
// bit-exact; f32 is a smaller export that cannot resume bit-exactly.

#include "outlier_lab/config.hpp"
#include "outlier_lab/data.hpp"
#include "outlier_lab/model.hpp"
#include "outlier_lab/trainer.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace olab {

inline constexpr int kCheckpointVersion = 1;
inline constexpr const char* kCheckpointMagic = "outlier-lab-checkpoint";

class CheckpointError : public IoError {
 public:
  CheckpointError(const std::string& field, const std::string& what)
      : IoError("checkpoint " + field + ": " + what), field_(field) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

enum class CheckpointDtype { F64, F32 };

inline std::string to_string(CheckpointDtype d) { return d == CheckpointDtype::F64 ? "f64" : "f32"; }

struct LoadedCheckpoint {
  RunConfig config;
  Vocab vocab;
  Transformer model;
  std::optional<AdamState> adam;
  std::size_t step = 0;
  CheckpointDtype dtype = CheckpointDtype::F64;
};

namespace detail {

struct ArrayEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;
  std::size_t nbytes = 0;
};

inline void append_le(std::string& blob, std::span<const double> v, CheckpointDtype dt) {
  if (dt == CheckpointDtype::F64) {
    for (double x : v) {
      const auto bits = std::bit_cast<std::uint64_t>(x);
      for (int b = 0; b < 8; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  } else {
    for (double x : v) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(x));
      for (int b = 0; b < 4; ++b) blob.push_back(static_cast<char>((bits >> (8 * b)) & 0xff));
    }
  }
}

inline std::vector<double> read_le(std::string_view bytes, CheckpointDtype dt) {
  const std::size_t w = dt == CheckpointDtype::F64 ? 8 : 4;
  std::vector<double> out(bytes.size() / w);
  for (std::size_t i = 0; i < out.size(); ++i) {
    std::uint64_t bits = 0;
    for (std::size_t b = 0; b < w; ++b) {
      bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[i * w + b])) << (8 * b);
    }
    out[i] = dt == CheckpointDtype::F64 ? std::bit_cast<double>(bits)
                                        : static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)));
  }
  return out;
}

inline std::string shape_str(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out;
}

inline std::size_t parse_count(const std::string& text, const std::string& field) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || ec != std::errc() || p != text.data() + text.size()) {
    throw CheckpointError(field, "expected a non-negative integer, got '" + text + "'");
  }
  return v;
}

// Reads the header line by line from an in-memory file image.
class HeaderReader {
 public:
  explicit HeaderReader(std::string_view data) : data_(data) {}

  std::string line(const std::string& field) {
    const auto nl = data_.find('\n', pos_);
    if (nl == std::string_view::npos) throw CheckpointError(field, "file ends inside the header");
    std::string l(data_.substr(pos_, nl - pos_));
    pos_ = nl + 1;
    return l;
  }

  /// "key value" line with the given key.
  std::string keyed(const std::string& key) {
    std::string l = line(key);
    const auto sp = l.find(' ');
    if (sp == std::string::npos || l.substr(0, sp) != key) {
      throw CheckpointError(key, "expected '" + key + " <value>', got '" + l + "'");
    }
    return l.substr(sp + 1);
  }

  std::string_view bytes(std::size_t n, const std::string& field) {
    if (pos_ + n > data_.size()) throw CheckpointError(field, "file ends inside the header");
    auto out = data_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::string peek_key() const {
    const auto nl = data_.find('\n', pos_);
    std::string_view l = data_.substr(pos_, nl == std::string_view::npos ? data_.size() - pos_ : nl - pos_);
    return std::string(l.substr(0, l.find(' ')));
  }

  std::size_t pos() const { return pos_; }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::filesystem::path& path, const RunConfig& config,
                            const Vocab& vocab, const Transformer& model, const AdamState* adam,
                            std::size_t step, CheckpointDtype dtype = CheckpointDtype::F64) {
  std::vector<detail::ArrayEntry> entries;
  std::string blob;
  auto add = [&](const std::string& name, const Shape& shape, std::span<const double> v) {
    const std::size_t off = blob.size();
    detail::append_le(blob, v, dtype);
    entries.push_back({name, shape, off, blob.size() - off});
  };
  const auto& params = model.parameters();
  for (const auto& p : params) add(p.name, p.tensor.shape(), p.tensor.data());
  if (adam) {
    if (adam->m.size() != params.size()) throw std::logic_error("save_checkpoint: optimizer state mismatch");
    for (std::size_t i = 0; i < params.size(); ++i) {
      add("adam.m." + params[i].name, params[i].tensor.shape(), adam->m[i]);
      add("adam.v." + params[i].name, params[i].tensor.shape(), adam->v[i]);
    }
  }

  std::string vocab_text;
  for (std::size_t i = Vocab::kNumReserved; i < vocab.size(); ++i) vocab_text += vocab.tokens()[i] + "\n";
  const std::string cfg_text = config.to_ini().str();

  std::ostringstream h;
  h << kCheckpointMagic << "\n"
    << "version " << kCheckpointVersion << "\n"
    << "step " << step << "\n"
    << "dtype " << to_string(dtype) << "\n"
    << "vocab_size " << model.config().vocab_size << "\n"
    << "vocab_hash " << vocab.hash() << "\n";
  if (adam) h << "adam_t " << adam->t << "\n";
  h << "config " << cfg_text.size() << "\n" << cfg_text;
  h << "vocab " << vocab_text.size() << "\n" << vocab_text;
  h << "arrays " << entries.size() << "\n";
  for (const auto& e : entries) {
    h << "array " << e.name << " " << to_string(dtype) << " " << detail::shape_str(e.shape) << " "
      << e.offset << " " << e.nbytes << "\n";
  }
  h << "end\n";

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    const std::string head = h.str();
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) throw IoError("cannot write checkpoint " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

inline LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const std::string file = read_file(path);
  detail::HeaderReader r(file);
  if (r.line("format") != kCheckpointMagic) throw CheckpointError("format", "not an outlier-lab checkpoint");
  if (r.peek_key() != "version") throw CheckpointError("version", "missing");
  const std::size_t version = detail::parse_count(r.keyed("version"), "version");
  if (version != static_cast<std::size_t>(kCheckpointVersion)) {
    throw CheckpointError("version", "file has version " + std::to_string(version) + ", this build reads " +
                                         std::to_string(kCheckpointVersion));
  }
  const std::size_t step = detail::parse_count(r.keyed("step"), "step");
  const std::string dt = r.keyed("dtype");
  if (dt != "f64" && dt != "f32") throw CheckpointError("dtype", "unknown dtype '" + dt + "'");
  const CheckpointDtype dtype = dt == "f64" ? CheckpointDtype::F64 : CheckpointDtype::F32;
  const std::size_t vocab_size = detail::parse_count(r.keyed("vocab_size"), "vocab_size");
  const std::string vocab_hash = r.keyed("vocab_hash");
  std::optional<std::size_t> adam_t;
  if (r.peek_key() == "adam_t") adam_t = detail::parse_count(r.keyed("adam_t"), "adam_t");

  const std::size_t cfg_bytes = detail::parse_count(r.keyed("config"), "config");
  const std::string cfg_text(r.bytes(cfg_bytes, "config"));
  const std::size_t vocab_bytes = detail::parse_count(r.keyed("vocab"), "vocab");
  const std::string vocab_text(r.bytes(vocab_bytes, "vocab"));

  LoadedCheckpoint ck{RunConfig{}, Vocab{}, Transformer{}, std::nullopt, step, dtype};
  try {
    ck.config = RunConfig::from_ini(Ini::parse(cfg_text));
  } catch (const ConfigError& e) {
    throw CheckpointError("config", e.what());
  }
  std::vector<std::string> words;
  std::istringstream vs(vocab_text);
  for (std::string w; std::getline(vs, w);) words.push_back(w);
  ck.vocab = Vocab(words);
  if (std::to_string(ck.vocab.hash()) != vocab_hash) throw CheckpointError("vocab_hash", "does not match the stored vocabulary");
  if (ck.vocab.size() != vocab_size) throw CheckpointError("vocab_size", "does not match the stored vocabulary");

  const std::size_t n_arrays = detail::parse_count(r.keyed("arrays"), "arrays");
  const std::size_t width = dtype == CheckpointDtype::F64 ? 8 : 4;
  std::map<std::string, detail::ArrayEntry> entries;
  for (std::size_t i = 0; i < n_arrays; ++i) {
    std::istringstream ls(r.line("array"));
    std::string tag, name, adt, shape, off, nb, extra;
    ls >> tag >> name >> adt >> shape >> off >> nb;
    if (tag != "array" || nb.empty() || (ls >> extra)) {
      throw CheckpointError("array", "malformed manifest line " + std::to_string(i + 1));
    }
    const std::string field = "array " + name;
    if (adt != dt) throw CheckpointError(field + " dtype", "'" + adt + "' differs from file dtype " + dt);
    detail::ArrayEntry e{name, {}, detail::parse_count(off, field + " offset"),
                         detail::parse_count(nb, field + " nbytes")};
    std::istringstream ss(shape);
    std::size_t numel = 1;
    for (std::string d; std::getline(ss, d, ',');) {
      e.shape.push_back(detail::parse_count(d, field + " shape"));
      numel *= e.shape.back();
    }
    if (e.shape.empty()) throw CheckpointError(field + " shape", "empty");
    if (numel * width != e.nbytes) {
      throw CheckpointError(field + " nbytes", std::to_string(e.nbytes) + " bytes for shape " + shape);
    }
    if (!entries.emplace(name, e).second) throw CheckpointError(field, "listed twice");
  }
  if (r.line("end") != "end") throw CheckpointError("end", "manifest is longer than 'arrays' says");

  const std::string_view blob = std::string_view(file).substr(r.pos());
  std::size_t expected = 0;
  for (const auto& [name, e] : entries) expected = std::max(expected, e.offset + e.nbytes);
  if (blob.size() < expected) {
    throw CheckpointError("data", "truncated: " + std::to_string(blob.size()) + " of " +
                                      std::to_string(expected) + " bytes");
  }
  if (blob.size() > expected) throw CheckpointError("data", "trailing bytes after the last array");

  ModelConfig mc = ck.config.model;
  mc.vocab_size = vocab_size;
  ck.model = Transformer(mc, 0);
  auto take = [&](const std::string& name, const Shape& shape) {
    auto it = entries.find(name);
    if (it == entries.end()) throw CheckpointError("array " + name, "missing");
    if (it->second.shape != shape) {
      throw CheckpointError("array " + name + " shape",
                            detail::shape_str(it->second.shape) + " but the model needs " + detail::shape_str(shape));
    }
    auto v = detail::read_le(blob.substr(it->second.offset, it->second.nbytes), dtype);
    entries.erase(it);
    return v;
  };
  auto& params = ck.model.parameters();
  for (auto& p : params) {
    auto v = take(p.name, p.tensor.shape());
    std::copy(v.begin(), v.end(), p.tensor.mutable_data().begin());
  }
  if (adam_t) {
    AdamState st;
    st.t = *adam_t;
    for (const auto& p : params) {
      st.m.push_back(take("adam.m." + p.name, p.tensor.shape()));
      st.v.push_back(take("adam.v." + p.name, p.tensor.shape()));
    }
    ck.adam = std::move(st);
  }
  if (!entries.empty()) throw CheckpointError("array " + entries.begin()->first, "not a model parameter");
  return ck;
}

}  // namespace olab
