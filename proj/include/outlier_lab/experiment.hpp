#pragma once

// End-to-end commands shared by the CLI and the acceptance run: data
// preparation, pretraining, evaluation, the length/softmax sweep and
// attention export. Each writes its artifacts under one run directory.

#include "outlier_lab/checkpoint.hpp"
#include "outlier_lab/config.hpp"
#include "outlier_lab/data.hpp"
#include "outlier_lab/metrics.hpp"
#include "outlier_lab/model.hpp"
#include "outlier_lab/quant_model.hpp"
#include "outlier_lab/trainer.hpp"

#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace olab {

namespace fs = std::filesystem;

/// Training allocates and frees many mid-sized buffers per step; keeping
/// them on the heap instead of mmap/munmap roughly halves step time.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 256 * 1024 * 1024);
  mallopt(M_TRIM_THRESHOLD, 512 * 1024 * 1024);
#endif
}

using LogFn = std::function<void(const std::string&)>;

inline constexpr const char* kMetricsHeader = "step,loss,lr,grad_norm";
inline constexpr const char* kSweepHeader = "method,pretrain_len,fp_ppl,max_inf_norm,avg_kurtosis,quant_ppl";
inline constexpr const char* kLengthHeader = "length,metric,n_sequences";

struct PreparedData {
  Vocab vocab;
  PackedDataset train;
  PackedDataset validation;
};

/// Vocabulary from the corpus, packed at the training length, last
/// val_fraction of the sequences held out. When `vocab` is given (from a
/// checkpoint) it is used instead of building a new one.
inline PreparedData prepare_data(const RunConfig& cfg, const Vocab* vocab = nullptr) {
  const std::string corpus = load_corpus(cfg.data);
  PreparedData d;
  try {
    d.vocab = vocab ? *vocab : build_vocab(corpus, cfg.data.vocab_size);
    PackedDataset all = pack(corpus, d.vocab, cfg.seq_len(), cfg.data.pack_mode);
    std::tie(d.train, d.validation) = split_validation(all, cfg.data.val_fraction);
  } catch (const DataError& e) {
    throw ConfigError("data.corpus", e.what());
  }
  return d;
}

inline std::string csv_number(double v) {
  if (std::isnan(v)) return "nan";
  return format_double(v);
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

inline std::string length_csv(const std::vector<LengthRow>& rows) {
  std::string out = std::string(kLengthHeader) + "\n";
  for (const auto& r : rows) {
    out += std::to_string(r.length) + "," + csv_number(r.metric) + "," + std::to_string(r.n_sequences) + "\n";
  }
  return out;
}

struct PretrainResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::size_t steps = 0;
  fs::path checkpoint;
  fs::path metrics;
  double seconds = 0.0;
};

/// Trains to max_steps (resuming from `resume` when given) and writes
/// config.resolved.cfg, metrics.csv, the dataset cache and model.ckpt into
/// run_dir. On divergence the metrics so far are kept and DivergenceError
/// propagates.
inline PretrainResult run_pretrain(const RunConfig& cfg, const fs::path& run_dir,
                                   const std::optional<fs::path>& resume = std::nullopt,
                                   const LogFn& log = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(run_dir);
  std::optional<LoadedCheckpoint> ck;
  if (resume) {
    ck = load_checkpoint(*resume);
    if (!ck->adam) throw CheckpointError("adam_t", "checkpoint has no optimizer state to resume from");
    const Ini a = ck->config.to_ini();
    const Ini b = cfg.to_ini();
    for (const auto& k : b.keys()) {
      const bool model_key = k.starts_with("model.") || k.starts_with("softmax.") || k.starts_with("data.");
      if (model_key && a.raw(k) != b.raw(k)) throw ConfigError(k, "differs from the checkpoint being resumed");
    }
  }
  PreparedData data = prepare_data(cfg, ck ? &ck->vocab : nullptr);
  ModelConfig mc = cfg.model;
  mc.vocab_size = data.vocab.size();
  mc.validate();
  write_file(run_dir / "config.resolved.cfg", cfg.to_ini().str());
  save_dataset_cache(run_dir / "dataset", data.train, data.vocab.hash());

  Trainer trainer(ck ? std::move(ck->model) : Transformer(mc, cfg.init_seed()), data.train, cfg.train);
  if (ck) trainer.restore(std::move(*ck->adam), ck->step);

  PretrainResult res;
  res.metrics = run_dir / "metrics.csv";
  // on resume keep the rows up to the checkpoint step, drop anything later
  std::string kept = std::string(kMetricsHeader) + "\n";
  if (ck && fs::exists(res.metrics)) {
    std::istringstream old(read_file(res.metrics));
    std::string line;
    std::getline(old, line);
    while (std::getline(old, line)) {
      if (!line.empty() && std::stoull(line.substr(0, line.find(','))) <= ck->step) kept += line + "\n";
    }
  }
  std::ofstream csv(res.metrics, std::ios::trunc);
  if (!csv) throw IoError("cannot write " + res.metrics.string());
  csv << kept;
  bool first = true;
  trainer.run([&](const StepResult& r) {
    csv << r.step << "," << format_double(r.loss) << "," << format_double(r.lr) << ","
        << format_double(r.grad_norm) << "\n";
    if (first) res.initial_loss = r.loss;
    first = false;
    res.final_loss = r.loss;
    if (log && cfg.log_every > 0 && (r.step % cfg.log_every == 0 || r.step == 1)) {
      std::ostringstream m;
      m << cfg.name << " step " << r.step << " loss " << std::fixed << std::setprecision(4) << r.loss
        << " lr " << std::scientific << std::setprecision(2) << r.lr;
      log(m.str());
    }
    if (cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 && r.step < cfg.train.max_steps) {
      csv.flush();
      save_checkpoint(run_dir / ("step" + std::to_string(r.step) + ".ckpt"), cfg, data.vocab,
                      trainer.model(), &trainer.optimizer(), r.step);
    }
  });
  csv.flush();
  if (!csv) throw IoError("cannot write " + res.metrics.string());
  res.steps = trainer.step();
  res.checkpoint = run_dir / "model.ckpt";
  save_checkpoint(res.checkpoint, cfg, data.vocab, trainer.model(), &trainer.optimizer(), trainer.step());
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

/// Config for evaluating `ck`: the checkpoint's own, or `override` after
/// checking that it describes the same model and data.
inline RunConfig eval_config(const LoadedCheckpoint& ck, const std::optional<RunConfig>& override) {
  if (!override) return ck.config;
  const Ini a = ck.config.to_ini();
  const Ini b = override->to_ini();
  for (const auto& k : a.keys()) {
    const bool pinned = k.starts_with("model.") || k.starts_with("softmax.") || k == "data.corpus" ||
                        k == "data.vocab_size" || k == "data.pack_mode" || k == "data.toy_documents" ||
                        k == "data.toy_seed" || k == "data.val_fraction";
    if (pinned && a.raw(k) != b.raw(k)) {
      throw ConfigError(k, "config says '" + b.raw(k).value_or("") + "' but the checkpoint was trained with '" +
                               a.raw(k).value_or("") + "'");
    }
  }
  return *override;
}

/// fp_vs_quant plus outliers plus the length sweep, written as
/// eval_report.json and length_sweep.csv.
inline EvalReport run_eval(const LoadedCheckpoint& ck, const RunConfig& cfg, const fs::path& run_dir,
                           const LogFn& log = {}) {
  fs::create_directories(run_dir);
  RunConfig data_cfg = cfg;
  data_cfg.data.seq_len = ck.config.seq_len();
  PreparedData data = prepare_data(data_cfg, &ck.vocab);
  FpVsQuantOptions opt{.calib_seed = cfg.calib_seed(),
                       .eval_seed = cfg.eval_seed(),
                       .outlier_samples = cfg.eval.n_samples,
                       .kurtosis_excess = cfg.eval.kurtosis_excess,
                       .outlier_scope = cfg.eval.outlier_sites};
  EvalReport r = fp_vs_quant(ck.model, cfg.quant, data.validation, data.train, opt);
  r.lengths = length_sweep(ck.model, data.validation, cfg.eval_lengths(), cfg.eval_seed());
  r.metadata = {{"run", cfg.name},
                {"seed", cfg.seed},
                {"step", ck.step},
                {"softmax", to_string(ck.model.config().softmax.variant)},
                {"pretrain_len", ck.model.config().max_seq_len},
                {"parameters", parameter_count(ck.model.config())},
                {"vocab_size", ck.vocab.size()},
                {"vocab_hash", std::to_string(ck.vocab.hash())},
                {"corpus_hash", std::to_string(data.validation.corpus_hash)},
                {"validation_hash", std::to_string(data.validation.hash())},
                {"config", cfg.to_ini().str()}};
  write_file(run_dir / "eval_report.json", to_json(r).dump(2) + "\n");
  write_file(run_dir / "length_sweep.csv", length_csv(r.lengths));
  write_file(run_dir / "eval_config.resolved.cfg", cfg.to_ini().str());
  if (log) {
    std::ostringstream m;
    m << cfg.name << " fp_ppl " << r.fp_ppl << " quant_ppl " << r.quant_ppl << " max_inf_norm "
      << r.outliers.max_inf_norm << " avg_kurtosis " << r.outliers.avg_kurtosis;
    log(m.str());
  }
  return r;
}

struct SweepRow {
  std::string method;
  std::size_t pretrain_len = 0;
  double fp_ppl = std::numeric_limits<double>::quiet_NaN();
  double max_inf_norm = std::numeric_limits<double>::quiet_NaN();
  double avg_kurtosis = std::numeric_limits<double>::quiet_NaN();
  double quant_ppl = std::numeric_limits<double>::quiet_NaN();
  std::string error;
};

inline std::string sweep_csv(const std::vector<SweepRow>& rows) {
  std::string out = std::string(kSweepHeader) + "\n";
  for (const auto& r : rows) {
    out += r.method + "," + std::to_string(r.pretrain_len) + "," + csv_number(r.fp_ppl) + "," +
           csv_number(r.max_inf_norm) + "," + csv_number(r.avg_kurtosis) + "," + csv_number(r.quant_ppl) + "\n";
  }
  return out;
}

/// Pretrain + eval for every (method, length) cell, each in its own
/// subdirectory. A failing cell gets a row of nan and its message in
/// sweep_errors.txt; the sweep carries on.
inline std::vector<SweepRow> run_sweep(const RunConfig& cfg, const fs::path& out_dir, const LogFn& log = {}) {
  fs::create_directories(out_dir);
  write_file(out_dir / "config.resolved.cfg", cfg.to_ini().str());
  std::vector<SweepRow> rows;
  std::string errors;
  for (const auto& method : cfg.sweep.methods) {
    for (std::size_t L : cfg.sweep.lengths) {
      SweepRow row{method, L};
      try {
        const RunConfig cell = cfg.sweep_cell(method, L);
        cell.validate();
        const fs::path dir = out_dir / cell.name;
        auto pre = run_pretrain(cell, dir, std::nullopt, log);
        auto ck = load_checkpoint(pre.checkpoint);
        auto rep = run_eval(ck, cell, dir, log);
        row.fp_ppl = rep.fp_ppl;
        row.max_inf_norm = rep.outliers.max_inf_norm;
        row.avg_kurtosis = rep.outliers.avg_kurtosis;
        row.quant_ppl = rep.quant_ppl;
      } catch (const std::exception& e) {
        row.error = e.what();
        errors += method + "," + std::to_string(L) + ": " + e.what() + "\n";
        if (log) log("sweep cell " + method + " T=" + std::to_string(L) + " failed: " + e.what());
      }
      rows.push_back(row);
      write_file(out_dir / "sweep.csv", sweep_csv(rows));
    }
  }
  if (!errors.empty()) write_file(out_dir / "sweep_errors.txt", errors);
  return rows;
}

/// Attention maps for the first n_samples validation sequences at `length`
/// (0: training length): attention/l{layer}_h{head}_s{sample}.csv holds the
/// T x T matrix (row = query), concentration.csv one row per map.
inline std::vector<AttentionMap> run_export_attention(const LoadedCheckpoint& ck, const fs::path& out_dir,
                                                      std::size_t n_samples, std::size_t length) {
  RunConfig cfg = ck.config;
  const std::size_t L = length == 0 ? cfg.seq_len() : length;
  if (L < 2 || L > ck.model.config().max_seq_len) {
    throw ConfigError("length", "must be in [2, " + std::to_string(ck.model.config().max_seq_len) + "]");
  }
  if (n_samples == 0) throw ConfigError("samples", "must be >= 1");
  PreparedData data = prepare_data(cfg, &ck.vocab);
  PackedDataset val = pack_ids(data.validation.ids, L, data.validation.corpus_hash);
  if (n_samples > val.size()) {
    throw ConfigError("samples", std::to_string(n_samples) + " requested, validation has " +
                                     std::to_string(val.size()) + " sequences of length " + std::to_string(L));
  }
  Batch b{{}, n_samples, L};
  b.ids.assign(val.ids.begin(), val.ids.begin() + static_cast<std::ptrdiff_t>(n_samples * L));
  auto maps = export_attention(ck.model, b);

  const fs::path dir = out_dir / "attention";
  fs::create_directories(dir);
  std::string conc = "layer,head,sample,length,concentration\n";
  for (const auto& m : maps) {
    std::string text;
    for (std::size_t q = 0; q < m.T; ++q) {
      for (std::size_t k = 0; k < m.T; ++k) text += (k ? "," : "") + format_double(m.probs[q * m.T + k]);
      text += "\n";
    }
    write_file(dir / ("l" + std::to_string(m.layer) + "_h" + std::to_string(m.head) + "_s" +
                      std::to_string(m.sample) + ".csv"),
               text);
    conc += std::to_string(m.layer) + "," + std::to_string(m.head) + "," + std::to_string(m.sample) + "," +
            std::to_string(m.T) + "," + format_double(m.concentration) + "\n";
  }
  write_file(dir / "concentration.csv", conc);
  std::string tokens = "sample,position,token\n";
  for (std::size_t s = 0; s < n_samples; ++s) {
    for (std::size_t t = 0; t < L; ++t) {
      tokens += std::to_string(s) + "," + std::to_string(t) + "," + csv_field(ck.vocab.token(b.ids[s * L + t])) + "\n";
    }
  }
  write_file(dir / "tokens.csv", tokens);
  return maps;
}

}  // namespace olab
