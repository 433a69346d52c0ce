// outlier-lab: pretrain / eval / sweep / export-attn front end.
//
// Exit codes: 0 ok, 2 config error (field path on stderr), 3 training
// diverged, 4 I/O error, 1 anything else.

#include "outlier_lab/experiment.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

using namespace olab;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kDiverged = 3, kIo = 4 };

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string checkpoint;
};

void log_line(const std::string& s) { std::cerr << s << std::endl; }

// --out, then $OUTLIER_LAB_OUT, then run.out from the config
fs::path output_root(const Common& c, const RunConfig& cfg) {
  if (!c.out.empty()) return c.out;
  if (const char* env = std::getenv("OUTLIER_LAB_OUT"); env && *env) return env;
  return cfg.out;
}

RunConfig load_config(const Common& c) {
  RunConfig cfg = load_run_config(c.config);
  if (c.seed) cfg.set_seed(*c.seed);
  return cfg;
}

int cmd_pretrain(const Common& c) {
  RunConfig cfg = load_config(c);
  const fs::path dir = output_root(c, cfg) / cfg.name;
  std::optional<fs::path> resume;
  if (!c.checkpoint.empty()) resume = c.checkpoint;
  auto r = run_pretrain(cfg, dir, resume, log_line);
  std::cout << "checkpoint " << r.checkpoint.string() << "\n"
            << "metrics " << r.metrics.string() << "\n"
            << "steps " << r.steps << " initial_loss " << r.initial_loss << " final_loss " << r.final_loss
            << " seconds " << r.seconds << "\n";
  return kOk;
}

int cmd_eval(const Common& c) {
  auto ck = load_checkpoint(c.checkpoint);
  std::optional<RunConfig> given;
  if (!c.config.empty()) given = load_config(c);
  RunConfig cfg = eval_config(ck, given);
  if (c.seed && !given) cfg.set_seed(*c.seed);
  const fs::path dir = output_root(c, cfg) / cfg.name;
  auto r = run_eval(ck, cfg, dir, log_line);
  std::cout << "report " << (dir / "eval_report.json").string() << "\n"
            << "fp_ppl " << r.fp_ppl << " quant_ppl " << r.quant_ppl << " max_inf_norm "
            << r.outliers.max_inf_norm << " avg_kurtosis " << r.outliers.avg_kurtosis << "\n";
  return kOk;
}

int cmd_sweep(const Common& c) {
  RunConfig cfg = load_config(c);
  const fs::path dir = output_root(c, cfg) / (cfg.name + "-sweep");
  auto rows = run_sweep(cfg, dir, log_line);
  std::cout << "sweep " << (dir / "sweep.csv").string() << "\n" << sweep_csv(rows);
  for (const auto& r : rows) {
    if (!r.error.empty()) return kOther;
  }
  return kOk;
}

int cmd_export_attn(const Common& c, std::size_t samples, std::size_t length) {
  auto ck = load_checkpoint(c.checkpoint);
  const fs::path dir = output_root(c, ck.config) / ck.config.name;
  auto maps = run_export_attention(ck, dir, samples, length);
  std::cout << "attention " << (dir / "attention").string() << " (" << maps.size() << " maps)\n";
  return kOk;
}

int cmd_gen_corpus(const std::string& out, std::size_t documents, std::uint64_t seed) {
  ToyCorpusOptions opt;
  opt.n_documents = documents;
  opt.seed = seed;
  write_file(out, generate_toy_corpus(opt));
  std::cout << "corpus " << out << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Outlier lab: softmax variants, outliers and W8A8 simulation on toy transformers"};
  app.require_subcommand(1);
  Common c;

  auto add_common = [&](CLI::App* sub, bool config_required, bool checkpoint_required) {
    auto* cfg = sub->add_option("--config", c.config, "run config file")->check(CLI::ExistingFile);
    if (config_required) cfg->required();
    sub->add_option("--out", c.out, "output root (overrides $OUTLIER_LAB_OUT and run.out)");
    sub->add_option("--seed", c.seed, "top-level seed (overrides run.seed)");
    auto* ck = sub->add_option("--checkpoint", c.checkpoint, "checkpoint file");
    if (checkpoint_required) ck->required();
  };

  auto* pretrain = app.add_subcommand("pretrain", "train a model; --checkpoint resumes from a saved step");
  add_common(pretrain, true, false);
  auto* eval = app.add_subcommand("eval", "FP vs quantized perplexity, outliers and length sweep");
  add_common(eval, false, true);
  auto* sweep = app.add_subcommand("sweep", "pretrain + eval over sweep.methods x sweep.lengths");
  add_common(sweep, true, false);
  auto* attn = app.add_subcommand("export-attn", "dump attention maps and concentration stats");
  add_common(attn, false, true);
  std::size_t samples = 1;
  std::size_t length = 0;
  attn->add_option("--samples", samples, "validation sequences to export")->capture_default_str();
  attn->add_option("--length", length, "sequence length (default: training length)");
  auto* gen = app.add_subcommand("gen-corpus", "write the generated toy corpus to a file");
  std::string corpus_out;
  std::size_t documents = ToyCorpusOptions{}.n_documents;
  std::uint64_t corpus_seed = ToyCorpusOptions{}.seed;
  gen->add_option("--out", corpus_out, "output file")->required();
  gen->add_option("--documents", documents)->capture_default_str();
  gen->add_option("--seed", corpus_seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfig;
  }

  try {
    if (pretrain->parsed()) return cmd_pretrain(c);
    if (eval->parsed()) return cmd_eval(c);
    if (sweep->parsed()) return cmd_sweep(c);
    if (attn->parsed()) return cmd_export_attn(c, samples, length);
    if (gen->parsed()) return cmd_gen_corpus(corpus_out, documents, corpus_seed);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kDiverged;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const DataError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kOther;
  }
  return kOther;
}
