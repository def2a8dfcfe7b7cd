// Batch front door: reproducible experiment runs over the tasft library.
// Every run logs its fully resolved configuration (defaults < config file <
// command line) as the first artifact in the output directory, and writes
// nothing outside that directory.

#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "tasft/corpus.hpp"
#include "tasft/evalsuite.hpp"
#include "tasft/experiments.hpp"
#include "tasft/losses.hpp"
#include "tasft/model.hpp"
#include "tasft/trainer.hpp"
#include "tasft/transport.hpp"

#include <nlohmann/json.hpp>

namespace {

using namespace tasft;
namespace fs = std::filesystem;

struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One key of the resolved configuration: its CLI option, a reader for the
// resolved value and a writer used when the key comes from a config file.
struct ConfigKey {
  std::string key;
  CLI::Option* option = nullptr;
  std::function<std::string()> get;
  std::function<void(const std::string&)> set;
};

class ConfigurableCommand {
 public:
  ConfigurableCommand(CLI::App& parent, const std::string& name, const std::string& desc)
      : cmd_(parent.add_subcommand(name, desc)) {
    cmd_->add_option("--config", config_path_, "plain key=value file; command line wins");
    cmd_->add_option("--out", out_dir_, "output directory (created if absent)");
  }

  CLI::App* cmd() { return cmd_; }
  const std::string& out_dir() const { return out_dir_; }

  void add_int(const std::string& key, int& ref, const std::string& desc) {
    add(key, cmd_->add_option("--" + key, ref, desc),
        [&ref] { return std::to_string(ref); },
        [&ref, key](const std::string& s) { ref = parse_int(s, key); });
  }

  void add_u64(const std::string& key, std::uint64_t& ref, const std::string& desc) {
    add(key, cmd_->add_option("--" + key, ref, desc),
        [&ref] { return std::to_string(ref); },
        [&ref, key](const std::string& s) { ref = static_cast<std::uint64_t>(parse_ll(s, key)); });
  }

  void add_double(const std::string& key, double& ref, const std::string& desc) {
    add(key, cmd_->add_option("--" + key, ref, desc),
        [&ref] { return fmt_double(ref); },
        [&ref, key](const std::string& s) { ref = parse_double(s, key); });
  }

  void add_string(const std::string& key, std::string& ref, const std::string& desc) {
    add(key, cmd_->add_option("--" + key, ref, desc),
        [&ref] { return ref; },
        [&ref](const std::string& s) { ref = s; });
  }

  void add_list(const std::string& key, std::vector<std::string>& ref, const std::string& desc) {
    auto* opt = cmd_->add_option("--" + key, ref, desc)->delimiter(',');
    add(key, opt,
        [&ref] { return join(ref, ','); },
        [&ref](const std::string& s) {
          ref.clear();
          for (const std::string& part : split(s, ','))
            if (!part.empty()) ref.push_back(part);
        });
  }

  /// Applies the config file: keys the command line did not set take the
  /// file's value. Run before any required-flag checks.
  void apply_config() {
    if (!config_path_.empty()) apply_config_file();
  }

  /// Creates the output directory and logs the resolved configuration as the
  /// run's first artifact.
  void open_output(const std::string& command_name) {
    if (out_dir_.empty()) throw usage_error("missing --out (output directory)");
    fs::create_directories(out_dir_);
    std::ostringstream resolved;
    resolved << "command=" << command_name << "\n";
    for (const ConfigKey& k : keys_) resolved << k.key << "=" << k.get() << "\n";
    std::ofstream out(path("resolved_config.txt"));
    out << resolved.str();
  }

  std::string path(const std::string& name) const {
    return (fs::path(out_dir_) / name).string();
  }

  static std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
      if (c == sep) {
        out.push_back(cur);
        cur.clear();
      } else {
        cur += c;
      }
    }
    out.push_back(cur);
    return out;
  }

  static std::string join(const std::vector<std::string>& v, char sep) {
    std::string out;
    for (const std::string& s : v) {
      if (!out.empty()) out += sep;
      out += s;
    }
    return out;
  }

 private:
  CLI::App* cmd_;
  std::string config_path_;
  std::string out_dir_;
  std::vector<ConfigKey> keys_;

  static int parse_int(const std::string& s, const std::string& key) {
    return static_cast<int>(parse_ll(s, key));
  }

  static long long parse_ll(const std::string& s, const std::string& key) {
    std::size_t pos = 0;
    long long v = 0;
    try {
      v = std::stoll(s, &pos);
    } catch (...) {
      throw usage_error("config key '" + key + "': not an integer: " + s);
    }
    if (pos != s.size()) throw usage_error("config key '" + key + "': not an integer: " + s);
    return v;
  }

  static double parse_double(const std::string& s, const std::string& key) {
    std::size_t pos = 0;
    double v = 0;
    try {
      v = std::stod(s, &pos);
    } catch (...) {
      throw usage_error("config key '" + key + "': not a number: " + s);
    }
    if (pos != s.size()) throw usage_error("config key '" + key + "': not a number: " + s);
    return v;
  }

  void add(const std::string& key, CLI::Option* opt, std::function<std::string()> get,
           std::function<void(const std::string&)> set) {
    keys_.push_back({key, opt, std::move(get), std::move(set)});
  }

  void apply_config_file() {
    std::ifstream in(config_path_);
    if (!in) throw usage_error("cannot open config file: " + config_path_);
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty() || line[0] == '#') continue;
      const std::size_t eq = line.find('=');
      if (eq == std::string::npos)
        throw usage_error(config_path_ + ":" + std::to_string(line_no) + ": expected key=value");
      const std::string key = line.substr(0, eq);
      const std::string value = line.substr(eq + 1);
      if (key == "command" || key == "out" || key == "config") continue;
      bool found = false;
      for (ConfigKey& k : keys_) {
        if (k.key != key) continue;
        found = true;
        if (k.option->count() == 0) k.set(value);  // command line wins
        break;
      }
      if (!found)
        throw usage_error(config_path_ + ":" + std::to_string(line_no) + ": unknown key '" + key +
                          "'");
    }
  }
};

struct ModelFlags {
  int vocab = 64, dim = 64, layers = 2, heads = 2, context = 32, ff_mult = 2;

  void attach(ConfigurableCommand& c) {
    c.add_int("vocab", vocab, "vocabulary size of the model");
    c.add_int("dim", dim, "embedding width");
    c.add_int("layers", layers, "transformer blocks");
    c.add_int("heads", heads, "attention heads");
    c.add_int("context", context, "context length");
    c.add_int("ff-mult", ff_mult, "feed-forward width multiple");
  }

  ModelConfig build() const {
    ModelConfig cfg;
    cfg.vocab_size = vocab;
    cfg.dim = dim;
    cfg.layers = layers;
    cfg.heads = heads;
    cfg.context_len = context;
    cfg.ff_mult = ff_mult;
    if (cfg.vocab_size < Vocabulary::size())
      throw usage_error("--vocab must cover the corpus vocabulary (" +
                        std::to_string(Vocabulary::size()) + " tokens)");
    cfg.validate();
    return cfg;
  }
};

struct TrainFlags {
  std::string data;
  std::string method = "SFT";
  double lambda = -1.0;  // negative = method default
  int batch_size = 32;
  double lr = 1e-3;
  int steps = 2000;
  std::uint64_t seed = 0;
  int eval_every = 100;
  int checkpoint_every = 0;
  ModelFlags model;

  void attach(ConfigurableCommand& c, bool with_data = true) {
    if (with_data) c.add_string("data", data, "training dataset (jsonl)");
    c.add_string("method", method, "SFT, EMD, NLCL or STL");
    c.add_double("lambda", lambda, "penalty weight; negative picks the method default");
    c.add_int("batch-size", batch_size, "examples per step");
    c.add_double("lr", lr, "learning rate");
    c.add_int("steps", steps, "optimizer steps");
    c.add_u64("seed", seed, "root seed; every stream derives from it");
    c.add_int("eval-every", eval_every, "steps between metric rows");
    c.add_int("checkpoint-every", checkpoint_every, "steps between checkpoints (0 = final only)");
    model.attach(c);
  }

  TrainConfig build() const {
    TrainConfig cfg;
    cfg.method = parse_method(method);
    cfg.lambda = lambda < 0.0 ? default_lambda(cfg.method) : lambda;
    cfg.batch_size = batch_size;
    cfg.learning_rate = lr;
    cfg.steps = steps;
    cfg.seed = seed;
    cfg.eval_every = eval_every;
    cfg.checkpoint_every = checkpoint_every;
    cfg.model = model.build();
    return cfg;
  }
};

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open for writing: " + path);
  for (const std::string& line : lines) out << line << "\n";
}

std::string eval_summary(const EvalReport& r) {
  return "harmful_rate=" + fmt_double(r.harmful_rate) + " harmful_count=" +
         std::to_string(r.harmful_count) + " safe_exact=" + fmt_double(r.safe_exact_match) +
         " seemingly_exact=" + fmt_double(r.seemingly_exact_match) + " over_refusal=" +
         fmt_double(r.over_refusal_rate);
}

// --- subcommand bodies -----------------------------------------------------

int run_gen_data(ConfigurableCommand& c, const DatasetSpec& spec, const std::string& name) {
  const std::vector<Example> data = build_dataset(spec);
  save_dataset(c.path(name), data);
  std::cout << "wrote " << data.size() << " examples to " << c.path(name) << "\n";
  return 0;
}

int run_train(ConfigurableCommand& c, const TrainFlags& flags) {
  TrainConfig cfg = flags.build();
  cfg.checkpoint_path = c.path("checkpoint.bin");
  cfg.metrics_path = c.path("metrics.csv");
  const std::vector<Example> dataset = load_dataset(flags.data);
  const TrainResult result = train(cfg, dataset);
  write_lines(c.path("final_eval.csv"),
              {eval_report_csv_header(), eval_report_csv_row(method_name(cfg.method), result.final_eval)});
  std::cout << "method=" << method_name(cfg.method) << " steps=" << cfg.steps << " "
            << eval_summary(result.final_eval) << "\n";
  return 0;
}

int run_eval(ConfigurableCommand& c, const std::string& checkpoint, const std::string& data,
             std::uint64_t seed) {
  if (checkpoint.empty()) throw usage_error("missing --checkpoint");
  if (data.empty()) throw usage_error("missing --data (training dataset for disjointness)");
  const ModelParams params = load_checkpoint(checkpoint);
  const std::vector<Example> dataset = load_dataset(data);
  const EvalSets sets = make_eval_sets(dataset, derive_seed(seed, 3));
  const EvalReport rep = evaluate(params, sets, PromptSet(dataset), true, true);
  write_lines(c.path("eval.csv"), {eval_report_csv_header(), eval_report_csv_row("eval", rep)});
  std::cout << eval_summary(rep) << " safe_nll=" << fmt_double(rep.safe_nll)
            << " degenerate_rate=" << fmt_double(rep.degenerate_token_rate) << "\n";
  return 0;
}

int run_verify_bound(ConfigurableCommand& c, int instances, int vocab, int dim,
                     std::uint64_t seed) {
  std::vector<std::string> lines{bound_check_csv_header()};
  int violations = 0;
  double max_violation = 0.0;
  const std::vector<BoundCheckRow> rows =
      bound_check_sweep(static_cast<std::size_t>(vocab), instances, static_cast<std::size_t>(dim),
                        seed);
  for (const BoundCheckRow& row : rows) {
    lines.push_back(bound_check_csv_row(row));
    if (row.gap < -1e-9) {
      ++violations;
      max_violation = std::max(max_violation, -row.gap);
    }
  }
  write_lines(c.path("bound_check.csv"), lines);
  std::cout << "instances=" << instances << " vocab=" << vocab << " violations=" << violations
            << "\n";
  if (violations > 0) {
    std::cerr << "lower bound exceeded exact EMD by up to " << fmt_double(max_violation) << "\n";
    return 2;
  }
  return 0;
}

int run_sweep(ConfigurableCommand& c, const TrainFlags& flags,
              const std::vector<std::string>& methods, const std::vector<std::string>& counts,
              const std::vector<std::string>& seeds, int n_safe, double lambda_emd,
              double lambda_nlcl, int jobs) {
  SweepSpec spec;
  spec.base = flags.build();
  spec.methods.clear();
  for (const std::string& m : methods) spec.methods.push_back(parse_method(m));
  spec.toxic_counts.clear();
  for (const std::string& s : counts) spec.toxic_counts.push_back(std::stoi(s));
  spec.seeds.clear();
  for (const std::string& s : seeds) spec.seeds.push_back(std::stoull(s));
  spec.n_safe = n_safe;
  spec.lambda_emd = lambda_emd;
  spec.lambda_nlcl = lambda_nlcl;
  spec.jobs = jobs;

  const std::vector<SweepCell> cells = data_efficiency_sweep(spec);
  std::vector<std::string> lines{sweep_csv_header()};
  for (const SweepCell& cell : cells) lines.push_back(sweep_csv_row(cell));
  write_lines(c.path("sweep.csv"), lines);
  const std::string table = sweep_table(cells, spec);
  std::ofstream(c.path("sweep_table.txt")) << table;
  std::cout << table;
  return 0;
}

int run_curve(ConfigurableCommand& c, const std::vector<std::string>& checkpoints,
              const std::string& data, std::uint64_t seed) {
  if (data.empty()) throw usage_error("missing --data (training dataset for disjointness)");
  if (checkpoints.size() < 5)
    throw usage_error("--checkpoints needs at least 5 checkpoints spanning training");
  const std::vector<Example> dataset = load_dataset(data);
  const std::vector<CurvePoint> points = over_refusal_curve(checkpoints, dataset, seed);
  std::vector<std::string> lines{curve_csv_header()};
  for (const CurvePoint& p : points) lines.push_back(curve_csv_row(p));
  write_lines(c.path("curve.csv"), lines);
  std::cout << "wrote " << points.size() << " curve points to " << c.path("curve.csv") << "\n";
  return 0;
}

int run_contrastive(ConfigurableCommand& c, const TrainFlags& flags, int n_safe, int n_toxic,
                    int contrastive_count) {
  DatasetSpec data;
  data.n_safe = n_safe;
  data.n_toxic = n_toxic;
  data.seed = flags.seed;
  const ContrastiveResult res = contrastive_experiment(flags.build(), data, contrastive_count);
  write_lines(c.path("contrastive.csv"),
              {eval_report_csv_header(), eval_report_csv_row("base", res.base),
               eval_report_csv_row("augmented", res.augmented)});
  std::cout << "base      (" << res.base_size << " examples): " << eval_summary(res.base)
            << " degenerate_rate=" << fmt_double(res.base.degenerate_token_rate) << "\n";
  std::cout << "augmented (" << res.augmented_size << " examples): " << eval_summary(res.augmented)
            << " degenerate_rate=" << fmt_double(res.augmented.degenerate_token_rate) << "\n";
  return 0;
}

int run_export(ConfigurableCommand& c, const std::string& checkpoint, const std::string& name) {
  if (checkpoint.empty()) throw usage_error("missing --checkpoint");
  const ModelParams params = load_checkpoint(checkpoint);
  nlohmann::json j;
  j["format"] = "tasft-params";
  j["version"] = 1;
  j["config"] = {{"vocab_size", params.config.vocab_size}, {"dim", params.config.dim},
                 {"layers", params.config.layers},         {"heads", params.config.heads},
                 {"context_len", params.config.context_len}, {"ff_mult", params.config.ff_mult},
                 {"seed", params.config.seed}};
  nlohmann::json tensors = nlohmann::json::object();
  for_each_tensor(params.t, [&tensors](const std::string& tensor_name, const Tensor2& t) {
    tensors[tensor_name] = {{"rows", t.rows}, {"cols", t.cols}, {"data", t.data}};
  });
  j["tensors"] = std::move(tensors);
  std::ofstream out(c.path(name));
  if (!out) throw std::runtime_error("cannot open for writing: " + c.path(name));
  out << j.dump(1) << "\n";
  std::cout << "exported " << checkpoint << " to " << c.path(name) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"toxicity-avoiding fine-tuning laboratory"};
  app.require_subcommand(1);

  // gen-data
  ConfigurableCommand gen(app, "gen-data", "generate a synthetic training dataset");
  DatasetSpec gen_spec;
  std::string gen_name = "dataset.jsonl";
  int gen_contrastive = 0;
  gen.add_string("name", gen_name, "output file name");
  gen.add_int("n-safe", gen_spec.n_safe, "safety-unrelated task pairs");
  gen.add_int("n-toxic", gen_spec.n_toxic, "toxic prompt/response pairs");
  gen.add_int("contrastive", gen_contrastive, "seemingly-toxic contrastive pairs");
  gen.add_u64("seed", gen_spec.seed, "dataset seed");
  gen.add_int("toxic-len-min", gen_spec.toxic_response_min, "shortest toxic response body");
  gen.add_int("toxic-len-max", gen_spec.toxic_response_max, "longest toxic response body");

  // train
  ConfigurableCommand train_cmd(app, "train", "fine-tune the toy model on a dataset");
  TrainFlags train_flags;
  train_flags.attach(train_cmd);

  // eval
  ConfigurableCommand eval_cmd(app, "eval", "evaluate a checkpoint on held-out sets");
  std::string eval_checkpoint, eval_data;
  std::uint64_t eval_seed = 0;
  eval_cmd.add_string("checkpoint", eval_checkpoint, "checkpoint to evaluate");
  eval_cmd.add_string("data", eval_data, "training dataset the checkpoint came from");
  eval_cmd.add_u64("seed", eval_seed, "seed of the training run (selects held-out sets)");

  // verify-bound
  ConfigurableCommand bound_cmd(app, "verify-bound", "check the EMD lower bound empirically");
  int bound_instances = 1000, bound_vocab = 64, bound_dim = 16;
  std::uint64_t bound_seed = 7;
  bound_cmd.add_int("instances", bound_instances, "random instances to solve");
  bound_cmd.add_int("vocab", bound_vocab, "distribution support size");
  bound_cmd.add_int("dim", bound_dim, "embedding dimension");
  bound_cmd.add_u64("seed", bound_seed, "instance generator seed");

  // sweep
  ConfigurableCommand sweep_cmd(app, "sweep", "data-efficiency sweep over methods and budgets");
  TrainFlags sweep_flags;
  sweep_flags.attach(sweep_cmd, /*with_data=*/false);
  std::vector<std::string> sweep_methods{"EMD", "NLCL", "STL"};
  std::vector<std::string> sweep_counts{"20", "10", "6", "2"};
  std::vector<std::string> sweep_seeds{"1", "2", "3"};
  int sweep_n_safe = 4000, sweep_jobs = 1;
  double sweep_lambda_emd = kDefaultLambdaEmd, sweep_lambda_nlcl = kDefaultLambdaNlcl;
  sweep_cmd.add_list("methods", sweep_methods, "methods to compare");
  sweep_cmd.add_list("counts", sweep_counts, "toxic-pair budgets, strictly decreasing");
  sweep_cmd.add_list("seeds", sweep_seeds, "dataset seeds");
  sweep_cmd.add_int("n-safe", sweep_n_safe, "safe pairs shared by every cell");
  sweep_cmd.add_double("lambda-emd", sweep_lambda_emd, "EMD weight at the full budget");
  sweep_cmd.add_double("lambda-nlcl", sweep_lambda_nlcl, "NLCL weight at the full budget");
  sweep_cmd.add_int("jobs", sweep_jobs, "parallel sweep cells");

  // curve
  ConfigurableCommand curve_cmd(app, "curve", "safety vs over-refusal across checkpoints");
  std::vector<std::string> curve_checkpoints;
  std::string curve_data;
  std::uint64_t curve_seed = 0;
  curve_cmd.add_list("checkpoints", curve_checkpoints, "checkpoint series spanning training");
  curve_cmd.add_string("data", curve_data, "training dataset the checkpoints came from");
  curve_cmd.add_u64("seed", curve_seed, "seed of the training run");

  // contrastive
  ConfigurableCommand contrastive_cmd(app, "contrastive",
                                      "train with and without contrastive augmentation");
  TrainFlags contrastive_flags;
  contrastive_flags.method = "EMD";
  contrastive_flags.attach(contrastive_cmd, /*with_data=*/false);
  int contrastive_n_safe = 4000, contrastive_n_toxic = 20, contrastive_count = 200;
  contrastive_cmd.add_int("n-safe", contrastive_n_safe, "safe pairs per arm");
  contrastive_cmd.add_int("n-toxic", contrastive_n_toxic, "toxic pairs per arm");
  contrastive_cmd.add_int("contrastive", contrastive_count, "contrastive pairs in the augmented arm");

  // export
  ConfigurableCommand export_cmd(app, "export", "convert a binary checkpoint to JSON");
  std::string export_checkpoint, export_name = "params.json";
  export_cmd.add_string("checkpoint", export_checkpoint, "checkpoint to convert");
  export_cmd.add_string("name", export_name, "output file name");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;  // usage errors exit 1; --help exits 0
  }

  try {
    if (gen.cmd()->parsed()) {
      gen.apply_config();
      gen.open_output("gen-data");
      DatasetSpec spec = gen_spec;
      spec.contrastive_count = gen_contrastive;
      return run_gen_data(gen, spec, gen_name);
    }
    if (train_cmd.cmd()->parsed()) {
      train_cmd.apply_config();
      if (train_flags.data.empty()) throw usage_error("missing --data (training dataset path)");
      train_cmd.open_output("train");
      return run_train(train_cmd, train_flags);
    }
    if (eval_cmd.cmd()->parsed()) {
      eval_cmd.apply_config();
      eval_cmd.open_output("eval");
      return run_eval(eval_cmd, eval_checkpoint, eval_data, eval_seed);
    }
    if (bound_cmd.cmd()->parsed()) {
      bound_cmd.apply_config();
      bound_cmd.open_output("verify-bound");
      return run_verify_bound(bound_cmd, bound_instances, bound_vocab, bound_dim, bound_seed);
    }
    if (sweep_cmd.cmd()->parsed()) {
      sweep_cmd.apply_config();
      sweep_cmd.open_output("sweep");
      return run_sweep(sweep_cmd, sweep_flags, sweep_methods, sweep_counts, sweep_seeds,
                       sweep_n_safe, sweep_lambda_emd, sweep_lambda_nlcl, sweep_jobs);
    }
    if (curve_cmd.cmd()->parsed()) {
      curve_cmd.apply_config();
      curve_cmd.open_output("curve");
      return run_curve(curve_cmd, curve_checkpoints, curve_data, curve_seed);
    }
    if (contrastive_cmd.cmd()->parsed()) {
      contrastive_cmd.apply_config();
      contrastive_cmd.open_output("contrastive");
      return run_contrastive(contrastive_cmd, contrastive_flags, contrastive_n_safe,
                             contrastive_n_toxic, contrastive_count);
    }
    if (export_cmd.cmd()->parsed()) {
      export_cmd.apply_config();
      export_cmd.open_output("export");
      return run_export(export_cmd, export_checkpoint, export_name);
    }
    throw usage_error("no subcommand given");
  } catch (const usage_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
