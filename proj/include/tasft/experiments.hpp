#pragma once

#include <atomic>
#include <cstdio>
#include <string>
#include <thread>
#include <vector>

#include "tasft/evalsuite.hpp"
#include "tasft/trainer.hpp"

namespace tasft {

/// Data-efficiency ladder: shrink the toxic-pair budget and compare methods.
struct SweepSpec {
  std::vector<int> toxic_counts{20, 10, 6, 2};  // strictly decreasing rungs
  std::vector<TrainMethod> methods{TrainMethod::Emd, TrainMethod::Nlcl, TrainMethod::Stl};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  TrainConfig base;         // steps, batch, lr, model; method/lambda/seed set per cell
  int n_safe = 4000;
  double lambda_emd = 1.0;   // at lambda_anchor_count pairs; scaled inversely below
  double lambda_nlcl = 1.0;
  int lambda_anchor_count = 20;  // budget the base weights were tuned at
  int jobs = 1;

  void validate() const {
    if (seeds.empty() || methods.empty() || toxic_counts.empty())
      throw std::invalid_argument("SweepSpec: empty axis");
    for (std::size_t i = 1; i < toxic_counts.size(); ++i)
      if (toxic_counts[i] >= toxic_counts[i - 1])
        throw std::invalid_argument("SweepSpec: toxic_counts must be strictly decreasing");
  }

  /// Penalty weight for a rung: the anchor weight scaled inversely with the
  /// toxic count, so cumulative penalty pressure stays roughly constant.
  double lambda_for(TrainMethod m, int count) const {
    const double base_lambda = m == TrainMethod::Nlcl ? lambda_nlcl : lambda_emd;
    if (m == TrainMethod::Sft || m == TrainMethod::Stl) return 0.0;
    return base_lambda * static_cast<double>(lambda_anchor_count) / static_cast<double>(count);
  }
};

struct SweepCell {
  TrainMethod method{};
  int toxic_count = 0;
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  int harmful_count = 0;
  double harmful_rate = 0.0;
  double safe_exact_match = 0.0;
};

/// Trains a fresh model per (method, toxic_count, seed) cell on identical
/// safe data and reports held-out harmful counts. Failed cells are marked
/// and the sweep continues. Cells are independent; jobs > 1 fans them out.
inline std::vector<SweepCell> data_efficiency_sweep(const SweepSpec& spec) {
  spec.validate();
  struct CellPlan {
    TrainMethod method;
    int count;
    std::uint64_t seed;
    std::size_t index;
  };
  std::vector<CellPlan> plans;
  for (TrainMethod m : spec.methods)
    for (int count : spec.toxic_counts)
      for (std::uint64_t seed : spec.seeds)
        plans.push_back({m, count, seed, plans.size()});

  std::vector<SweepCell> cells(plans.size());
  auto run_cell = [&spec, &cells](const CellPlan& plan) {
    SweepCell cell;
    cell.method = plan.method;
    cell.toxic_count = plan.count;
    cell.seed = plan.seed;
    try {
      DatasetSpec data;
      data.n_safe = spec.n_safe;
      data.n_toxic = plan.count;
      data.seed = plan.seed;  // safe data identical across methods and counts
      TrainConfig cfg = spec.base;
      cfg.method = plan.method;
      cfg.lambda = spec.lambda_for(plan.method, plan.count);
      cfg.seed = derive_seed(plan.seed, plan.index);  // cell-owned RNG stream
      cfg.checkpoint_path.clear();
      cfg.metrics_path.clear();
      const TrainResult result = train(cfg, build_dataset(data));
      cell.ok = true;
      cell.harmful_count = result.final_eval.harmful_count;
      cell.harmful_rate = result.final_eval.harmful_rate;
      cell.safe_exact_match = result.final_eval.safe_exact_match;
    } catch (const std::exception& e) {
      cell.ok = false;
      cell.error = e.what();
    }
    cells[plan.index] = std::move(cell);
  };

  const int jobs = std::max(1, spec.jobs);
  if (jobs == 1) {
    for (const CellPlan& plan : plans) run_cell(plan);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> workers;
    for (int w = 0; w < jobs; ++w)
      workers.emplace_back([&] {
        for (std::size_t i = next.fetch_add(1); i < plans.size(); i = next.fetch_add(1))
          run_cell(plans[i]);
      });
    for (std::thread& t : workers) t.join();
  }
  return cells;
}

inline std::string sweep_csv_header() {
  return "method,toxic_count,seed,status,harmful_count,harmful_rate,safe_exact_match";
}

inline std::string sweep_csv_row(const SweepCell& c) {
  return method_name(c.method) + "," + std::to_string(c.toxic_count) + "," +
         std::to_string(c.seed) + "," + (c.ok ? "ok" : "failed") + "," +
         std::to_string(c.harmful_count) + "," + fmt_double(c.harmful_rate) + "," +
         fmt_double(c.safe_exact_match);
}

/// Aligned text table, one row per toxic-count rung, per-seed harmful counts
/// under each method column.
inline std::string sweep_table(const std::vector<SweepCell>& cells, const SweepSpec& spec) {
  std::string out = "# Held-out harmful responses by toxic-pair budget (per seed)\n";
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-10s", "# toxic");
  out += buf;
  for (TrainMethod m : spec.methods) {
    std::snprintf(buf, sizeof(buf), "%12s", method_name(m).c_str());
    out += buf;
  }
  out += "\n";
  for (int count : spec.toxic_counts) {
    std::snprintf(buf, sizeof(buf), "%-10d", count);
    out += buf;
    for (TrainMethod m : spec.methods) {
      std::string entry;
      for (std::uint64_t seed : spec.seeds) {
        for (const SweepCell& c : cells)
          if (c.method == m && c.toxic_count == count && c.seed == seed) {
            if (!entry.empty()) entry += "/";
            entry += c.ok ? std::to_string(c.harmful_count) : "x";
          }
      }
      std::snprintf(buf, sizeof(buf), "%12s", entry.c_str());
      out += buf;
    }
    out += "\n";
  }
  return out;
}

/// One point of the safety-vs-over-refusal trade-off curve.
struct CurvePoint {
  std::string checkpoint;
  double safety_level = 0.0;  // 1 - harmful_rate
  double over_refusal = 0.0;
  double harmful_rate = 0.0;
  double safe_exact_match = 0.0;
  double seemingly_exact_match = 0.0;
};

/// Evaluates a series of checkpoints spanning training on the same held-out
/// sets, giving the over-refusal curve.
inline std::vector<CurvePoint> over_refusal_curve(const std::vector<std::string>& checkpoints,
                                                  const std::vector<Example>& train_data,
                                                  std::uint64_t seed) {
  if (checkpoints.size() < 5)
    throw std::invalid_argument("over_refusal_curve: need at least 5 checkpoints");
  const EvalSets sets = make_eval_sets(train_data, derive_seed(seed, 3));
  const PromptSet train_prompts(train_data);
  std::vector<CurvePoint> points;
  for (const std::string& path : checkpoints) {
    const ModelParams params = load_checkpoint(path);
    const EvalReport rep = evaluate(params, sets, train_prompts, false);
    points.push_back({path, 1.0 - rep.harmful_rate, rep.over_refusal_rate, rep.harmful_rate,
                      rep.safe_exact_match, rep.seemingly_exact_match});
  }
  return points;
}

inline std::string curve_csv_header() {
  return "checkpoint,safety_level,over_refusal,harmful_rate,safe_exact_match,seemingly_exact_match";
}

inline std::string curve_csv_row(const CurvePoint& p) {
  return p.checkpoint + "," + fmt_double(p.safety_level) + "," + fmt_double(p.over_refusal) + "," +
         fmt_double(p.harmful_rate) + "," + fmt_double(p.safe_exact_match) + "," +
         fmt_double(p.seemingly_exact_match);
}

/// Contrastive-augmentation experiment: identical training with and without
/// seemingly-toxic contrastive pairs in the dataset.
struct ContrastiveResult {
  EvalReport base;
  EvalReport augmented;
  std::size_t base_size = 0;
  std::size_t augmented_size = 0;
};

inline ContrastiveResult contrastive_experiment(const TrainConfig& config, DatasetSpec data,
                                                int contrastive_count) {
  if (contrastive_count <= 0)
    throw std::invalid_argument("contrastive_experiment: contrastive_count must be > 0");
  ContrastiveResult res;

  data.contrastive_count = 0;
  std::vector<Example> base_data = build_dataset(data);
  res.base_size = base_data.size();
  const TrainResult base_run = train(config, base_data);
  {
    const EvalSets sets = make_eval_sets(base_data, derive_seed(config.seed, 3));
    res.base = evaluate(base_run.params, sets, PromptSet(base_data), true, true);
  }

  data.contrastive_count = contrastive_count;
  std::vector<Example> aug_data = build_dataset(data);
  res.augmented_size = aug_data.size();
  const TrainResult aug_run = train(config, aug_data);
  {
    const EvalSets sets = make_eval_sets(aug_data, derive_seed(config.seed, 3));
    res.augmented = evaluate(aug_run.params, sets, PromptSet(aug_data), true, true);
  }
  return res;
}

inline std::string eval_report_csv_header() {
  return "arm,harmful_rate,harmful_count,safe_exact_match,seemingly_exact_match,over_refusal_rate,"
         "safe_nll,degenerate_token_rate";
}

inline std::string eval_report_csv_row(const std::string& arm, const EvalReport& r) {
  return arm + "," + fmt_double(r.harmful_rate) + "," + std::to_string(r.harmful_count) + "," +
         fmt_double(r.safe_exact_match) + "," + fmt_double(r.seemingly_exact_match) + "," +
         fmt_double(r.over_refusal_rate) + "," + fmt_double(r.safe_nll) + "," +
         fmt_double(r.degenerate_token_rate);
}

}  // namespace tasft
