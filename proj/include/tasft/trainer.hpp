#pragma once

#include <cmath>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "tasft/corpus.hpp"
#include "tasft/evalsuite.hpp"
#include "tasft/losses.hpp"
#include "tasft/model.hpp"
#include "tasft/rng.hpp"
#include "tasft/util.hpp"

namespace tasft {

enum class TrainMethod { Sft, Emd, Nlcl, Stl };

inline std::string method_name(TrainMethod m) {
  switch (m) {
    case TrainMethod::Sft: return "SFT";
    case TrainMethod::Emd: return "EMD";
    case TrainMethod::Nlcl: return "NLCL";
    case TrainMethod::Stl: return "STL";
  }
  return "?";
}

inline TrainMethod parse_method(const std::string& s) {
  if (s == "SFT") return TrainMethod::Sft;
  if (s == "EMD") return TrainMethod::Emd;
  if (s == "NLCL") return TrainMethod::Nlcl;
  if (s == "STL") return TrainMethod::Stl;
  throw std::invalid_argument("unknown method '" + s + "' (want SFT, EMD, NLCL or STL)");
}

struct TrainConfig {
  TrainMethod method = TrainMethod::Sft;
  double lambda = 0.0;  // penalty weight; ignored for SFT and STL
  int batch_size = 32;
  double learning_rate = 1e-3;
  int steps = 2000;
  std::uint64_t seed = 0;
  int eval_every = 100;
  int checkpoint_every = 0;  // 0 = final checkpoint only
  std::string checkpoint_path;  // empty = keep in memory only
  std::string metrics_path;     // empty = keep in memory only
  ModelConfig model;

  void validate() const {
    if (lambda < 0.0) throw std::invalid_argument("TrainConfig: lambda must be >= 0");
    if (batch_size < 1) throw std::invalid_argument("TrainConfig: batch_size must be >= 1");
    if (steps < 0) throw std::invalid_argument("TrainConfig: steps must be >= 0");
    if (eval_every < 1) throw std::invalid_argument("TrainConfig: eval_every must be >= 1");
    model.validate();
  }
};

/// Adam accumulators, shaped like the parameters.
struct OptimizerState {
  ParamSet<Tensor2> m;
  ParamSet<Tensor2> v;
  long step = 0;

  static OptimizerState init(const ModelParams& params) {
    OptimizerState s;
    auto zeros = [](const Tensor2& t) { return Tensor2(t.rows, t.cols); };
    s.m = map_param_set(params.t, zeros);
    s.v = map_param_set(params.t, zeros);
    return s;
  }
};

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

// Desk-scale penalty weights at the default 4000/20 mix, found by grid
// search on held-out safety and quality. Scale-dependent: retune after
// touching the model size or data mix.
constexpr double kDefaultLambdaEmd = 0.15;
constexpr double kDefaultLambdaNlcl = 1.0;

inline double default_lambda(TrainMethod m) {
  switch (m) {
    case TrainMethod::Emd: return kDefaultLambdaEmd;
    case TrainMethod::Nlcl: return kDefaultLambdaNlcl;
    default: return 0.0;
  }
}

namespace detail {

inline std::vector<Tensor2*> tensor_list(ParamSet<Tensor2>& s) {
  std::vector<Tensor2*> out;
  for_each_tensor(s, [&out](const std::string&, Tensor2& t) { out.push_back(&t); });
  return out;
}

inline std::vector<const Tensor2*> tensor_list(const ParamSet<Tensor2>& s) {
  std::vector<const Tensor2*> out;
  for_each_tensor(s, [&out](const std::string&, const Tensor2& t) { out.push_back(&t); });
  return out;
}

}  // namespace detail

/// Standard Adam update with bias correction, plus a guard that rescales any
/// near-zero raw embedding row so the unit view stays defined.
inline void adam_step(ModelParams& params, const ParamSet<Tensor2>& grads, OptimizerState& state,
                      double lr) {
  ++state.step;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  auto ps = detail::tensor_list(params.t);
  auto gs = detail::tensor_list(grads);
  auto ms = detail::tensor_list(state.m);
  auto vs = detail::tensor_list(state.v);
  for (std::size_t k = 0; k < ps.size(); ++k) {
    if (!ps[k]->same_shape(*gs[k])) throw std::invalid_argument("adam_step: gradient shape mismatch");
    for (std::size_t i = 0; i < ps[k]->size(); ++i) {
      const double g = gs[k]->data[i];
      double& m = ms[k]->data[i];
      double& v = vs[k]->data[i];
      m = kAdamBeta1 * m + (1.0 - kAdamBeta1) * g;
      v = kAdamBeta2 * v + (1.0 - kAdamBeta2) * g * g;
      ps[k]->data[i] -= lr * (m / bc1) / (std::sqrt(v / bc2) + kAdamEps);
    }
  }
  // keep embedding rows away from zero so normalization stays defined
  Tensor2& emb = params.t.token_emb;
  for (std::size_t r = 0; r < emb.rows; ++r) {
    double norm_sq = 0.0;
    for (std::size_t c = 0; c < emb.cols; ++c) norm_sq += emb.at(r, c) * emb.at(r, c);
    const double norm = std::sqrt(norm_sq);
    if (norm < 1e-6) {
      const double target = 1e-3;
      if (norm == 0.0) {
        emb.at(r, 0) = target;  // re-seed a direction
      } else {
        for (std::size_t c = 0; c < emb.cols; ++c) emb.at(r, c) *= target / norm;
      }
    }
  }
}

/// Uniform without-replacement batch, partitioned by kind. Toxic examples go
/// to the penalty sublist; safe-task and seemingly-toxic go to the NLL
/// sublist (their responses are imitation targets).
inline BatchSplit sample_batch(const std::vector<Example>& dataset, int batch_size, Rng& rng) {
  if (batch_size > static_cast<int>(dataset.size()))
    throw std::invalid_argument("sample_batch: batch larger than the dataset");
  BatchSplit split;
  for (int idx : rng.sample_without_replacement(static_cast<int>(dataset.size()), batch_size)) {
    const Example& ex = dataset[idx];
    (ex.kind == ExampleKind::Toxic ? split.toxic_items : split.safe_items).push_back(ex);
  }
  return split;
}

/// STL preparation: every toxic response becomes the fixed refusal, after
/// which plain NLL training imitates it.
inline void stl_rewrite(std::vector<Example>& dataset) {
  for (Example& ex : dataset)
    if (ex.kind == ExampleKind::Toxic) ex.response = {Vocabulary::kRefuse, Vocabulary::kEos};
}

struct MetricsRow {
  int step = 0;
  double sft_loss = 0.0;
  double penalty = 0.0;
  double harmful_rate = 0.0;
  double safe_accuracy = 0.0;
  double seemingly_toxic_accuracy = 0.0;
};

inline std::string metrics_csv_header() {
  return "step,sft_loss,penalty,harmful_rate,safe_accuracy,seemingly_toxic_accuracy";
}

inline std::string metrics_csv_row(const MetricsRow& r) {
  return std::to_string(r.step) + "," + fmt_double(r.sft_loss) + "," + fmt_double(r.penalty) +
         "," + fmt_double(r.harmful_rate) + "," + fmt_double(r.safe_accuracy) + "," +
         fmt_double(r.seemingly_toxic_accuracy);
}

struct TrainResult {
  ModelParams params;
  std::vector<MetricsRow> metrics;
  EvalReport final_eval;
};

namespace detail {

inline std::string step_checkpoint_path(const std::string& path, int step) {
  const std::size_t dot = path.find_last_of('.');
  const std::size_t slash = path.find_last_of('/');
  if (dot == std::string::npos || (slash != std::string::npos && dot < slash))
    return path + "_step" + std::to_string(step);
  return path.substr(0, dot) + "_step" + std::to_string(step) + path.substr(dot);
}

}  // namespace detail

/// Deterministic mini-batch training: corpus -> model -> losses -> Adam.
/// STL rewrites toxic responses to [REFUSE, EOS] up front and then trains
/// plain NLL; SFT trains plain NLL on everything including toxic pairs.
inline TrainResult train(const TrainConfig& config, std::vector<Example> dataset) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  if (config.batch_size > static_cast<int>(dataset.size()))
    throw std::invalid_argument("train: batch_size exceeds dataset size");

  if (config.method == TrainMethod::Stl) stl_rewrite(dataset);

  ModelConfig model_cfg = config.model;
  model_cfg.seed = derive_seed(config.seed, 1);
  ModelParams params = ModelParams::init(model_cfg);
  OptimizerState opt = OptimizerState::init(params);
  Rng batch_rng(derive_seed(config.seed, 2));
  const EvalSets eval_sets = make_eval_sets(dataset, derive_seed(config.seed, 3));
  const PromptSet train_prompts(dataset);

  TrainResult result{std::move(params), {}, {}};
  const bool penalized = config.method == TrainMethod::Emd || config.method == TrainMethod::Nlcl;

  for (int step = 1; step <= config.steps; ++step) {
    BatchSplit split = sample_batch(dataset, config.batch_size, batch_rng);
    if (!penalized) {
      // plain SFT over the whole batch, toxic (or rewritten) pairs included
      split.safe_items.insert(split.safe_items.end(), split.toxic_items.begin(),
                              split.toxic_items.end());
      split.toxic_items.clear();
      split.lambda = 0.0;
    } else {
      split.lambda = config.lambda;
    }

    LossReport report;
    try {
      Tape tape;
      TapeEngine engine{tape};
      const ParamSet<NodeId> bound = bind_params(engine, result.params);
      const PenaltyKind kind =
          config.method == TrainMethod::Nlcl ? PenaltyKind::Nlcl : PenaltyKind::Emd;
      const CombinedLossNodes loss =
          build_combined_loss(tape, result.params.config, bound, result.params, split, kind);
      tape.backward(loss.total);
      if (tape.clamp_hits() > 0)
        std::cerr << "step " << step << ": nlcl clamp at 1e-6 engaged for " << tape.clamp_hits()
                  << " value(s)\n";
      const ParamSet<Tensor2> grads =
          map_param_set(bound, [&tape](NodeId id) { return tape.grad(id); });
      adam_step(result.params, grads, opt, config.learning_rate);
      report = loss.report;
    } catch (const numeric_error& e) {
      throw numeric_error("training aborted at step " + std::to_string(step) + ": " + e.what());
    }

    if (step % config.eval_every == 0 || step == config.steps) {
      const EvalReport ev = evaluate(result.params, eval_sets, train_prompts, false);
      result.metrics.push_back({step, report.sft_value, report.penalty_value, ev.harmful_rate,
                                ev.safe_exact_match, ev.seemingly_exact_match});
    }
    if (config.checkpoint_every > 0 && !config.checkpoint_path.empty() &&
        (step % config.checkpoint_every == 0 || step == config.steps)) {
      save_checkpoint(detail::step_checkpoint_path(config.checkpoint_path, step), result.params);
    }
  }

  result.final_eval = evaluate(result.params, eval_sets, train_prompts, true);
  if (!config.checkpoint_path.empty()) save_checkpoint(config.checkpoint_path, result.params);
  if (!config.metrics_path.empty()) {
    std::ofstream out(config.metrics_path);
    if (!out) throw parse_error("cannot open for writing: " + config.metrics_path);
    out << metrics_csv_header() << "\n";
    for (const MetricsRow& row : result.metrics) out << metrics_csv_row(row) << "\n";
  }
  return result;
}

}  // namespace tasft
