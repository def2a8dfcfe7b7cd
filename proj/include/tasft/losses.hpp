#pragma once

#include <string>
#include <vector>

#include "tasft/corpus.hpp"
#include "tasft/model.hpp"
#include "tasft/tape.hpp"

namespace tasft {

/// One training batch partitioned into safety-unrelated items (the NLL term)
/// and safety-related items (the penalty term).
struct BatchSplit {
  std::vector<Example> safe_items;
  std::vector<Example> toxic_items;
  double lambda = 0.0;

  void validate() const {
    if (lambda < 0.0) throw std::invalid_argument("BatchSplit: lambda must be >= 0");
    if (safe_items.empty() && toxic_items.empty())
      throw std::invalid_argument("BatchSplit: both sublists empty");
  }
};

enum class PenaltyKind { Emd, Nlcl };

struct LossReport {
  double sft_value = 0.0;
  double penalty_value = 0.0;  // exactly 0 when the toxic sublist is absent
  double total_value = 0.0;
  std::size_t sft_examples = 0;
  std::size_t sft_tokens = 0;
  std::size_t penalty_examples = 0;
  std::size_t penalty_tokens = 0;
};

/// Scoring slots for one sequence: probs row t-1 predicts tokens[t], so slot
/// rows index the forward output and targets give the scored token ids.
struct MaskedTargets {
  std::vector<int> rows;
  std::vector<int> targets;
};

/// Loss positions from full-length targets plus a mask; entries of
/// full_targets at unmasked slots are never read, which keeps every loss
/// invariant to prompt-position targets.
inline MaskedTargets masked_targets(std::size_t seq_len, const std::vector<int>& full_targets,
                                    const std::vector<bool>& mask) {
  if (full_targets.size() != seq_len || mask.size() != seq_len)
    throw std::invalid_argument("masked_targets: length mismatch");
  MaskedTargets mt;
  for (std::size_t t = 1; t < seq_len; ++t) {
    if (!mask[t]) continue;
    mt.rows.push_back(static_cast<int>(t - 1));
    mt.targets.push_back(full_targets[t]);
  }
  return mt;
}

/// Response-token slots of an example; prompt positions stay masked out.
inline MaskedTargets response_targets(const Example& ex) {
  std::vector<int> seq = ex.prompt;
  seq.insert(seq.end(), ex.response.begin(), ex.response.end());
  std::vector<bool> mask(seq.size(), false);
  for (std::size_t t = ex.prompt.size(); t < seq.size(); ++t) mask[t] = true;
  return masked_targets(seq.size(), seq, mask);
}

inline std::vector<int> full_sequence(const Example& ex) {
  std::vector<int> seq = ex.prompt;
  seq.insert(seq.end(), ex.response.begin(), ex.response.end());
  return seq;
}

// --- differentiable graph builders ----------------------------------------

/// - (1/N) sum_i sum_t log Q(y_{i,t} | y_{i,<t}, p_i) over response tokens.
inline NodeId build_sft_loss(Tape& tape, const ModelConfig& cfg, const ParamSet<NodeId>& w,
                             const std::vector<Example>& examples) {
  if (examples.empty()) throw std::invalid_argument("sft_loss: empty example list");
  TapeEngine e{tape};
  NodeId acc{};
  bool first = true;
  for (const Example& ex : examples) {
    if (ex.response.empty()) throw std::invalid_argument("sft_loss: empty response");
    const MaskedTargets mt = response_targets(ex);
    const NodeId probs = forward_probs(e, cfg, w, full_sequence(ex));
    const NodeId picked = tape.take_per_row(tape.gather_rows(probs, mt.rows), mt.targets);
    const NodeId s = tape.sum(tape.log(picked));
    acc = first ? s : tape.add(acc, s);
    first = false;
  }
  return tape.scale(acc, -1.0 / static_cast<double>(examples.size()));
}

/// - (1/N) sum_i sum_t || e_hat(y_t) - sum_v Q(v|.) e_hat(v) ||^2 with the
/// data distribution collapsed to a one-hot. Embedding rows enter as
/// stop-gradient constants: only Q carries gradient.
inline NodeId build_emd_loss(Tape& tape, const ModelConfig& cfg, const ParamSet<NodeId>& w,
                             const ModelParams& params, const std::vector<Example>& examples) {
  if (examples.empty()) throw std::invalid_argument("emd_loss: empty example list");
  TapeEngine e{tape};
  const EmbeddingTable view = embedding_view(params);  // recomputed per call
  const NodeId unit_rows = tape.constant(view.unit);
  NodeId acc{};
  bool first = true;
  for (const Example& ex : examples) {
    if (ex.response.empty()) throw std::invalid_argument("emd_loss: empty response");
    const MaskedTargets mt = response_targets(ex);
    const NodeId probs = forward_probs(e, cfg, w, full_sequence(ex));
    const NodeId q_mean = tape.matmul(tape.gather_rows(probs, mt.rows), unit_rows);
    const NodeId data_rows = tape.constant(ops::gather_rows(view.unit, mt.targets));
    const NodeId diff = tape.sub(data_rows, q_mean);
    const NodeId s = tape.sum(tape.mul(diff, diff));
    acc = first ? s : tape.add(acc, s);
    first = false;
  }
  return tape.scale(acc, -1.0 / static_cast<double>(examples.size()));
}

/// - (1/N) sum_i log(1 - Q(y_i | p_i)) with the length-normalized sequence
/// probability exp((1/T_i) sum_t log Q); 1 - Q clamps at 1e-6 before the log.
inline NodeId build_nlcl_loss(Tape& tape, const ModelConfig& cfg, const ParamSet<NodeId>& w,
                              const std::vector<Example>& examples) {
  if (examples.empty()) throw std::invalid_argument("nlcl_loss: empty example list");
  TapeEngine e{tape};
  NodeId acc{};
  bool first = true;
  for (const Example& ex : examples) {
    if (ex.response.empty()) throw std::invalid_argument("nlcl_loss: empty response");
    const MaskedTargets mt = response_targets(ex);
    const NodeId probs = forward_probs(e, cfg, w, full_sequence(ex));
    const NodeId picked = tape.take_per_row(tape.gather_rows(probs, mt.rows), mt.targets);
    const NodeId seq_prob = tape.exp(tape.mean(tape.log(picked)));
    const NodeId complement = tape.clamp_min(tape.add_scalar(tape.scale(seq_prob, -1.0), 1.0), 1e-6);
    const NodeId s = tape.log(complement);
    acc = first ? s : tape.add(acc, s);
    first = false;
  }
  return tape.scale(acc, -1.0 / static_cast<double>(examples.size()));
}

struct CombinedLossNodes {
  NodeId total{};
  LossReport report;
};

/// Mixed-batch objective: sft over the safe sublist plus lambda times the
/// penalty over the toxic sublist; an absent sublist contributes exactly 0.
inline CombinedLossNodes build_combined_loss(Tape& tape, const ModelConfig& cfg,
                                             const ParamSet<NodeId>& w, const ModelParams& params,
                                             const BatchSplit& split, PenaltyKind penalty) {
  split.validate();
  CombinedLossNodes out;
  NodeId sft{}, pen{};
  const bool has_sft = !split.safe_items.empty();
  const bool has_pen = !split.toxic_items.empty();
  if (has_sft) {
    sft = build_sft_loss(tape, cfg, w, split.safe_items);
    out.report.sft_value = tape.value(sft).data[0];
    out.report.sft_examples = split.safe_items.size();
    for (const Example& ex : split.safe_items) out.report.sft_tokens += ex.response.size();
  }
  if (has_pen) {
    pen = penalty == PenaltyKind::Emd ? build_emd_loss(tape, cfg, w, params, split.toxic_items)
                                      : build_nlcl_loss(tape, cfg, w, split.toxic_items);
    out.report.penalty_value = tape.value(pen).data[0];
    out.report.penalty_examples = split.toxic_items.size();
    for (const Example& ex : split.toxic_items) out.report.penalty_tokens += ex.response.size();
  }
  if (has_sft && has_pen)
    out.total = tape.add(sft, tape.scale(pen, split.lambda));
  else if (has_sft)
    out.total = sft;
  else
    out.total = tape.scale(pen, split.lambda);
  out.report.total_value = tape.value(out.total).data[0];
  return out;
}

// --- value-only conveniences (tests and evaluation) ------------------------

namespace detail {

template <class Builder>
double loss_value(const ModelParams& params, Builder&& build) {
  Tape tape;
  TapeEngine e{tape};
  const ParamSet<NodeId> w = bind_params(e, params);
  return tape.value(build(tape, w)).data[0];
}

}  // namespace detail

inline double sft_loss(const ModelParams& params, const std::vector<Example>& examples) {
  return detail::loss_value(params, [&](Tape& tape, const ParamSet<NodeId>& w) {
    return build_sft_loss(tape, params.config, w, examples);
  });
}

inline double emd_loss(const ModelParams& params, const std::vector<Example>& examples) {
  return detail::loss_value(params, [&](Tape& tape, const ParamSet<NodeId>& w) {
    return build_emd_loss(tape, params.config, w, params, examples);
  });
}

inline double nlcl_loss(const ModelParams& params, const std::vector<Example>& examples) {
  return detail::loss_value(params, [&](Tape& tape, const ParamSet<NodeId>& w) {
    return build_nlcl_loss(tape, params.config, w, examples);
  });
}

inline LossReport combined_loss(const ModelParams& params, const BatchSplit& split,
                                PenaltyKind penalty) {
  Tape tape;
  TapeEngine e{tape};
  const ParamSet<NodeId> w = bind_params(e, params);
  return build_combined_loss(tape, params.config, w, params, split, penalty).report;
}

}  // namespace tasft
