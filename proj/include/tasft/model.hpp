#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "tasft/rng.hpp"
#include "tasft/tape.hpp"
#include "tasft/tensor.hpp"
#include "tasft/transport.hpp"
#include "tasft/util.hpp"

namespace tasft {

struct ModelConfig {
  int vocab_size = 64;
  int dim = 64;
  int layers = 2;
  int heads = 2;
  int context_len = 32;
  int ff_mult = 2;  // feed-forward hidden = ff_mult * dim
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size <= 0 || dim <= 0 || layers <= 0 || heads <= 0 || context_len <= 0)
      throw std::invalid_argument("ModelConfig: all sizes must be positive");
    if (dim % heads != 0) throw std::invalid_argument("ModelConfig: dim not divisible by heads");
  }

  int head_dim() const { return dim / heads; }
  int ff_dim() const { return ff_mult * dim; }
};

/// All model tensors, generic over the handle type: Tensor2 for storage,
/// NodeId once bound to a tape, shared views on the evaluation path.
template <class H>
struct ParamSet {
  struct Head {
    H wq, wk, wv, wo;  // dim x head_dim three times, head_dim x dim
  };
  struct Layer {
    std::vector<Head> heads;
    H w1, b1, w2, b2;  // dim x ff, 1 x ff, ff x dim, 1 x dim
  };
  H token_emb;  // vocab x dim; doubles as the embedding table source
  H pos_emb;    // context x dim
  std::vector<Layer> layers;
  H out_proj;  // dim x vocab
};

/// Visits every tensor with a stable name, in a fixed order shared by the
/// optimizer state, the checkpoint format and tape binding.
template <class H, class F>
void for_each_tensor(ParamSet<H>& p, F&& f) {
  f("token_emb", p.token_emb);
  f("pos_emb", p.pos_emb);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const std::string base = "layer" + std::to_string(l) + ".";
    auto& layer = p.layers[l];
    for (std::size_t h = 0; h < layer.heads.size(); ++h) {
      const std::string hb = base + "head" + std::to_string(h) + ".";
      f(hb + "wq", layer.heads[h].wq);
      f(hb + "wk", layer.heads[h].wk);
      f(hb + "wv", layer.heads[h].wv);
      f(hb + "wo", layer.heads[h].wo);
    }
    f(base + "w1", layer.w1);
    f(base + "b1", layer.b1);
    f(base + "w2", layer.w2);
    f(base + "b2", layer.b2);
  }
  f("out_proj", p.out_proj);
}

template <class H, class F>
void for_each_tensor(const ParamSet<H>& p, F&& f) {
  for_each_tensor(const_cast<ParamSet<H>&>(p),
                  [&f](const std::string& name, H& t) { f(name, static_cast<const H&>(t)); });
}

template <class A, class F>
auto map_param_set(const ParamSet<A>& in, F&& f) {
  using B = decltype(f(in.token_emb));
  ParamSet<B> out;
  out.token_emb = f(in.token_emb);
  out.pos_emb = f(in.pos_emb);
  out.layers.reserve(in.layers.size());
  for (const auto& layer : in.layers) {
    typename ParamSet<B>::Layer lo;
    for (const auto& head : layer.heads)
      lo.heads.push_back({f(head.wq), f(head.wk), f(head.wv), f(head.wo)});
    lo.w1 = f(layer.w1);
    lo.b1 = f(layer.b1);
    lo.w2 = f(layer.w2);
    lo.b2 = f(layer.b2);
    out.layers.push_back(std::move(lo));
  }
  out.out_proj = f(in.out_proj);
  return out;
}

struct ModelParams {
  ModelConfig config;
  ParamSet<Tensor2> t;

  /// Gaussian init, std 0.02, biases zero; deterministic per config.seed.
  static ModelParams init(const ModelConfig& cfg) {
    cfg.validate();
    ModelParams p;
    p.config = cfg;
    Rng rng(derive_seed(cfg.seed, 0x6d6f64656cULL));
    auto gauss_mat = [&rng](int r, int c) {
      Tensor2 t(r, c);
      for (double& v : t.data) v = rng.gauss() * 0.02;
      return t;
    };
    p.t.token_emb = gauss_mat(cfg.vocab_size, cfg.dim);
    p.t.pos_emb = gauss_mat(cfg.context_len, cfg.dim);
    p.t.layers.resize(cfg.layers);
    for (auto& layer : p.t.layers) {
      layer.heads.resize(cfg.heads);
      for (auto& head : layer.heads) {
        head.wq = gauss_mat(cfg.dim, cfg.head_dim());
        head.wk = gauss_mat(cfg.dim, cfg.head_dim());
        head.wv = gauss_mat(cfg.dim, cfg.head_dim());
        head.wo = gauss_mat(cfg.head_dim(), cfg.dim);
      }
      layer.w1 = gauss_mat(cfg.dim, cfg.ff_dim());
      layer.b1 = Tensor2(1, cfg.ff_dim());
      layer.w2 = gauss_mat(cfg.ff_dim(), cfg.dim);
      layer.b2 = Tensor2(1, cfg.dim);
    }
    p.t.out_proj = gauss_mat(cfg.dim, cfg.vocab_size);
    return p;
  }
};

/// Unit-normalized view of the input-embedding rows, recomputed on every
/// call so losses always see the current embedding geometry.
inline EmbeddingTable embedding_view(const ModelParams& p) {
  return EmbeddingTable::from_raw(p.t.token_emb);
}

// --- forward engines ---------------------------------------------------

/// Records the forward pass for differentiation.
struct TapeEngine {
  Tape& tape;
  using Handle = NodeId;
  Handle leaf(const Tensor2& t) { return tape.param(t); }
  Handle constant(Tensor2 t) { return tape.constant(std::move(t)); }
  Handle matmul(Handle a, Handle b) { return tape.matmul(a, b); }
  Handle transpose(Handle a) { return tape.transpose(a); }
  Handle add(Handle a, Handle b) { return tape.add(a, b); }
  Handle add_rowvec(Handle a, Handle r) { return tape.add_rowvec(a, r); }
  Handle scale(Handle a, double c) { return tape.scale(a, c); }
  Handle relu(Handle a) { return tape.relu(a); }
  Handle softmax_rows(Handle a) { return tape.softmax_rows(a); }
  Handle layer_norm_rows(Handle a) { return tape.layer_norm_rows(a); }
  Handle gather_rows(Handle a, const std::vector<int>& idx) { return tape.gather_rows(a, idx); }
  const Tensor2& value(Handle h) const { return tape.value(h); }
};

/// Computes values only, with zero-copy leaves; same kernels as the tape, so
/// evaluated and trained forward passes are bit-identical.
struct EvalEngine {
  using Handle = std::shared_ptr<const Tensor2>;
  static Handle wrap(Tensor2 t) { return std::make_shared<const Tensor2>(std::move(t)); }
  Handle leaf(const Tensor2& t) { return Handle(Handle{}, &t); }
  Handle constant(Tensor2 t) { return wrap(std::move(t)); }
  Handle matmul(Handle a, Handle b) { return wrap(ops::matmul(*a, *b)); }
  Handle transpose(Handle a) { return wrap(ops::transpose(*a)); }
  Handle add(Handle a, Handle b) { return wrap(ops::add(*a, *b)); }
  Handle add_rowvec(Handle a, Handle r) { return wrap(ops::add_rowvec(*a, *r)); }
  Handle scale(Handle a, double c) { return wrap(ops::scale(*a, c)); }
  Handle relu(Handle a) { return wrap(ops::relu(*a)); }
  Handle softmax_rows(Handle a) { return wrap(ops::softmax_rows(*a)); }
  Handle layer_norm_rows(Handle a) { return wrap(ops::layer_norm_rows(*a, 1e-5)); }
  Handle gather_rows(Handle a, const std::vector<int>& idx) {
    return wrap(ops::gather_rows(*a, idx));
  }
  const Tensor2& value(Handle h) const { return *h; }
};

template <class Engine>
ParamSet<typename Engine::Handle> bind_params(Engine& e, const ModelParams& p) {
  return map_param_set(p.t, [&e](const Tensor2& t) { return e.leaf(t); });
}

namespace detail {

inline Tensor2 causal_mask(int t) {
  Tensor2 m(t, t);
  for (int i = 0; i < t; ++i)
    for (int j = i + 1; j < t; ++j) m.at(i, j) = -1e9;
  return m;
}

inline std::vector<int> iota_positions(int t) {
  std::vector<int> pos(t);
  for (int i = 0; i < t; ++i) pos[i] = i;
  return pos;
}

}  // namespace detail

/// Decoder-only forward pass: pre-norm attention and feed-forward blocks,
/// causal masking, per-position next-token distributions (T x V).
template <class Engine>
typename Engine::Handle forward_probs(Engine& e, const ModelConfig& cfg,
                                      const ParamSet<typename Engine::Handle>& w,
                                      const std::vector<int>& tokens) {
  using H = typename Engine::Handle;
  const int t_len = static_cast<int>(tokens.size());
  if (t_len == 0) throw std::invalid_argument("forward: empty token sequence");
  if (t_len > cfg.context_len) throw std::invalid_argument("forward: sequence exceeds context_len");
  for (int tok : tokens)
    if (tok < 0 || tok >= cfg.vocab_size)
      throw std::invalid_argument("forward: token id out of vocabulary");

  H x = e.add(e.gather_rows(w.token_emb, tokens),
              e.gather_rows(w.pos_emb, detail::iota_positions(t_len)));
  const H mask = e.constant(detail::causal_mask(t_len));
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));

  for (const auto& layer : w.layers) {
    H h = e.layer_norm_rows(x);
    H attn_out{};
    bool first = true;
    for (const auto& head : layer.heads) {
      H q = e.matmul(h, head.wq);
      H k = e.matmul(h, head.wk);
      H v = e.matmul(h, head.wv);
      H scores = e.add(e.scale(e.matmul(q, e.transpose(k)), att_scale), mask);
      H mixed = e.matmul(e.softmax_rows(scores), v);
      H proj = e.matmul(mixed, head.wo);
      attn_out = first ? proj : e.add(attn_out, proj);
      first = false;
    }
    x = e.add(x, attn_out);
    H h2 = e.layer_norm_rows(x);
    H ff = e.add_rowvec(e.matmul(e.relu(e.add_rowvec(e.matmul(h2, layer.w1), layer.b1)), layer.w2),
                        layer.b2);
    x = e.add(x, ff);
  }
  return e.softmax_rows(e.matmul(e.layer_norm_rows(x), w.out_proj));
}

/// Next-token distributions on the evaluation path (no gradient recording).
inline Tensor2 forward(const ModelParams& p, const std::vector<int>& tokens) {
  EvalEngine e;
  const auto bound = bind_params(e, p);
  return *forward_probs(e, p.config, bound, tokens);
}

/// Deterministic argmax continuation until EOS (token id eos) or max_len new
/// tokens; ties break toward the lowest token id.
inline std::vector<int> greedy_decode(const ModelParams& p, const std::vector<int>& prompt,
                                      int max_len, int eos) {
  if (static_cast<int>(prompt.size()) >= p.config.context_len)
    throw std::invalid_argument("greedy_decode: prompt does not fit the context");
  std::vector<int> seq = prompt;
  std::vector<int> out;
  while (static_cast<int>(out.size()) < max_len &&
         static_cast<int>(seq.size()) < p.config.context_len) {
    const Tensor2 probs = forward(p, seq);
    const double* last = probs.row_ptr(probs.rows - 1);
    int best = 0;
    for (int j = 1; j < p.config.vocab_size; ++j)
      if (last[j] > last[best]) best = j;
    out.push_back(best);
    seq.push_back(best);
    if (best == eos) break;
  }
  return out;
}

// --- checkpoints ---------------------------------------------------------

namespace detail {

constexpr char kCheckpointMagic[8] = {'T', 'A', 'S', 'F', 'T', 'C', 'K', '1'};

template <class T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T read_pod(std::ifstream& in, const std::string& path) {
  T v;
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw parse_error("checkpoint truncated: " + path);
  return v;
}

}  // namespace detail

/// Versioned binary container: config plus named flat tensors, bit-exact on
/// round-trip at the stored precision.
inline void save_checkpoint(const std::string& path, const ModelParams& p) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw parse_error("cannot open for writing: " + path);
  out.write(detail::kCheckpointMagic, sizeof(detail::kCheckpointMagic));
  detail::write_pod(out, static_cast<std::int32_t>(p.config.vocab_size));
  detail::write_pod(out, static_cast<std::int32_t>(p.config.dim));
  detail::write_pod(out, static_cast<std::int32_t>(p.config.layers));
  detail::write_pod(out, static_cast<std::int32_t>(p.config.heads));
  detail::write_pod(out, static_cast<std::int32_t>(p.config.context_len));
  detail::write_pod(out, static_cast<std::int32_t>(p.config.ff_mult));
  detail::write_pod(out, p.config.seed);
  std::int32_t count = 0;
  for_each_tensor(p.t, [&count](const std::string&, const Tensor2&) { ++count; });
  detail::write_pod(out, count);
  for_each_tensor(p.t, [&out](const std::string& name, const Tensor2& t) {
    detail::write_pod(out, static_cast<std::int32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod(out, static_cast<std::int64_t>(t.rows));
    detail::write_pod(out, static_cast<std::int64_t>(t.cols));
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  });
  if (!out) throw parse_error("short write to checkpoint: " + path);
}

inline ModelParams load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw parse_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, detail::kCheckpointMagic, sizeof(magic)) != 0)
    throw parse_error("bad checkpoint magic: " + path);
  ModelConfig cfg;
  cfg.vocab_size = detail::read_pod<std::int32_t>(in, path);
  cfg.dim = detail::read_pod<std::int32_t>(in, path);
  cfg.layers = detail::read_pod<std::int32_t>(in, path);
  cfg.heads = detail::read_pod<std::int32_t>(in, path);
  cfg.context_len = detail::read_pod<std::int32_t>(in, path);
  cfg.ff_mult = detail::read_pod<std::int32_t>(in, path);
  cfg.seed = detail::read_pod<std::uint64_t>(in, path);
  ModelParams p = ModelParams::init(cfg);
  const auto count = detail::read_pod<std::int32_t>(in, path);
  std::int32_t seen = 0;
  for_each_tensor(p.t, [&](const std::string& name, Tensor2& t) {
    const auto name_len = detail::read_pod<std::int32_t>(in, path);
    std::string stored(static_cast<std::size_t>(name_len), '\0');
    in.read(stored.data(), name_len);
    if (!in || stored != name)
      throw parse_error("checkpoint tensor order mismatch at '" + stored + "': " + path);
    const auto rows = detail::read_pod<std::int64_t>(in, path);
    const auto cols = detail::read_pod<std::int64_t>(in, path);
    if (rows != static_cast<std::int64_t>(t.rows) || cols != static_cast<std::int64_t>(t.cols))
      throw parse_error("checkpoint tensor shape mismatch at '" + name + "': " + path);
    in.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    if (!in) throw parse_error("checkpoint truncated: " + path);
    ++seen;
  });
  if (seen != count) throw parse_error("checkpoint tensor count mismatch: " + path);
  return p;
}

}  // namespace tasft
