#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <deque>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tasft/rng.hpp"
#include "tasft/tensor.hpp"
#include "tasft/util.hpp"

namespace tasft {

/// Probability vector over the vocabulary.
struct TokenDistribution {
  std::vector<double> probs;

  void validate() const {
    double sum = 0.0;
    for (double v : probs) {
      if (v < 0.0) throw std::invalid_argument("TokenDistribution: negative entry");
      sum += v;
    }
    if (std::fabs(sum - 1.0) > 1e-9)
      throw std::invalid_argument("TokenDistribution: entries sum to " + fmt_double(sum));
  }

  static TokenDistribution delta(std::size_t n, std::size_t at) {
    TokenDistribution d;
    d.probs.assign(n, 0.0);
    d.probs[at] = 1.0;
    return d;
  }

  static TokenDistribution uniform(std::size_t n) {
    TokenDistribution d;
    d.probs.assign(n, 1.0 / static_cast<double>(n));
    return d;
  }
};

/// Per-token raw and unit-normalized embedding rows.
struct EmbeddingTable {
  std::size_t vocab_size = 0;
  std::size_t dim = 0;
  Tensor2 raw;   // V x D
  Tensor2 unit;  // V x D, each row norm 1

  static EmbeddingTable from_raw(Tensor2 r) {
    EmbeddingTable t;
    t.vocab_size = r.rows;
    t.dim = r.cols;
    t.unit = r;
    for (std::size_t i = 0; i < r.rows; ++i) {
      double norm_sq = 0.0;
      const double* row = r.row_ptr(i);
      for (std::size_t j = 0; j < r.cols; ++j) norm_sq += row[j] * row[j];
      const double norm = std::sqrt(norm_sq);
      if (!(norm > 0.0))
        throw std::invalid_argument("EmbeddingTable: zero embedding row " + std::to_string(i));
      double* urow = t.unit.row_ptr(i);
      for (std::size_t j = 0; j < r.cols; ++j) urow[j] /= norm;
    }
    t.raw = std::move(r);
    return t;
  }
};

/// 1 - <u, v> for unit vectors; equals ||u - v||^2 / 2 on the unit sphere.
inline double cosine_distance(std::span<const double> u, std::span<const double> v) {
  if (u.size() != v.size()) throw std::invalid_argument("cosine_distance: length mismatch");
  double nu = 0.0, nv = 0.0, dot = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    nu += u[i] * u[i];
    nv += v[i] * v[i];
    dot += u[i] * v[i];
  }
  if (std::fabs(std::sqrt(nu) - 1.0) > 1e-9 || std::fabs(std::sqrt(nv) - 1.0) > 1e-9)
    throw std::invalid_argument("cosine_distance: inputs must be unit vectors");
  return 1.0 - dot;
}

/// Pairwise cosine-distance matrix over the unit embeddings: symmetric,
/// zero diagonal, entries in [0, 2].
struct CostMatrix {
  Tensor2 m;  // V x V
};

inline CostMatrix cost_matrix(const EmbeddingTable& emb) {
  const std::size_t n = emb.vocab_size;
  CostMatrix c{Tensor2(n, n)};
  for (std::size_t i = 0; i < n; ++i) {
    const double* ui = emb.unit.row_ptr(i);
    for (std::size_t j = i + 1; j < n; ++j) {
      const double* uj = emb.unit.row_ptr(j);
      double dot = 0.0;
      for (std::size_t k = 0; k < emb.dim; ++k) dot += ui[k] * uj[k];
      const double d = 1.0 - dot;
      c.m.at(i, j) = d;
      c.m.at(j, i) = d;
    }
  }
  return c;
}

/// Joint mass matrix whose marginals are the two compared distributions.
struct Coupling {
  Tensor2 plan;  // V x V

  /// Max absolute deviation of the row/column sums from p and q.
  double marginal_error(const TokenDistribution& p, const TokenDistribution& q) const {
    double worst = 0.0;
    for (std::size_t i = 0; i < plan.rows; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < plan.cols; ++j) s += plan.at(i, j);
      worst = std::max(worst, std::fabs(s - p.probs[i]));
    }
    for (std::size_t j = 0; j < plan.cols; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < plan.rows; ++i) s += plan.at(i, j);
      worst = std::max(worst, std::fabs(s - q.probs[j]));
    }
    return worst;
  }
};

struct EmdResult {
  double value = 0.0;
  Coupling plan;
  int iterations = 0;
};

namespace detail {

// Transportation-problem network simplex. Sources carry p, sinks carry q,
// the basis is a spanning tree over the 2n bipartite nodes. Vogel's
// approximation seeds the basis; degenerate allocations carry an epsilon so
// early pivots stay non-degenerate. Entering arc is the most negative reduced
// cost, with a Bland fallback after a run of degenerate pivots.
class TransportSimplex {
 public:
  TransportSimplex(const std::vector<double>& p, const std::vector<double>& q,
                   const Tensor2& cost)
      : n_(p.size()), cost_(cost), in_basis_(n_ * n_, 0) {
    vogel_init(p, q);
  }

  EmdResult solve() {
    const int cap = static_cast<int>(100 * n_ * n_);
    const double opt_tol = 1e-9;
    int degenerate_run = 0;
    bool bland = false;
    int iter = 0;
    for (; iter < cap; ++iter) {
      compute_duals();
      int ei = -1, ej = -1;
      double best = -opt_tol;
      for (std::size_t i = 0; i < n_; ++i) {
        const double* crow = cost_.row_ptr(i);
        for (std::size_t j = 0; j < n_; ++j) {
          if (in_basis_[i * n_ + j]) continue;
          const double r = crow[j] - u_[i] - v_[j];
          if (bland) {
            if (r < -opt_tol) {
              ei = static_cast<int>(i);
              ej = static_cast<int>(j);
              break;
            }
          } else if (r < best) {
            best = r;
            ei = static_cast<int>(i);
            ej = static_cast<int>(j);
          }
        }
        if (bland && ei >= 0) break;
      }
      if (ei < 0) break;  // optimal
      const double theta = pivot(ei, ej);
      if (theta <= 1e-15) {
        if (++degenerate_run > 64) bland = true;
      } else {
        degenerate_run = 0;
        bland = false;
      }
    }
    if (iter >= cap)
      throw solver_error("exact_emd: iteration cap " + std::to_string(cap) +
                         " reached at vocab " + std::to_string(n_));
    return extract(iter);
  }

 private:
  struct BasisCell {
    int i, j;
    double flow;
  };

  std::size_t n_;
  const Tensor2& cost_;
  std::vector<BasisCell> basis_;
  std::vector<char> in_basis_;
  std::vector<double> u_, v_;

  void add_basis(int i, int j, double flow) {
    basis_.push_back({i, j, flow});
    in_basis_[static_cast<std::size_t>(i) * n_ + j] = 1;
  }

  void vogel_init(std::vector<double> sup, std::vector<double> dem) {
    std::vector<char> row_done(n_, 0), col_done(n_, 0);
    std::size_t rows_open = n_, cols_open = n_;
    const double eps = 1e-12;
    while (rows_open > 0 && cols_open > 0) {
      // penalty = gap between the two cheapest cells in an open line
      double best_pen = -1.0;
      bool best_is_row = true;
      int best_line = -1, best_other = -1;
      auto consider = [&](bool is_row, int line) {
        double c1 = std::numeric_limits<double>::infinity(), c2 = c1;
        int arg1 = -1;
        for (std::size_t k = 0; k < n_; ++k) {
          if (is_row ? col_done[k] : row_done[k]) continue;
          const double c = is_row ? cost_.at(line, k) : cost_.at(k, line);
          if (c < c1) {
            c2 = c1;
            c1 = c;
            arg1 = static_cast<int>(k);
          } else if (c < c2) {
            c2 = c;
          }
        }
        if (arg1 < 0) return;  // no open partner line
        const double pen = std::isinf(c2) ? c1 : c2 - c1;
        if (pen > best_pen) {
          best_pen = pen;
          best_is_row = is_row;
          best_line = line;
          best_other = arg1;
        }
      };
      for (std::size_t i = 0; i < n_; ++i)
        if (!row_done[i]) consider(true, static_cast<int>(i));
      for (std::size_t j = 0; j < n_; ++j)
        if (!col_done[j]) consider(false, static_cast<int>(j));

      const int bi = best_is_row ? best_line : best_other;
      const int bj = best_is_row ? best_other : best_line;
      const double a = std::min(sup[bi], dem[bj]);
      add_basis(bi, bj, a > 0.0 ? a : eps);
      sup[bi] -= a;
      dem[bj] -= a;
      // close exactly one line per allocation (both on the last one) so the
      // basis ends with exactly 2n - 1 cells
      if (rows_open == 1 && cols_open == 1) {
        row_done[bi] = 1;
        col_done[bj] = 1;
        rows_open = cols_open = 0;
      } else if (rows_open == 1) {
        col_done[bj] = 1;
        --cols_open;
      } else if (cols_open == 1) {
        row_done[bi] = 1;
        --rows_open;
      } else if (sup[bi] <= dem[bj]) {
        row_done[bi] = 1;
        --rows_open;
      } else {
        col_done[bj] = 1;
        --cols_open;
      }
    }
    if (basis_.size() != 2 * n_ - 1)
      throw solver_error("exact_emd: initial basis has " + std::to_string(basis_.size()) +
                         " cells, expected " + std::to_string(2 * n_ - 1));
  }

  // Basis tree adjacency over nodes [0, n) = rows, [n, 2n) = cols.
  std::vector<std::vector<int>> adjacency() const {
    std::vector<std::vector<int>> adj(2 * n_);
    for (std::size_t b = 0; b < basis_.size(); ++b) {
      adj[basis_[b].i].push_back(static_cast<int>(b));
      adj[basis_[b].j + n_].push_back(static_cast<int>(b));
    }
    return adj;
  }

  void compute_duals() {
    u_.assign(n_, 0.0);
    v_.assign(n_, 0.0);
    std::vector<char> known(2 * n_, 0);
    auto adj = adjacency();
    std::deque<int> queue{0};
    known[0] = 1;
    std::size_t seen = 1;
    while (!queue.empty()) {
      const int node = queue.front();
      queue.pop_front();
      for (int b : adj[node]) {
        const BasisCell& cell = basis_[b];
        const int other = (node == cell.i) ? cell.j + static_cast<int>(n_) : cell.i;
        if (known[other]) continue;
        if (other >= static_cast<int>(n_))
          v_[other - n_] = cost_.at(cell.i, cell.j) - u_[cell.i];
        else
          u_[other] = cost_.at(cell.i, cell.j) - v_[cell.j];
        known[other] = 1;
        ++seen;
        queue.push_back(other);
      }
    }
    if (seen != 2 * n_) throw solver_error("exact_emd: basis is not a spanning tree");
  }

  // Pivot on entering cell (ei, ej); returns the flow moved around the cycle.
  double pivot(int ei, int ej) {
    // path from row node ei to col node ej through the basis tree
    auto adj = adjacency();
    std::vector<int> parent_edge(2 * n_, -1), parent_node(2 * n_, -1);
    std::vector<char> seen(2 * n_, 0);
    std::deque<int> queue{ei};
    seen[ei] = 1;
    const int target = ej + static_cast<int>(n_);
    while (!queue.empty() && !seen[target]) {
      const int node = queue.front();
      queue.pop_front();
      for (int b : adj[node]) {
        const BasisCell& cell = basis_[b];
        const int other = (node == cell.i) ? cell.j + static_cast<int>(n_) : cell.i;
        if (seen[other]) continue;
        seen[other] = 1;
        parent_edge[other] = b;
        parent_node[other] = node;
        queue.push_back(other);
      }
    }
    if (!seen[target]) throw solver_error("exact_emd: no cycle for entering arc");

    // walk back from ej to ei; path edges alternate -, +, -, ... starting
    // at the edge adjacent to the entering arc's + end
    std::vector<int> path;
    for (int node = target; node != ei; node = parent_node[node])
      path.push_back(parent_edge[node]);
    // path is ordered from ej-side to ei-side; the edge touching ej gets -
    double theta = std::numeric_limits<double>::infinity();
    int leave_pos = -1;
    for (std::size_t k = 0; k < path.size(); k += 2) {
      const BasisCell& cell = basis_[path[k]];
      if (cell.flow < theta ||
          (cell.flow == theta && leave_pos >= 0 &&
           std::pair(cell.i, cell.j) <
               std::pair(basis_[path[leave_pos]].i, basis_[path[leave_pos]].j))) {
        theta = cell.flow;
        leave_pos = static_cast<int>(k);
      }
    }
    for (std::size_t k = 0; k < path.size(); ++k) {
      basis_[path[k]].flow += (k % 2 == 0) ? -theta : theta;
    }
    const int leaving = path[leave_pos];
    in_basis_[static_cast<std::size_t>(basis_[leaving].i) * n_ + basis_[leaving].j] = 0;
    basis_[leaving] = {ei, ej, theta};
    in_basis_[static_cast<std::size_t>(ei) * n_ + ej] = 1;
    return theta;
  }

  EmdResult extract(int iterations) const {
    EmdResult res;
    res.plan.plan = Tensor2(n_, n_);
    for (const BasisCell& cell : basis_) {
      const double f = cell.flow < 1e-11 ? 0.0 : cell.flow;  // strip epsilons
      res.plan.plan.at(cell.i, cell.j) += f;
    }
    double value = 0.0;
    for (std::size_t i = 0; i < n_; ++i)
      for (std::size_t j = 0; j < n_; ++j) value += res.plan.plan.at(i, j) * cost_.at(i, j);
    res.value = value;
    res.iterations = iterations;
    return res;
  }
};

}  // namespace detail

/// Exact discrete EMD: solves the transportation linear program
///   min sum_{x,y} gamma(x,y) c(x,y)  s.t. row sums = p, column sums = q.
/// Returns the optimal value and an optimal coupling. The returned plan is
/// post-checked against the marginals (1e-8) and the solver aborts past
/// 100 |V|^2 pivots.
inline EmdResult exact_emd(const TokenDistribution& p, const TokenDistribution& q,
                           const CostMatrix& c) {
  p.validate();
  q.validate();
  const std::size_t n = p.probs.size();
  if (q.probs.size() != n || c.m.rows != n || c.m.cols != n)
    throw std::invalid_argument("exact_emd: dimension mismatch");
  detail::TransportSimplex simplex(p.probs, q.probs, c.m);
  EmdResult res = simplex.solve();
  const double err = res.plan.marginal_error(p, q);
  if (err > 1e-8)
    throw solver_error("exact_emd: plan violates marginals by " + fmt_double(err));
  return res;
}

/// Probability-weighted sum of unit embeddings (a 1 x dim row vector).
inline Tensor2 mean_embedding(const TokenDistribution& d, const EmbeddingTable& emb) {
  if (d.probs.size() != emb.vocab_size)
    throw std::invalid_argument("mean_embedding: dimension mismatch");
  Tensor2 row(1, emb.vocab_size);
  row.data = d.probs;
  return ops::matmul(row, emb.unit);  // same kernel as the training loss path
}

/// || mean_embedding(p) - mean_embedding(q) ||^2 with the 1/(2|V|^2) constant
/// dropped, exactly as the training penalty uses it.
inline double mean_embedding_gap_sq(const TokenDistribution& p, const TokenDistribution& q,
                                    const EmbeddingTable& emb) {
  const Tensor2 mp = mean_embedding(p, emb);
  const Tensor2 mq = mean_embedding(q, emb);
  const Tensor2 diff = ops::sub(mp, mq);
  double s = 0.0;
  for (double v : diff.data) s += v * v;
  return s;
}

/// Lower bound on exact_emd(p, q, cosine costs):
///   (1 / (2|V|^2)) || sum_w p(w) e_w - sum_w q(w) e_w ||^2.
inline double emd_lower_bound(const TokenDistribution& p, const TokenDistribution& q,
                              const EmbeddingTable& emb) {
  const double vv = static_cast<double>(emb.vocab_size);
  return mean_embedding_gap_sq(p, q, emb) / (2.0 * vv * vv);
}

/// One row of the bound-verification sweep.
struct BoundCheckRow {
  int instance_id = 0;
  std::size_t vocab_size = 0;
  double exact_emd = 0.0;
  double lower_bound = 0.0;
  double gap = 0.0;  // exact - bound; negative would falsify the bound
  long long solve_time_ns = 0;
};

/// Random instance helpers shared by the bound-verification sweep and tests.
inline EmbeddingTable random_embeddings(std::size_t vocab, std::size_t dim, Rng& rng) {
  Tensor2 raw(vocab, dim);
  for (double& v : raw.data) v = rng.gauss();
  return EmbeddingTable::from_raw(std::move(raw));
}

inline TokenDistribution random_distribution(std::size_t vocab, Rng& rng) {
  TokenDistribution d;
  d.probs.resize(vocab);
  double sum = 0.0;
  for (double& v : d.probs) {
    v = -std::log(1.0 - rng.uniform01());  // Dirichlet(1,...,1)
    sum += v;
  }
  for (double& v : d.probs) v /= sum;
  return d;
}

/// Solves `instances` random (P, Q, embedding) problems at one vocab size and
/// reports exact EMD against the lower bound per instance.
inline std::vector<BoundCheckRow> bound_check_sweep(std::size_t vocab, int instances,
                                                    std::size_t dim, std::uint64_t seed) {
  std::vector<BoundCheckRow> rows;
  rows.reserve(instances);
  Rng rng(derive_seed(seed, vocab));
  for (int i = 0; i < instances; ++i) {
    const EmbeddingTable emb = random_embeddings(vocab, dim, rng);
    const CostMatrix c = cost_matrix(emb);
    const TokenDistribution p = random_distribution(vocab, rng);
    const TokenDistribution q = random_distribution(vocab, rng);
    const auto start = std::chrono::steady_clock::now();
    const EmdResult res = exact_emd(p, q, c);
    const auto stop = std::chrono::steady_clock::now();
    BoundCheckRow row;
    row.instance_id = i;
    row.vocab_size = vocab;
    row.exact_emd = res.value;
    row.lower_bound = emd_lower_bound(p, q, emb);
    row.gap = row.exact_emd - row.lower_bound;
    row.solve_time_ns =
        std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count();
    rows.push_back(row);
  }
  return rows;
}

inline std::string bound_check_csv_header() {
  return "instance_id,vocab_size,exact_emd,lower_bound,gap,solve_time_ns";
}

inline std::string bound_check_csv_row(const BoundCheckRow& r) {
  return std::to_string(r.instance_id) + "," + std::to_string(r.vocab_size) + "," +
         fmt_double(r.exact_emd) + "," + fmt_double(r.lower_bound) + "," + fmt_double(r.gap) +
         "," + std::to_string(r.solve_time_ns);
}

}  // namespace tasft
