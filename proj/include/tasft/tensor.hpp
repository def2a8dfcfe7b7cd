#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "tasft/util.hpp"

namespace tasft {

/// Dense row-major 2-D array of doubles. The only tensor shape in the
/// project; row and column vectors are 1xN / Nx1.
struct Tensor2 {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor2() = default;
  Tensor2(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), data(r * c, fill) {}

  static Tensor2 from_rows(std::initializer_list<std::initializer_list<double>> rs) {
    Tensor2 t;
    t.rows = rs.size();
    t.cols = rs.begin()->size();
    t.data.reserve(t.rows * t.cols);
    for (const auto& r : rs) {
      if (r.size() != t.cols) throw std::invalid_argument("from_rows: ragged rows");
      t.data.insert(t.data.end(), r.begin(), r.end());
    }
    return t;
  }

  std::size_t size() const { return rows * cols; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  double* row_ptr(std::size_t r) { return data.data() + r * cols; }
  const double* row_ptr(std::size_t r) const { return data.data() + r * cols; }

  bool same_shape(const Tensor2& o) const { return rows == o.rows && cols == o.cols; }

  bool all_finite() const {
    for (double v : data)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

inline bool operator==(const Tensor2& a, const Tensor2& b) {
  return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
}

// Forward kernels. The tape records these and the evaluation path calls them
// directly, so trained and evaluated values are computed by identical code.
namespace ops {

inline void check_shape(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(what);
}

inline Tensor2 matmul(const Tensor2& a, const Tensor2& b) {
  check_shape(a.cols == b.rows, "matmul: inner dimensions differ");
  Tensor2 out(a.rows, b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = a.row_ptr(i);
    double* orow = out.row_ptr(i);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = arow[k];
      if (aik == 0.0) continue;
      const double* brow = b.row_ptr(k);
      for (std::size_t j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

inline Tensor2 transpose(const Tensor2& a) {
  Tensor2 out(a.cols, a.rows);
  for (std::size_t i = 0; i < a.rows; ++i)
    for (std::size_t j = 0; j < a.cols; ++j) out.at(j, i) = a.at(i, j);
  return out;
}

inline Tensor2 add(const Tensor2& a, const Tensor2& b) {
  check_shape(a.same_shape(b), "add: shape mismatch");
  Tensor2 out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.data[i];
  return out;
}

inline Tensor2 sub(const Tensor2& a, const Tensor2& b) {
  check_shape(a.same_shape(b), "sub: shape mismatch");
  Tensor2 out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.data[i];
  return out;
}

inline Tensor2 mul(const Tensor2& a, const Tensor2& b) {
  check_shape(a.same_shape(b), "mul: shape mismatch");
  Tensor2 out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.data[i];
  return out;
}

inline Tensor2 scale(const Tensor2& a, double c) {
  Tensor2 out = a;
  for (double& v : out.data) v *= c;
  return out;
}

inline Tensor2 add_scalar(const Tensor2& a, double c) {
  Tensor2 out = a;
  for (double& v : out.data) v += c;
  return out;
}

/// a + row vector broadcast over every row of a.
inline Tensor2 add_rowvec(const Tensor2& a, const Tensor2& r) {
  check_shape(r.rows == 1 && r.cols == a.cols, "add_rowvec: want 1 x a.cols");
  Tensor2 out = a;
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* orow = out.row_ptr(i);
    for (std::size_t j = 0; j < a.cols; ++j) orow[j] += r.data[j];
  }
  return out;
}

inline Tensor2 exp(const Tensor2& a) {
  Tensor2 out = a;
  for (double& v : out.data) v = std::exp(v);
  return out;
}

inline Tensor2 log(const Tensor2& a) {
  Tensor2 out = a;
  for (double& v : out.data) {
    if (!(v > 0.0)) throw std::domain_error("log: input not strictly positive");
    v = std::log(v);
  }
  return out;
}

inline Tensor2 relu(const Tensor2& a) {
  Tensor2 out = a;
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return out;
}

inline Tensor2 clamp_min(const Tensor2& a, double lo, std::size_t* hits = nullptr) {
  Tensor2 out = a;
  for (double& v : out.data) {
    if (v < lo) {
      v = lo;
      if (hits) ++*hits;
    }
  }
  return out;
}

inline Tensor2 gather_rows(const Tensor2& a, const std::vector<int>& idx) {
  Tensor2 out(idx.size(), a.cols);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    check_shape(idx[i] >= 0 && static_cast<std::size_t>(idx[i]) < a.rows,
                "gather_rows: index out of range");
    std::copy_n(a.row_ptr(idx[i]), a.cols, out.row_ptr(i));
  }
  return out;
}

/// Picks a[i, idx[i]] for every row i; the result is rows x 1.
inline Tensor2 take_per_row(const Tensor2& a, const std::vector<int>& idx) {
  check_shape(idx.size() == a.rows, "take_per_row: one index per row required");
  Tensor2 out(a.rows, 1);
  for (std::size_t i = 0; i < a.rows; ++i) {
    check_shape(idx[i] >= 0 && static_cast<std::size_t>(idx[i]) < a.cols,
                "take_per_row: index out of range");
    out.data[i] = a.at(i, idx[i]);
  }
  return out;
}

/// Row-wise softmax with max subtraction.
inline Tensor2 softmax_rows(const Tensor2& a) {
  Tensor2 out = a;
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* row = out.row_ptr(i);
    double mx = row[0];
    for (std::size_t j = 1; j < a.cols; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) {
      row[j] = std::exp(row[j] - mx);
      sum += row[j];
    }
    for (std::size_t j = 0; j < a.cols; ++j) row[j] /= sum;
  }
  return out;
}

/// Row-wise (x - mean) / sqrt(var + eps), biased variance, no affine part.
inline Tensor2 layer_norm_rows(const Tensor2& a, double eps) {
  Tensor2 out = a;
  const double n = static_cast<double>(a.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* row = out.row_ptr(i);
    double mean = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) mean += row[j];
    mean /= n;
    double var = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= n;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < a.cols; ++j) row[j] = (row[j] - mean) * inv;
  }
  return out;
}

inline Tensor2 sum_all(const Tensor2& a) {
  Tensor2 out(1, 1);
  out.data[0] = std::accumulate(a.data.begin(), a.data.end(), 0.0);
  return out;
}

inline Tensor2 mean_all(const Tensor2& a) {
  Tensor2 out = sum_all(a);
  out.data[0] /= static_cast<double>(a.size());
  return out;
}

}  // namespace ops
}  // namespace tasft
