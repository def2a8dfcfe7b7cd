#include <catch2/catch_amalgamated.hpp>

#include "tasft/rng.hpp"
#include "tasft/tape.hpp"

#include "support/finite_diff.hpp"

using namespace tasft;
using testsupport::fd_gradient;
using testsupport::max_rel_err;

namespace {

Tensor2 random_tensor(std::size_t r, std::size_t c, Rng& rng, double scale = 1.0) {
  Tensor2 t(r, c);
  for (double& v : t.data) v = rng.gauss() * scale;
  return t;
}

// loss = sum(op(x) * w) with fixed random weights w exercises the full
// Jacobian of the op through a scalar.
double weighted_sum(const Tensor2& out, const Tensor2& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) s += out.data[i] * w.data[i];
  return s;
}

}  // namespace

TEST_CASE("matmul identity and hand arithmetic", "[tape]") {
  Tape tape;
  const NodeId eye = tape.constant(Tensor2::from_rows({{1, 0}, {0, 1}}));
  const NodeId x = tape.constant(Tensor2::from_rows({{3, 4}, {5, 6}}));
  CHECK(tape.value(tape.matmul(eye, x)) == tape.value(x));

  const NodeId a = tape.constant(Tensor2::from_rows({{1, 2}}));
  const NodeId b = tape.constant(Tensor2::from_rows({{3}, {4}}));
  const NodeId prod = tape.matmul(a, b);
  CHECK(tape.value(prod).rows == 1);
  CHECK(tape.value(prod).data[0] == 11.0);
}

TEST_CASE("matmul rejects shape mismatch", "[tape]") {
  Tape tape;
  const NodeId a = tape.constant(Tensor2(2, 3, 1.0));
  const NodeId b = tape.constant(Tensor2(2, 3, 1.0));
  CHECK_THROWS_AS(tape.matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul gradient matches central finite differences", "[tape]") {
  Rng rng(11);
  const Tensor2 a0 = random_tensor(5, 4, rng);
  const Tensor2 b0 = random_tensor(4, 3, rng);
  const Tensor2 w = random_tensor(5, 3, rng);

  Tape tape;
  const NodeId a = tape.param(a0);
  const NodeId b = tape.param(b0);
  const NodeId loss = tape.sum(tape.mul(tape.matmul(a, b), tape.constant(w)));
  tape.backward(loss);

  auto f = [&](const std::vector<Tensor2>& in) {
    return weighted_sum(ops::matmul(in[0], in[1]), w);
  };
  CHECK(max_rel_err(tape.grad(a), fd_gradient(f, {a0, b0}, 0)) <= 1e-4);
  CHECK(max_rel_err(tape.grad(b), fd_gradient(f, {a0, b0}, 1)) <= 1e-4);
}

TEST_CASE("softmax rows: symmetry, stability, normalization", "[tape]") {
  Tape tape;
  const NodeId z = tape.constant(Tensor2(1, 4, 0.0));
  const Tensor2& sz = tape.value(tape.softmax_rows(z));
  for (double v : sz.data) CHECK(v == Catch::Approx(0.25).margin(1e-12));

  const NodeId big = tape.constant(Tensor2::from_rows({{1000.0, 0.0}}));
  const Tensor2& sb = tape.value(tape.softmax_rows(big));
  CHECK(sb.data[0] == Catch::Approx(1.0).margin(1e-12));
  CHECK(sb.data[1] == Catch::Approx(0.0).margin(1e-12));

  Rng rng(5);
  const Tensor2 x = random_tensor(6, 9, rng, 3.0);
  Tape t2;
  const Tensor2& sm = t2.value(t2.softmax_rows(t2.constant(x)));
  for (std::size_t i = 0; i < sm.rows; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < sm.cols; ++j) sum += sm.at(i, j);
    CHECK(std::fabs(sum - 1.0) <= 1e-9);
  }
}

TEST_CASE("softmax is invariant to adding a row constant", "[tape]") {
  Rng rng(6);
  const Tensor2 x = random_tensor(4, 7, rng, 2.0);
  Tensor2 shifted = x;
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < x.cols; ++j) shifted.at(i, j) += 0.37 * (1.0 + i);
  const Tensor2 a = ops::softmax_rows(x);
  const Tensor2 b = ops::softmax_rows(shifted);
  for (std::size_t k = 0; k < a.size(); ++k) CHECK(std::fabs(a.data[k] - b.data[k]) <= 1e-9);
}

TEST_CASE("softmax Jacobian-vector product matches finite differences", "[tape]") {
  Rng rng(7);
  const Tensor2 x0 = random_tensor(3, 5, rng, 2.0);
  const Tensor2 w = random_tensor(3, 5, rng);
  Tape tape;
  const NodeId x = tape.param(x0);
  const NodeId loss = tape.sum(tape.mul(tape.softmax_rows(x), tape.constant(w)));
  tape.backward(loss);
  auto f = [&](const std::vector<Tensor2>& in) {
    return weighted_sum(ops::softmax_rows(in[0]), w);
  };
  CHECK(max_rel_err(tape.grad(x), fd_gradient(f, {x0}, 0)) <= 1e-4);
}

TEST_CASE("log(exp(x)) = x over [-5, 5]", "[tape]") {
  Tensor2 x(1, 21);
  for (int i = 0; i <= 20; ++i) x.data[i] = -5.0 + 0.5 * i;
  Tape tape;
  const Tensor2& back = tape.value(tape.log(tape.exp(tape.constant(x))));
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::fabs(back.data[i] - x.data[i]) <= 1e-9);
}

TEST_CASE("log rejects non-positive input", "[tape]") {
  Tape tape;
  const NodeId x = tape.constant(Tensor2::from_rows({{1.0, 0.0}}));
  CHECK_THROWS_AS(tape.log(x), std::domain_error);
}

TEST_CASE("gather_rows permutation case", "[tape]") {
  Tape tape;
  const NodeId a = tape.constant(Tensor2::from_rows({{1, 2}, {3, 4}}));
  const Tensor2& g = tape.value(tape.gather_rows(a, {1, 0}));
  CHECK(g == Tensor2::from_rows({{3, 4}, {1, 2}}));
}

TEST_CASE("every elementwise op gradient matches finite differences", "[tape]") {
  Rng rng(13);
  const Tensor2 x0 = random_tensor(4, 6, rng);
  const Tensor2 y0 = random_tensor(4, 6, rng);
  const Tensor2 r0 = random_tensor(1, 6, rng);
  const Tensor2 w = random_tensor(4, 6, rng);
  const Tensor2 wt = ops::transpose(w);
  const Tensor2 wg = random_tensor(3, 6, rng);
  const Tensor2 wp = random_tensor(4, 1, rng);
  Tensor2 pos0 = x0;  // strictly positive input for log
  for (double& v : pos0.data) v = std::fabs(v) + 0.5;

  struct Case {
    const char* name;
    std::function<NodeId(Tape&, NodeId, NodeId, NodeId)> build;
    std::function<double(const std::vector<Tensor2>&)> eval;
    bool positive_x = false;
  };
  const std::vector<int> gidx{2, 0, 3};
  const std::vector<int> pidx{1, 4, 0, 5};

  const std::vector<Case> cases{
      {"add",
       [&](Tape& t, NodeId x, NodeId y, NodeId) { return t.sum(t.mul(t.add(x, y), t.constant(w))); },
       [&](const std::vector<Tensor2>& in) { return weighted_sum(ops::add(in[0], in[1]), w); }},
      {"sub",
       [&](Tape& t, NodeId x, NodeId y, NodeId) { return t.sum(t.mul(t.sub(x, y), t.constant(w))); },
       [&](const std::vector<Tensor2>& in) { return weighted_sum(ops::sub(in[0], in[1]), w); }},
      {"mul",
       [&](Tape& t, NodeId x, NodeId y, NodeId) { return t.sum(t.mul(t.mul(x, y), t.constant(w))); },
       [&](const std::vector<Tensor2>& in) { return weighted_sum(ops::mul(in[0], in[1]), w); }},
      {"scale",
       [&](Tape& t, NodeId x, NodeId, NodeId) { return t.sum(t.mul(t.scale(x, -1.7), t.constant(w))); },
       [&](const std::vector<Tensor2>& in) { return weighted_sum(ops::scale(in[0], -1.7), w); }},
      {"add_scalar",
       [&](Tape& t, NodeId x, NodeId, NodeId) { return t.sum(t.mul(t.add_scalar(x, 0.4), t.constant(w))); },
       [&](const std::vector<Tensor2>& in) { return weighted_sum(ops::add_scalar(in[0], 0.4), w); }},
      {"add_rowvec",
       [&](Tape& t, NodeId x, NodeId, NodeId r) { return t.sum(t.mul(t.add_rowvec(x, r), t.constant(w))); },
       [&](const std::vector<Tensor2>& in) { return weighted_sum(ops::add_rowvec(in[0], in[2]), w); }},
      {"exp",
       [&](Tape& t, NodeId x, NodeId, NodeId) { return t.sum(t.mul(t.exp(x), t.constant(w))); },
       [&](const std::vector<Tensor2>& in) { return weighted_sum(ops::exp(in[0]), w); }},
      {"log",
       [&](Tape& t, NodeId x, NodeId, NodeId) { return t.sum(t.mul(t.log(x), t.constant(w))); },
       [&](const std::vector<Tensor2>& in) { return weighted_sum(ops::log(in[0]), w); },
       true},
      {"relu",
       [&](Tape& t, NodeId x, NodeId, NodeId) { return t.sum(t.mul(t.relu(x), t.constant(w))); },
       [&](const std::vector<Tensor2>& in) { return weighted_sum(ops::relu(in[0]), w); }},
      {"clamp_min",
       [&](Tape& t, NodeId x, NodeId, NodeId) { return t.sum(t.mul(t.clamp_min(x, 0.2), t.constant(w))); },
       [&](const std::vector<Tensor2>& in) { return weighted_sum(ops::clamp_min(in[0], 0.2), w); }},
      {"transpose",
       [&](Tape& t, NodeId x, NodeId, NodeId) { return t.sum(t.mul(t.transpose(x), t.constant(wt))); },
       [&](const std::vector<Tensor2>& in) { return weighted_sum(ops::transpose(in[0]), wt); }},
      {"gather_rows",
       [&](Tape& t, NodeId x, NodeId, NodeId) { return t.sum(t.mul(t.gather_rows(x, gidx), t.constant(wg))); },
       [&](const std::vector<Tensor2>& in) { return weighted_sum(ops::gather_rows(in[0], gidx), wg); }},
      {"take_per_row",
       [&](Tape& t, NodeId x, NodeId, NodeId) { return t.sum(t.mul(t.take_per_row(x, pidx), t.constant(wp))); },
       [&](const std::vector<Tensor2>& in) { return weighted_sum(ops::take_per_row(in[0], pidx), wp); }},
      {"sum",
       [&](Tape& t, NodeId x, NodeId, NodeId) { return t.sum(x); },
       [&](const std::vector<Tensor2>& in) { return ops::sum_all(in[0]).data[0]; }},
      {"mean",
       [&](Tape& t, NodeId x, NodeId, NodeId) { return t.mean(x); },
       [&](const std::vector<Tensor2>& in) { return ops::mean_all(in[0]).data[0]; }},
      {"layer_norm_rows",
       [&](Tape& t, NodeId x, NodeId, NodeId) { return t.sum(t.mul(t.layer_norm_rows(x, 1e-5), t.constant(w))); },
       [&](const std::vector<Tensor2>& in) { return weighted_sum(ops::layer_norm_rows(in[0], 1e-5), w); }},
  };

  for (const Case& c : cases) {
    INFO(c.name);
    const Tensor2& xin = c.positive_x ? pos0 : x0;
    Tape tape;
    const NodeId x = tape.param(xin);
    const NodeId y = tape.param(y0);
    const NodeId r = tape.param(r0);
    const NodeId loss = c.build(tape, x, y, r);
    tape.backward(loss);
    CHECK(max_rel_err(tape.grad(x), fd_gradient(c.eval, {xin, y0, r0}, 0)) <= 1e-4);
    CHECK(max_rel_err(tape.grad(y), fd_gradient(c.eval, {xin, y0, r0}, 1)) <= 1e-4);
    CHECK(max_rel_err(tape.grad(r), fd_gradient(c.eval, {xin, y0, r0}, 2)) <= 1e-4);
  }
}

TEST_CASE("backward: x*x at 3 gives gradient 6", "[tape]") {
  Tape tape;
  const NodeId x = tape.param(Tensor2(1, 1, 3.0));
  const NodeId loss = tape.mul(x, x);
  tape.backward(loss);
  CHECK(tape.grad(x).data[0] == Catch::Approx(6.0));
}

TEST_CASE("backward: detached parameter receives zero gradient", "[tape]") {
  Tape tape;
  const NodeId w = tape.param(Tensor2(2, 2, 1.5));
  const NodeId x = tape.param(Tensor2(1, 1, 2.0));
  const NodeId loss = tape.mul(x, x);
  tape.backward(loss);
  for (double v : tape.grad(w).data) CHECK(v == 0.0);
}

TEST_CASE("backward: stop-gradient leaf receives zero gradient", "[tape]") {
  Tape tape;
  const NodeId c = tape.constant(Tensor2(1, 1, 4.0));
  const NodeId x = tape.param(Tensor2(1, 1, 2.0));
  const NodeId loss = tape.mul(x, c);
  tape.backward(loss);
  CHECK(tape.grad(c).data[0] == 0.0);
  CHECK(tape.grad(x).data[0] == 4.0);
}

TEST_CASE("backward rejects non-scalar loss", "[tape]") {
  Tape tape;
  const NodeId x = tape.param(Tensor2(2, 2, 1.0));
  CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
}

TEST_CASE("backward is deterministic across repeated runs", "[tape]") {
  Rng rng(21);
  const Tensor2 a0 = random_tensor(6, 5, rng);
  const Tensor2 b0 = random_tensor(5, 4, rng);
  Tape tape;
  const NodeId a = tape.param(a0);
  const NodeId b = tape.param(b0);
  const NodeId loss = tape.mean(tape.relu(tape.matmul(a, tape.layer_norm_rows(b))));
  tape.backward(loss);
  const Tensor2 g1 = tape.grad(a);
  const Tensor2 g2 = tape.grad(b);
  tape.backward(loss);
  CHECK(tape.grad(a) == g1);
  CHECK(tape.grad(b) == g2);
}

TEST_CASE("gradient accumulates over shared parameters", "[tape]") {
  // x used twice: loss = sum(x) + sum(x) -> gradient 2 everywhere
  Tape tape;
  const NodeId x = tape.param(Tensor2(2, 3, 1.0));
  const NodeId loss = tape.add(tape.sum(x), tape.sum(x));
  tape.backward(loss);
  for (double v : tape.grad(x).data) CHECK(v == 2.0);
}

TEST_CASE("non-finite forward value aborts with numeric_error", "[tape]") {
  Tape tape;
  const NodeId x = tape.constant(Tensor2(1, 1, 1e308));
  CHECK_THROWS_AS(tape.add(x, x), numeric_error);
  CHECK_THROWS_AS(tape.exp(tape.constant(Tensor2(1, 1, 1000.0))), numeric_error);
}
