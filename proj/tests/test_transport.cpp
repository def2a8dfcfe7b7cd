#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "tasft/rng.hpp"
#include "tasft/transport.hpp"

#include "support/dense_lp.hpp"

using namespace tasft;

namespace {

EmbeddingTable two_token_antipodal() {
  Tensor2 raw = Tensor2::from_rows({{2.0, 0.0, 0.0}, {-2.0, 0.0, 0.0}});
  return EmbeddingTable::from_raw(std::move(raw));
}

}  // namespace

TEST_CASE("cosine distance: identical, orthogonal, antipodal", "[transport]") {
  const std::vector<double> u{1.0, 0.0, 0.0};
  const std::vector<double> v{0.0, 1.0, 0.0};
  const std::vector<double> w{-1.0, 0.0, 0.0};
  CHECK(cosine_distance(u, u) == 0.0);
  CHECK(cosine_distance(u, v) == 1.0);
  CHECK(cosine_distance(u, w) == 2.0);
}

TEST_CASE("cosine distance rejects non-unit input", "[transport]") {
  const std::vector<double> u{1.0, 0.0};
  const std::vector<double> bad{0.5, 0.5};
  CHECK_THROWS_AS(cosine_distance(u, bad), std::invalid_argument);
}

TEST_CASE("cosine distance equals half squared euclidean on unit vectors", "[transport]") {
  Rng rng(3);
  for (int rep = 0; rep < 10000; ++rep) {
    const std::size_t d = 2 + rep % 7;
    const EmbeddingTable emb = random_embeddings(2, d, rng);
    const double* u = emb.unit.row_ptr(0);
    const double* v = emb.unit.row_ptr(1);
    double sq = 0.0;
    for (std::size_t k = 0; k < d; ++k) sq += (u[k] - v[k]) * (u[k] - v[k]);
    const double dc = cosine_distance({u, d}, {v, d});
    REQUIRE(std::fabs(dc - sq / 2.0) <= 1e-12);
    REQUIRE(dc >= 0.0);
    REQUIRE(dc <= 2.0);
  }
}

TEST_CASE("embedding table normalizes rows and rejects zero rows", "[transport]") {
  Rng rng(4);
  const EmbeddingTable emb = random_embeddings(16, 8, rng);
  for (std::size_t i = 0; i < emb.vocab_size; ++i) {
    double norm = 0.0;
    for (std::size_t j = 0; j < emb.dim; ++j) norm += emb.unit.at(i, j) * emb.unit.at(i, j);
    CHECK(std::fabs(std::sqrt(norm) - 1.0) <= 1e-9);
  }
  Tensor2 raw(2, 3, 0.0);
  raw.at(0, 0) = 1.0;  // second row stays zero
  CHECK_THROWS_AS(EmbeddingTable::from_raw(std::move(raw)), std::invalid_argument);
}

TEST_CASE("cost matrix: antipodal two-token table", "[transport]") {
  const CostMatrix c = cost_matrix(two_token_antipodal());
  CHECK(c.m == Tensor2::from_rows({{0.0, 2.0}, {2.0, 0.0}}));
}

TEST_CASE("cost matrix equals its transpose exactly and matches the norm formula", "[transport]") {
  Rng rng(5);
  const EmbeddingTable emb = random_embeddings(16, 6, rng);
  const CostMatrix c = cost_matrix(emb);
  CHECK(c.m == ops::transpose(c.m));
  for (std::size_t i = 0; i < 16; ++i) {
    CHECK(c.m.at(i, i) == 0.0);
    for (std::size_t j = 0; j < 16; ++j) {
      double sq = 0.0;
      for (std::size_t k = 0; k < emb.dim; ++k) {
        const double d = emb.unit.at(i, k) - emb.unit.at(j, k);
        sq += d * d;
      }
      REQUIRE(c.m.at(i, j) >= 0.0);
      REQUIRE(c.m.at(i, j) <= 2.0);
      REQUIRE(std::fabs(c.m.at(i, j) - sq / 2.0) <= 1e-12);
    }
  }
}

TEST_CASE("exact_emd: p = q transports along the diagonal", "[transport]") {
  Rng rng(6);
  const EmbeddingTable emb = random_embeddings(8, 4, rng);
  const CostMatrix c = cost_matrix(emb);
  const TokenDistribution p = random_distribution(8, rng);
  const EmdResult res = exact_emd(p, p, c);
  CHECK(res.value <= 1e-9);
  for (std::size_t i = 0; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      const double want = i == j ? p.probs[i] : 0.0;
      REQUIRE(std::fabs(res.plan.plan.at(i, j) - want) <= 1e-8);
    }
}

TEST_CASE("exact_emd: point masses give the single-cell coupling", "[transport]") {
  Rng rng(7);
  const EmbeddingTable emb = random_embeddings(6, 5, rng);
  const CostMatrix c = cost_matrix(emb);
  const TokenDistribution p = TokenDistribution::delta(6, 2);
  const TokenDistribution q = TokenDistribution::delta(6, 4);
  const EmdResult res = exact_emd(p, q, c);
  CHECK(res.value == Catch::Approx(c.m.at(2, 4)).margin(1e-12));
  CHECK(res.plan.plan.at(2, 4) == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("exact_emd agrees with the dense-LP oracle", "[transport][oracle]") {
  Rng rng(8);
  int checked = 0;
  for (int rep = 0; rep < 220; ++rep) {
    const std::size_t v = 2 + rng.uniform_int(15);  // |V| in [2, 16]
    const EmbeddingTable emb = random_embeddings(v, 1 + rng.uniform_int(8), rng);
    const CostMatrix c = cost_matrix(emb);
    const TokenDistribution p = random_distribution(v, rng);
    const TokenDistribution q = random_distribution(v, rng);
    const EmdResult net = exact_emd(p, q, c);
    const auto lp = testsupport::emd_dense_lp(p, q, c);
    REQUIRE(std::fabs(net.value - lp.value) <= 1e-8);
    REQUIRE(net.plan.marginal_error(p, q) <= 1e-8);
    ++checked;
  }
  CHECK(checked == 220);
}

TEST_CASE("exact_emd metric-like properties", "[transport]") {
  Rng rng(9);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t v = 4 + rng.uniform_int(12);
    const EmbeddingTable emb = random_embeddings(v, 4, rng);
    const CostMatrix c = cost_matrix(emb);
    const TokenDistribution p = random_distribution(v, rng);
    const TokenDistribution q = random_distribution(v, rng);
    const double pq = exact_emd(p, q, c).value;
    const double qp = exact_emd(q, p, c).value;
    REQUIRE(pq >= 0.0);
    REQUIRE(pq <= 2.0);
    REQUIRE(std::fabs(pq - qp) <= 1e-9);
    REQUIRE(exact_emd(p, p, c).value <= 1e-9);
  }
}

TEST_CASE("mean embedding: one-hot, cancellation, naive oracle", "[transport]") {
  const EmbeddingTable anti = two_token_antipodal();
  const Tensor2 onehot = mean_embedding(TokenDistribution::delta(2, 0), anti);
  for (std::size_t k = 0; k < anti.dim; ++k)
    CHECK(onehot.data[k] == anti.unit.at(0, k));

  TokenDistribution half;
  half.probs = {0.5, 0.5};
  const Tensor2 zero = mean_embedding(half, anti);
  for (double vv : zero.data) CHECK(std::fabs(vv) <= 1e-15);

  Rng rng(10);
  const EmbeddingTable emb = random_embeddings(12, 7, rng);
  const TokenDistribution d = random_distribution(12, rng);
  const Tensor2 got = mean_embedding(d, emb);
  double norm = 0.0;
  for (std::size_t k = 0; k < emb.dim; ++k) {
    double s = 0.0;
    for (std::size_t w = 0; w < emb.vocab_size; ++w) s += d.probs[w] * emb.unit.at(w, k);
    REQUIRE(std::fabs(got.data[k] - s) <= 1e-12);
    norm += got.data[k] * got.data[k];
  }
  CHECK(std::sqrt(norm) <= 1.0 + 1e-12);
}

TEST_CASE("lower bound: identical distributions and the two-token closed form", "[transport]") {
  Rng rng(11);
  const EmbeddingTable emb = random_embeddings(8, 4, rng);
  const TokenDistribution p = random_distribution(8, rng);
  CHECK(emd_lower_bound(p, p, emb) == 0.0);

  // antipodal pair: mean difference 2e, bound 4 / (2 * 4) = 0.5, exact EMD 2
  const EmbeddingTable anti = two_token_antipodal();
  const TokenDistribution d1 = TokenDistribution::delta(2, 0);
  const TokenDistribution d2 = TokenDistribution::delta(2, 1);
  const double bound = emd_lower_bound(d1, d2, anti);
  CHECK(bound == Catch::Approx(0.5).margin(1e-12));
  const double exact = exact_emd(d1, d2, cost_matrix(anti)).value;
  CHECK(exact == Catch::Approx(2.0).margin(1e-12));
  CHECK(bound <= exact);
}

TEST_CASE("lower bound never exceeds exact EMD", "[transport][oracle]") {
  Rng rng(12);
  for (int rep = 0; rep < 300; ++rep) {
    const std::size_t v = 2 + rng.uniform_int(15);
    const EmbeddingTable emb = random_embeddings(v, 1 + rng.uniform_int(10), rng);
    const CostMatrix c = cost_matrix(emb);
    const TokenDistribution p = random_distribution(v, rng);
    const TokenDistribution q = random_distribution(v, rng);
    const double bound = emd_lower_bound(p, q, emb);
    const double exact = exact_emd(p, q, c).value;
    REQUIRE(bound >= 0.0);
    REQUIRE(bound <= exact + 1e-9);
  }
}

TEST_CASE("token distribution validation", "[transport]") {
  TokenDistribution bad;
  bad.probs = {0.5, 0.6};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad.probs = {-0.1, 1.1};
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK_NOTHROW(TokenDistribution::uniform(5).validate());
}
