#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "dcollapse/error.hpp"
#include "dcollapse/losses.hpp"
#include "oracles.hpp"

using namespace dcollapse;

namespace {

EmbeddingMatrix random_matrix(std::mt19937_64& gen, std::size_t n, std::size_t d) {
  return EmbeddingMatrix(n, d, oracle::random_values(gen, n * d));
}

// Plain-loop evaluation of both objectives, written without the tape.
std::vector<std::vector<double>> unit_rows(const EmbeddingMatrix& m) {
  std::vector<std::vector<double>> out(m.n, std::vector<double>(m.d));
  for (std::size_t i = 0; i < m.n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.d; ++j) s += m(i, j) * m(i, j);
    for (std::size_t j = 0; j < m.d; ++j) out[i][j] = m(i, j) / std::sqrt(s);
  }
  return out;
}

double oracle_cosine(const EmbeddingMatrix& s, const EmbeddingMatrix& t) {
  auto a = unit_rows(s), b = unit_rows(t);
  double acc = 0.0;
  for (std::size_t i = 0; i < s.n; ++i) acc += 1.0 - std::inner_product(a[i].begin(), a[i].end(), b[i].begin(), 0.0);
  return acc / static_cast<double>(s.n);
}

double oracle_infonce(const EmbeddingMatrix& v1, const EmbeddingMatrix& v2, double tau) {
  auto a = unit_rows(v1), b = unit_rows(v2);
  const std::size_t n = v1.n;
  auto direction = [&](const auto& x, const auto& y) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double denom = 0.0;
      for (std::size_t k = 0; k < n; ++k) denom += std::exp(std::inner_product(x[i].begin(), x[i].end(), y[k].begin(), 0.0) / tau);
      const double pos = std::exp(std::inner_product(x[i].begin(), x[i].end(), y[i].begin(), 0.0) / tau);
      acc += -std::log(pos / denom);
    }
    return acc / static_cast<double>(n);
  };
  return 0.5 * (direction(a, b) + direction(b, a));
}

}  // namespace

TEST_SUITE("losses") {

TEST_CASE("cosine distillation fixtures") {
  auto a = EmbeddingMatrix::from_rows({{1, 2, 0}, {-3, 1, 1}});
  CHECK(std::abs(cosine_distill(a, a)) <= 1e-12);

  auto e1 = EmbeddingMatrix::from_rows({{1, 0}, {0, 2}});
  auto e2 = EmbeddingMatrix::from_rows({{0, 3}, {-1, 0}});
  CHECK(std::abs(cosine_distill(e1, e2) - 1.0) <= 1e-12);

  auto neg = a;
  for (auto& v : neg.values) v = -2.0 * v;
  CHECK(std::abs(cosine_distill(a, neg) - 2.0) <= 1e-12);

  auto s = EmbeddingMatrix::from_rows({{1, 1}});
  auto t = EmbeddingMatrix::from_rows({{1, 0}});
  CHECK(cosine_distill(s, t) == doctest::Approx(1.0 - 1.0 / std::sqrt(2.0)).epsilon(1e-14));
  CHECK(cosine_distill(s, t) == doctest::Approx(0.29289).epsilon(1e-5));
}

TEST_CASE("cosine distillation rejects zero rows and mismatched shapes") {
  auto s = EmbeddingMatrix::from_rows({{1, 1}, {0, 0}});
  auto t = EmbeddingMatrix::from_rows({{1, 0}, {1, 0}});
  try {
    cosine_distill(s, t);
    FAIL("expected DegenerateRow");
  } catch (const DegenerateRow& e) {
    CHECK(e.row() == 1);
  }
  CHECK_THROWS_AS(cosine_distill(t, EmbeddingMatrix::from_rows({{1, 0, 0}, {0, 1, 0}})), ShapeError);
}

TEST_CASE("infonce on identical embeddings is ln B") {
  for (std::size_t b : {2u, 3u, 8u, 64u}) {
    EmbeddingMatrix m(b, 5, std::vector<double>(b * 5));
    for (std::size_t i = 0; i < b; ++i)
      for (std::size_t j = 0; j < 5; ++j) m(i, j) = 0.3 + 0.1 * static_cast<double>(j);
    CHECK(std::abs(infonce(m, m, 0.2) - std::log(static_cast<double>(b))) <= 1e-9);
  }
}

TEST_CASE("infonce two-sample fixture") {
  auto v1 = EmbeddingMatrix::from_rows({{1, 0}, {0, 1}});
  auto v2 = EmbeddingMatrix::from_rows({{2, 0}, {0, 5}});
  CHECK(std::abs(infonce(v1, v2, 1.0) - std::log(1.0 + std::exp(-1.0))) <= 1e-9);
  CHECK(infonce(v1, v2, 1.0) == doctest::Approx(0.31326).epsilon(1e-5));
}

TEST_CASE("infonce approaches zero at small temperature") {
  std::mt19937_64 gen(2);
  auto v1 = random_matrix(gen, 6, 16);
  auto v2 = v1;
  for (auto& v : v2.values) v *= 1.7;
  CHECK(infonce(v1, v2, 0.01) <= 1e-3);
}

TEST_CASE("infonce preconditions") {
  auto one = EmbeddingMatrix::from_rows({{1, 0}});
  CHECK_THROWS_AS(infonce(one, one, 0.2), InvalidInput);
  auto two = EmbeddingMatrix::from_rows({{1, 0}, {0, 1}});
  CHECK_THROWS_AS(infonce(two, two, 0.0), InvalidInput);
  auto zero = EmbeddingMatrix::from_rows({{1, 0}, {0, 0}});
  CHECK_THROWS_AS(infonce(two, zero, 0.2), DegenerateRow);
}

TEST_CASE("losses agree with the plain-loop evaluation") {
  std::mt19937_64 gen(17);
  for (int t = 0; t < 10; ++t) {
    auto s = random_matrix(gen, 12, 7), te = random_matrix(gen, 12, 7);
    auto v1 = random_matrix(gen, 12, 7), v2 = random_matrix(gen, 12, 7);
    CHECK(std::abs(cosine_distill(s, te) - oracle_cosine(s, te)) <= 1e-12);
    CHECK(std::abs(infonce(v1, v2, 0.2) - oracle_infonce(v1, v2, 0.2)) <= 1e-10);
  }
}

TEST_CASE("combined loss") {
  std::mt19937_64 gen(23);
  auto s = random_matrix(gen, 10, 6), te = random_matrix(gen, 10, 6);
  auto v1 = random_matrix(gen, 10, 6), v2 = random_matrix(gen, 10, 6);
  auto run = [&](LossConfig cfg) {
    ad::Tape tape;
    auto terms = combined_loss(tape.constant(ad::Tensor({10, 6}, s.values)), tape.constant(ad::Tensor({10, 6}, te.values)),
                               tape.constant(ad::Tensor({10, 6}, v1.values)),
                               tape.constant(ad::Tensor({10, 6}, v2.values)), cfg);
    return std::tuple{terms.total.value().item(), terms.cosine, terms.infonce};
  };
  const double cos_only = cosine_distill(s, te);
  const double nce = infonce(v1, v2, 0.2);

  auto [t0, c0, n0] = run({LossMode::Cosine, 0.5, 0.2});
  CHECK(t0 == cos_only);
  CHECK(c0 == cos_only);
  CHECK(n0 == 0.0);

  auto [tz, cz, nz] = run({LossMode::CosineInfoNCE, 0.0, 0.2});
  CHECK(tz == cos_only);
  CHECK(nz == nce);

  auto [t1, c1, n1] = run({LossMode::CosineInfoNCE, 1.0, 0.2});
  CHECK(std::abs(t1 - (c1 + n1)) <= 1e-12);

  auto [th, ch, nh] = run({LossMode::CosineInfoNCE, 0.5, 0.2});
  CHECK(std::abs(th - (oracle_cosine(s, te) + 0.5 * oracle_infonce(v1, v2, 0.2))) <= 1e-10);
  CHECK(ch == cos_only);
  CHECK(nh == nce);
}

TEST_CASE("cosine distillation is scale invariant") {
  std::mt19937_64 gen(31);
  auto s = random_matrix(gen, 9, 5), t = random_matrix(gen, 9, 5);
  const double base = cosine_distill(s, t);
  for (auto [a, b] : {std::pair{0.01, 3.0}, {7.0, 0.5}, {1e3, 1e-3}}) {
    auto ss = s, tt = t;
    for (auto& v : ss.values) v *= a;
    for (auto& v : tt.values) v *= b;
    CHECK(std::abs(cosine_distill(ss, tt) - base) <= 1e-10);
  }
}

TEST_CASE("infonce is invariant to common rescaling and to a shared row permutation") {
  std::mt19937_64 gen(37);
  auto v1 = random_matrix(gen, 11, 8), v2 = random_matrix(gen, 11, 8);
  const double base = infonce(v1, v2, 0.2);
  auto s1 = v1, s2 = v2;
  for (auto& v : s1.values) v *= 4.5;
  for (auto& v : s2.values) v *= 4.5;
  CHECK(std::abs(infonce(s1, s2, 0.2) - base) <= 1e-10);

  std::vector<std::size_t> perm(11);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), gen);
  auto p1 = v1, p2 = v2;
  for (std::size_t i = 0; i < 11; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      p1(i, j) = v1(perm[i], j);
      p2(i, j) = v2(perm[i], j);
    }
  CHECK(std::abs(infonce(p1, p2, 0.2) - base) <= 1e-10);
}

TEST_CASE("loss bounds") {
  std::mt19937_64 gen(41);
  for (int t = 0; t < 50; ++t) {
    auto a = random_matrix(gen, 4, 3), b = random_matrix(gen, 4, 3);
    const double c = cosine_distill(a, b);
    CHECK((c >= 0.0 && c <= 2.0));
    CHECK(infonce(a, b, 0.1 + 0.05 * t) >= 0.0);
  }
}

TEST_CASE("loss config validation and names") {
  CHECK_THROWS_AS((LossConfig{LossMode::Cosine, 0.5, 0.0}.validate()), InvalidInput);
  CHECK_THROWS_AS((LossConfig{LossMode::Cosine, -1.0, 0.2}.validate()), InvalidInput);
  CHECK(parse_loss_mode("cosine+infonce") == LossMode::CosineInfoNCE);
  CHECK(to_string(LossMode::Cosine) == "cosine");
  CHECK_THROWS_AS(parse_loss_mode("nce"), InvalidInput);
  nlohmann::json j = LossConfig{LossMode::CosineInfoNCE, 0.25, 0.1};
  CHECK(j.get<LossConfig>() == LossConfig{LossMode::CosineInfoNCE, 0.25, 0.1});
}

}
