#include "doctest.h"

#include <cmath>
#include <random>

#include "dcollapse/error.hpp"
#include "dcollapse/probe.hpp"
#include "oracles.hpp"

using namespace dcollapse;

namespace {

// Class-clustered embeddings: class centre plus isotropic noise.
EmbeddingMatrix clustered(std::mt19937_64& gen, const std::vector<std::vector<double>>& centres, std::size_t n,
                          double noise) {
  const std::size_t d = centres[0].size();
  std::normal_distribution<double> nd(0.0, noise);
  std::uniform_int_distribution<std::size_t> pick(0, centres.size() - 1);
  EmbeddingMatrix m(n, d, std::vector<double>(n * d), std::vector<int>(n));
  for (std::size_t i = 0; i < n; ++i) {
    const auto c = pick(gen);
    (*m.labels)[i] = static_cast<int>(c);
    for (std::size_t j = 0; j < d; ++j) m(i, j) = centres[c][j] + nd(gen);
  }
  return m;
}

std::vector<std::vector<double>> random_centres(std::mt19937_64& gen, std::size_t classes, std::size_t d) {
  std::vector<std::vector<double>> c;
  for (std::size_t k = 0; k < classes; ++k) c.push_back(oracle::random_values(gen, d));
  return c;
}

// Random orthogonal matrix by Gram-Schmidt on Gaussian columns.
std::vector<double> random_rotation(std::mt19937_64& gen, std::size_t d) {
  auto q = oracle::random_values(gen, d * d);
  for (std::size_t c = 0; c < d; ++c) {
    for (std::size_t p = 0; p < c; ++p) {
      double dot = 0.0;
      for (std::size_t r = 0; r < d; ++r) dot += q[r * d + c] * q[r * d + p];
      for (std::size_t r = 0; r < d; ++r) q[r * d + c] -= dot * q[r * d + p];
    }
    double s = 0.0;
    for (std::size_t r = 0; r < d; ++r) s += q[r * d + c] * q[r * d + c];
    for (std::size_t r = 0; r < d; ++r) q[r * d + c] /= std::sqrt(s);
  }
  return q;
}

EmbeddingMatrix rotate(const EmbeddingMatrix& m, const std::vector<double>& q) {
  EmbeddingMatrix out = m;
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t c = 0; c < m.d; ++c) {
      double s = 0.0;
      for (std::size_t r = 0; r < m.d; ++r) s += m(i, r) * q[r * m.d + c];
      out(i, c) = s;
    }
  return out;
}

struct Fixture {
  Dataset train_set;
  Dataset eval_set;
  StudentCNN model;
};

Fixture small_fixture() {
  SyntheticConfig sc;
  sc.per_class = 6;
  sc.seed = 1;
  SyntheticConfig se = sc;
  se.per_class = 3;
  se.seed = 2;
  se.split = Split::Eval;
  StudentConfig st;
  st.base_width = 2;
  st.embed_dim = 16;
  st.seed = 3;
  auto model = build_student(st);
  for (auto& p : model.parameters())
    if (p.name.find("bias") != std::string::npos)
      for (double& v : p.value.data()) v = 0.05;
  return {gen_synthetic(sc), gen_synthetic(se), std::move(model)};
}

}  // namespace

TEST_SUITE("probe") {

TEST_CASE("kNN matches the exhaustive oracle") {
  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 5; ++trial) {
    const auto centres = random_centres(gen, 5, 12);
    auto ref = clustered(gen, centres, 200, 1.2);
    auto qry = clustered(gen, centres, 50, 1.2);
    for (int k : {1, 2, 3, 5, 8}) {
      const double expected = oracle::knn_accuracy(ref.values, *ref.labels, qry.values, *qry.labels, 12, k);
      CHECK(knn_accuracy(ref, qry, k) == expected);
    }
  }
}

TEST_CASE("kNN is invariant to a shared rotation and to row scaling") {
  std::mt19937_64 gen(2);
  const auto centres = random_centres(gen, 4, 8);
  auto ref = clustered(gen, centres, 120, 1.0);
  auto qry = clustered(gen, centres, 40, 1.0);
  const auto base = knn_predict(ref, qry, 5);
  const auto q = random_rotation(gen, 8);
  CHECK(knn_predict(rotate(ref, q), rotate(qry, q), 5) == base);
  auto scaled = qry;
  for (std::size_t i = 0; i < scaled.n; ++i)
    for (double& v : scaled.row(i)) v *= 0.5 + static_cast<double>(i);
  CHECK(knn_predict(ref, scaled, 5) == base);
}

TEST_CASE("kNN fixtures") {
  auto ref = EmbeddingMatrix::from_rows({{1, 0}, {0, 1}, {-1, 0}, {0.9, 0.1}});
  ref.labels = std::vector<int>{0, 1, 2, 3};
  auto qry = EmbeddingMatrix::from_rows({{2, 0}, {-3, 0}});
  qry.labels = std::vector<int>{0, 2};
  // exact duplicate is nearest; antipodal row is farthest
  CHECK(knn_predict(ref, qry, 1) == std::vector<int>{0, 2});
  CHECK(knn_accuracy(ref, qry, 1) == 1.0);
  // two neighbours, one vote each: the nearer class wins
  CHECK(knn_predict(ref, qry, 2)[0] == 0);
  // equal distances resolve by reference index
  auto twins = EmbeddingMatrix::from_rows({{0, 1}, {0, 1}, {1, 0}});
  twins.labels = std::vector<int>{4, 3, 3};
  CHECK(knn_predict(twins, EmbeddingMatrix::from_rows({{0, 1}}), 1) == std::vector<int>{4});
  CHECK(knn_predict(twins, EmbeddingMatrix::from_rows({{0, 1}}), 2) == std::vector<int>{4});
  CHECK(knn_predict(twins, EmbeddingMatrix::from_rows({{0, 1}}), 3) == std::vector<int>{3});
}

TEST_CASE("kNN preconditions") {
  auto ref = EmbeddingMatrix::from_rows({{1, 0}, {0, 1}});
  auto qry = EmbeddingMatrix::from_rows({{1, 0}});
  CHECK_THROWS_AS(knn_predict(ref, qry, 1), InvalidInput);
  ref.labels = std::vector<int>{0, 1};
  CHECK_THROWS_AS(knn_predict(ref, qry, 0), InvalidInput);
  CHECK_THROWS_AS(knn_predict(ref, qry, 3), InvalidInput);
  CHECK_THROWS_AS(knn_predict(ref, EmbeddingMatrix::from_rows({{1, 0, 0}}), 1), InvalidInput);
  CHECK_THROWS_AS(knn_predict(ref, EmbeddingMatrix::from_rows({{0, 0}}), 1), DegenerateRow);
  CHECK_THROWS_AS(knn_accuracy(ref, qry, 1), InvalidInput);
}

TEST_CASE("zero sigma row equals the clean probe bitwise") {
  auto f = small_fixture();
  const std::vector<double> sigmas{0.0, 0.1, 0.3};
  for (auto mode : {RankInput::Normalized, RankInput::Raw}) {
    auto table = noise_sweep(f.model, f.train_set, f.eval_set, sigmas, 3, 11, "m", mode);
    auto clean = clean_probe(f.model, f.train_set, f.eval_set, 3, mode);
    REQUIRE(table.rows.size() == 3);
    CHECK(table.rows[0].sigma == 0.0);
    CHECK(table.rows[0].accuracy == clean.accuracy);
    CHECK(table.rows[0].effective_rank == clean.effective_rank);
    CHECK(table.model_id == "m");
    CHECK(table.k == 3);
    CHECK(table.rank_input == mode);
  }
}

TEST_CASE("noise sweep rows follow their own noisy embeddings") {
  auto f = small_fixture();
  const std::vector<double> sigmas{0.0, 0.2};
  auto table = noise_sweep(f.model, f.train_set, f.eval_set, sigmas, 3, 5);
  const auto ref = evaluate_embeddings(f.model, f.train_set);
  const auto q = evaluate_embeddings(f.model, add_gaussian_noise(f.eval_set, 0.2, 5));
  CHECK(table.rows[1].accuracy == knn_accuracy(ref, q, 3));
  CHECK(table.rows[1].effective_rank == centered_effective_rank(normalize_rows(q)));
  CHECK(noise_sweep(f.model, f.train_set, f.eval_set, sigmas, 3, 5) == table);
}

TEST_CASE("noise sweep validates sigmas") {
  auto f = small_fixture();
  CHECK_THROWS_AS(noise_sweep(f.model, f.train_set, f.eval_set, std::vector<double>{-0.1}, 3, 1), InvalidInput);
  CHECK_THROWS_AS(noise_sweep(f.model, f.train_set, f.eval_set, std::vector<double>{0.1, 0.1}, 3, 1), InvalidInput);
  CHECK_THROWS_AS(noise_sweep(f.model, f.train_set, f.eval_set, std::vector<double>{0.2, 0.1}, 3, 1), InvalidInput);
}

TEST_CASE("robustness table CSV") {
  RobustnessTable t;
  t.rows = {{0.0, 1.0, 3.5}, {0.25, 0.75, 2.0}};
  CHECK(t.to_csv() == "sigma,accuracy,effective_rank\n0,1,3.5\n0.25,0.75,2\n");
}

TEST_CASE("rank trajectory keeps evaluated epochs in order") {
  MetricsLog log;
  log.epochs = {{1, 0.5, 0.5, 0.0, std::nullopt}, {2, 0.4, 0.4, 0.0, 3.0}, {3, 0.3, 0.3, 0.0, std::nullopt},
                {4, 0.2, 0.2, 0.0, 2.5}};
  CHECK(rank_trajectory(log) == std::vector<std::pair<int, double>>{{2, 3.0}, {4, 2.5}});
  CHECK(log.final_effective_rank() == 2.5);
  CHECK(rank_trajectory(MetricsLog{}).empty());
}

}
