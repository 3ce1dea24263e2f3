#include "dcollapse/probe.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <map>
#include <sstream>

#include "dcollapse/error.hpp"

namespace dcollapse {

namespace {

std::vector<double> unit_rows(const EmbeddingMatrix& m, const char* which) {
  std::vector<double> out = m.values;
  for (std::size_t i = 0; i < m.n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < m.d; ++j) s += out[i * m.d + j] * out[i * m.d + j];
    const double r = std::sqrt(s);
    if (!(r > 0.0)) throw DegenerateRow(std::string("knn: zero-norm ") + which + " row", i);
    for (std::size_t j = 0; j < m.d; ++j) out[i * m.d + j] /= r;
  }
  return out;
}

}  // namespace

std::vector<int> knn_predict(const EmbeddingMatrix& reference, const EmbeddingMatrix& query, int k) {
  reference.validate();
  query.validate();
  if (!reference.labels) throw InvalidInput("knn: reference embeddings need labels");
  if (reference.d != query.d)
    throw InvalidInput("knn: dimension mismatch (reference " + std::to_string(reference.d) + ", query " +
                       std::to_string(query.d) + ")");
  if (k < 1) throw InvalidInput("knn: k must be >= 1");
  if (static_cast<std::size_t>(k) > reference.n)
    throw InvalidInput("knn: k = " + std::to_string(k) + " exceeds reference size " + std::to_string(reference.n));

  const auto ref = unit_rows(reference, "reference");
  const auto qry = unit_rows(query, "query");
  const std::size_t d = reference.d;
  const auto kk = static_cast<std::size_t>(k);
  std::vector<int> out(query.n);
  std::vector<std::pair<double, std::size_t>> dist(reference.n);
  for (std::size_t q = 0; q < query.n; ++q) {
    for (std::size_t r = 0; r < reference.n; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < d; ++j) dot += qry[q * d + j] * ref[r * d + j];
      dist[r] = {1.0 - dot, r};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(kk), dist.end());
    std::map<int, int> votes;
    for (std::size_t i = 0; i < kk; ++i) ++votes[(*reference.labels)[dist[i].second]];
    int best = 0;
    for (const auto& [label, count] : votes) best = std::max(best, count);
    for (std::size_t i = 0; i < kk; ++i) {
      const int label = (*reference.labels)[dist[i].second];
      if (votes[label] == best) {
        out[q] = label;
        break;
      }
    }
  }
  return out;
}

double knn_accuracy(const EmbeddingMatrix& reference, const EmbeddingMatrix& query, int k) {
  if (!query.labels) throw InvalidInput("knn: query embeddings need labels");
  const auto pred = knn_predict(reference, query, k);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == (*query.labels)[i] ? 1 : 0;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

std::string RobustnessTable::to_csv() const {
  std::ostringstream os;
  os << "sigma,accuracy,effective_rank\n" << std::setprecision(17);
  for (const auto& r : rows) os << r.sigma << ',' << r.accuracy << ',' << r.effective_rank << '\n';
  return os.str();
}

CleanProbe clean_probe(const StudentCNN& model, const Dataset& train_set, const Dataset& eval_set, int k,
                       RankInput rank_input) {
  const auto ref = evaluate_embeddings(model, train_set);
  const auto q = evaluate_embeddings(model, eval_set);
  return {knn_accuracy(ref, q, k), embedding_rank(q, rank_input)};
}

RobustnessTable noise_sweep(const StudentCNN& model, const Dataset& train_set, const Dataset& eval_set,
                            std::span<const double> sigmas, int k, std::uint64_t seed, std::string model_id,
                            RankInput rank_input) {
  for (std::size_t i = 0; i < sigmas.size(); ++i) {
    if (!(sigmas[i] >= 0.0)) throw InvalidInput("noise_sweep: sigma must be >= 0");
    if (i > 0 && !(sigmas[i] > sigmas[i - 1])) throw InvalidInput("noise_sweep: sigmas must be strictly increasing");
  }
  RobustnessTable table;
  table.model_id = std::move(model_id);
  table.k = k;
  table.rank_input = rank_input;
  const auto ref = evaluate_embeddings(model, train_set);
  for (double sigma : sigmas) {
    const auto q = evaluate_embeddings(model, add_gaussian_noise(eval_set, sigma, seed));
    table.rows.push_back({sigma, knn_accuracy(ref, q, k), embedding_rank(q, rank_input)});
  }
  return table;
}

std::vector<std::pair<int, double>> rank_trajectory(const MetricsLog& log) {
  std::vector<std::pair<int, double>> out;
  for (const auto& e : log.epochs)
    if (e.effective_rank) out.emplace_back(e.epoch, *e.effective_rank);
  return out;
}

}  // namespace dcollapse
