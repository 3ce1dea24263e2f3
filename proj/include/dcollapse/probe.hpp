#pragma once

// Downstream evaluation: cosine kNN accuracy, input-noise robustness sweeps,
// and effective-rank trajectories.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dcollapse/data.hpp"
#include "dcollapse/models.hpp"
#include "dcollapse/spectral.hpp"
#include "dcollapse/trainer.hpp"

namespace dcollapse {

inline constexpr int kDefaultNeighbors = 5;

/// Majority vote over the k nearest reference rows by cosine distance.
/// Neighbors are ordered by (distance, reference index); a vote tie goes to
/// the tied class whose member appears first in that order.
std::vector<int> knn_predict(const EmbeddingMatrix& reference, const EmbeddingMatrix& query, int k);

/// Fraction of query rows whose predicted label equals their own label.
double knn_accuracy(const EmbeddingMatrix& reference, const EmbeddingMatrix& query, int k = kDefaultNeighbors);

struct RobustnessRow {
  double sigma = 0.0;
  double accuracy = 0.0;
  double effective_rank = 0.0;

  friend bool operator==(const RobustnessRow&, const RobustnessRow&) = default;
};

struct RobustnessTable {
  std::string model_id;
  int k = kDefaultNeighbors;
  std::string metric = "cosine";
  RankInput rank_input = RankInput::Normalized;
  std::vector<RobustnessRow> rows;

  /// sigma,accuracy,effective_rank
  std::string to_csv() const;

  friend bool operator==(const RobustnessTable&, const RobustnessTable&) = default;
};

struct CleanProbe {
  double accuracy = 0.0;
  double effective_rank = 0.0;
};

/// kNN accuracy of clean eval embeddings against clean train embeddings.
CleanProbe clean_probe(const StudentCNN& model, const Dataset& train_set, const Dataset& eval_set,
                       int k = kDefaultNeighbors, RankInput rank_input = RankInput::Normalized);

/// For each sigma (non-negative, strictly increasing): corrupt the eval split,
/// embed, and score against clean train embeddings. Every sigma reuses the
/// same unit noise field scaled by sigma.
RobustnessTable noise_sweep(const StudentCNN& model, const Dataset& train_set, const Dataset& eval_set,
                            std::span<const double> sigmas, int k, std::uint64_t seed, std::string model_id = {},
                            RankInput rank_input = RankInput::Normalized);

/// (epoch, effective_rank) for every epoch that carries a rank.
std::vector<std::pair<int, double>> rank_trajectory(const MetricsLog& log);

}  // namespace dcollapse
