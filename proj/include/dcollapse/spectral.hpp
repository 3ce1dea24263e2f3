#pragma once

// Strictly centered SVD spectral analysis of embedding matrices.
//
// The effective rank of a matrix Z is computed from the singular values of
// Z - mean(Z): with p_i = s_i^2 / sum_j s_j^2, ER = exp(-sum_i p_i ln p_i).
// Centering matters: without it the leading singular direction measures the
// offset of the embedding cloud from the origin, not its spread.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace dcollapse {

/// n x d row-major matrix of embeddings, one row per sample.
struct EmbeddingMatrix {
  std::size_t n = 0;
  std::size_t d = 0;
  std::vector<double> values;
  std::optional<std::vector<int>> labels;

  EmbeddingMatrix() = default;
  EmbeddingMatrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                  std::optional<std::vector<int>> row_labels = std::nullopt);

  static EmbeddingMatrix from_rows(const std::vector<std::vector<double>>& rows);

  std::span<const double> row(std::size_t i) const { return {values.data() + i * d, d}; }
  std::span<double> row(std::size_t i) { return {values.data() + i * d, d}; }
  double operator()(std::size_t i, std::size_t j) const { return values[i * d + j]; }
  double& operator()(std::size_t i, std::size_t j) { return values[i * d + j]; }

  /// Throws InvalidInput on shape/label mismatch or non-finite values.
  void validate() const;

  friend bool operator==(const EmbeddingMatrix&, const EmbeddingMatrix&) = default;
};

struct SpectralReport {
  double effective_rank = 0.0;
  std::vector<double> singular_values;
  std::vector<double> variance_ratios;
  double mean_norm = 0.0;
  double mean_pairwise_cosine = 0.0;
  std::size_t n = 0;
  std::size_t d = 0;

  bool degenerate() const { return effective_rank == 0.0; }
};

void to_json(nlohmann::json& j, const SpectralReport& r);
void from_json(const nlohmann::json& j, SpectralReport& r);

/// Two-column CSV (index, value), 1-based index, descending values.
std::string spectrum_csv(std::span<const double> singular_values);

/// Subtracts the per-column mean from every row.
EmbeddingMatrix center(const EmbeddingMatrix& m);

/// Per-column mean.
std::vector<double> column_means(const EmbeddingMatrix& m);

/// All min(n, d) singular values, descending. Does not center.
/// One-sided cyclic Jacobi on the orientation with min(n, d) columns.
std::vector<double> singular_values(const EmbeddingMatrix& m);

/// Singular values at or below this fraction of the largest are treated as zero.
inline constexpr double kRankTolerance = 1e-12;

/// exp of the Shannon entropy of the normalized squared singular values.
/// Returns 0 when every value is zero.
double effective_rank(std::span<const double> singular_values);

/// p_i = s_i^2 / sum s_j^2 over all values (zeroed below tolerance); empty if degenerate.
std::vector<double> variance_ratios(std::span<const double> singular_values);

inline constexpr std::size_t kDefaultMaxPairs = 10'000;

/// Average cosine similarity over min(max_pairs, n(n-1)/2) distinct row pairs.
/// Enumerates every pair when that fits in max_pairs, otherwise samples
/// pairs without replacement from `seed`.
double mean_pairwise_cosine(const EmbeddingMatrix& m, std::size_t max_pairs = kDefaultMaxPairs,
                            std::uint64_t seed = 0);

struct AnalyzeOptions {
  std::size_t max_pairs = kDefaultMaxPairs;
  std::uint64_t seed = 0;
};

/// Center, decompose, and summarize. Requires n >= 2. A matrix whose rows are
/// all identical reports effective_rank 0 and empty variance_ratios.
SpectralReport analyze(const EmbeddingMatrix& m, const AnalyzeOptions& opts = {});

/// Effective rank of the centered matrix only (no pairwise cosine pass).
double centered_effective_rank(const EmbeddingMatrix& m);

/// Rows scaled to unit length. Zero rows stay zero.
EmbeddingMatrix normalize_rows(const EmbeddingMatrix& m);

/// Which view of a model's output the rank is measured on.
enum class RankInput { Raw, Normalized };

std::string to_string(RankInput r);
RankInput parse_rank_input(const std::string& name);

/// centered_effective_rank of m, or of normalize_rows(m).
double embedding_rank(const EmbeddingMatrix& m, RankInput input);

}  // namespace dcollapse
