#include "dcollapse/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "dcollapse/error.hpp"
#include "dcollapse/rng.hpp"

namespace dcollapse {

EmbeddingMatrix::EmbeddingMatrix(std::size_t rows, std::size_t cols, std::vector<double> data,
                                 std::optional<std::vector<int>> row_labels)
    : n(rows), d(cols), values(std::move(data)), labels(std::move(row_labels)) {
  if (values.size() != n * d)
    throw InvalidInput("embedding matrix: " + std::to_string(values.size()) + " values for " + std::to_string(n) +
                       "x" + std::to_string(d));
  if (labels && labels->size() != n)
    throw InvalidInput("embedding matrix: " + std::to_string(labels->size()) + " labels for " + std::to_string(n) +
                       " rows");
}

EmbeddingMatrix EmbeddingMatrix::from_rows(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw InvalidInput("embedding matrix: no rows");
  const std::size_t d = rows.front().size();
  std::vector<double> data;
  data.reserve(rows.size() * d);
  for (const auto& r : rows) {
    if (r.size() != d) throw InvalidInput("embedding matrix: ragged rows");
    data.insert(data.end(), r.begin(), r.end());
  }
  return EmbeddingMatrix(rows.size(), d, std::move(data));
}

void EmbeddingMatrix::validate() const {
  if (n == 0 || d == 0) throw InvalidInput("embedding matrix: empty (" + std::to_string(n) + "x" + std::to_string(d) + ")");
  if (values.size() != n * d) throw InvalidInput("embedding matrix: value count does not match n*d");
  if (labels && labels->size() != n) throw InvalidInput("embedding matrix: label count does not match n");
  for (std::size_t k = 0; k < values.size(); ++k)
    if (!std::isfinite(values[k]))
      throw InvalidInput("embedding matrix: non-finite value at row " + std::to_string(k / d) + ", column " +
                         std::to_string(k % d));
}

void to_json(nlohmann::json& j, const SpectralReport& r) {
  j = nlohmann::json{{"effective_rank", r.effective_rank},
                     {"singular_values", r.singular_values},
                     {"variance_ratios", r.variance_ratios},
                     {"mean_norm", r.mean_norm},
                     {"mean_pairwise_cosine", r.mean_pairwise_cosine},
                     {"n", r.n},
                     {"d", r.d}};
}

void from_json(const nlohmann::json& j, SpectralReport& r) {
  j.at("effective_rank").get_to(r.effective_rank);
  j.at("singular_values").get_to(r.singular_values);
  j.at("variance_ratios").get_to(r.variance_ratios);
  j.at("mean_norm").get_to(r.mean_norm);
  j.at("mean_pairwise_cosine").get_to(r.mean_pairwise_cosine);
  j.at("n").get_to(r.n);
  j.at("d").get_to(r.d);
}

std::string spectrum_csv(std::span<const double> singular_values) {
  std::ostringstream os;
  os << "index,value\n" << std::setprecision(17);
  for (std::size_t i = 0; i < singular_values.size(); ++i) os << (i + 1) << ',' << singular_values[i] << '\n';
  return os.str();
}

std::vector<double> column_means(const EmbeddingMatrix& m) {
  m.validate();
  const double inv = 1.0 / static_cast<double>(m.n);
  std::vector<double> mu(m.d, 0.0);
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.d; ++j) mu[j] += m(i, j);
  for (auto& v : mu) v *= inv;
  // Second pass absorbs the rounding error of the first.
  std::vector<double> corr(m.d, 0.0);
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.d; ++j) corr[j] += m(i, j) - mu[j];
  for (std::size_t j = 0; j < m.d; ++j) mu[j] += corr[j] * inv;
  return mu;
}

EmbeddingMatrix center(const EmbeddingMatrix& m) {
  const auto mu = column_means(m);
  EmbeddingMatrix out = m;
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.d; ++j) out(i, j) -= mu[j];
  return out;
}

std::vector<double> singular_values(const EmbeddingMatrix& m) {
  m.validate();
  // Columns of the working matrix are stored contiguously. Orient so that the
  // number of columns is min(n, d); rotations then cost O(min^2 * max).
  const bool tall = m.n >= m.d;
  const std::size_t cols = tall ? m.d : m.n;
  const std::size_t len = tall ? m.n : m.d;
  std::vector<double> u(cols * len);
  for (std::size_t i = 0; i < m.n; ++i)
    for (std::size_t j = 0; j < m.d; ++j) {
      if (tall)
        u[j * len + i] = m(i, j);
      else
        u[i * len + j] = m(i, j);
    }

  auto dot = [&](std::size_t a, std::size_t b) {
    const double* x = &u[a * len];
    const double* y = &u[b * len];
    double s = 0.0;
    for (std::size_t k = 0; k < len; ++k) s += x[k] * y[k];
    return s;
  };

  constexpr double kTol = 1e-15;
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      for (std::size_t q = p + 1; q < cols; ++q) {
        const double alpha = dot(p, p);
        const double beta = dot(q, q);
        const double gamma = dot(p, q);
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= kTol * std::sqrt(alpha) * std::sqrt(beta)) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        double* x = &u[p * len];
        double* y = &u[q * len];
        for (std::size_t k = 0; k < len; ++k) {
          const double xk = x[k];
          const double yk = y[k];
          x[k] = c * xk - s * yk;
          y[k] = s * xk + c * yk;
        }
      }
    }
    if (!rotated) break;
  }

  std::vector<double> sv(cols);
  for (std::size_t j = 0; j < cols; ++j) sv[j] = std::sqrt(dot(j, j));
  std::sort(sv.begin(), sv.end(), std::greater<>());
  return sv;
}

namespace {

void check_spectrum(std::span<const double> sv) {
  for (std::size_t i = 0; i < sv.size(); ++i) {
    if (!std::isfinite(sv[i])) throw InvalidInput("effective rank: non-finite singular value at index " + std::to_string(i));
    if (sv[i] < 0.0) throw InvalidInput("effective rank: negative singular value at index " + std::to_string(i));
  }
}

}  // namespace

std::vector<double> variance_ratios(std::span<const double> sv) {
  check_spectrum(sv);
  const double smax = sv.empty() ? 0.0 : *std::max_element(sv.begin(), sv.end());
  if (!(smax > 0.0)) return {};
  const double cut = kRankTolerance * smax;
  double total = 0.0;
  for (double s : sv)
    if (s > cut) total += s * s;
  std::vector<double> p(sv.size(), 0.0);
  for (std::size_t i = 0; i < sv.size(); ++i)
    if (sv[i] > cut) p[i] = sv[i] * sv[i] / total;
  return p;
}

double effective_rank(std::span<const double> sv) {
  const auto p = variance_ratios(sv);
  if (p.empty()) return 0.0;
  double h = 0.0;
  for (double pi : p)
    if (pi > 0.0) h -= pi * std::log(pi);
  return std::exp(h);
}

double mean_pairwise_cosine(const EmbeddingMatrix& m, std::size_t max_pairs, std::uint64_t seed) {
  m.validate();
  if (m.n < 2) throw InvalidInput("mean_pairwise_cosine: need at least 2 rows, got " + std::to_string(m.n));
  if (max_pairs == 0) throw InvalidInput("mean_pairwise_cosine: max_pairs must be positive");

  const std::uint64_t n = m.n;
  const std::uint64_t total = n * (n - 1) / 2;

  // Linear pair index t enumerates (0,1), (0,2), ..., (0,n-1), (1,2), ...
  std::vector<std::uint64_t> picks;
  if (total <= max_pairs) {
    picks.resize(total);
    for (std::uint64_t t = 0; t < total; ++t) picks[t] = t;
  } else {
    // Floyd's sampling of max_pairs distinct indices from [0, total).
    Rng rng(seed);
    std::unordered_set<std::uint64_t> chosen;
    for (std::uint64_t j = total - max_pairs; j < total; ++j) {
      const std::uint64_t t = rng.below(j + 1);
      if (!chosen.insert(t).second) chosen.insert(j);
    }
    picks.assign(chosen.begin(), chosen.end());
    std::sort(picks.begin(), picks.end());
  }

  std::vector<double> norms(m.n, -1.0);
  auto norm_of = [&](std::size_t i) {
    if (norms[i] < 0.0) {
      double s = 0.0;
      for (double v : m.row(i)) s += v * v;
      norms[i] = std::sqrt(s);
      if (!(norms[i] > 0.0)) throw DegenerateRow("mean_pairwise_cosine: zero-norm row", i);
    }
    return norms[i];
  };

  double acc = 0.0;
  std::uint64_t row = 0;
  std::uint64_t row_start = 0;  // linear index of pair (row, row+1)
  for (std::uint64_t t : picks) {
    while (t >= row_start + (n - 1 - row)) {
      row_start += n - 1 - row;
      ++row;
    }
    const std::size_t i = row;
    const std::size_t j = row + 1 + (t - row_start);
    double dotv = 0.0;
    const auto a = m.row(i);
    const auto b = m.row(j);
    for (std::size_t k = 0; k < m.d; ++k) dotv += a[k] * b[k];
    acc += dotv / (norm_of(i) * norm_of(j));
  }
  return acc / static_cast<double>(picks.size());
}

namespace {

// The centered matrix of identical rows can carry rounding residue of the
// mean; anything at that scale relative to the raw data counts as zero spread.
bool effectively_constant(const EmbeddingMatrix& raw, std::span<const double> centered_sv) {
  double max_abs = 0.0;
  for (double v : raw.values) max_abs = std::max(max_abs, std::abs(v));
  const double smax = centered_sv.empty() ? 0.0 : centered_sv.front();
  const double floor = 64.0 * std::numeric_limits<double>::epsilon() * max_abs *
                       std::sqrt(static_cast<double>(raw.n) * static_cast<double>(raw.d));
  return smax <= floor;
}

}  // namespace

double centered_effective_rank(const EmbeddingMatrix& m) {
  const auto sv = singular_values(center(m));
  if (effectively_constant(m, sv)) return 0.0;
  return effective_rank(sv);
}

SpectralReport analyze(const EmbeddingMatrix& m, const AnalyzeOptions& opts) {
  m.validate();
  if (m.n < 2) throw InvalidInput("analyze: need at least 2 rows, got " + std::to_string(m.n));
  SpectralReport r;
  r.n = m.n;
  r.d = m.d;

  const auto mu = column_means(m);
  double mn = 0.0;
  for (double v : mu) mn += v * v;
  r.mean_norm = std::sqrt(mn);

  r.singular_values = singular_values(center(m));
  if (effectively_constant(m, r.singular_values)) {
    std::fill(r.singular_values.begin(), r.singular_values.end(), 0.0);
    r.effective_rank = 0.0;
  } else {
    r.variance_ratios = variance_ratios(r.singular_values);
    r.effective_rank = effective_rank(r.singular_values);
  }
  r.mean_pairwise_cosine = mean_pairwise_cosine(m, opts.max_pairs, opts.seed);
  return r;
}

EmbeddingMatrix normalize_rows(const EmbeddingMatrix& m) {
  EmbeddingMatrix out = m;
  for (std::size_t i = 0; i < out.n; ++i) {
    auto r = out.row(i);
    double s = 0.0;
    for (double v : r) s += v * v;
    if (s == 0.0) continue;
    const double inv = 1.0 / std::sqrt(s);
    for (double& v : r) v *= inv;
  }
  return out;
}

std::string to_string(RankInput r) { return r == RankInput::Raw ? "raw" : "normalized"; }

RankInput parse_rank_input(const std::string& name) {
  if (name == "raw") return RankInput::Raw;
  if (name == "normalized") return RankInput::Normalized;
  throw InvalidInput("unknown rank input '" + name + "' (expected raw or normalized)");
}

double embedding_rank(const EmbeddingMatrix& m, RankInput input) {
  return centered_effective_rank(input == RankInput::Raw ? m : normalize_rows(m));
}

}  // namespace dcollapse
