#pragma once

// Distillation objectives.
//
//   cosine_distill : (1/N) sum_i (1 - cos(z_s^i, z_t^i))
//   infonce        : in-batch contrastive loss between two views. Anchor i of
//                    one view is scored against every row of the other view
//                    (positive included); the two directions are averaged.

#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

#include "dcollapse/autodiff.hpp"
#include "dcollapse/spectral.hpp"

namespace dcollapse {

enum class LossMode { Cosine, CosineInfoNCE };

std::string to_string(LossMode mode);
/// Accepts "cosine" and "cosine+infonce".
LossMode parse_loss_mode(std::string_view s);

struct LossConfig {
  LossMode mode = LossMode::Cosine;
  double lambda = 0.5;
  double tau = 0.2;

  void validate() const;
  bool uses_infonce() const { return mode == LossMode::CosineInfoNCE; }

  friend bool operator==(const LossConfig&, const LossConfig&) = default;
};

void to_json(nlohmann::json& j, const LossConfig& c);
void from_json(const nlohmann::json& j, LossConfig& c);

ad::Var cosine_distill(ad::Var student, ad::Var teacher);
ad::Var infonce(ad::Var view1, ad::Var view2, double tau);

struct LossTerms {
  ad::Var total;
  double cosine = 0.0;
  double infonce = 0.0;  // 0 in cosine-only mode
};

/// cosine-only: total = cosine_distill; otherwise cosine_distill + lambda * infonce.
LossTerms combined_loss(ad::Var student, ad::Var teacher, ad::Var view1, ad::Var view2, const LossConfig& config);

// Value-only conveniences over embedding matrices.
double cosine_distill(const EmbeddingMatrix& student, const EmbeddingMatrix& teacher);
double infonce(const EmbeddingMatrix& view1, const EmbeddingMatrix& view2, double tau);

}  // namespace dcollapse
