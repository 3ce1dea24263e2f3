#include "dcollapse/losses.hpp"

#include <cmath>

#include "dcollapse/error.hpp"

namespace dcollapse {

std::string to_string(LossMode mode) { return mode == LossMode::Cosine ? "cosine" : "cosine+infonce"; }

LossMode parse_loss_mode(std::string_view s) {
  if (s == "cosine") return LossMode::Cosine;
  if (s == "cosine+infonce") return LossMode::CosineInfoNCE;
  throw InvalidInput("unknown loss mode '" + std::string(s) + "' (expected cosine or cosine+infonce)");
}

void LossConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) throw InvalidInput("loss config: tau must be > 0, got " + std::to_string(tau));
  if (!(lambda >= 0.0) || !std::isfinite(lambda))
    throw InvalidInput("loss config: lambda must be >= 0, got " + std::to_string(lambda));
}

void to_json(nlohmann::json& j, const LossConfig& c) {
  j = nlohmann::json{{"mode", to_string(c.mode)}, {"lambda", c.lambda}, {"tau", c.tau}};
}

void from_json(const nlohmann::json& j, LossConfig& c) {
  c.mode = parse_loss_mode(j.at("mode").get<std::string>());
  j.at("lambda").get_to(c.lambda);
  j.at("tau").get_to(c.tau);
}

namespace {

void require_matching(const ad::Var& a, const ad::Var& b, const char* op) {
  if (a.shape().size() != 2 || a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": expected matching [batch, dim] inputs, got " + ad::shape_str(a.shape()) +
                     " and " + ad::shape_str(b.shape()));
}

}  // namespace

ad::Var cosine_distill(ad::Var student, ad::Var teacher) {
  require_matching(student, teacher, "cosine_distill");
  ad::Var cos = ad::sum_rows(ad::mul(ad::l2_normalize_rows(student), ad::l2_normalize_rows(teacher)));
  return ad::add_scalar(ad::scalar_mul(ad::mean(cos), -1.0), 1.0);
}

ad::Var infonce(ad::Var view1, ad::Var view2, double tau) {
  require_matching(view1, view2, "infonce");
  if (view1.shape()[0] < 2) throw InvalidInput("infonce: batch must contain at least 2 rows for negatives");
  if (!(tau > 0.0)) throw InvalidInput("infonce: tau must be > 0");
  ad::Var a = ad::l2_normalize_rows(view1);
  ad::Var b = ad::l2_normalize_rows(view2);
  ad::Var logits = ad::scalar_mul(ad::matmul(a, ad::transpose(b)), 1.0 / tau);
  ad::Var pos = ad::diag(logits);
  ad::Var forward = ad::mean(ad::sub(ad::logsumexp_rows(logits), pos));
  ad::Var backward = ad::mean(ad::sub(ad::logsumexp_rows(ad::transpose(logits)), pos));
  return ad::scalar_mul(ad::add(forward, backward), 0.5);
}

LossTerms combined_loss(ad::Var student, ad::Var teacher, ad::Var view1, ad::Var view2, const LossConfig& config) {
  config.validate();
  LossTerms terms;
  ad::Var cos = cosine_distill(student, teacher);
  terms.cosine = cos.value().item();
  if (!config.uses_infonce()) {
    terms.total = cos;
    return terms;
  }
  ad::Var nce = infonce(view1, view2, config.tau);
  terms.infonce = nce.value().item();
  terms.total = ad::add(cos, ad::scalar_mul(nce, config.lambda));
  return terms;
}

namespace {

ad::Tensor as_tensor(const EmbeddingMatrix& m) {
  m.validate();
  return ad::Tensor({m.n, m.d}, m.values);
}

}  // namespace

double cosine_distill(const EmbeddingMatrix& student, const EmbeddingMatrix& teacher) {
  ad::Tape tape;
  return cosine_distill(tape.constant(as_tensor(student)), tape.constant(as_tensor(teacher))).value().item();
}

double infonce(const EmbeddingMatrix& view1, const EmbeddingMatrix& view2, double tau) {
  ad::Tape tape;
  return infonce(tape.constant(as_tensor(view1)), tape.constant(as_tensor(view2)), tau).value().item();
}

}  // namespace dcollapse
