#pragma once

// Width-scalable CNN student.
//
//   stem   : conv3x3(in -> w0) + relu,            w0 = base_width * width_factor
//   stage s: [conv3x3 + relu] x 2 at w0 * 2^s channels, 2x2 avg-pool between stages
//   head   : global average pool, linear -> embed_dim
//
// Convolutions are "same" padded. No normalization layers.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcollapse/autodiff.hpp"
#include "dcollapse/spectral.hpp"

namespace dcollapse {

struct StudentConfig {
  int width_factor = 1;
  int base_width = 4;
  int stages = 3;
  int input_channels = 1;
  int input_size = 16;
  int embed_dim = 64;
  std::uint64_t seed = 0;

  /// Throws InvalidInput naming the first violated constraint.
  void validate() const;
  int stage_width(int stage) const { return base_width * width_factor * (1 << stage); }

  friend bool operator==(const StudentConfig&, const StudentConfig&) = default;
};

void to_json(nlohmann::json& j, const StudentConfig& c);
void from_json(const nlohmann::json& j, StudentConfig& c);

/// Exact scalar parameter count implied by the architecture.
std::size_t param_count(const StudentConfig& config);

class StudentCNN {
 public:
  /// He-initialized from config.seed. Parameter values are float32-representable.
  explicit StudentCNN(StudentConfig config);
  /// Wraps existing parameters (checkpoint load). Shapes are validated.
  StudentCNN(StudentConfig config, std::vector<ad::Parameter> params);

  const StudentConfig& config() const { return config_; }
  std::span<ad::Parameter> parameters() { return params_; }
  std::span<const ad::Parameter> parameters() const { return params_; }
  std::size_t param_count() const;

  /// Differentiable forward; parameters are bound to the tape so backward()
  /// fills their grads. images: [n, channels, size, size] -> [n, embed_dim].
  ad::Var forward(ad::Tape& tape, ad::Var images);

  /// Inference over an image batch, processed in fixed-size chunks.
  EmbeddingMatrix embed(const ad::Tensor& images) const;

 private:
  StudentConfig config_;
  std::vector<ad::Parameter> params_;
};

inline StudentCNN build_student(const StudentConfig& config) { return StudentCNN(config); }

/// Expected parameter shapes in storage order.
std::vector<ad::Shape> parameter_shapes(const StudentConfig& config);

/// Rounds every parameter to the nearest float32 value so that checkpoints
/// (float32 payload) reproduce the in-memory model exactly.
void round_to_float32(std::span<ad::Parameter> params);

}  // namespace dcollapse
