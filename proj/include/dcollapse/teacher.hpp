#pragma once

// Teacher embeddings: synthetic generators with controlled geometry and the
// EMB1 interchange format shared with external exporters.
//
// EMB1 layout, little-endian:
//   "EMB1" | u32 version (=1) | u32 n | u32 D | u8 has_labels
//   | n*D f32 row-major | [n u32 labels] | u32 meta_len | meta_len bytes UTF-8 JSON

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcollapse/spectral.hpp"

namespace dcollapse {

struct TeacherStore {
  std::size_t n = 0;
  std::size_t dim = 0;
  std::vector<double> values;
  std::optional<std::vector<int>> labels;
  /// {"kind": cone|uniform|external, "parameters": {...}, "seed": u64, "source": str}
  /// for generated stores; exporter stores may carry additional keys.
  nlohmann::json meta = nlohmann::json::object();

  std::string kind() const;
  EmbeddingMatrix as_matrix() const;
  void validate() const;

  friend bool operator==(const TeacherStore&, const TeacherStore&) = default;
};

/// Row of the store. Throws InvalidInput when out of range.
std::span<const double> lookup(const TeacherStore& store, std::size_t index);

/// Anisotropic generator: embedding(i) = rho * u + a * v[label(i)] + b * eps(i),
/// where u is a fixed random unit vector, v[c] are unit class directions whose
/// per-axis energy decays as j^(-gamma), and eps(i) ~ N(0, I / D).
struct ConeConfig {
  int dim = 64;
  double cone_offset = 4.0;        // rho
  double class_scale = 1.0;        // a
  double within_class_scale = 0.5; // b
  double spectral_decay = 1.5;     // gamma

  void validate() const;
};

void to_json(nlohmann::json& j, const ConeConfig& c);
void from_json(const nlohmann::json& j, ConeConfig& c);

/// Isotropic generator: class directions uniform on the sphere, no shared offset.
struct UniformConfig {
  int dim = 64;
  double class_scale = 1.0;
  double within_class_scale = 0.5;

  void validate() const;
};

void to_json(nlohmann::json& j, const UniformConfig& c);
void from_json(const nlohmann::json& j, UniformConfig& c);

/// Stored values are rounded to float32 so EMB1 persistence is exact.
TeacherStore gen_cone_teacher(std::span<const int> labels, const ConeConfig& config, std::uint64_t seed);
TeacherStore gen_uniform_teacher(std::span<const int> labels, const UniformConfig& config, std::uint64_t seed);

void write_emb1(const TeacherStore& store, const std::filesystem::path& path);
TeacherStore read_emb1(const std::filesystem::path& path);

std::vector<unsigned char> encode_emb1(const TeacherStore& store);
TeacherStore decode_emb1(std::span<const unsigned char> bytes);

}  // namespace dcollapse
