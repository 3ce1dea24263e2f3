#pragma once

// Image datasets: synthetic oriented gratings, CIFAR-style binary records,
// paired augmentations for contrastive views, and Gaussian input corruption.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcollapse/autodiff.hpp"

namespace dcollapse {

enum class Split { Train, Eval };

std::string to_string(Split split);
Split parse_split(const std::string& s);

/// n square images, channel-planar, pixels in [0, 1].
struct Dataset {
  std::size_t n = 0;
  std::size_t channels = 1;
  std::size_t size = 0;
  std::vector<double> pixels;
  std::vector<int> labels;
  int class_count = 0;
  Split split = Split::Train;

  std::size_t image_size() const { return channels * size * size; }
  std::span<const double> image(std::size_t i) const { return {pixels.data() + i * image_size(), image_size()}; }

  /// [n, channels, size, size] tensor over all images.
  ad::Tensor as_tensor() const;
  /// Tensor over the listed images, in order.
  ad::Tensor gather(std::span<const std::size_t> indices) const;

  void validate() const;

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

struct SyntheticConfig {
  int classes = 10;
  int per_class = 200;
  int size = 16;
  int channels = 1;
  double noise_level = 0.1;
  /// When false every sample of a class shares phase 0, mid contrast, the
  /// class orientation exactly, and no blob, so noise-free classes are constant.
  bool random_phase = true;
  std::uint64_t seed = 0;
  Split split = Split::Train;
};

void to_json(nlohmann::json& j, const SyntheticConfig& c);
void from_json(const nlohmann::json& j, SyntheticConfig& c);

/// Class c is a sinusoidal grating with a class-specific (orientation,
/// frequency) pair. Each sample adds its own phase, contrast, small
/// orientation jitter and a randomly placed Gaussian blob, then pixel noise.
/// Samples are interleaved by class (sample i has label i % classes).
/// Pixels are quantized to multiples of 1/255 so the binary record layout
/// stores them exactly.
Dataset gen_synthetic(const SyntheticConfig& config);

/// Binary record layout: one label byte followed by channels*size*size pixel
/// bytes, channel-planar. CIFAR-10 is channels = 3, size = 32 (3073 bytes).
struct RecordLayout {
  std::size_t channels = 3;
  std::size_t size = 32;
  std::size_t record_bytes() const { return 1 + channels * size * size; }
};

struct ReadOptions {
  RecordLayout layout{};
  int class_count = 10;
  bool allow_empty = false;
  Split split = Split::Train;
};

Dataset read_cifar_binary(const std::filesystem::path& path, const ReadOptions& opts = {});
/// Pixels are written as round(255 * p).
void write_cifar_binary(const Dataset& data, const std::filesystem::path& path);

struct AugmentConfig {
  int crop_padding = 2;
  double flip_probability = 0.0;
  double brightness = 0.1;

  void validate() const;
};

void to_json(nlohmann::json& j, const AugmentConfig& c);
void from_json(const nlohmann::json& j, AugmentConfig& c);

/// Identifies one augmented view; each view's randomness is derived from it alone.
struct AugmentKey {
  std::uint64_t seed = 0;
  std::uint64_t epoch = 0;
  std::uint64_t sample = 0;
  std::uint64_t view = 0;
};

struct AugmentParams {
  int dx = 0;  // crop offset into the padded image, in [0, 2 * padding]
  int dy = 0;
  bool flip = false;
  double brightness = 0.0;
};

AugmentParams sample_augment(const AugmentConfig& config, const AugmentKey& key);

/// Pad-then-crop, optional horizontal flip, additive brightness, clamp to [0, 1].
std::vector<double> apply_augment(std::span<const double> image, std::size_t channels, std::size_t size,
                                  const AugmentParams& params, int padding);

std::vector<double> augment_view(std::span<const double> image, std::size_t channels, std::size_t size,
                                 const AugmentConfig& config, const AugmentKey& key);

/// Two views with view indices 0 and 1.
std::pair<std::vector<double>, std::vector<double>> augment_pair(std::span<const double> image, std::size_t channels,
                                                                 std::size_t size, const AugmentConfig& config,
                                                                 std::uint64_t seed, std::uint64_t epoch,
                                                                 std::uint64_t sample);

/// Zero-mean Gaussian samples with the given standard deviation (pre-clamp noise field).
std::vector<double> gaussian_noise(std::size_t count, double sigma, std::uint64_t seed);

/// Adds per-pixel N(0, sigma^2) noise and clamps to [0, 1]. The noise of
/// image i depends only on (seed, i). sigma = 0 returns the input unchanged.
Dataset add_gaussian_noise(const Dataset& data, double sigma, std::uint64_t seed);

}  // namespace dcollapse
