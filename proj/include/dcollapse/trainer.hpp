#pragma once

// Distillation training loop and checkpoint persistence.
//
// Checkpoint (CKP1), little-endian:
//   "CKP1" | u32 version (=1) | u32 config_len | config JSON
//   | u32 tensor_count | per tensor: u32 rank, rank x u32 extents, f32 payload

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcollapse/data.hpp"
#include "dcollapse/losses.hpp"
#include "dcollapse/models.hpp"
#include "dcollapse/spectral.hpp"
#include "dcollapse/teacher.hpp"

namespace dcollapse {

struct TrainConfig {
  int epochs = 30;
  int batch_size = 64;
  double learning_rate = 1e-3;
  LossConfig loss{};
  StudentConfig student{};
  AugmentConfig augment{};
  int rank_eval_every = 5;
  RankInput rank_input = RankInput::Normalized;
  std::uint64_t seed = 0;
  // Descriptive references echoed into run metadata.
  std::string dataset_ref;
  std::string teacher_ref;
  std::string eval_ref;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct EpochMetrics {
  int epoch = 0;
  double loss_total = 0.0;
  double loss_cos = 0.0;
  double loss_nce = 0.0;
  std::optional<double> effective_rank;

  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

struct MetricsLog {
  nlohmann::json run;  // resolved configuration echo
  std::vector<EpochMetrics> epochs;

  /// One JSON object per epoch, one per line.
  std::string to_jsonl() const;
  /// epoch,loss_total,loss_cos,loss_nce,effective_rank (empty cell when not evaluated)
  std::string to_csv() const;
  static MetricsLog from_jsonl(const std::string& text);

  std::optional<double> final_effective_rank() const;

  friend bool operator==(const MetricsLog&, const MetricsLog&) = default;
};

struct TrainResult {
  StudentCNN model;
  MetricsLog log;
  std::vector<double> epoch_seconds;  // wall time, kept out of the log so logs stay reproducible
};

using EpochCallback = std::function<void(const EpochMetrics&, double seconds)>;

/// Teacher row i is the target of training sample i.
TrainResult train(const TrainConfig& config, const Dataset& train_set, const TeacherStore& teacher,
                  const Dataset& eval_set, const EpochCallback& on_epoch = {});

/// Clean forward pass over the dataset in index order, labels attached.
EmbeddingMatrix evaluate_embeddings(const StudentCNN& model, const Dataset& data);

struct Checkpoint {
  StudentCNN model;
  TrainConfig config;
};

void save_checkpoint(const StudentCNN& model, const TrainConfig& config, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

std::vector<unsigned char> encode_checkpoint(const StudentCNN& model, const TrainConfig& config);
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes);

}  // namespace dcollapse
