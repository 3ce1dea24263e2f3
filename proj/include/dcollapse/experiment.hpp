#pragma once

// The desk-scale experiment grid: teacher kinds x loss modes x width factors,
// each cell trained on shared synthetic data and probed under input noise.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dcollapse/data.hpp"
#include "dcollapse/probe.hpp"
#include "dcollapse/teacher.hpp"
#include "dcollapse/trainer.hpp"

namespace dcollapse {

struct DeskConfig {
  SyntheticConfig train_data;
  SyntheticConfig eval_data;
  ConeConfig cone;
  UniformConfig uniform;
  std::uint64_t teacher_seed = 3;
  /// Template for every cell; width factor and loss mode are set per cell.
  TrainConfig train;
  std::vector<double> sigmas{0.0, 0.05, 0.1, 0.2};
  std::uint64_t noise_seed = 9;
  int k = kDefaultNeighbors;
  std::vector<std::string> teachers{"cone", "uniform"};
  std::vector<LossMode> losses{LossMode::Cosine, LossMode::CosineInfoNCE};
  std::vector<int> widths{1, 2, 4};

  void validate() const;
};

void to_json(nlohmann::json& j, const DeskConfig& c);

/// 1000 train / 500 eval synthetic 16x16 images, D = 64 teachers, 40 epochs
/// of batch 32 at lr 2e-3, base width 4.
DeskConfig default_desk_config();
TrainConfig desk_train_config();

/// Key-value grid file, one `key = value` per line, '#' starts a comment.
/// List values are comma separated. Unknown keys are rejected.
DeskConfig parse_grid(const std::string& text, DeskConfig base = default_desk_config());
std::vector<std::string> grid_keys();

struct CellSpec {
  std::string teacher;
  LossMode loss = LossMode::Cosine;
  int width = 1;

  /// e.g. "cone_cosine_w1", "uniform_cosine+infonce_w4"
  std::string id() const;
  friend bool operator==(const CellSpec&, const CellSpec&) = default;
};

std::vector<CellSpec> grid_cells(const DeskConfig& config);

TeacherStore make_teacher(const DeskConfig& config, const std::string& kind, std::span<const int> labels);
TrainConfig cell_train_config(const DeskConfig& config, const CellSpec& cell);

struct CellResult {
  CellSpec spec;
  TrainConfig config;
  TrainResult train;
  CleanProbe clean;
  RobustnessTable sweep;

  std::size_t params() const { return train.model.param_count(); }
  double final_rank() const;
  /// Accuracy at the given sigma; throws InvalidInput if the sweep lacks it.
  double accuracy_at(double sigma) const;
};

CellResult run_cell(const DeskConfig& config, const CellSpec& cell, const Dataset& train_set,
                    const Dataset& eval_set, const TeacherStore& teacher, const EpochCallback& on_epoch = {});

struct SummaryRow {
  std::string teacher_kind;
  std::string loss_mode;
  int width_factor = 0;
  std::size_t params = 0;
  double final_er = 0.0;
  double clean_acc = 0.0;
  double acc_sigma_02 = 0.0;

  friend bool operator==(const SummaryRow&, const SummaryRow&) = default;
};

SummaryRow summarize(const CellResult& r);

/// teacher_kind,loss_mode,width_factor,params,final_ER,clean_acc,acc@sigma=0.2
std::string summary_csv(const std::vector<SummaryRow>& rows);
std::vector<SummaryRow> parse_summary_csv(const std::string& text);

}  // namespace dcollapse
