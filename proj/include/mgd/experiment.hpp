#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mgd/data.hpp"
#include "mgd/models.hpp"
#include "mgd/trainer.hpp"

namespace mgd {

enum class Task {
  train_teacher,
  distill,
  self_distill,
  sweep_lambda,
  sweep_alpha,
  ablate_projector,
  ablate_stage,
  ablate_channel_mask,
};

std::string task_name(Task task);

enum class DatasetKind { synthetic, cifar10, mnist };

struct DatasetSpec {
  DatasetKind kind = DatasetKind::synthetic;
  std::filesystem::path data_dir;
  /// 0 keeps the whole split (real data) or means the default size (synthetic).
  std::size_t train_size = 0;
  std::size_t val_size = 0;
  // Synthetic generator knobs.
  std::size_t image_size = 32;
  std::size_t classes = 10;
  double noise = 0.0;
  std::size_t jitter = 0;
  std::size_t distractors = 0;
  std::uint64_t data_seed = 0;
};

struct LoadedData {
  LabeledDataset train;
  LabeledDataset val;
};

/// Train and validation splits; normalization comes from the train split.
LoadedData load_data(const DatasetSpec& spec);

struct ExperimentConfig {
  Task task = Task::self_distill;
  std::string teacher_config = "teacher";
  std::string student_config = "student";
  std::optional<std::filesystem::path> teacher_checkpoint;
  DatasetSpec dataset;
  TrainConfig train;
  double lambda = 0.5;
  double beta = 0.15;
  std::vector<double> sweep_values;
  std::filesystem::path out_dir;
  /// Sweep/ablation members run concurrently (1 = sequential).
  std::size_t parallel = 1;
  /// Keys present in the source document.
  std::set<std::string> given;

  /// Flat `key = value` text with `#` comments. Unknown keys, malformed
  /// values and missing task requirements raise ConfigError naming the key.
  static ExperimentConfig parse(const std::string& text);
  static ExperimentConfig load(const std::filesystem::path& path);

  void validate() const;
  /// Model configs adapted to the dataset's channels, size and classes.
  BackboneConfig teacher_backbone(const LabeledDataset& data) const;
  BackboneConfig student_backbone(const LabeledDataset& data) const;
  /// Seed used for every model built by a run.
  std::uint64_t model_seed() const;
  /// Training settings with the mask ratio and mask stream filled in.
  TrainConfig train_config() const;
};

struct RunSummary {
  double top1 = 0.0;
  double top5 = 0.0;
  double feature_diff = 0.0;  // NaN when no teacher was involved
  std::optional<double> baseline_top1;
  std::optional<double> baseline_top5;
  std::optional<std::uint64_t> teacher_hash_before;
  std::optional<std::uint64_t> teacher_hash_after;
};

/// Executes the configured task, writing its artifacts into out_dir.
/// `log` receives progress lines.
RunSummary run_experiment(const ExperimentConfig& config, std::ostream& log);

/// Runs the config at `path`; 0 on success, 2 on config errors, 3 otherwise.
int run_config_file(const std::filesystem::path& path, std::ostream& log, std::ostream& err);

struct CompareRow {
  std::string name;
  double top1 = 0.0;
  double top5 = 0.0;
  double feature_diff = 0.0;
};

inline constexpr const char* kCompareHeader = "name,top1,top5,feature_diff";

/// Reads `<dir>/result.json` of each run; rows sorted by top1 descending.
/// Unreadable runs are reported in `errors` and skipped.
std::vector<CompareRow> collect_results(std::span<const std::filesystem::path> run_dirs,
                                        std::vector<std::string>& errors);
std::string format_compare_csv(std::span<const CompareRow> rows);
/// Writes the comparison CSV and returns the per-directory errors.
std::vector<std::string> compare_runs(std::span<const std::filesystem::path> run_dirs,
                                      const std::filesystem::path& out_path);

/// Line charts of the train-split loss_task, loss_dis and feature_diff and
/// the validation top1 against epoch.
std::string render_curves_svg(std::span<const MetricsRecord> records);

/// P5 image of the channel-mean absolute activation, min-max scaled to
/// 0..255 (a constant map becomes uniform 128).
std::string encode_heatmap_pgm(const Tensor& feature, std::size_t index);

/// Loads the checkpoint against the config's student (or teacher) model,
/// runs validation image `image_index` and writes the stage heatmap.
void dump_feature_heatmap(const std::filesystem::path& checkpoint,
                          const std::filesystem::path& config_path, std::size_t image_index,
                          const std::string& stage, const std::filesystem::path& out_path);

}  // namespace mgd
