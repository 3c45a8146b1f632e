#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mgd/data.hpp"
#include "mgd/distill.hpp"
#include "mgd/models.hpp"

namespace mgd {

enum class DistillLoss { mgd, mimic };

struct MetricsRecord {
  std::size_t epoch = 0;
  Split split = Split::train;
  double top1 = 0.0;
  double top5 = 0.0;
  double loss_task = 0.0;
  double loss_dis = 0.0;
  double feature_diff = 0.0;  // NaN when there is no teacher
};

struct LogitKd {
  double temperature = 4.0;
  double weight = 1.0;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 128;
  double lr_init = 0.1;
  double lr_decay_factor = 0.1;
  std::size_t lr_decay_every = 12;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  double alpha = 7e-5;
  MaskConfig mask{MaskMode::spatial, 0.5, 0};
  /// Distilled stages; empty means the last stage of the student.
  std::vector<std::string> stages;
  std::optional<LogitKd> logit_kd;
  std::uint64_t seed = 0;

  DistillLoss loss = DistillLoss::mgd;
  GenerativeBlockOptions block;
  bool mean_normalize = false;
  bool flip = false;
  /// Final student checkpoint, written when set.
  std::optional<std::filesystem::path> checkpoint_path;
  /// Called for every metrics row as soon as it is recorded.
  std::function<void(const MetricsRecord&)> on_record;

  void validate() const;
  /// lr_init * decay^floor(epoch / decay_every), epochs counted from 0.
  double lr_at(std::size_t epoch) const;
};

/// One optimizer step of the training loop.
struct StepLog {
  std::size_t epoch = 0;
  std::size_t step = 0;
  double loss_task = 0.0;
  double loss_dis = 0.0;
  double loss_total = 0.0;
};

struct TrainResult {
  std::vector<MetricsRecord> metrics;
  std::vector<StepLog> steps;
  double top1 = 0.0;  // final validation accuracy
  double top5 = 0.0;
  double final_feature_diff = 0.0;
};

struct DataSplits {
  const LabeledDataset& train;
  const LabeledDataset& val;
};

struct Accuracy {
  double top1 = 0.0;
  double top5 = 0.0;
};

/// Top-1/top-5 (percent) of row-major N x K logits. Ties rank the lower
/// class index first. With K < 5, top-5 covers every class (100%).
Accuracy accuracy_from_logits(std::span<const float> logits, std::size_t classes,
                              std::span<const std::int32_t> labels);

Accuracy evaluate(Model& model, const LabeledDataset& dataset, std::size_t batch_size = 256);

/// Cross-entropy training only; alpha and distillation settings are ignored.
TrainResult train_baseline(Model& model, const DataSplits& data, const TrainConfig& cfg);

/// Trains `student` with L_task + alpha * L_dis against a frozen teacher.
/// Generative blocks are created fresh for every run; when `blocks_out` is
/// given it receives them after training.
TrainResult train_distill(Model& teacher, Model& student, const DataSplits& data,
                          const TrainConfig& cfg,
                          std::vector<GenerativeBlock>* blocks_out = nullptr);

/// Batch mean of sq_l2_sum(teacher stage feature, align(student stage
/// feature)) on `probe`, both models in eval mode, no masking.
double track_feature_difference(Model& teacher, Model& student, const AlignLayer& align,
                                const Tensor& probe, const std::string& stage);

inline constexpr const char* kMetricsHeader =
    "epoch,split,top1,top5,loss_task,loss_dis,feature_diff";

std::string format_metrics_csv(std::span<const MetricsRecord> records);
void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRecord> records);

}  // namespace mgd
