#include "mgd/trainer.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>

namespace mgd {
namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::size_t stage_index(const Model& model, const std::string& name) {
  for (std::size_t i = 0; i < model.config().stages.size(); ++i)
    if (name == "stage" + std::to_string(i + 1)) return i;
  throw ConfigError("unknown stage '" + name + "' (model has " +
                    std::to_string(model.config().stages.size()) + " stages)");
}

std::vector<std::string> resolve_stages(const Model& student, const TrainConfig& cfg) {
  if (!cfg.stages.empty()) return cfg.stages;
  return {"stage" + std::to_string(student.config().stages.size())};
}

void check_dataset(const Model& model, const LabeledDataset& ds, const char* which) {
  const auto& c = model.config();
  if (ds.size() == 0) throw std::invalid_argument(std::string(which) + " dataset is empty");
  if (ds.channels() != c.in_channels || ds.image_size() != c.input_size ||
      ds.images.dim(3) != c.input_size) {
    throw ShapeError(std::string(which) + " images " + shape_str(ds.images.shape()) +
                     " do not fit a model expecting " + std::to_string(c.in_channels) + "x" +
                     std::to_string(c.input_size) + "x" + std::to_string(c.input_size));
  }
  if (ds.class_count > c.num_classes) {
    throw ShapeError(std::string(which) + " dataset has " + std::to_string(ds.class_count) +
                     " classes but the model predicts " + std::to_string(c.num_classes));
  }
}

/// Evaluation pass that also reports the mean task loss.
struct EvalPass {
  Accuracy accuracy;
  double loss = 0.0;
};

EvalPass run_eval(Model& model, const LabeledDataset& ds, std::size_t batch_size) {
  if (ds.size() == 0) throw std::invalid_argument("evaluate: dataset is empty");
  const auto previous = model.mode();
  model.set_mode(Mode::eval);
  NoGradGuard no_grad;
  double hit1 = 0.0, hit5 = 0.0, loss = 0.0;
  auto it = batches(ds, batch_size);
  Batch batch;
  while (it.next(batch)) {
    auto out = model.forward(batch.images);
    const auto acc = accuracy_from_logits(out.logits.data(), out.logits.dim(1), batch.labels);
    const auto n = static_cast<double>(batch.labels.size());
    hit1 += acc.top1 * n;
    hit5 += acc.top5 * n;
    loss += softmax_cross_entropy<float>(out.logits, batch.labels).item() * n;
  }
  model.set_mode(previous);
  const auto total = static_cast<double>(ds.size());
  return {{hit1 / total, hit5 / total}, loss / total};
}

/// Running statistics over one training epoch.
struct EpochTally {
  double hit1 = 0.0, hit5 = 0.0, task = 0.0, dis = 0.0;
  std::size_t seen = 0;

  void add(const Tensor& logits, std::span<const std::int32_t> labels, double task_loss,
           double dis_loss) {
    const auto acc = accuracy_from_logits(logits.data(), logits.dim(1), labels);
    const auto n = static_cast<double>(labels.size());
    hit1 += acc.top1 * n;
    hit5 += acc.top5 * n;
    task += task_loss * n;
    dis += dis_loss * n;
    seen += labels.size();
  }
  MetricsRecord record(std::size_t epoch, double feature_diff) const {
    const auto n = static_cast<double>(seen);
    return {epoch, Split::train, hit1 / n, hit5 / n, task / n, dis / n, feature_diff};
  }
};

void emit(TrainResult& result, const TrainConfig& cfg, const MetricsRecord& record) {
  result.metrics.push_back(record);
  if (cfg.on_record) cfg.on_record(record);
}

std::string format_value(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs: must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size: must be >= 1");
  if (!(lr_init > 0.0)) throw ConfigError("lr_init: must be > 0");
  if (lr_decay_every < 1) throw ConfigError("lr_decay_every: must be >= 1");
  if (!(lr_decay_factor > 0.0)) throw ConfigError("lr_decay_factor: must be > 0");
  if (momentum < 0.0) throw ConfigError("momentum: must be >= 0");
  if (weight_decay < 0.0) throw ConfigError("weight_decay: must be >= 0");
  if (!(alpha >= 0.0)) throw ConfigError("alpha: must be >= 0");
  try {
    mask.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string(mask.mode == MaskMode::spatial ? "lambda: " : "beta: ") +
                      e.what());
  }
  try {
    block.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("block: ") + e.what());
  }
  if (logit_kd && !(logit_kd->temperature > 0.0)) {
    throw ConfigError("logit_kd_temperature: must be > 0");
  }
}

double TrainConfig::lr_at(std::size_t epoch) const {
  return lr_init * std::pow(lr_decay_factor, static_cast<double>(epoch / lr_decay_every));
}

Accuracy accuracy_from_logits(std::span<const float> logits, std::size_t classes,
                              std::span<const std::int32_t> labels) {
  if (classes == 0 || logits.size() != classes * labels.size()) {
    throw ShapeError("accuracy: logits do not match " + std::to_string(labels.size()) +
                     " labels of " + std::to_string(classes) + " classes");
  }
  if (labels.empty()) throw std::invalid_argument("accuracy: no samples");
  std::size_t hit1 = 0, hit5 = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const float* row = logits.data() + i * classes;
    const auto y = static_cast<std::size_t>(labels[i]);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < classes; ++j)
      if (row[j] > row[y] || (row[j] == row[y] && j < y)) ++rank;
    hit1 += rank < 1;
    hit5 += rank < 5;
  }
  const auto n = static_cast<double>(labels.size());
  return {100.0 * static_cast<double>(hit1) / n, 100.0 * static_cast<double>(hit5) / n};
}

Accuracy evaluate(Model& model, const LabeledDataset& dataset, std::size_t batch_size) {
  return run_eval(model, dataset, batch_size).accuracy;
}

double track_feature_difference(Model& teacher, Model& student, const AlignLayer& align,
                                const Tensor& probe, const std::string& stage) {
  NoGradGuard no_grad;
  const auto teacher_mode = teacher.mode();
  const auto student_mode = student.mode();
  teacher.set_mode(Mode::eval);
  student.set_mode(Mode::eval);
  const auto t = teacher.forward(probe).feature(stage);
  const auto s = student.forward(probe).feature(stage);
  teacher.set_mode(teacher_mode);
  student.set_mode(student_mode);
  return static_cast<double>(mimic_loss(s, t, align).item());
}

TrainResult train_baseline(Model& model, const DataSplits& data, const TrainConfig& cfg) {
  cfg.validate();
  check_dataset(model, data.train, "train");
  check_dataset(model, data.val, "val");
  auto params = model.parameters();
  TrainResult result;

  {
    const auto initial = run_eval(model, data.val, 256);
    emit(result, cfg, MetricsRecord{0, Split::val, initial.accuracy.top1, initial.accuracy.top5,
                              initial.loss, kNaN, kNaN});
  }
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    model.set_mode(Mode::train);
    const SgdOptions sgd{cfg.lr_at(epoch), cfg.momentum, cfg.weight_decay};
    EpochTally tally;
    auto it = batches(data.train, cfg.batch_size, cfg.seed, epoch, cfg.flip);
    Batch batch;
    while (it.next(batch)) {
      auto out = model.forward(batch.images);
      auto loss = softmax_cross_entropy<float>(out.logits, batch.labels);
      backward(loss);
      sgd_step<float>(params, sgd);
      const double task = loss.item();
      tally.add(out.logits, batch.labels, task, 0.0);
      result.steps.push_back({epoch + 1, step++, task, 0.0, task});
    }
    emit(result, cfg, tally.record(epoch + 1, kNaN));
    const auto val = run_eval(model, data.val, 256);
    emit(result, cfg, MetricsRecord{epoch + 1, Split::val, val.accuracy.top1, val.accuracy.top5, val.loss, kNaN, kNaN});
    result.top1 = val.accuracy.top1;
    result.top5 = val.accuracy.top5;
  }
  result.final_feature_diff = kNaN;
  model.set_mode(Mode::eval);
  if (cfg.checkpoint_path) model.save(*cfg.checkpoint_path);
  return result;
}

TrainResult train_distill(Model& teacher, Model& student, const DataSplits& data,
                          const TrainConfig& cfg, std::vector<GenerativeBlock>* blocks_out) {
  cfg.validate();
  if (!teacher.frozen()) {
    throw std::invalid_argument("train_distill: teacher must be frozen before distillation");
  }
  check_dataset(student, data.train, "train");
  check_dataset(student, data.val, "val");
  check_dataset(teacher, data.train, "train");

  const auto stages = resolve_stages(student, cfg);
  const auto teacher_sizes = teacher.config().stage_sizes();
  const auto student_sizes = student.config().stage_sizes();
  std::vector<GenerativeBlock> blocks;
  blocks.reserve(stages.size());
  for (std::size_t l = 0; l < stages.size(); ++l) {
    const auto si = stage_index(student, stages[l]);
    const auto ti = stage_index(teacher, stages[l]);
    if (teacher_sizes[ti] != student_sizes[si]) {
      throw ShapeError("stage '" + stages[l] + "': teacher feature is " +
                       std::to_string(teacher_sizes[ti]) + "x" + std::to_string(teacher_sizes[ti]) +
                       " but student feature is " + std::to_string(student_sizes[si]) + "x" +
                       std::to_string(student_sizes[si]) + "; only channels can be aligned");
    }
    blocks.emplace_back(student.config().stages[si].channels, teacher.config().stages[ti].channels,
                        cfg.block, derive_seed({cfg.seed, 0x67656eULL, l}),
                        "generator." + stages[l]);
  }
  std::vector<GenerativeBlock*> block_ptrs;
  auto params = student.parameters();
  for (auto& b : blocks) {
    block_ptrs.push_back(&b);
    for (auto* p : b.parameters()) params.push_back(p);
  }

  // Probe batch: the first validation batch, fixed for the whole run.
  Tensor probe;
  {
    auto it = batches(data.val, cfg.batch_size);
    Batch first;
    it.next(first);
    probe = first.images;
  }
  const auto& tracked_stage = stages.back();
  auto feature_diff = [&] {
    return track_feature_difference(teacher, student, blocks.back().align_layer(), probe,
                                    tracked_stage);
  };

  TrainResult result;
  {
    const auto initial = run_eval(student, data.val, 256);
    emit(result, cfg, MetricsRecord{0, Split::val, initial.accuracy.top1, initial.accuracy.top5,
                              initial.loss, kNaN, feature_diff()});
  }
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    student.set_mode(Mode::train);
    const SgdOptions sgd{cfg.lr_at(epoch), cfg.momentum, cfg.weight_decay};
    EpochTally tally;
    auto it = batches(data.train, cfg.batch_size, cfg.seed, epoch, cfg.flip);
    Batch batch;
    while (it.next(batch)) {
      auto s_out = student.forward(batch.images);
      ForwardResult t_out;
      {
        NoGradGuard no_grad;
        t_out = teacher.forward(batch.images);
      }
      auto task = softmax_cross_entropy<float>(s_out.logits, batch.labels);
      if (cfg.logit_kd) {
        task = add(task, scale(kd_logit_loss<float>(s_out.logits, t_out.logits,
                                                    cfg.logit_kd->temperature),
                               static_cast<float>(cfg.logit_kd->weight)));
      }
      std::vector<Tensor> s_feats, t_feats;
      for (const auto& name : stages) {
        s_feats.push_back(s_out.feature(name));
        t_feats.push_back(t_out.feature(name));
      }
      Tensor dis;
      if (cfg.loss == DistillLoss::mgd) {
        dis = mgd_loss<float>(s_feats, t_feats, block_ptrs, cfg.mask, step, cfg.mean_normalize);
      } else {
        for (std::size_t l = 0; l < stages.size(); ++l) {
          auto term = mimic_loss(s_feats[l], t_feats[l], blocks[l].align_layer());
          if (cfg.mean_normalize) {
            term = scale(term, 1.0f / static_cast<float>(t_feats[l].size() / t_feats[l].dim(0)));
          }
          dis = dis.defined() ? add(dis, term) : term;
        }
      }
      auto total = total_loss(task, dis, cfg.alpha);
      backward(total);
      sgd_step<float>(params, sgd);
      const double task_value = task.item();
      const double dis_value = dis.item();
      tally.add(s_out.logits, batch.labels, task_value, dis_value);
      result.steps.push_back({epoch + 1, step++, task_value, dis_value, total.item()});
    }
    const double diff = feature_diff();
    emit(result, cfg, tally.record(epoch + 1, diff));
    const auto val = run_eval(student, data.val, 256);
    emit(result, cfg, MetricsRecord{epoch + 1, Split::val, val.accuracy.top1, val.accuracy.top5, val.loss, kNaN, diff});
    result.top1 = val.accuracy.top1;
    result.top5 = val.accuracy.top5;
    result.final_feature_diff = diff;
  }
  student.set_mode(Mode::eval);
  if (cfg.checkpoint_path) student.save(*cfg.checkpoint_path);
  if (blocks_out) *blocks_out = std::move(blocks);
  return result;
}

std::string format_metrics_csv(std::span<const MetricsRecord> records) {
  std::ostringstream out;
  out << kMetricsHeader << '\n';
  for (const auto& r : records) {
    out << r.epoch << ',' << (r.split == Split::train ? "train" : "val") << ','
        << format_value(r.top1) << ',' << format_value(r.top5) << ',' << format_value(r.loss_task)
        << ',' << format_value(r.loss_dis) << ',' << format_value(r.feature_diff) << '\n';
  }
  return out.str();
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRecord> records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << format_metrics_csv(records);
}

}  // namespace mgd
