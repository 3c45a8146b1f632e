#include "mgd/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace mgd {
namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

double parse_double(const std::string& key, const std::string& value) {
  double out = 0.0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end || !std::isfinite(out)) {
    throw ConfigError(key + ": expected a number, got '" + value + "'");
  }
  return out;
}

std::uint64_t parse_uint(const std::string& key, const std::string& value) {
  std::uint64_t out = 0;
  const auto* end = value.data() + value.size();
  const auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + value + "'");
  }
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + value + "'");
}

std::vector<std::string> split_list(std::string value) {
  if (!value.empty() && value.front() == '[' && value.back() == ']') {
    value = value.substr(1, value.size() - 2);
  }
  std::vector<std::string> items;
  std::stringstream in(value);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) items.push_back(item);
  }
  return items;
}

Task parse_task(const std::string& value) {
  static const std::map<std::string, Task> tasks = {
      {"train_teacher", Task::train_teacher},
      {"distill", Task::distill},
      {"self_distill", Task::self_distill},
      {"sweep_lambda", Task::sweep_lambda},
      {"sweep_alpha", Task::sweep_alpha},
      {"ablate_projector", Task::ablate_projector},
      {"ablate_stage", Task::ablate_stage},
      {"ablate_channel_mask", Task::ablate_channel_mask},
  };
  const auto it = tasks.find(value);
  if (it == tasks.end()) throw ConfigError("task: unknown task '" + value + "'");
  return it->second;
}

std::string fmt_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

BackboneConfig adapt(BackboneConfig cfg, const LabeledDataset& data) {
  cfg.in_channels = data.channels();
  cfg.input_size = data.image_size();
  cfg.num_classes = data.class_count;
  cfg.validate();
  return cfg;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

ordered_json number_or_null(double v) { return std::isnan(v) ? ordered_json() : ordered_json(v); }

double json_number(const ordered_json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return kNaN;
  return j[key].get<double>();
}

void write_result_json(const fs::path& dir, const RunSummary& s) {
  ordered_json j;
  j["top1"] = s.top1;
  j["top5"] = s.top5;
  j["final_feature_diff"] = number_or_null(s.feature_diff);
  if (s.baseline_top1) j["baseline_top1"] = *s.baseline_top1;
  if (s.baseline_top5) j["baseline_top5"] = *s.baseline_top5;
  if (s.teacher_hash_before) j["teacher_hash_before"] = hex64(*s.teacher_hash_before);
  if (s.teacher_hash_after) j["teacher_hash_after"] = hex64(*s.teacher_hash_after);
  write_text(dir / "result.json", j.dump(2) + "\n");
}

/// Serializes writes from concurrently running members.
struct Logger {
  std::ostream& out;
  std::mutex mu;
  void line(const std::string& text) {
    std::lock_guard lock(mu);
    out << text << '\n' << std::flush;
  }
};

std::function<void(const MetricsRecord&)> progress(Logger& log, const std::string& label) {
  return [&log, label](const MetricsRecord& r) {
    char buf[256];
    if (r.split == Split::train) {
      std::snprintf(buf, sizeof buf, "[%s] epoch %zu train top1=%.2f loss_task=%.4f loss_dis=%.4g",
                    label.c_str(), r.epoch, r.top1, r.loss_task, r.loss_dis);
    } else {
      std::snprintf(buf, sizeof buf, "[%s] epoch %zu val   top1=%.2f top5=%.2f feature_diff=%.4g",
                    label.c_str(), r.epoch, r.top1, r.top5, r.feature_diff);
    }
    log.line(buf);
  };
}

void write_run_outputs(const fs::path& dir, const TrainResult& result,
                       const std::string& metrics_name = "metrics.csv") {
  write_metrics_csv(dir / metrics_name, result.metrics);
  write_text(dir / (metrics_name == "metrics.csv" ? "curves.svg"
                                                  : fs::path(metrics_name).stem().string() + ".svg"),
             render_curves_svg(result.metrics));
}

/// Baseline training of `backbone`; writes its checkpoint to `checkpoint`.
TrainResult train_plain(const ExperimentConfig& cfg, const LoadedData& data,
                        const BackboneConfig& backbone, const fs::path& checkpoint, Logger& log,
                        const std::string& label) {
  auto model = build_backbone(backbone, cfg.model_seed());
  auto train = cfg.train_config();
  train.checkpoint_path = checkpoint;
  train.on_record = progress(log, label);
  return train_baseline(model, {data.train, data.val}, train);
}

RunSummary distill_from(const ExperimentConfig& cfg, const LoadedData& data,
                        const BackboneConfig& teacher_cfg, const fs::path& teacher_ckpt,
                        Logger& log, const std::string& label) {
  auto teacher = build_backbone(teacher_cfg, cfg.model_seed());
  teacher.load(teacher_ckpt);
  freeze(teacher);
  const auto file_before = file_hash(teacher_ckpt);
  const auto state_before = teacher.state_hash();

  auto student = build_backbone(cfg.student_backbone(data.train), cfg.model_seed());
  auto train = cfg.train_config();
  train.checkpoint_path = cfg.out_dir / "student.mgdc";
  train.on_record = progress(log, label);
  const auto result = train_distill(teacher, student, {data.train, data.val}, train);

  if (teacher.state_hash() != state_before || !teacher.frozen()) {
    throw std::runtime_error("teacher weights changed during distillation");
  }
  write_run_outputs(cfg.out_dir, result);
  RunSummary summary{result.top1, result.top5, result.final_feature_diff, {}, {}, file_before,
                     file_hash(teacher_ckpt)};
  return summary;
}

struct Member {
  std::string name;
  ExperimentConfig config;
};

std::vector<Member> plan_members(const ExperimentConfig& cfg, const BackboneConfig& student) {
  auto base = cfg;
  base.task = Task::distill;
  base.sweep_values.clear();
  base.parallel = 1;
  base.given.erase("sweep_values");
  base.given.insert({"teacher_config", "teacher_checkpoint"});
  std::vector<Member> members;
  auto add = [&](std::string name, const std::function<void(ExperimentConfig&)>& edit) {
    auto m = base;
    edit(m);
    m.out_dir = cfg.out_dir / name;
    members.push_back({std::move(name), std::move(m)});
  };
  switch (cfg.task) {
    case Task::sweep_lambda:
      for (double v : cfg.sweep_values) {
        add("lambda_" + fmt_number(v), [&](ExperimentConfig& m) {
          if (m.train.mask.mode == MaskMode::channel) m.beta = v;
          else m.lambda = v;
        });
      }
      break;
    case Task::sweep_alpha:
      for (double v : cfg.sweep_values) {
        add("alpha_" + fmt_number(v), [&](ExperimentConfig& m) { m.train.alpha = v; });
      }
      break;
    case Task::ablate_projector:
      for (int depth : {1, 2, 3}) {
        for (int kernel : {3, 5}) {
          add("depth" + std::to_string(depth) + "_kernel" + std::to_string(kernel),
              [&](ExperimentConfig& m) { m.train.block = {depth, kernel}; });
        }
      }
      break;
    case Task::ablate_stage: {
      auto stages = cfg.train.stages;
      if (stages.size() < 2) {
        stages.clear();
        for (std::size_t i = 0; i < student.stages.size(); ++i)
          stages.push_back("stage" + std::to_string(i + 1));
      }
      for (const auto& s : stages) {
        add(s, [&](ExperimentConfig& m) { m.train.stages = {s}; });
      }
      std::string combined = "stages";
      for (std::size_t i = 0; i < stages.size(); ++i)
        combined += (i ? "+" : "_") + stages[i].substr(5);
      add(combined, [&](ExperimentConfig& m) { m.train.stages = stages; });
      break;
    }
    case Task::ablate_channel_mask:
      add("spatial_lambda" + fmt_number(cfg.lambda),
          [](ExperimentConfig& m) { m.train.mask.mode = MaskMode::spatial; });
      add("channel_beta" + fmt_number(cfg.beta),
          [](ExperimentConfig& m) { m.train.mask.mode = MaskMode::channel; });
      break;
    default:
      break;
  }
  return members;
}

RunSummary run_members(const ExperimentConfig& cfg, const LoadedData& data, Logger& log) {
  fs::create_directories(cfg.out_dir);
  const auto student = cfg.student_backbone(data.train);
  std::vector<fs::path> compare_dirs;

  // The teacher: given, or the student architecture trained without a teacher.
  fs::path teacher_ckpt;
  std::string teacher_config = cfg.teacher_config;
  if (cfg.teacher_checkpoint) {
    teacher_ckpt = *cfg.teacher_checkpoint;
  } else {
    const auto dir = cfg.out_dir / "baseline";
    fs::create_directories(dir);
    teacher_ckpt = dir / "teacher.mgdc";
    teacher_config = cfg.student_config;
    const auto result = train_plain(cfg, data, student, teacher_ckpt, log, "baseline");
    write_run_outputs(dir, result);
    write_result_json(dir, {result.top1, result.top5, kNaN, {}, {}, {}, {}});
    compare_dirs.push_back(dir);
  }

  auto members = plan_members(cfg, student);
  for (auto& m : members) {
    m.config.teacher_checkpoint = teacher_ckpt;
    m.config.teacher_config = teacher_config;
    m.config.validate();
    compare_dirs.push_back(m.config.out_dir);
  }

  std::vector<RunSummary> summaries(members.size());
  std::vector<std::exception_ptr> failures(members.size());
  auto run_one = [&](std::size_t i) {
    try {
      const auto& m = members[i];
      fs::create_directories(m.config.out_dir);
      const auto teacher = adapt(BackboneConfig::parse(m.config.teacher_config), data.train);
      summaries[i] = distill_from(m.config, data, teacher, teacher_ckpt, log, m.name);
      write_result_json(m.config.out_dir, summaries[i]);
    } catch (...) {
      failures[i] = std::current_exception();
    }
  };
  const auto workers = std::min<std::size_t>(std::max<std::size_t>(cfg.parallel, 1), members.size());
  if (workers <= 1) {
    for (std::size_t i = 0; i < members.size(); ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (auto i = next++; i < members.size(); i = next++) run_one(i);
      });
    }
    for (auto& t : pool) t.join();
  }
  for (auto& f : failures)
    if (f) std::rethrow_exception(f);

  compare_runs(compare_dirs, cfg.out_dir / "compare.csv");
  RunSummary best;
  best.top1 = -1.0;
  for (const auto& s : summaries)
    if (s.top1 > best.top1) best = s;
  return best;
}

}  // namespace

std::string task_name(Task task) {
  switch (task) {
    case Task::train_teacher: return "train_teacher";
    case Task::distill: return "distill";
    case Task::self_distill: return "self_distill";
    case Task::sweep_lambda: return "sweep_lambda";
    case Task::sweep_alpha: return "sweep_alpha";
    case Task::ablate_projector: return "ablate_projector";
    case Task::ablate_stage: return "ablate_stage";
    case Task::ablate_channel_mask: return "ablate_channel_mask";
  }
  return "?";
}

LoadedData load_data(const DatasetSpec& spec) {
  LoadedData out;
  switch (spec.kind) {
    case DatasetKind::synthetic: {
      SyntheticOptions opt;
      opt.classes = spec.classes;
      opt.size = spec.image_size;
      opt.noise = spec.noise;
      opt.jitter = spec.jitter;
      opt.distractors = spec.distractors;
      opt.prototype_seed = derive_seed({spec.data_seed, 0x70726f74ULL});
      const auto train_n = spec.train_size ? spec.train_size : 5000;
      const auto val_n = spec.val_size ? spec.val_size : 1000;
      opt.per_class = std::max<std::size_t>(1, train_n / spec.classes);
      opt.seed = derive_seed({spec.data_seed, 1});
      out.train = make_synthetic(opt, std::nullopt, Split::train);
      opt.per_class = std::max<std::size_t>(1, val_n / spec.classes);
      opt.seed = derive_seed({spec.data_seed, 2});
      out.val = make_synthetic(opt, out.train.normalization, Split::val);
      return out;
    }
    case DatasetKind::cifar10: {
      std::vector<fs::path> train_files;
      for (int i = 1; i <= 5; ++i)
        train_files.push_back(spec.data_dir / ("data_batch_" + std::to_string(i) + ".bin"));
      const std::vector<fs::path> val_files{spec.data_dir / "test_batch.bin"};
      out.train = load_cifar_binary(train_files, std::nullopt, Split::train);
      out.val = load_cifar_binary(val_files, out.train.normalization, Split::val);
      break;
    }
    case DatasetKind::mnist: {
      const auto& d = spec.data_dir;
      out.train = load_idx(d / "train-images-idx3-ubyte", d / "train-labels-idx1-ubyte",
                           std::nullopt, Split::train);
      out.val = load_idx(d / "t10k-images-idx3-ubyte", d / "t10k-labels-idx1-ubyte",
                         out.train.normalization, Split::val);
      break;
    }
  }
  if (spec.train_size && spec.train_size < out.train.size()) {
    out.train = out.train.balanced_prefix(spec.train_size);
  }
  if (spec.val_size && spec.val_size < out.val.size()) {
    out.val = out.val.balanced_prefix(spec.val_size);
  }
  return out;
}

ExperimentConfig ExperimentConfig::parse(const std::string& text) {
  ExperimentConfig cfg;
  std::optional<double> kd_temperature, kd_weight;
  std::istringstream in(text);
  std::string raw;
  std::size_t line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const auto line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    const auto key = trim(line.substr(0, eq));
    const auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (!cfg.given.insert(key).second) throw ConfigError(key + ": given more than once");
    if (value.empty()) throw ConfigError(key + ": missing value");

    auto& t = cfg.train;
    auto& d = cfg.dataset;
    if (key == "task") cfg.task = parse_task(value);
    else if (key == "teacher_config") cfg.teacher_config = value;
    else if (key == "student_config") cfg.student_config = value;
    else if (key == "teacher_checkpoint") cfg.teacher_checkpoint = fs::path(value);
    else if (key == "dataset") {
      if (value == "synthetic") d.kind = DatasetKind::synthetic;
      else if (value == "cifar10") d.kind = DatasetKind::cifar10;
      else if (value == "mnist") d.kind = DatasetKind::mnist;
      else throw ConfigError("dataset: expected synthetic, cifar10 or mnist, got '" + value + "'");
    }
    else if (key == "data_dir") d.data_dir = value;
    else if (key == "train_size") d.train_size = parse_uint(key, value);
    else if (key == "val_size") d.val_size = parse_uint(key, value);
    else if (key == "image_size") d.image_size = parse_uint(key, value);
    else if (key == "classes") d.classes = parse_uint(key, value);
    else if (key == "noise") d.noise = parse_double(key, value);
    else if (key == "jitter") d.jitter = parse_uint(key, value);
    else if (key == "distractors") d.distractors = parse_uint(key, value);
    else if (key == "data_seed") d.data_seed = parse_uint(key, value);
    else if (key == "alpha") t.alpha = parse_double(key, value);
    else if (key == "lambda") cfg.lambda = parse_double(key, value);
    else if (key == "beta") cfg.beta = parse_double(key, value);
    else if (key == "mask_mode") {
      if (value == "spatial") t.mask.mode = MaskMode::spatial;
      else if (value == "channel") t.mask.mode = MaskMode::channel;
      else throw ConfigError("mask_mode: expected spatial or channel, got '" + value + "'");
    }
    else if (key == "stages") t.stages = split_list(value);
    else if (key == "epochs") t.epochs = parse_uint(key, value);
    else if (key == "batch_size") t.batch_size = parse_uint(key, value);
    else if (key == "lr_init") t.lr_init = parse_double(key, value);
    else if (key == "lr_decay_every") t.lr_decay_every = parse_uint(key, value);
    else if (key == "lr_decay_factor") t.lr_decay_factor = parse_double(key, value);
    else if (key == "momentum") t.momentum = parse_double(key, value);
    else if (key == "weight_decay") t.weight_decay = parse_double(key, value);
    else if (key == "seed") t.seed = parse_uint(key, value);
    else if (key == "out_dir") cfg.out_dir = value;
    else if (key == "logit_kd_temperature") kd_temperature = parse_double(key, value);
    else if (key == "logit_kd_weight") kd_weight = parse_double(key, value);
    else if (key == "sweep_values") {
      cfg.sweep_values.clear();
      for (const auto& item : split_list(value)) cfg.sweep_values.push_back(parse_double(key, item));
    }
    else if (key == "loss") {
      if (value == "mgd") t.loss = DistillLoss::mgd;
      else if (value == "mimic") t.loss = DistillLoss::mimic;
      else throw ConfigError("loss: expected mgd or mimic, got '" + value + "'");
    }
    else if (key == "projector_depth") t.block.depth = static_cast<int>(parse_uint(key, value));
    else if (key == "projector_kernel") t.block.kernel = static_cast<int>(parse_uint(key, value));
    else if (key == "mean_normalize") t.mean_normalize = parse_bool(key, value);
    else if (key == "flip") t.flip = parse_bool(key, value);
    else if (key == "parallel") cfg.parallel = parse_uint(key, value);
    else throw ConfigError(key + ": unknown key");
  }
  if (kd_temperature || kd_weight) {
    cfg.train.logit_kd = LogitKd{kd_temperature.value_or(4.0), kd_weight.value_or(1.0)};
  }
  cfg.validate();
  return cfg;
}

ExperimentConfig ExperimentConfig::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse(buf.str());
}

void ExperimentConfig::validate() const {
  auto require = [&](const char* key) {
    if (!given.count(key)) {
      throw ConfigError(std::string(key) + ": required for task " + task_name(task));
    }
  };
  require("task");
  require("out_dir");
  switch (task) {
    case Task::train_teacher:
      require("teacher_config");
      break;
    case Task::distill:
      require("teacher_config");
      require("student_config");
      require("teacher_checkpoint");
      break;
    case Task::self_distill:
      require("student_config");
      break;
    default:
      require("student_config");
      if (teacher_checkpoint) require("teacher_config");
      break;
  }
  if (task == Task::sweep_lambda || task == Task::sweep_alpha) {
    require("sweep_values");
    if (sweep_values.empty()) throw ConfigError("sweep_values: empty list");
  } else if (given.count("sweep_values")) {
    throw ConfigError("sweep_values: only used by sweep tasks");
  }
  if (dataset.kind != DatasetKind::synthetic) require("data_dir");
  if (dataset.kind == DatasetKind::synthetic) {
    if (dataset.classes < 2) throw ConfigError("classes: must be >= 2");
    if (dataset.image_size < 4) throw ConfigError("image_size: must be >= 4");
    if (dataset.noise < 0.0) throw ConfigError("noise: must be >= 0");
  }
  if (!(lambda >= 0.0 && lambda < 1.0)) throw ConfigError("lambda: must lie in [0, 1)");
  if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("beta: must lie in [0, 1)");
  for (double v : sweep_values) {
    if (task == Task::sweep_lambda && !(v >= 0.0 && v < 1.0)) {
      throw ConfigError("sweep_values: mask ratio " + fmt_number(v) + " outside [0, 1)");
    }
    if (task == Task::sweep_alpha && v < 0.0) {
      throw ConfigError("sweep_values: alpha " + fmt_number(v) + " is negative");
    }
  }
  if (parallel < 1) throw ConfigError("parallel: must be >= 1");
  for (const auto& s : train.stages) {
    if (s.rfind("stage", 0) != 0 || s.size() == 5) {
      throw ConfigError("stages: '" + s + "' is not a stage name (stage1, stage2, ...)");
    }
  }
  train_config().validate();
  try {
    if (given.count("teacher_config")) BackboneConfig::parse(teacher_config).validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("teacher_config: ") + e.what());
  }
  try {
    if (given.count("student_config")) BackboneConfig::parse(student_config).validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("student_config: ") + e.what());
  }
}

BackboneConfig ExperimentConfig::teacher_backbone(const LabeledDataset& data) const {
  return adapt(BackboneConfig::parse(teacher_config), data);
}

BackboneConfig ExperimentConfig::student_backbone(const LabeledDataset& data) const {
  return adapt(BackboneConfig::parse(student_config), data);
}

std::uint64_t ExperimentConfig::model_seed() const {
  return derive_seed({train.seed, 0x6d6f64656cULL});
}

TrainConfig ExperimentConfig::train_config() const {
  auto t = train;
  t.mask.ratio = t.mask.mode == MaskMode::spatial ? lambda : beta;
  t.mask.rng_seed = derive_seed({train.seed, 0x6d61736bULL});
  return t;
}

RunSummary run_experiment(const ExperimentConfig& cfg, std::ostream& out) {
  cfg.validate();
  Logger log{out, {}};
  const auto data = load_data(cfg.dataset);
  log.line("task " + task_name(cfg.task) + ": " + std::to_string(data.train.size()) +
           " train / " + std::to_string(data.val.size()) + " val images of " +
           shape_str({data.train.channels(), data.train.image_size(), data.train.image_size()}));
  fs::create_directories(cfg.out_dir);

  RunSummary summary;
  switch (cfg.task) {
    case Task::train_teacher: {
      const auto result = train_plain(cfg, data, cfg.teacher_backbone(data.train),
                                      cfg.out_dir / "teacher.mgdc", log, "teacher");
      write_run_outputs(cfg.out_dir, result);
      summary = {result.top1, result.top5, kNaN, {}, {}, {}, {}};
      break;
    }
    case Task::distill:
      summary = distill_from(cfg, data, cfg.teacher_backbone(data.train), *cfg.teacher_checkpoint,
                             log, "student");
      break;
    case Task::self_distill: {
      const auto backbone = cfg.student_backbone(data.train);
      fs::path teacher_ckpt;
      std::optional<TrainResult> baseline;
      if (cfg.teacher_checkpoint) {
        teacher_ckpt = *cfg.teacher_checkpoint;
      } else {
        teacher_ckpt = cfg.out_dir / "teacher.mgdc";
        baseline = train_plain(cfg, data, backbone, teacher_ckpt, log, "teacher");
        write_run_outputs(cfg.out_dir, *baseline, "teacher_metrics.csv");
      }
      summary = distill_from(cfg, data, backbone, teacher_ckpt, log, "student");
      if (baseline) {
        summary.baseline_top1 = baseline->top1;
        summary.baseline_top5 = baseline->top5;
      }
      break;
    }
    default:
      return run_members(cfg, data, log);
  }
  write_result_json(cfg.out_dir, summary);
  return summary;
}

int run_config_file(const fs::path& path, std::ostream& log, std::ostream& err) {
  try {
    const auto cfg = ExperimentConfig::load(path);
    run_experiment(cfg, log);
    return 0;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 3;
  }
}

std::vector<CompareRow> collect_results(std::span<const fs::path> run_dirs,
                                        std::vector<std::string>& errors) {
  std::vector<CompareRow> rows;
  for (const auto& dir : run_dirs) {
    const auto file = dir / "result.json";
    std::ifstream in(file);
    if (!in) {
      errors.push_back(dir.string() + ": missing result.json");
      continue;
    }
    try {
      const auto j = ordered_json::parse(in);
      auto name = dir.filename().string();
      if (name.empty()) name = dir.parent_path().filename().string();
      rows.push_back({name, json_number(j, "top1"), json_number(j, "top5"),
                      json_number(j, "final_feature_diff")});
    } catch (const std::exception& e) {
      errors.push_back(dir.string() + ": unreadable result.json (" + e.what() + ")");
    }
  }
  std::stable_sort(rows.begin(), rows.end(),
                   [](const CompareRow& a, const CompareRow& b) { return a.top1 > b.top1; });
  return rows;
}

std::string format_compare_csv(std::span<const CompareRow> rows) {
  std::string out = std::string(kCompareHeader) + "\n";
  auto num = [](double v) {
    if (std::isnan(v)) return std::string("nan");
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const auto& r : rows) {
    out += r.name + "," + num(r.top1) + "," + num(r.top5) + "," + num(r.feature_diff) + "\n";
  }
  return out;
}

std::vector<std::string> compare_runs(std::span<const fs::path> run_dirs,
                                      const fs::path& out_path) {
  std::vector<std::string> errors;
  const auto rows = collect_results(run_dirs, errors);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  write_text(out_path, format_compare_csv(rows));
  return errors;
}

std::string render_curves_svg(std::span<const MetricsRecord> records) {
  struct Series {
    const char* title;
    Split split;
    double MetricsRecord::*field;
  };
  const Series series[] = {
      {"loss_task (train)", Split::train, &MetricsRecord::loss_task},
      {"loss_dis (train)", Split::train, &MetricsRecord::loss_dis},
      {"feature_diff", Split::val, &MetricsRecord::feature_diff},
      {"top1 (val)", Split::val, &MetricsRecord::top1},
  };
  constexpr double kW = 320, kH = 200, kPad = 36;
  std::ostringstream svg;
  svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << 2 * kW << "\" height=\""
      << 2 * kH << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  svg << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  char buf[128];
  for (std::size_t p = 0; p < 4; ++p) {
    const auto& s = series[p];
    const double ox = static_cast<double>(p % 2) * kW, oy = static_cast<double>(p / 2) * kH;
    std::vector<std::pair<double, double>> pts;
    for (const auto& r : records) {
      const double v = r.*s.field;
      if (r.split == s.split && std::isfinite(v)) pts.emplace_back(static_cast<double>(r.epoch), v);
    }
    svg << "<g>\n<text x=\"" << ox + kPad << "\" y=\"" << oy + 16 << "\">" << s.title
        << "</text>\n";
    std::snprintf(buf, sizeof buf, "<rect x=\"%g\" y=\"%g\" width=\"%g\" height=\"%g\"", ox + kPad,
                  oy + 24, kW - 1.5 * kPad, kH - 24 - kPad);
    svg << buf << " fill=\"none\" stroke=\"#999\"/>\n";
    if (pts.empty()) {
      svg << "<text x=\"" << ox + kW / 2 - 10 << "\" y=\"" << oy + kH / 2 << "\">n/a</text>\n</g>\n";
      continue;
    }
    double x0 = pts.front().first, x1 = x0, y0 = pts.front().second, y1 = y0;
    for (const auto& [x, y] : pts) {
      x0 = std::min(x0, x), x1 = std::max(x1, x), y0 = std::min(y0, y), y1 = std::max(y1, y);
    }
    if (x1 == x0) x1 = x0 + 1;
    if (y1 == y0) y1 = y0 + 1;
    const double left = ox + kPad, top = oy + 24, width = kW - 1.5 * kPad, height = kH - 24 - kPad;
    svg << "<polyline fill=\"none\" stroke=\"#1f5fa8\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : pts) {
      std::snprintf(buf, sizeof buf, "%.1f,%.1f ", left + (x - x0) / (x1 - x0) * width,
                    top + (1.0 - (y - y0) / (y1 - y0)) * height);
      svg << buf;
    }
    svg << "\"/>\n";
    std::snprintf(buf, sizeof buf, "%.4g", y1);
    svg << "<text x=\"" << ox + 2 << "\" y=\"" << top + 8 << "\">" << buf << "</text>\n";
    std::snprintf(buf, sizeof buf, "%.4g", y0);
    svg << "<text x=\"" << ox + 2 << "\" y=\"" << top + height << "\">" << buf << "</text>\n";
    svg << "<text x=\"" << left << "\" y=\"" << top + height + 14 << "\">epoch " << x0
        << "</text>\n<text x=\"" << left + width - 40 << "\" y=\"" << top + height + 14
        << "\">epoch " << x1 << "</text>\n</g>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

std::string encode_heatmap_pgm(const Tensor& feature, std::size_t index) {
  if (feature.rank() != 4) throw ShapeError("heatmap: expected an NCHW feature");
  const auto c = feature.dim(1), h = feature.dim(2), w = feature.dim(3);
  if (index >= feature.dim(0)) throw std::out_of_range("heatmap: sample index out of range");
  std::vector<double> map(h * w, 0.0);
  const float* base = feature.data().data() + index * c * h * w;
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h * w; ++i) map[i] += std::abs(static_cast<double>(base[ch * h * w + i]));
  for (auto& v : map) v /= static_cast<double>(c);
  const auto [lo, hi] = std::minmax_element(map.begin(), map.end());
  const double min = *lo, range = *hi - *lo;
  std::string out = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  for (double v : map) {
    const double scaled = range > 0.0 ? std::round((v - min) / range * 255.0) : 128.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(scaled)));
  }
  return out;
}

void dump_feature_heatmap(const fs::path& checkpoint, const fs::path& config_path,
                          std::size_t image_index, const std::string& stage,
                          const fs::path& out_path) {
  const auto cfg = ExperimentConfig::load(config_path);
  const auto data = load_data(cfg.dataset);
  if (image_index >= data.val.size()) {
    throw std::out_of_range("image index " + std::to_string(image_index) +
                            " beyond the validation split of " + std::to_string(data.val.size()));
  }
  std::optional<Model> model;
  std::string first_error;
  for (const auto& text : {cfg.student_config, cfg.teacher_config}) {
    try {
      auto m = build_backbone(adapt(BackboneConfig::parse(text), data.train), 0);
      m.load(checkpoint);
      model.emplace(std::move(m));
      break;
    } catch (const std::exception& e) {
      if (first_error.empty()) first_error = e.what();
    }
  }
  if (!model) throw CheckpointError("checkpoint does not match the config: " + first_error);
  const auto stages = model->config().stages.size();
  bool known = false;
  for (std::size_t i = 0; i < stages; ++i) known |= stage == "stage" + std::to_string(i + 1);
  if (!known) {
    throw ConfigError("stage: unknown stage '" + stage + "' (model has " + std::to_string(stages) +
                      " stages)");
  }
  model->set_mode(Mode::eval);
  NoGradGuard no_grad;
  const auto out = model->forward(data.val.slice(image_index, 1).images);
  if (out_path.has_parent_path()) fs::create_directories(out_path.parent_path());
  write_text(out_path, encode_heatmap_pgm(out.feature(stage), 0));
}

}  // namespace mgd
