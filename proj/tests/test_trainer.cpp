#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mgd/trainer.hpp"
#include "support.hpp"

using namespace mgd;

namespace {

struct Fixture {
  LabeledDataset train, val;
};

Fixture dataset(std::size_t classes, std::size_t per_class, double noise, std::uint64_t seed = 1) {
  SyntheticOptions o;
  o.classes = classes;
  o.per_class = per_class;
  o.size = 8;
  o.noise = noise;
  o.seed = seed;
  o.prototype_seed = 77;
  Fixture f;
  f.train = make_synthetic(o);
  o.seed = seed + 1000;
  o.per_class = std::max<std::size_t>(per_class / 3, 2);
  f.val = make_synthetic(o, f.train.normalization, Split::val);
  return f;
}

BackboneConfig tiny(std::size_t classes) {
  auto c = BackboneConfig::parse("tiny");
  c.input_size = 8;
  c.num_classes = classes;
  return c;
}

TrainConfig quick(std::size_t epochs = 2) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 16;
  cfg.lr_init = 0.05;
  cfg.lr_decay_every = 2;
  cfg.seed = 3;
  cfg.mask.rng_seed = 4;
  return cfg;
}

Model trained_teacher(const Fixture& f, std::size_t classes) {
  auto t = build_backbone(tiny(classes), 21);
  train_baseline(t, {f.train, f.val}, quick(2));
  freeze(t);
  return t;
}

}  // namespace

TEST(Schedule, StepDecay) {
  TrainConfig cfg;
  cfg.lr_init = 0.1;
  cfg.lr_decay_factor = 0.1;
  cfg.lr_decay_every = 12;
  EXPECT_DOUBLE_EQ(cfg.lr_at(0), 0.1);
  EXPECT_DOUBLE_EQ(cfg.lr_at(11), 0.1);
  EXPECT_NEAR(cfg.lr_at(12), 0.01, 1e-15);
  EXPECT_NEAR(cfg.lr_at(29), 0.001, 1e-15);
}

TEST(Config, Validation) {
  TrainConfig cfg;
  EXPECT_NO_THROW(cfg.validate());
  cfg.epochs = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.batch_size = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.lr_init = 0;
  EXPECT_THROW(cfg.validate(), ConfigError);
  cfg = {};
  cfg.mask.ratio = 1.0;
  EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Accuracy, MatchesArgsortOracle) {
  Rng rng(5);
  const std::size_t n = 200, k = 10;
  std::vector<float> logits(n * k);
  std::vector<std::int32_t> labels(n);
  for (auto& v : logits) v = static_cast<float>(rng.uniform(-2, 2));
  for (auto& l : labels) l = static_cast<std::int32_t>(rng.below(k));
  double top1 = 0, top5 = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::size_t> idx(k);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    std::stable_sort(idx.begin(), idx.end(),
                     [&](auto a, auto b) { return logits[i * k + a] > logits[i * k + b]; });
    const auto pos = std::find(idx.begin(), idx.end(), static_cast<std::size_t>(labels[i])) - idx.begin();
    top1 += pos < 1;
    top5 += pos < 5;
  }
  const auto acc = accuracy_from_logits(logits, k, labels);
  EXPECT_DOUBLE_EQ(acc.top1, 100.0 * top1 / n);
  EXPECT_DOUBLE_EQ(acc.top5, 100.0 * top5 / n);
  EXPECT_LE(acc.top1, acc.top5);
}

TEST(Accuracy, ConstantPredictionAndSmallK) {
  std::vector<float> logits(100 * 10, 0.0f);
  std::vector<std::int32_t> labels(100);
  for (std::size_t i = 0; i < 100; ++i) {
    labels[i] = static_cast<std::int32_t>(i % 10);
    logits[i * 10 + 3] = 5.0f;
  }
  EXPECT_DOUBLE_EQ(accuracy_from_logits(logits, 10, labels).top1, 10.0);
  const std::vector<float> three{0.1f, 0.5f, 0.2f, 1.0f, 0.0f, 0.0f};
  const std::vector<std::int32_t> l3{0, 2};
  const auto acc = accuracy_from_logits(three, 3, l3);
  EXPECT_DOUBLE_EQ(acc.top1, 0.0);
  EXPECT_DOUBLE_EQ(acc.top5, 100.0);
  EXPECT_THROW(accuracy_from_logits(three, 4, l3), ShapeError);
}

TEST(Evaluate, RejectsEmptyDataset) {
  auto f = dataset(3, 4, 0.0);
  auto m = build_backbone(tiny(3), 0);
  EXPECT_THROW(evaluate(m, f.train.slice(0, 0)), std::invalid_argument);
  const auto acc = evaluate(m, f.val);
  EXPECT_GE(acc.top1, 0.0);
  EXPECT_LE(acc.top1, acc.top5);
  EXPECT_LE(acc.top5, 100.0);
}

TEST(Baseline, SeparableSetIsLearnedInTwoEpochs) {
  auto f = dataset(3, 80, 0.0);
  auto m = build_backbone(tiny(3), 1);
  const auto r = train_baseline(m, {f.train, f.val}, quick(2));
  ASSERT_EQ(r.metrics.size(), 5u);  // epoch-0 val + 2 x (train, val)
  const auto& last_train = r.metrics[3];
  EXPECT_EQ(last_train.split, Split::train);
  EXPECT_GT(last_train.top1, 90.0);
  for (const auto& rec : r.metrics) {
    EXPECT_GE(rec.top1, 0.0);
    EXPECT_LE(rec.top1, rec.top5);
    EXPECT_LE(rec.top5, 100.0);
    EXPECT_TRUE(std::isnan(rec.feature_diff));
  }
}

TEST(Baseline, RejectsInputSizeMismatch) {
  auto f = dataset(3, 4, 0.0);
  auto c = tiny(3);
  c.input_size = 16;
  auto m = build_backbone(c, 0);
  EXPECT_THROW(train_baseline(m, {f.train, f.val}, quick(1)), ShapeError);
}

TEST(Baseline, DeterministicAndCheckpointed) {
  auto f = dataset(4, 20, 0.3);
  const auto dir = mgd::testing::scratch_dir("trainer_det");
  auto cfg = quick(2);
  cfg.flip = true;
  cfg.checkpoint_path = dir / "a.mgdc";
  auto a = build_backbone(tiny(4), 2);
  const auto ra = train_baseline(a, {f.train, f.val}, cfg);
  cfg.checkpoint_path = dir / "b.mgdc";
  auto b = build_backbone(tiny(4), 2);
  const auto rb = train_baseline(b, {f.train, f.val}, cfg);
  EXPECT_EQ(format_metrics_csv(ra.metrics), format_metrics_csv(rb.metrics));
  EXPECT_EQ(file_hash(dir / "a.mgdc"), file_hash(dir / "b.mgdc"));
  EXPECT_EQ(a.state_hash(), b.state_hash());
}

TEST(Distill, AlphaZeroReproducesBaseline) {
  auto f = dataset(4, 20, 0.3);
  auto teacher = trained_teacher(f, 4);
  auto cfg = quick(2);
  cfg.alpha = 0.0;
  cfg.mask.ratio = 0.5;
  auto base = build_backbone(tiny(4), 9);
  const auto rb = train_baseline(base, {f.train, f.val}, cfg);
  auto student = build_backbone(tiny(4), 9);
  const auto rd = train_distill(teacher, student, {f.train, f.val}, cfg);
  ASSERT_EQ(rb.steps.size(), rd.steps.size());
  for (std::size_t i = 0; i < rb.steps.size(); ++i) EXPECT_EQ(rb.steps[i].loss_task, rd.steps[i].loss_task);
  EXPECT_EQ(base.state_hash(), student.state_hash());
  EXPECT_EQ(rb.top1, rd.top1);
}

TEST(Distill, TeacherUntouchedAndLossDecomposes) {
  auto f = dataset(4, 20, 0.3);
  auto teacher = trained_teacher(f, 4);
  const auto before = teacher.state_hash();
  auto cfg = quick(2);
  cfg.alpha = 0.01;
  cfg.logit_kd = LogitKd{4.0, 0.5};
  auto student = build_backbone(tiny(4), 10);
  std::vector<GenerativeBlock> blocks;
  const auto r = train_distill(teacher, student, {f.train, f.val}, cfg, &blocks);
  EXPECT_EQ(teacher.state_hash(), before);
  EXPECT_TRUE(teacher.frozen());
  ASSERT_EQ(blocks.size(), 1u);
  for (const auto& s : r.steps) {
    const double expected = s.loss_task + cfg.alpha * s.loss_dis;
    EXPECT_LE(std::abs(s.loss_total - expected), 1e-5 * std::abs(expected));
    EXPECT_GT(s.loss_dis, 0.0);
  }
  for (const auto& rec : r.metrics) EXPECT_TRUE(std::isfinite(rec.feature_diff));
  // The exported student holds backbone tensors only.
  for (const auto& t : student.state()) EXPECT_EQ(t.name.find("generator"), std::string::npos);
}

TEST(Distill, PreconditionsRejected) {
  auto f = dataset(3, 8, 0.0);
  auto teacher = build_backbone(tiny(3), 1);
  auto student = build_backbone(tiny(3), 2);
  EXPECT_THROW(train_distill(teacher, student, {f.train, f.val}, quick(1)), std::invalid_argument);
  freeze(teacher);
  auto cfg = quick(1);
  cfg.stages = {"stage9"};
  EXPECT_THROW(train_distill(teacher, student, {f.train, f.val}, cfg), ConfigError);
  // A teacher whose stages have a different spatial schedule.
  auto other = tiny(3);
  other.stages[1].downsample = false;
  auto wide = build_backbone(other, 3);
  freeze(wide);
  cfg.stages = {"stage2"};
  EXPECT_THROW(train_distill(wide, student, {f.train, f.val}, cfg), ShapeError);
  cfg.stages = {"stage1"};  // same size at stage 1: accepted
  EXPECT_NO_THROW(train_distill(wide, student, {f.train, f.val}, cfg));
}

TEST(Distill, ZeroRatioIdentityBlockGradientEqualsMimic) {
  auto f = dataset(3, 8, 0.2);
  auto teacher = trained_teacher(f, 3);
  auto student = build_backbone(tiny(3), 4);
  Batch batch;
  auto it = batches(f.train, 12);
  it.next(batch);
  const auto t_feat = teacher.forward(batch.images).feature("stage3");

  auto grads = [&](bool use_mgd) {
    GenerativeBlock block(32, 32, {1, 3}, 6);
    block.set_identity_projector();
    auto s_feat = student.forward(batch.images).feature("stage3");
    Tensor loss;
    if (use_mgd) {
      const std::vector<Tensor> s{s_feat}, t{t_feat};
      GenerativeBlock* blocks[] = {&block};
      loss = mgd_loss<float>(s, t, blocks, {MaskMode::spatial, 0.0, 1}, 0);
    } else {
      loss = mimic_loss(s_feat, t_feat, block.align_layer());
    }
    backward(loss);
    std::vector<float> out;
    for (auto* p : student.parameters()) {
      out.insert(out.end(), p->tensor.grad().begin(), p->tensor.grad().end());
      p->tensor.zero_grad();
    }
    return out;
  };
  EXPECT_EQ(grads(true), grads(false));
}

TEST(FeatureDifference, ZeroForIdenticalModels) {
  auto f = dataset(3, 8, 0.2);
  auto teacher = trained_teacher(f, 3);
  auto student = build_backbone(tiny(3), 99);
  student.load_state(teacher.state());
  AlignLayer align(32, 32, 1);
  align.set_identity();
  Batch b;
  auto it = batches(f.val, 8);
  it.next(b);
  EXPECT_EQ(track_feature_difference(teacher, student, align, b.images, "stage3"), 0.0);
  AlignLayer random_align(32, 32, 2);
  const double d1 = track_feature_difference(teacher, student, random_align, b.images, "stage3");
  const double d2 = track_feature_difference(teacher, student, random_align, b.images, "stage3");
  EXPECT_GT(d1, 0.0);
  EXPECT_EQ(d1, d2);
}

TEST(FeatureDifference, MimicOnlyTrainingDecreasesIt) {
  auto f = dataset(3, 8, 0.2);
  auto teacher = trained_teacher(f, 3);
  auto student = build_backbone(tiny(3), 5);
  AlignLayer align(32, 32, 3);
  Batch probe;
  auto it = batches(f.val, 16);
  it.next(probe);
  const auto t_feat = teacher.forward(probe.images).feature("stage3");
  std::vector<Parameter*> params = student.parameters();
  for (auto* p : align.parameters()) params.push_back(p);
  std::vector<double> curve{track_feature_difference(teacher, student, align, probe.images, "stage3")};
  for (int epoch = 0; epoch < 8; ++epoch) {
    student.set_mode(Mode::train);
    for (int step = 0; step < 10; ++step) {
      backward(mimic_loss(student.forward(probe.images).feature("stage3"), t_feat, align));
      sgd_step<float>(params, {0.002, 0.0, 0.0});
    }
    curve.push_back(track_feature_difference(teacher, student, align, probe.images, "stage3"));
  }
  for (std::size_t i = 1; i < curve.size(); ++i) EXPECT_LT(curve[i], curve[i - 1]) << "epoch " << i;
}

TEST(MetricsCsv, ExactHeaderAndFormatting) {
  const std::vector<MetricsRecord> rows{
      {0, Split::val, 10.0, 50.0, 2.5, std::nan(""), std::nan("")},
      {1, Split::train, 55.5, 90.25, 1.0, 0.125, 3.0}};
  EXPECT_EQ(format_metrics_csv(rows),
            "epoch,split,top1,top5,loss_task,loss_dis,feature_diff\n"
            "0,val,10.000000,50.000000,2.500000,nan,nan\n"
            "1,train,55.500000,90.250000,1.000000,0.125000,3.000000\n");
}
