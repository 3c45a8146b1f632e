#pragma once

#include <cstdint>
#include <deque>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "mgd/checkpoint.hpp"
#include "mgd/optim.hpp"
#include "mgd/tensor.hpp"

namespace mgd {

/// Config validation failure; the message names the offending field.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class BlockKind { basic_residual, plain };

struct StageSpec {
  std::size_t blocks = 1;
  std::size_t channels = 16;
  bool downsample = false;

  bool operator==(const StageSpec&) const = default;
};

struct BackboneConfig {
  std::size_t in_channels = 3;
  std::size_t input_size = 32;
  std::size_t stem_channels = 16;
  std::vector<StageSpec> stages;
  BlockKind block_kind = BlockKind::basic_residual;
  std::size_t num_classes = 10;

  void validate() const;
  /// Spatial side length of each stage's output for the configured input.
  std::vector<std::size_t> stage_sizes() const;
  std::string describe() const;

  bool operator==(const BackboneConfig&) const = default;

  /// 4-stage residual net, channels 32/64/128/256, 2 blocks per stage.
  static BackboneConfig reference_teacher();
  /// The teacher with halved channels and 1 block per stage.
  static BackboneConfig reference_student();
  /// Parses a preset name ("teacher", "student", "tiny") or an inline
  /// description: `<basic|plain> stem=16 stages=1x16,1x32/2,1x64/2 [classes=10]`.
  static BackboneConfig parse(const std::string& text);
};

struct StageFeature {
  std::string name;
  Tensor value;
};

struct ForwardResult {
  Tensor logits;
  std::vector<StageFeature> features;  // "stage1".."stageL", in order

  const Tensor& feature(const std::string& name) const;
};

enum class Mode { train, eval };

class Model {
 public:
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const BackboneConfig& config() const { return config_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }

  std::vector<Parameter*> parameters();
  std::size_t parameter_count() const;
  const Parameter& parameter(const std::string& name) const;

  ForwardResult forward(const Tensor& batch);

  /// Parameters and batch-norm running statistics, in a fixed order.
  std::vector<NamedTensor> state() const;
  void load_state(std::span<const NamedTensor> tensors);
  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

  /// FNV-1a over every name, shape and value of state().
  std::uint64_t state_hash() const;
  bool frozen() const;

 private:
  friend Model build_backbone(const BackboneConfig& config, std::uint64_t seed);
  Model() = default;

  struct ConvBn {
    Parameter* weight = nullptr;
    Parameter* gamma = nullptr;
    Parameter* beta = nullptr;
    BatchNormStats<float>* stats = nullptr;
    std::size_t stride = 1;
    std::size_t padding = 1;
  };
  struct Block {
    ConvBn first;
    std::optional<ConvBn> second;    // residual blocks only
    std::optional<ConvBn> shortcut;  // residual blocks with a shape change
  };

  Tensor apply(const ConvBn& unit, const Tensor& x);
  Tensor apply(const Block& block, const Tensor& x);

  BackboneConfig config_;
  Mode mode_ = Mode::train;
  std::deque<Parameter> params_;
  std::deque<std::pair<std::string, BatchNormStats<float>>> bn_stats_;
  ConvBn stem_;
  std::vector<std::vector<Block>> stages_;
  Parameter* fc_weight_ = nullptr;
  Parameter* fc_bias_ = nullptr;
};

/// Kaiming-uniform conv weights, BN gamma=1 beta=0, zero biases; fully
/// determined by (config, seed).
Model build_backbone(const BackboneConfig& config, std::uint64_t seed);

ForwardResult forward_with_features(Model& model, const Tensor& batch);

/// Stops gradient tracking on every parameter and switches to eval mode.
void freeze(Model& model);

/// Draws Kaiming-uniform weights for a conv with the given fan-in.
void kaiming_uniform(std::span<float> values, std::size_t fan_in, std::uint64_t seed);

}  // namespace mgd
