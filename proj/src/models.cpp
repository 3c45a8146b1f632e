#include "mgd/models.hpp"

#include <bit>
#include <cmath>
#include <sstream>

#include "mgd/random.hpp"

namespace mgd {
namespace {

std::size_t downsampled(std::size_t size) { return (size - 1) / 2 + 1; }

std::size_t parse_count(const std::string& text, const std::string& field) {
  try {
    std::size_t used = 0;
    const auto value = std::stoul(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return value;
  } catch (const std::exception&) {
    throw ConfigError("backbone field '" + field + "': expected a non-negative integer, got '" +
                      text + "'");
  }
}

}  // namespace

void BackboneConfig::validate() const {
  if (stages.empty()) throw ConfigError("backbone field 'stages': at least one stage required");
  if (in_channels == 0) throw ConfigError("backbone field 'in_channels': must be >= 1");
  if (stem_channels == 0) throw ConfigError("backbone field 'stem_channels': must be >= 1");
  if (num_classes == 0) throw ConfigError("backbone field 'num_classes': must be >= 1");
  if (input_size == 0) throw ConfigError("backbone field 'input_size': must be >= 1");
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto label = "backbone field 'stages[" + std::to_string(i) + "]";
    if (stages[i].channels == 0) throw ConfigError(label + ".channels': must be >= 1");
    if (stages[i].blocks == 0) throw ConfigError(label + ".blocks': must be >= 1");
  }
  // Stride-2 convs with padding 1 never shrink below 1, but an input of 1
  // would make every downsampled stage degenerate; reject sizes that a
  // downsample cannot halve.
  std::size_t size = input_size;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].downsample) {
      if (size < 2) {
        throw ConfigError("backbone field 'stages[" + std::to_string(i) +
                          "].downsample': spatial size " + std::to_string(size) +
                          " cannot be downsampled");
      }
      size = downsampled(size);
    }
  }
}

std::vector<std::size_t> BackboneConfig::stage_sizes() const {
  std::vector<std::size_t> sizes;
  std::size_t size = input_size;
  for (const auto& stage : stages) {
    if (stage.downsample) size = downsampled(size);
    sizes.push_back(size);
  }
  return sizes;
}

std::string BackboneConfig::describe() const {
  std::ostringstream out;
  out << (block_kind == BlockKind::basic_residual ? "basic" : "plain") << " stem=" << stem_channels
      << " stages=";
  for (std::size_t i = 0; i < stages.size(); ++i) {
    out << (i ? "," : "") << stages[i].blocks << 'x' << stages[i].channels
        << (stages[i].downsample ? "/2" : "");
  }
  out << " classes=" << num_classes << " in=" << in_channels << " size=" << input_size;
  return out.str();
}

BackboneConfig BackboneConfig::reference_teacher() {
  BackboneConfig c;
  c.stem_channels = 32;
  c.stages = {{2, 32, false}, {2, 64, true}, {2, 128, true}, {2, 256, true}};
  return c;
}

BackboneConfig BackboneConfig::reference_student() {
  BackboneConfig c;
  c.stem_channels = 16;
  c.stages = {{1, 16, false}, {1, 32, true}, {1, 64, true}, {1, 128, true}};
  return c;
}

BackboneConfig BackboneConfig::parse(const std::string& text) {
  std::istringstream in(text);
  std::string kind;
  in >> kind;
  if (kind == "teacher" || kind == "student" || kind == "tiny") {
    BackboneConfig c = kind == "teacher" ? reference_teacher() : reference_student();
    if (kind == "tiny") {
      c.stem_channels = 8;
      c.stages = {{1, 8, false}, {1, 16, true}, {1, 32, true}};
    }
    std::string extra;
    if (in >> extra) throw ConfigError("backbone preset '" + kind + "' takes no options");
    return c;
  }
  BackboneConfig c;
  if (kind == "basic") {
    c.block_kind = BlockKind::basic_residual;
  } else if (kind == "plain") {
    c.block_kind = BlockKind::plain;
  } else {
    throw ConfigError("backbone: unknown kind or preset '" + kind +
                      "' (expected teacher, student, tiny, basic or plain)");
  }
  c.stages.clear();
  std::string token;
  while (in >> token) {
    const auto eq = token.find('=');
    if (eq == std::string::npos) throw ConfigError("backbone: expected key=value, got '" + token + "'");
    const auto key = token.substr(0, eq);
    const auto value = token.substr(eq + 1);
    if (key == "stem") {
      c.stem_channels = parse_count(value, "stem");
    } else if (key == "classes") {
      c.num_classes = parse_count(value, "classes");
    } else if (key == "in") {
      c.in_channels = parse_count(value, "in");
    } else if (key == "size") {
      c.input_size = parse_count(value, "size");
    } else if (key == "stages") {
      std::istringstream list(value);
      std::string item;
      while (std::getline(list, item, ',')) {
        StageSpec s;
        if (item.ends_with("/2")) {
          s.downsample = true;
          item.resize(item.size() - 2);
        }
        const auto x = item.find('x');
        if (x == std::string::npos) {
          throw ConfigError("backbone field 'stages': expected <blocks>x<channels>[/2], got '" +
                            item + "'");
        }
        s.blocks = parse_count(item.substr(0, x), "stages");
        s.channels = parse_count(item.substr(x + 1), "stages");
        c.stages.push_back(s);
      }
    } else {
      throw ConfigError("backbone: unknown field '" + key + "'");
    }
  }
  return c;
}

const Tensor& ForwardResult::feature(const std::string& name) const {
  for (const auto& f : features)
    if (f.name == name) return f.value;
  throw std::out_of_range("no stage feature named '" + name + "'");
}

void kaiming_uniform(std::span<float> values, std::size_t fan_in, std::uint64_t seed) {
  Rng rng(seed);
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (auto& v : values) v = static_cast<float>(rng.uniform(-bound, bound));
}

Model build_backbone(const BackboneConfig& config, std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  std::uint64_t counter = 0;

  auto add_param = [&](const std::string& name, Shape shape, float fill) -> Parameter* {
    const auto count = numel(shape);
    auto& p = m.params_.emplace_back(name, Tensor(std::move(shape), std::vector<float>(count, fill)));
    return &p;
  };
  auto add_conv_bn = [&](const std::string& prefix, const std::string& bn_prefix,
                         std::size_t in_c, std::size_t out_c, std::size_t kernel,
                         std::size_t stride) {
    Model::ConvBn unit;
    unit.weight = add_param(prefix + ".weight", {out_c, in_c, kernel, kernel}, 0.0f);
    kaiming_uniform(unit.weight->tensor.mutable_data(), in_c * kernel * kernel,
                    derive_seed({seed, ++counter}));
    unit.gamma = add_param(bn_prefix + ".gamma", {out_c}, 1.0f);
    unit.beta = add_param(bn_prefix + ".beta", {out_c}, 0.0f);
    unit.stats = &m.bn_stats_.emplace_back(bn_prefix, BatchNormStats<float>(out_c)).second;
    unit.stride = stride;
    unit.padding = kernel / 2;
    return unit;
  };

  m.stem_ = add_conv_bn("stem.conv", "stem.bn", config.in_channels, config.stem_channels, 3, 1);
  std::size_t channels = config.stem_channels;
  for (std::size_t s = 0; s < config.stages.size(); ++s) {
    const auto& spec = config.stages[s];
    const auto stage = "stage" + std::to_string(s + 1);
    auto& blocks = m.stages_.emplace_back();
    for (std::size_t b = 0; b < spec.blocks; ++b) {
      const auto prefix = stage + ".block" + std::to_string(b);
      const std::size_t stride = (b == 0 && spec.downsample) ? 2 : 1;
      Model::Block block;
      block.first = add_conv_bn(prefix + ".conv1", prefix + ".bn1", channels, spec.channels, 3,
                                stride);
      if (config.block_kind == BlockKind::basic_residual) {
        block.second = add_conv_bn(prefix + ".conv2", prefix + ".bn2", spec.channels,
                                   spec.channels, 3, 1);
        if (stride != 1 || channels != spec.channels) {
          block.shortcut = add_conv_bn(prefix + ".shortcut.conv", prefix + ".shortcut.bn",
                                       channels, spec.channels, 1, stride);
        }
      }
      blocks.push_back(block);
      channels = spec.channels;
    }
  }
  m.fc_weight_ = add_param("fc.weight", {config.num_classes, channels}, 0.0f);
  {
    Rng rng(derive_seed({seed, ++counter}));
    const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
    for (auto& v : m.fc_weight_->tensor.mutable_data())
      v = static_cast<float>(rng.uniform(-bound, bound));
  }
  m.fc_bias_ = add_param("fc.bias", {config.num_classes}, 0.0f);
  return m;
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  out.reserve(params_.size());
  for (auto& p : params_) out.push_back(&p);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params_) total += p.tensor.size();
  return total;
}

const Parameter& Model::parameter(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw std::out_of_range("model has no parameter '" + name + "'");
}

Tensor Model::apply(const ConvBn& unit, const Tensor& x) {
  auto y = conv2d<float>(x, unit.weight->tensor, std::nullopt, unit.stride, unit.padding);
  return batch_norm2d<float>(y, unit.gamma->tensor, unit.beta->tensor, *unit.stats,
                             mode_ == Mode::train);
}

Tensor Model::apply(const Block& block, const Tensor& x) {
  auto y = relu(apply(block.first, x));
  if (!block.second) return y;
  y = apply(*block.second, y);
  return relu(add(y, block.shortcut ? apply(*block.shortcut, x) : x));
}

ForwardResult Model::forward(const Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(1) != config_.in_channels ||
      batch.dim(2) != config_.input_size || batch.dim(3) != config_.input_size) {
    throw ShapeError("model expects input (N, " + std::to_string(config_.in_channels) + ", " +
                     std::to_string(config_.input_size) + ", " +
                     std::to_string(config_.input_size) + "), got " + shape_str(batch.shape()));
  }
  ForwardResult result;
  auto x = relu(apply(stem_, batch));
  for (std::size_t s = 0; s < stages_.size(); ++s) {
    for (const auto& block : stages_[s]) x = apply(block, x);
    result.features.push_back({"stage" + std::to_string(s + 1), x});
  }
  result.logits = linear(global_avg_pool(x), fc_weight_->tensor, fc_bias_->tensor);
  return result;
}

std::vector<NamedTensor> Model::state() const {
  std::vector<NamedTensor> out;
  for (const auto& p : params_) {
    out.push_back({p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()}});
  }
  for (const auto& [name, stats] : bn_stats_) {
    out.push_back({name + ".running_mean", {stats.running_mean.size()}, stats.running_mean});
    out.push_back({name + ".running_var", {stats.running_var.size()}, stats.running_var});
  }
  return out;
}

void Model::load_state(std::span<const NamedTensor> tensors) {
  auto find = [&](const std::string& name) -> const NamedTensor& {
    for (const auto& t : tensors)
      if (t.name == name) return t;
    throw CheckpointError("checkpoint is missing tensor '" + name + "'");
  };
  auto check = [](const NamedTensor& t, const Shape& expected) {
    if (t.shape != expected) {
      throw CheckpointError("checkpoint tensor '" + t.name + "' has shape " + shape_str(t.shape) +
                            " but the model expects " + shape_str(expected));
    }
  };
  const auto expected_count = params_.size() + 2 * bn_stats_.size();
  if (tensors.size() != expected_count) {
    throw CheckpointError("checkpoint holds " + std::to_string(tensors.size()) +
                          " tensors but the model has " + std::to_string(expected_count));
  }
  // Validate everything before mutating anything.
  for (const auto& p : params_) check(find(p.name), p.tensor.shape());
  for (const auto& [name, stats] : bn_stats_) {
    check(find(name + ".running_mean"), {stats.running_mean.size()});
    check(find(name + ".running_var"), {stats.running_var.size()});
  }
  for (auto& p : params_) {
    const auto& t = find(p.name);
    std::copy(t.data.begin(), t.data.end(), p.tensor.mutable_data().begin());
  }
  for (auto& [name, stats] : bn_stats_) {
    stats.running_mean = find(name + ".running_mean").data;
    stats.running_var = find(name + ".running_var").data;
  }
}

void Model::save(const std::filesystem::path& path) const { write_checkpoint(path, state()); }

void Model::load(const std::filesystem::path& path) { load_state(read_checkpoint(path)); }

std::uint64_t Model::state_hash() const {
  const auto bytes = encode_checkpoint(state());
  return fnv1a64(bytes);
}

bool Model::frozen() const {
  for (const auto& p : params_)
    if (p.tensor.requires_grad()) return false;
  return mode_ == Mode::eval;
}

ForwardResult forward_with_features(Model& model, const Tensor& batch) {
  return model.forward(batch);
}

void freeze(Model& model) {
  for (auto* p : model.parameters()) p->tensor.set_requires_grad(false);
  model.set_mode(Mode::eval);
}

}  // namespace mgd
