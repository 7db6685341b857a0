#include "orthokd/model.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "orthokd/errors.hpp"

namespace orthokd {

namespace {

const std::pair<LayerKind, const char*> kKindNames[] = {
    {LayerKind::Conv, "conv"},
    {LayerKind::BatchNorm, "bn"},
    {LayerKind::Relu, "relu"},
    {LayerKind::SaveShortcut, "save"},
    {LayerKind::AddShortcut, "add"},
    {LayerKind::MaxPool, "maxpool"},
    {LayerKind::GlobalAvgPool, "gap"},
    {LayerKind::Linear, "linear"},
};

LayerSpec conv_layer(std::string name, std::size_t in, std::size_t out, std::size_t k,
                     std::size_t stride, int group, bool channel_prunable) {
  LayerSpec l;
  l.kind = LayerKind::Conv;
  l.name = std::move(name);
  l.in_channels = in;
  l.out_channels = out;
  l.kernel = k;
  l.stride = stride;
  l.padding = k / 2;
  l.group = group;
  l.channel_prunable = channel_prunable;
  l.weight_prunable = true;
  return l;
}

LayerSpec simple_layer(LayerKind kind, std::string name, std::size_t channels = 0, int group = -1) {
  LayerSpec l;
  l.kind = kind;
  l.name = std::move(name);
  l.in_channels = channels;
  l.out_channels = channels;
  l.group = group;
  return l;
}

void append_conv_bn_relu(std::vector<LayerSpec>& layers, const std::string& prefix,
                         std::size_t in, std::size_t out, std::size_t stride, int group,
                         bool prunable, bool with_relu = true) {
  layers.push_back(conv_layer(prefix + ".conv", in, out, 3, stride, group, prunable));
  layers.push_back(simple_layer(LayerKind::BatchNorm, prefix + ".bn", out, group));
  if (with_relu) layers.push_back(simple_layer(LayerKind::Relu, prefix + ".relu", out, group));
}

LayerSpec linear_layer(std::size_t in, std::size_t out) {
  LayerSpec l;
  l.kind = LayerKind::Linear;
  l.name = "fc";
  l.in_channels = in;
  l.out_channels = out;
  l.bias = true;
  return l;
}

ForwardOutput run_forward(const ModelGraph& model, std::map<std::string, BatchNormState>* states,
                          Tape& tape, const Variable& batch, bool training) {
  const Shape& s = batch.shape();
  if (s.size() != 4 || s[1] != model.input_channels || s[2] != model.input_size ||
      s[3] != model.input_size) {
    throw ShapeError("forward: batch shape " + shape_str(s) + " does not match model input [N x " +
                     std::to_string(model.input_channels) + " x " +
                     std::to_string(model.input_size) + " x " + std::to_string(model.input_size) +
                     "]");
  }
  ForwardOutput out;
  Variable x = batch;
  Variable saved;
  for (const auto& layer : model.layers) {
    switch (layer.kind) {
      case LayerKind::Conv:
        x = conv2d(tape, x, model.param(layer.name + ".weight"),
                   layer.bias ? model.param(layer.name + ".bias") : Variable(),
                   {layer.stride, layer.padding});
        break;
      case LayerKind::BatchNorm: {
        // Eval mode only reads the running statistics.
        BatchNormState* st = states ? &states->at(layer.name)
                                    : const_cast<BatchNormState*>(&model.bn_state.at(layer.name));
        x = batchnorm2d(tape, x, model.param(layer.name + ".gamma"),
                        model.param(layer.name + ".beta"), st, training);
        break;
      }
      case LayerKind::Relu:
        x = relu(tape, x);
        break;
      case LayerKind::SaveShortcut:
        saved = x;
        break;
      case LayerKind::AddShortcut: {
        Variable sc = (layer.stride == 1 && layer.in_channels == layer.out_channels)
                          ? saved
                          : shortcut(tape, saved, layer.stride, layer.out_channels);
        x = add(tape, x, sc);
        break;
      }
      case LayerKind::MaxPool:
        x = max_pool2x2(tape, x);
        break;
      case LayerKind::GlobalAvgPool:
        out.last_feature = x;
        x = global_avg_pool(tape, x);
        break;
      case LayerKind::Linear:
        x = linear(tape, x, model.param(layer.name + ".weight"),
                   layer.bias ? model.param(layer.name + ".bias") : Variable());
        break;
    }
  }
  out.logits = x;
  return out;
}

}  // namespace

std::string to_string(LayerKind kind) {
  for (const auto& [k, n] : kKindNames)
    if (k == kind) return n;
  return "?";
}

LayerKind layer_kind_from_string(const std::string& s) {
  for (const auto& [k, n] : kKindNames)
    if (s == n) return k;
  throw FormatError("unknown layer kind '" + s + "'");
}

ModelGraph::ModelGraph(const ModelGraph& other)
    : arch(other.arch),
      num_classes(other.num_classes),
      input_channels(other.input_channels),
      input_size(other.input_size),
      layers(other.layers),
      bn_state(other.bn_state) {
  params.reserve(other.params.size());
  for (const auto& p : other.params) params.push_back(p.clone());
}

ModelGraph& ModelGraph::operator=(const ModelGraph& other) {
  if (this != &other) {
    ModelGraph tmp(other);
    *this = std::move(tmp);
  }
  return *this;
}

Variable& ModelGraph::param(const std::string& name) {
  for (auto& p : params)
    if (p.name() == name) return p;
  throw std::out_of_range("model has no parameter '" + name + "'");
}

const Variable& ModelGraph::param(const std::string& name) const {
  for (const auto& p : params)
    if (p.name() == name) return p;
  throw std::out_of_range("model has no parameter '" + name + "'");
}

bool ModelGraph::has_param(const std::string& name) const {
  for (const auto& p : params)
    if (p.name() == name) return true;
  return false;
}

const LayerSpec& ModelGraph::layer(const std::string& name) const {
  for (const auto& l : layers)
    if (l.name == name) return l;
  throw std::out_of_range("model has no layer '" + name + "'");
}

std::size_t ModelGraph::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params) n += p.numel();
  return n;
}

std::size_t declared_parameter_count(const std::vector<LayerSpec>& layers) {
  std::size_t n = 0;
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        n += l.out_channels * l.in_channels * l.kernel * l.kernel + (l.bias ? l.out_channels : 0);
        break;
      case LayerKind::BatchNorm:
        n += 2 * l.out_channels;
        break;
      case LayerKind::Linear:
        n += l.out_channels * l.in_channels + (l.bias ? l.out_channels : 0);
        break;
      default:
        break;
    }
  }
  return n;
}

std::size_t ModelGraph::declared_parameter_count() const {
  return orthokd::declared_parameter_count(layers);
}

std::size_t ModelGraph::group_count() const {
  int mx = -1;
  for (const auto& l : layers) mx = std::max(mx, l.group);
  return static_cast<std::size_t>(mx + 1);
}

std::size_t ModelGraph::last_feature_channels() const {
  for (const auto& l : layers)
    if (l.kind == LayerKind::GlobalAvgPool) return l.in_channels;
  throw std::logic_error("model has no global pooling layer");
}

void ModelGraph::set_trainable(bool on) {
  for (auto& p : params) p.set_requires_grad(on);
}

void ModelGraph::zero_grad() {
  for (auto& p : params) p.zero_grad();
}

void ModelGraph::validate() const {
  std::size_t current = input_channels;
  std::size_t saved = 0;
  auto expect_param = [&](const std::string& name, const Shape& shape) {
    const Variable& p = param(name);
    if (p.shape() != shape) {
      throw ShapeError("parameter '" + name + "' has shape " + shape_str(p.shape()) + ", expected " +
                       shape_str(shape));
    }
  };
  for (const auto& l : layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        if (l.in_channels != current) {
          throw ShapeError("layer '" + l.name + "' expects " + std::to_string(l.in_channels) +
                           " input channels, receives " + std::to_string(current));
        }
        expect_param(l.name + ".weight", {l.out_channels, l.in_channels, l.kernel, l.kernel});
        if (l.bias) expect_param(l.name + ".bias", {l.out_channels});
        current = l.out_channels;
        break;
      case LayerKind::BatchNorm:
        if (l.out_channels != current) {
          throw ShapeError("batch-norm '" + l.name + "' has " + std::to_string(l.out_channels) +
                           " channels, receives " + std::to_string(current));
        }
        expect_param(l.name + ".gamma", {current});
        expect_param(l.name + ".beta", {current});
        if (bn_state.at(l.name).running_mean.numel() != current) {
          throw ShapeError("batch-norm '" + l.name + "' running statistics have wrong length");
        }
        break;
      case LayerKind::SaveShortcut:
        saved = current;
        break;
      case LayerKind::AddShortcut:
        if (l.in_channels != saved || l.out_channels != current) {
          throw ShapeError("shortcut '" + l.name + "' maps " + std::to_string(saved) + " -> " +
                           std::to_string(current) + " channels but declares " +
                           std::to_string(l.in_channels) + " -> " + std::to_string(l.out_channels));
        }
        break;
      case LayerKind::Linear:
        if (l.in_channels != current) {
          throw ShapeError("linear '" + l.name + "' expects " + std::to_string(l.in_channels) +
                           " features, receives " + std::to_string(current));
        }
        expect_param(l.name + ".weight", {l.out_channels, l.in_channels});
        if (l.bias) expect_param(l.name + ".bias", {l.out_channels});
        current = l.out_channels;
        break;
      default:
        break;
    }
  }
  if (current != num_classes) {
    throw ShapeError("model emits " + std::to_string(current) + " outputs, declares " +
                     std::to_string(num_classes) + " classes");
  }
}

ModelGraph instantiate(std::string arch, std::size_t num_classes, std::size_t input_channels,
                       std::size_t input_size, std::vector<LayerSpec> layers, std::uint64_t seed) {
  ModelGraph m;
  m.arch = std::move(arch);
  m.num_classes = num_classes;
  m.input_channels = input_channels;
  m.input_size = input_size;
  m.layers = std::move(layers);

  std::mt19937_64 rng(seed);
  auto he_normal = [&](Shape shape, std::size_t fan_in) {
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
    Tensor t(std::move(shape));
    for (auto& v : t.values()) v = dist(rng);
    return t;
  };
  for (const auto& l : m.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        m.params.emplace_back(he_normal({l.out_channels, l.in_channels, l.kernel, l.kernel},
                                        l.in_channels * l.kernel * l.kernel),
                              true, l.name + ".weight");
        if (l.bias) m.params.emplace_back(Tensor({l.out_channels}), true, l.name + ".bias");
        break;
      case LayerKind::BatchNorm:
        m.params.emplace_back(Tensor({l.out_channels}, 0.5), true, l.name + ".gamma");
        m.params.emplace_back(Tensor({l.out_channels}, 0.0), true, l.name + ".beta");
        m.bn_state.emplace(l.name, BatchNormState(l.out_channels));
        break;
      case LayerKind::Linear:
        m.params.emplace_back(he_normal({l.out_channels, l.in_channels}, l.in_channels), true,
                              l.name + ".weight");
        if (l.bias) m.params.emplace_back(Tensor({l.out_channels}), true, l.name + ".bias");
        break;
      default:
        break;
    }
  }
  m.validate();
  return m;
}

ModelGraph build_micro_resnet(std::size_t depth_per_group, std::size_t base_width,
                              std::size_t num_classes, std::uint64_t seed,
                              std::size_t input_channels, std::size_t input_size) {
  if (depth_per_group < 1) throw ConfigError("micro-resnet: depth_per_group must be >= 1");
  if (base_width < 1 || num_classes < 2) throw ConfigError("micro-resnet: invalid width/classes");
  std::vector<LayerSpec> layers;
  append_conv_bn_relu(layers, "stem", input_channels, base_width, 1, -1, false);
  std::size_t in = base_width;
  for (int g = 0; g < 3; ++g) {
    const std::size_t width = base_width << g;
    for (std::size_t b = 0; b < depth_per_group; ++b) {
      const std::string prefix = "g" + std::to_string(g) + ".b" + std::to_string(b);
      const std::size_t stride = (g > 0 && b == 0) ? 2 : 1;
      layers.push_back(simple_layer(LayerKind::SaveShortcut, prefix + ".save", in, g));
      layers.push_back(conv_layer(prefix + ".conv1", in, width, 3, stride, g, true));
      layers.push_back(simple_layer(LayerKind::BatchNorm, prefix + ".bn1", width, g));
      layers.push_back(simple_layer(LayerKind::Relu, prefix + ".relu1", width, g));
      layers.push_back(conv_layer(prefix + ".conv2", width, width, 3, 1, g, false));
      layers.push_back(simple_layer(LayerKind::BatchNorm, prefix + ".bn2", width, g));
      LayerSpec add = simple_layer(LayerKind::AddShortcut, prefix + ".add", width, g);
      add.in_channels = in;
      add.stride = stride;
      layers.push_back(add);
      layers.push_back(simple_layer(LayerKind::Relu, prefix + ".relu2", width, g));
      in = width;
    }
  }
  layers.push_back(simple_layer(LayerKind::GlobalAvgPool, "pool", in));
  layers.push_back(linear_layer(in, num_classes));
  return instantiate("resnet", num_classes, input_channels, input_size, std::move(layers), seed);
}

ModelGraph build_micro_vgg(std::size_t base_width, std::size_t num_classes, std::uint64_t seed,
                           std::size_t input_channels, std::size_t input_size) {
  if (base_width < 1 || num_classes < 2) throw ConfigError("micro-vgg: invalid width/classes");
  if (input_size < 4) throw ConfigError("micro-vgg: input size must be >= 4");
  std::vector<LayerSpec> layers;
  std::size_t in = input_channels;
  for (int stage = 0; stage < 3; ++stage) {
    const std::size_t width = base_width << stage;
    for (int i = 0; i < 2; ++i) {
      const bool last = stage == 2 && i == 1;
      append_conv_bn_relu(layers, "s" + std::to_string(stage) + ".c" + std::to_string(i), in,
                          width, 1, stage, !last);
      in = width;
    }
    if (stage < 2) {
      layers.push_back(simple_layer(LayerKind::MaxPool, "s" + std::to_string(stage) + ".pool", in,
                                    stage));
    }
  }
  layers.push_back(simple_layer(LayerKind::GlobalAvgPool, "pool", in));
  layers.push_back(linear_layer(in, num_classes));
  return instantiate("vgg", num_classes, input_channels, input_size, std::move(layers), seed);
}

ModelGraph build_model(const ModelSpec& spec, std::uint64_t seed) {
  if (spec.arch == "resnet") {
    return build_micro_resnet(spec.depth, spec.width, spec.classes, seed, spec.input_channels,
                              spec.input_size);
  }
  if (spec.arch == "vgg") {
    return build_micro_vgg(spec.width, spec.classes, seed, spec.input_channels, spec.input_size);
  }
  throw ConfigError("unknown architecture '" + spec.arch + "' (expected resnet or vgg)");
}

ForwardOutput forward_train(ModelGraph& model, Tape& tape, const Variable& batch) {
  return run_forward(model, &model.bn_state, tape, batch, true);
}

ForwardOutput forward_eval(const ModelGraph& model, Tape& tape, const Variable& batch) {
  return run_forward(model, nullptr, tape, batch, false);
}

Tensor predict_logits(const ModelGraph& model, const Tensor& batch) {
  Tape tape;
  tape.set_recording(false);
  return forward_eval(model, tape, Variable(batch)).logits.value();
}

Regressor make_regressor(std::size_t student_channels, std::size_t teacher_channels,
                         std::uint64_t seed) {
  Tensor w({teacher_channels, student_channels, 1, 1});
  if (student_channels == teacher_channels) {
    for (std::size_t i = 0; i < teacher_channels; ++i) w.at(i, i, 0, 0) = 1.0;
  } else {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(student_channels)));
    for (auto& v : w.values()) v = dist(rng);
  }
  return {Variable(std::move(w), true, "regressor.weight"),
          Variable(Tensor({teacher_channels}), true, "regressor.bias")};
}

Variable regressor_forward(Tape& tape, const Regressor& reg, const Variable& student_feature) {
  if (student_feature.shape().size() != 4 || student_feature.shape()[1] != reg.in_channels()) {
    throw ShapeError("regressor: feature channel axis 1 of " + shape_str(student_feature.shape()) +
                     " does not match regressor input channels " +
                     std::to_string(reg.in_channels()));
  }
  return conv2d(tape, student_feature, reg.weight, reg.bias, {1, 0});
}

std::string serialize_layers(const std::vector<LayerSpec>& layers) {
  std::ostringstream os;
  for (const auto& l : layers) {
    os << to_string(l.kind) << ' ' << l.name << ' ' << l.in_channels << ' ' << l.out_channels << ' '
       << l.kernel << ' ' << l.stride << ' ' << l.padding << ' ' << l.bias << ' ' << l.group << ' '
       << l.channel_prunable << ' ' << l.weight_prunable << '\n';
  }
  return os.str();
}

std::vector<LayerSpec> parse_layers(const std::string& text) {
  std::vector<LayerSpec> layers;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string kind;
    LayerSpec l;
    ls >> kind >> l.name >> l.in_channels >> l.out_channels >> l.kernel >> l.stride >> l.padding >>
        l.bias >> l.group >> l.channel_prunable >> l.weight_prunable;
    if (!ls) throw FormatError("malformed layer line: '" + line + "'");
    l.kind = layer_kind_from_string(kind);
    layers.push_back(std::move(l));
  }
  return layers;
}

}  // namespace orthokd
