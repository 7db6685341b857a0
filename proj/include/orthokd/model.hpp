#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "orthokd/autograd.hpp"
#include "orthokd/ops.hpp"

namespace orthokd {

enum class LayerKind {
  Conv,
  BatchNorm,
  Relu,
  SaveShortcut,  // remember the current activation for the next AddShortcut
  AddShortcut,   // add the remembered activation through a parameter-free shortcut
  MaxPool,
  GlobalAvgPool,
  Linear,
};

std::string to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& s);

struct LayerSpec {
  LayerKind kind = LayerKind::Relu;
  std::string name;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t padding = 0;
  bool bias = false;
  int group = -1;                // residual group / VGG stage; unit of per-group keep ratios
  bool channel_prunable = false; // output filters may be removed by structured pruning
  bool weight_prunable = false;  // candidate for unstructured magnitude pruning

  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

/// Architecture selector as it appears in experiment configs.
struct ModelSpec {
  std::string arch = "resnet";  // resnet | vgg
  std::size_t depth = 1;        // blocks per group (resnet only)
  std::size_t width = 8;        // base width
  std::size_t classes = 10;
  std::size_t input_channels = 3;
  std::size_t input_size = 16;
};

/// Ordered layer list plus named parameters and BN running statistics.
/// Copying performs a deep copy of every parameter.
class ModelGraph {
 public:
  ModelGraph() = default;
  ModelGraph(const ModelGraph& other);
  ModelGraph& operator=(const ModelGraph& other);
  ModelGraph(ModelGraph&&) noexcept = default;
  ModelGraph& operator=(ModelGraph&&) noexcept = default;

  std::string arch;
  std::size_t num_classes = 0;
  std::size_t input_channels = 0;
  std::size_t input_size = 0;
  std::vector<LayerSpec> layers;
  std::vector<Variable> params;                 // trainable, in layer order
  std::map<std::string, BatchNormState> bn_state;  // keyed by BN layer name

  Variable& param(const std::string& name);
  const Variable& param(const std::string& name) const;
  bool has_param(const std::string& name) const;
  const LayerSpec& layer(const std::string& name) const;

  std::size_t parameter_count() const;           // sum over the stored tensors
  std::size_t declared_parameter_count() const;  // closed form over `layers`
  std::size_t group_count() const;
  std::size_t last_feature_channels() const;

  // Stop (or resume) gradient tracking on every parameter.
  void set_trainable(bool on);
  void zero_grad();

  // Throws ShapeError when adjacent layer channel counts or parameter shapes disagree.
  void validate() const;
};

std::size_t declared_parameter_count(const std::vector<LayerSpec>& layers);

ModelGraph build_micro_resnet(std::size_t depth_per_group, std::size_t base_width,
                              std::size_t num_classes, std::uint64_t seed,
                              std::size_t input_channels = 3, std::size_t input_size = 16);
ModelGraph build_micro_vgg(std::size_t base_width, std::size_t num_classes, std::uint64_t seed,
                           std::size_t input_channels = 3, std::size_t input_size = 16);
ModelGraph build_model(const ModelSpec& spec, std::uint64_t seed);

/// Instantiates parameters for an explicit layer list (He fan-in init,
/// zero bias, BN gamma 0.5 and shift 0).
ModelGraph instantiate(std::string arch, std::size_t num_classes, std::size_t input_channels,
                       std::size_t input_size, std::vector<LayerSpec> layers, std::uint64_t seed);

struct ForwardOutput {
  Variable logits;        // [N, classes]
  Variable last_feature;  // pre-pool activation of the final group, NCHW
};

/// Training-mode forward; updates BN running statistics.
ForwardOutput forward_train(ModelGraph& model, Tape& tape, const Variable& batch);
/// Eval-mode forward with running statistics; the model is not modified.
ForwardOutput forward_eval(const ModelGraph& model, Tape& tape, const Variable& batch);
/// Convenience: eval-mode logits without gradient tracking.
Tensor predict_logits(const ModelGraph& model, const Tensor& batch);

/// 1x1 convolution aligning student feature channels to teacher channels.
struct Regressor {
  Variable weight;  // [Ct, Cs, 1, 1]
  Variable bias;    // [Ct]

  std::size_t in_channels() const { return weight.shape()[1]; }
  std::size_t out_channels() const { return weight.shape()[0]; }
  Regressor clone() const { return {weight.clone(), bias.clone()}; }
};

/// Identity-initialised when square, He-initialised otherwise; zero bias.
Regressor make_regressor(std::size_t student_channels, std::size_t teacher_channels,
                         std::uint64_t seed);
Variable regressor_forward(Tape& tape, const Regressor& reg, const Variable& student_feature);

/// Text form of the layer list (one layer per line), used in checkpoints.
std::string serialize_layers(const std::vector<LayerSpec>& layers);
std::vector<LayerSpec> parse_layers(const std::string& text);

}  // namespace orthokd
