#pragma once

#include <harmonia/autodiff.hpp>
#include <harmonia/image.hpp>
#include <harmonia/params.hpp>

#include <cstdint>
#include <random>
#include <vector>

namespace harmonia {

struct PredictorConfig {
  int resolution = 64;
  /// Output channels of the strided conv blocks of the curve head.
  std::vector<int> curve_widths = {8, 16, 32, 32};
  /// Encoder widths of the shading U-Net; decoder mirrors them.
  std::vector<int> shading_widths = {8, 8, 16, 16};
  int curve_nodes = kDefaultCurveNodes;
  int grid = kDefaultShadingGrid;
  double gain_max = kShadingGainMax;
  double gain_floor = 1e-3;
  double leaky_slope = 0.2;

  /// Throws std::invalid_argument when the configuration is inconsistent.
  void validate() const;
};

struct DiscriminatorConfig {
  int resolution = 64;
  std::vector<int> widths = {8, 16, 16};
  double leaky_slope = 0.2;

  void validate() const;
};

/// Differentiable predictor outputs. x/y [N,3,K], shading [N,1,G,G].
struct ParamsVar {
  ad::Var curve_x;
  ad::Var curve_y;
  ad::Var shading;
};

/// Converts sample `index` of a forward pass into plain parameters.
HarmonizationParams to_params(const ParamsVar& out, int index);

/// NCHW batch tensors built from HWC images; all items share dimensions.
ad::Array to_nchw(const std::vector<const ImageTensor*>& images);
ad::Array to_nchw(const std::vector<const MaskTensor*>& masks);
ImageTensor from_nchw(const ad::Array& data, int index, int channels, int height, int width);

/// Curve head (strided convs, global pooling, linear) feeding t1 at low
/// resolution, followed by a skip-connected encoder-decoder shading head.
class Predictor {
 public:
  explicit Predictor(PredictorConfig config = {});

  const PredictorConfig& config() const { return config_; }
  ad::ParameterStore& parameters() { return graph_.parameters; }
  const ad::ParameterStore& parameters() const { return graph_.parameters; }
  ad::ModelGraph& graph() { return graph_; }

  /// Kaiming-uniform hidden layers; final layers zero unless `zero_heads`
  /// is false (then small random values, for gradient checks).
  void initialize(std::uint64_t seed, bool zero_heads = true);

  /// composite/background [N,3,R,R], mask [N,1,R,R].
  ParamsVar forward(ad::Tape& tape, const ad::Var& composite, const ad::Var& background,
                    const ad::Var& mask);

  /// Applies predicted parameters at the input resolution (training path).
  ad::Var render(const ParamsVar& params, const ad::Var& composite, const ad::Var& mask);

  /// Inference: resizes to the configured resolution and predicts.
  HarmonizationParams predict(const ImageTensor& composite, const ImageTensor& background,
                              const MaskTensor& mask);

 private:
  ad::Var conv(ad::Tape& tape, const std::string& name, const ad::Var& x, int stride);

  PredictorConfig config_;
  ad::ModelGraph graph_;
};

/// Per-pixel U-Net discriminator with logistic output.
class Discriminator {
 public:
  explicit Discriminator(DiscriminatorConfig config = {});

  const DiscriminatorConfig& config() const { return config_; }
  ad::ParameterStore& parameters() { return graph_.parameters; }
  const ad::ParameterStore& parameters() const { return graph_.parameters; }
  ad::ModelGraph& graph() { return graph_; }

  void initialize(std::uint64_t seed);

  /// img [N,3,H,W] -> scores [N,1,H,W] in (0, 1).
  ad::Var forward(ad::Tape& tape, const ad::Var& img);

 private:
  DiscriminatorConfig config_;
  ad::ModelGraph graph_;
};

}  // namespace harmonia
