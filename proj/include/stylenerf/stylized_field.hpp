#pragma once

#include <cstdint>
#include <memory>

#include <nlohmann/json.hpp>
#include <torch/types.h>

#include "stylenerf/radiance_field.hpp"
#include "stylenerf/style_latents.hpp"

namespace stylenerf {

struct StylizedFieldConfig {
  int pos_frequencies = 10;
  int latent_dim = 32;
  int depth = 4;
  int width = 256;
  bool code_every_layer = false;  // ablation: re-inject the code at each hidden layer
  bool use_view_direction = false;  // ablation: also feed gamma(d)
  int dir_frequencies = 4;

  nlohmann::json to_json() const;
  static StylizedFieldConfig from_json(const nlohmann::json& j);
};

/// Style module c_s(x, l): replaces the colour branch of the radiance field.
/// Opacity always comes from the frozen radiance field and is never touched here.
struct StylizedFieldParams {
  StylizedFieldConfig config;
  std::vector<Linear> layers;  // hidden layers followed by the rgb output layer

  static StylizedFieldParams create(const StylizedFieldConfig& config, std::uint64_t seed,
                                    torch::Dtype dtype = torch::kFloat32);

  NamedTensors named_parameters();
  torch::Dtype dtype() const { return layers.front().weight.scalar_type(); }
  void to(torch::Dtype dtype);

  void save(TensorArchive& archive) const;
  static StylizedFieldParams load(const TensorArchive& archive);
};

/// Stylized colour at points (... x 3) for codes broadcastable to (... x D).
/// `directions` is only read when the view-direction ablation is enabled.
torch::Tensor stylized_color(const StylizedFieldParams& params, const torch::Tensor& points, const torch::Tensor& code,
                             const torch::Tensor& directions = {});

/// C_n(r, l): frozen opacity composited with the style module's colours.
torch::Tensor render_stylized(const StylizedFieldParams& params, const RadianceFieldParams& radiance,
                              const RayBundle& rays, const RaySamples& samples, const torch::Tensor& code);

/// The same, reusing a compositing already computed from the frozen opacity.
torch::Tensor render_stylized(const StylizedFieldParams& params, const torch::Tensor& points,
                              const torch::Tensor& weights, const torch::Tensor& code,
                              const torch::Tensor& directions = {});

/// Samples below this frozen weight are skipped by full-frame renders. A ray
/// drops at most samples * floor of its colour, far below one 8-bit level.
inline constexpr double kStylizedWeightFloor = 1e-6;

/// Frozen compositing of one frame, flattened to the samples that matter.
/// Independent of the style, so one instance serves every code.
struct FrameSamples {
  torch::Tensor points;      // M x 3
  torch::Tensor weights;     // M
  torch::Tensor ray;         // M, int64 pixel index
  torch::Tensor directions;  // M x 3
  int height = 0;
  int width = 0;

  static FrameSamples compute(const RadianceFieldParams& radiance, const CameraPose& camera, int samples,
                              double weight_floor = kStylizedWeightFloor, int64_t chunk = 256);
};

/// H x W x 3 stylized frame for one code (D).
torch::Tensor render_stylized_frame(const StylizedFieldParams& params, const FrameSamples& frame,
                                    const torch::Tensor& code, int64_t chunk = 16384);

/// Full-frame stylized render with deterministic midpoint samples.
torch::Tensor render_stylized_image(const StylizedFieldParams& params, const RadianceFieldParams& radiance,
                                    const CameraPose& camera, int samples, const torch::Tensor& code,
                                    int64_t chunk = 256);

struct LossWeights {
  double lambda_d = 1e-5;
  double lambda_s = 1.0;
  double lambda_m = 10.0;

  nlohmann::json to_json() const;
};

/// Mean squared error over the batch and the three channels.
torch::Tensor mimic_loss(const torch::Tensor& field_colors, const torch::Tensor& stylizer_colors);

/// L_mimic + lambda_d L_d.
torch::Tensor objective_n(const torch::Tensor& mimic, const torch::Tensor& distribution, const LossWeights& w);
/// lambda_m L_mimic + lambda_s L_s + L_c.
torch::Tensor objective_c(const torch::Tensor& mimic, const torch::Tensor& style, const torch::Tensor& content,
                          const LossWeights& w);

struct MutualObjectives {
  torch::Tensor mimic_for_field;    // C_a detached
  torch::Tensor mimic_for_decoder;  // C_n detached
  torch::Tensor distribution;
  torch::Tensor field;    // reaches the style module and the codes only
  torch::Tensor decoder;  // reaches the decoder only
};

/// Builds both objectives with the gradient partition enforced by detaching
/// the other side's prediction.
MutualObjectives mutual_objectives(const torch::Tensor& field_colors, const torch::Tensor& stylizer_colors,
                                   const torch::Tensor& distribution, const torch::Tensor& style,
                                   const torch::Tensor& content, const LossWeights& w);

}  // namespace stylenerf
