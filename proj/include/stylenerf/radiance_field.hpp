#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/types.h>

#include "stylenerf/archive.hpp"
#include "stylenerf/camera.hpp"
#include "stylenerf/nn.hpp"

namespace stylenerf {

/// Sinusoidal lift of the last dimension: for every input coordinate x_i the
/// output holds sin(2^0 x_i), cos(2^0 x_i), ..., sin(2^(L-1) x_i), cos(2^(L-1) x_i),
/// coordinates concatenated in order. Output width is 2 * L * d.
torch::Tensor positional_encoding(const torch::Tensor& v, int frequencies);

struct RaySamples {
  torch::Tensor depths;  // N x K, strictly increasing along each row
  torch::Tensor deltas;  // N x K, depth[k+1] - depth[k]; the last interval runs to `far`

  int64_t count() const { return depths.size(1); }
};

/// Samples for `n_rays` rays in [near, far] split into K equal bins:
/// bin midpoints when not stratified, one uniform draw per bin otherwise.
RaySamples sample_rays(int64_t n_rays, double near, double far, int samples, bool stratified,
                       at::Generator* generator = nullptr);
/// Single-ray convenience form; stratified draws are seeded by `seed`.
RaySamples sample_ray(double near, double far, int samples, bool stratified, std::uint64_t seed);

/// Sample positions o + t d, N x K x 3 in `dtype`.
torch::Tensor sample_points(const RayBundle& rays, const RaySamples& samples, torch::Dtype dtype);

struct Compositing {
  torch::Tensor weights;        // N x K, T_k (1 - exp(-sigma_k delta_k))
  torch::Tensor transmittance;  // N x K, exp(-sum_{k'<k} sigma_k' delta_k')
  torch::Tensor accumulation;   // N, sum_k w_k
  torch::Tensor depth;          // N, sum_k w_k t_k / max(sum_k w_k, eps)
};

inline constexpr double kDepthEpsilon = 1e-10;

/// Quadrature compositor shared by the radiance and stylized fields.
Compositing composite(const torch::Tensor& sigma, const RaySamples& samples);
/// sum_k w_k c_k, colours N x K x 3; background is black.
torch::Tensor composite_color(const Compositing& c, const torch::Tensor& colors);

struct RadianceFieldConfig {
  int pos_frequencies = 10;
  int dir_frequencies = 4;
  int depth = 8;    // hidden layers in the opacity trunk
  int width = 256;
  int skip_layer = 4;  // trunk layer that re-reads the encoded position; <0 disables
  double near = 2.0;
  double far = 6.0;
  double background = 0.0;  // grey level behind the scene; rays composite onto it

  nlohmann::json to_json() const;
  static RadianceFieldConfig from_json(const nlohmann::json& j);
};

/// The ordinary NeRF: opacity trunk sigma(x) plus a view-dependent colour head c_o(x, d).
struct RadianceFieldParams {
  RadianceFieldConfig config;
  std::vector<Linear> trunk;
  Linear sigma_head;
  Linear feature_head;
  Mlp color_head;  // [feature, gamma(d)] -> hidden -> rgb logits

  static RadianceFieldParams create(const RadianceFieldConfig& config, std::uint64_t seed,
                                    torch::Dtype dtype = torch::kFloat32);

  struct Density {
    torch::Tensor sigma;    // ... , softplus
    torch::Tensor feature;  // ... x width
  };
  /// Opacity and trunk feature at world points (... x 3).
  Density density(const torch::Tensor& points) const;
  /// Logistic-squashed colour from trunk features and unit view directions.
  torch::Tensor radiance(const torch::Tensor& feature, const torch::Tensor& directions) const;

  NamedTensors named_parameters();
  NamedTensors opacity_parameters();
  NamedTensors color_parameters();
  torch::Dtype dtype() const { return sigma_head.weight.scalar_type(); }
  void to(torch::Dtype dtype);

  void save(TensorArchive& archive) const;
  static RadianceFieldParams load(const TensorArchive& archive);
};

struct RenderOutput {
  torch::Tensor color;  // N x 3
  Compositing compositing;
};

RenderOutput render_rays(const RadianceFieldParams& params, const RayBundle& rays, const RaySamples& samples);

struct RenderedImage {
  torch::Tensor color;         // H x W x 3
  torch::Tensor depth;         // H x W
  torch::Tensor accumulation;  // H x W
};

/// Full-frame render in chunks with deterministic midpoint samples.
RenderedImage render_image(const RadianceFieldParams& params, const CameraPose& camera, int samples,
                           int64_t chunk = 256);

/// Per pixel, the `top_k` highest-weight samples of a render (front to back).
struct TopSamples {
  torch::Tensor points;      // P x k x 3
  torch::Tensor weights;     // P x k
  torch::Tensor directions;  // P x 3
};

/// The same render, additionally filling `top` from the same compositing pass.
RenderedImage render_image(const RadianceFieldParams& params, const CameraPose& camera, int samples, int top_k,
                           TopSamples* top, int64_t chunk = 256);

struct DepthMap {
  torch::Tensor depth;  // H x W expected depth; +inf where invalid
  torch::Tensor valid;  // H x W, accumulation >= kMinValidAccumulation

  double valid_fraction() const;
};

inline constexpr double kMinValidAccumulation = 0.5;

DepthMap depth_map_from_render(const RenderedImage& render);
DepthMap render_depth_map(const RadianceFieldParams& params, const CameraPose& camera, int samples);

struct PosedImage {
  CameraPose camera;
  torch::Tensor image;  // H x W x 3
};

struct NerfTrainConfig {
  int steps = 20000;
  int batch_rays = 1024;
  int samples = 64;
  double lr = 5e-4;
  double lr_final = 5e-5;  // exponential decay target at the last step
  std::uint64_t seed = 0;
  int log_every = 100;
};

struct NerfFit {
  RadianceFieldParams params;
  std::vector<double> loss_history;  // one entry per step
};

/// Minimizes mean squared colour error over random ray batches drawn from all
/// training views. Throws on an empty dataset or a non-finite loss.
NerfFit fit_nerf(const std::vector<PosedImage>& views, const RadianceFieldConfig& model, const NerfTrainConfig& train);
/// Continues training existing parameters.
NerfFit fit_nerf(const std::vector<PosedImage>& views, RadianceFieldParams params, const NerfTrainConfig& train);

}  // namespace stylenerf
