#include "stylenerf/stylized_field.hpp"

#include <stdexcept>

#include <torch/torch.h>

namespace stylenerf {

nlohmann::json StylizedFieldConfig::to_json() const {
  return {{"pos_frequencies", pos_frequencies}, {"latent_dim", latent_dim},
          {"depth", depth}, {"width", width},
          {"code_every_layer", code_every_layer}, {"use_view_direction", use_view_direction},
          {"dir_frequencies", dir_frequencies}};
}

StylizedFieldConfig StylizedFieldConfig::from_json(const nlohmann::json& j) {
  StylizedFieldConfig c;
  c.pos_frequencies = j.at("pos_frequencies");
  c.latent_dim = j.at("latent_dim");
  c.depth = j.at("depth");
  c.width = j.at("width");
  c.code_every_layer = j.at("code_every_layer");
  c.use_view_direction = j.at("use_view_direction");
  c.dir_frequencies = j.at("dir_frequencies");
  return c;
}

StylizedFieldParams StylizedFieldParams::create(const StylizedFieldConfig& config, std::uint64_t seed,
                                                torch::Dtype dtype) {
  if (config.depth < 1 || config.width < 1 || config.latent_dim < 1) {
    throw std::invalid_argument("stylized field: depth, width and latent size must be >= 1");
  }
  auto gen = make_generator(seed);
  StylizedFieldParams p;
  p.config = config;
  int64_t input = 3 * 2 * config.pos_frequencies + config.latent_dim;
  if (config.use_view_direction) input += 3 * 2 * config.dir_frequencies;
  for (int i = 0; i < config.depth; ++i) {
    int64_t in = i == 0 ? input : config.width;
    if (i > 0 && config.code_every_layer) in += config.latent_dim;
    p.layers.push_back(make_linear(in, config.width, gen, dtype));
  }
  p.layers.push_back(make_linear(config.width, 3, gen, dtype));
  return p;
}

NamedTensors StylizedFieldParams::named_parameters() {
  NamedTensors out;
  for (size_t i = 0; i < layers.size(); ++i) {
    out.emplace_back("style." + std::to_string(i) + ".weight", &layers[i].weight);
    out.emplace_back("style." + std::to_string(i) + ".bias", &layers[i].bias);
  }
  return out;
}

void StylizedFieldParams::to(torch::Dtype dtype) { convert_named(named_parameters(), dtype); }

void StylizedFieldParams::save(TensorArchive& archive) const {
  archive.meta()["stylized_field"] = config.to_json();
  write_named(archive, "stylized.", const_cast<StylizedFieldParams*>(this)->named_parameters());
}

StylizedFieldParams StylizedFieldParams::load(const TensorArchive& archive) {
  auto params = create(StylizedFieldConfig::from_json(archive.meta().at("stylized_field")), 0);
  read_named(archive, "stylized.", params.named_parameters());
  return params;
}

torch::Tensor stylized_color(const StylizedFieldParams& params, const torch::Tensor& points, const torch::Tensor& code,
                             const torch::Tensor& directions) {
  const auto& c = params.config;
  if (code.size(-1) != c.latent_dim) {
    throw std::invalid_argument("stylized_color: code has " + std::to_string(code.size(-1)) + " dims, expected " +
                                std::to_string(c.latent_dim));
  }
  const auto dtype = params.dtype();
  auto lead = points.sizes().vec();
  lead.back() = c.latent_dim;
  const auto latent = code.to(dtype).expand(lead);
  std::vector<torch::Tensor> inputs = {positional_encoding(points.to(dtype), c.pos_frequencies)};
  if (c.use_view_direction) {
    if (!directions.defined()) throw std::invalid_argument("stylized_color: view directions required by config");
    inputs.push_back(positional_encoding(directions.to(dtype).expand(points.sizes()), c.dir_frequencies));
  }
  inputs.push_back(latent);
  torch::Tensor h = torch::cat(inputs, -1);
  for (size_t i = 0; i + 1 < params.layers.size(); ++i) {
    if (i > 0 && c.code_every_layer) h = torch::cat({h, latent}, -1);
    h = torch::relu(params.layers[i].forward(h));
  }
  return torch::sigmoid(params.layers.back().forward(h));
}

torch::Tensor render_stylized(const StylizedFieldParams& params, const torch::Tensor& points,
                              const torch::Tensor& weights, const torch::Tensor& code, const torch::Tensor& directions) {
  // Codes are per ray (N x D) or shared (D); broadcast over the samples of each ray.
  const auto per_sample = code.dim() == 2 ? code.unsqueeze(1) : code;
  const auto dirs = directions.defined() ? directions.unsqueeze(1) : directions;
  const auto colors = stylized_color(params, points, per_sample, dirs);
  return (weights.to(colors.scalar_type()).unsqueeze(2) * colors).sum(1);
}

torch::Tensor render_stylized(const StylizedFieldParams& params, const RadianceFieldParams& radiance,
                              const RayBundle& rays, const RaySamples& samples, const torch::Tensor& code) {
  Compositing compositing;
  {
    torch::NoGradGuard frozen;
    const auto density = radiance.density(sample_points(rays, samples, radiance.dtype()));
    compositing = composite(density.sigma, samples);
  }
  return render_stylized(params, sample_points(rays, samples, params.dtype()), compositing.weights, code,
                         rays.directions);
}

FrameSamples FrameSamples::compute(const RadianceFieldParams& radiance, const CameraPose& camera, int samples,
                                   double weight_floor, int64_t chunk) {
  torch::NoGradGuard no_grad;
  const auto rays = generate_all_rays(camera);
  std::vector<torch::Tensor> points, weights, ray, directions;
  for (int64_t begin = 0; begin < rays.size(); begin += chunk) {
    const auto part = rays.slice(begin, std::min(rays.size(), begin + chunk));
    const auto s = sample_rays(part.size(), radiance.config.near, radiance.config.far, samples, false);
    const auto pts = sample_points(part, s, radiance.dtype());
    const auto w = composite(radiance.density(pts).sigma, s).weights;
    const auto keep = (w > weight_floor).nonzero();  // K x 2 (ray, sample)
    const auto r = keep.select(1, 0), k = keep.select(1, 1);
    points.push_back(pts.index({r, k}));
    weights.push_back(w.index({r, k}));
    ray.push_back(r + begin);
    directions.push_back(part.directions.to(radiance.dtype()).index_select(0, r));
  }
  return FrameSamples{torch::cat(points), torch::cat(weights), torch::cat(ray), torch::cat(directions),
                      camera.height(), camera.width()};
}

torch::Tensor render_stylized_frame(const StylizedFieldParams& params, const FrameSamples& frame,
                                    const torch::Tensor& code, int64_t chunk) {
  torch::NoGradGuard no_grad;
  auto image = torch::zeros({static_cast<int64_t>(frame.height) * frame.width, 3},
                            torch::TensorOptions().dtype(params.dtype()));
  const int64_t m = frame.points.size(0);
  for (int64_t begin = 0; begin < m; begin += chunk) {
    const auto end = std::min(m, begin + chunk);
    const auto colors = stylized_color(params, frame.points.slice(0, begin, end), code,
                                       frame.directions.slice(0, begin, end));
    image.index_add_(0, frame.ray.slice(0, begin, end),
                     frame.weights.slice(0, begin, end).to(colors.scalar_type()).unsqueeze(1) * colors);
  }
  return image.reshape({frame.height, frame.width, 3}).to(torch::kFloat32);
}

torch::Tensor render_stylized_image(const StylizedFieldParams& params, const RadianceFieldParams& radiance,
                                    const CameraPose& camera, int samples, const torch::Tensor& code, int64_t chunk) {
  return render_stylized_frame(params, FrameSamples::compute(radiance, camera, samples, kStylizedWeightFloor, chunk),
                               code);
}

nlohmann::json LossWeights::to_json() const {
  return {{"lambda_d", lambda_d}, {"lambda_s", lambda_s}, {"lambda_m", lambda_m}};
}

torch::Tensor mimic_loss(const torch::Tensor& field_colors, const torch::Tensor& stylizer_colors) {
  if (field_colors.sizes() != stylizer_colors.sizes()) {
    throw std::invalid_argument("mimic_loss: batches are not aligned (" + std::to_string(field_colors.size(0)) + " vs " +
                                std::to_string(stylizer_colors.size(0)) + " rows)");
  }
  return (field_colors - stylizer_colors.to(field_colors.scalar_type())).pow(2).mean();
}

torch::Tensor objective_n(const torch::Tensor& mimic, const torch::Tensor& distribution, const LossWeights& w) {
  return mimic + w.lambda_d * distribution;
}

torch::Tensor objective_c(const torch::Tensor& mimic, const torch::Tensor& style, const torch::Tensor& content,
                          const LossWeights& w) {
  return w.lambda_m * mimic + w.lambda_s * style + content;
}

MutualObjectives mutual_objectives(const torch::Tensor& field_colors, const torch::Tensor& stylizer_colors,
                                   const torch::Tensor& distribution, const torch::Tensor& style,
                                   const torch::Tensor& content, const LossWeights& w) {
  MutualObjectives out;
  out.mimic_for_field = mimic_loss(field_colors, stylizer_colors.detach());
  out.mimic_for_decoder = mimic_loss(field_colors.detach(), stylizer_colors);
  out.distribution = distribution;
  out.field = objective_n(out.mimic_for_field, distribution, w);
  if (style.defined() && content.defined()) out.decoder = objective_c(out.mimic_for_decoder, style, content, w);
  return out;
}

}  // namespace stylenerf
