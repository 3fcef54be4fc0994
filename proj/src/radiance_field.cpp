#include "stylenerf/radiance_field.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include <torch/torch.h>

namespace stylenerf {

torch::Tensor positional_encoding(const torch::Tensor& v, int frequencies) {
  if (frequencies < 1) throw std::invalid_argument("positional_encoding: need at least one frequency");
  auto scales = torch::pow(2.0, torch::arange(frequencies, v.options()));
  auto scaled = v.unsqueeze(-1) * scales;                                  // ... x d x L
  auto pairs = torch::stack({torch::sin(scaled), torch::cos(scaled)}, -1);  // ... x d x L x 2
  auto sizes = v.sizes().vec();
  sizes.back() = v.size(-1) * 2 * frequencies;
  return pairs.reshape(sizes);
}

RaySamples sample_rays(int64_t n_rays, double near, double far, int samples, bool stratified,
                       at::Generator* generator) {
  if (!(near > 0.0) || !(far > near)) throw std::invalid_argument("sample_rays: need 0 < near < far");
  if (samples < 2) throw std::invalid_argument("sample_rays: need at least two samples per ray");
  const double bin = (far - near) / samples;
  auto lower = near + bin * torch::arange(samples, torch::kFloat64);
  torch::Tensor depths;
  if (stratified) {
    auto u = generator ? torch::rand({n_rays, samples}, *generator, torch::kFloat64)
                       : torch::rand({n_rays, samples}, torch::kFloat64);
    depths = lower.unsqueeze(0) + u * bin;
  } else {
    depths = (lower + 0.5 * bin).unsqueeze(0).expand({n_rays, samples}).contiguous();
  }
  auto next = torch::cat({depths.slice(1, 1), torch::full({n_rays, 1}, far, torch::kFloat64)}, 1);
  return RaySamples{depths, next - depths};
}

RaySamples sample_ray(double near, double far, int samples, bool stratified, std::uint64_t seed) {
  auto gen = make_generator(seed);
  return sample_rays(1, near, far, samples, stratified, &gen);
}

torch::Tensor sample_points(const RayBundle& rays, const RaySamples& samples, torch::Dtype dtype) {
  auto points = rays.origins.unsqueeze(1) + rays.directions.unsqueeze(1) * samples.depths.unsqueeze(2);
  return points.to(dtype);
}

Compositing composite(const torch::Tensor& sigma, const RaySamples& samples) {
  const auto deltas = samples.deltas.to(sigma.scalar_type());
  const auto optical = sigma * deltas;
  const auto before = torch::cumsum(optical, 1) - optical;  // exclusive prefix sum
  Compositing c;
  c.transmittance = torch::exp(-before);
  c.weights = c.transmittance * (1.0 - torch::exp(-optical));
  c.accumulation = c.weights.sum(1);
  const auto depths = samples.depths.to(sigma.scalar_type());
  c.depth = (c.weights * depths).sum(1) / torch::clamp_min(c.accumulation, kDepthEpsilon);
  return c;
}

torch::Tensor composite_color(const Compositing& c, const torch::Tensor& colors) {
  return (c.weights.unsqueeze(2) * colors).sum(1);
}

nlohmann::json RadianceFieldConfig::to_json() const {
  return {{"pos_frequencies", pos_frequencies}, {"dir_frequencies", dir_frequencies}, {"depth", depth},
          {"width", width}, {"skip_layer", skip_layer}, {"near", near}, {"far", far}, {"background", background}};
}

RadianceFieldConfig RadianceFieldConfig::from_json(const nlohmann::json& j) {
  RadianceFieldConfig c;
  c.pos_frequencies = j.at("pos_frequencies");
  c.dir_frequencies = j.at("dir_frequencies");
  c.depth = j.at("depth");
  c.width = j.at("width");
  c.skip_layer = j.at("skip_layer");
  c.near = j.at("near");
  c.far = j.at("far");
  c.background = j.value("background", 0.0);
  return c;
}

RadianceFieldParams RadianceFieldParams::create(const RadianceFieldConfig& config, std::uint64_t seed,
                                                torch::Dtype dtype) {
  if (config.depth < 1 || config.width < 1) throw std::invalid_argument("radiance field: depth and width must be >= 1");
  if (config.pos_frequencies < 1 || config.dir_frequencies < 1) {
    throw std::invalid_argument("radiance field: encoding frequencies must be >= 1");
  }
  if (!(config.near > 0.0) || !(config.far > config.near)) throw std::invalid_argument("radiance field: need 0 < near < far");
  auto gen = make_generator(seed);
  const int64_t pos_dim = 3 * 2 * config.pos_frequencies;
  const int64_t dir_dim = 3 * 2 * config.dir_frequencies;
  RadianceFieldParams p;
  p.config = config;
  for (int i = 0; i < config.depth; ++i) {
    int64_t in = i == 0 ? pos_dim : config.width;
    if (i == config.skip_layer && i > 0) in += pos_dim;
    p.trunk.push_back(make_linear(in, config.width, gen, dtype));
  }
  p.sigma_head = make_linear(config.width, 1, gen, dtype);
  p.feature_head = make_linear(config.width, config.width, gen, dtype);
  p.color_head = make_mlp({config.width + dir_dim, std::max(config.width / 2, 1), 3}, gen, dtype);
  return p;
}

RadianceFieldParams::Density RadianceFieldParams::density(const torch::Tensor& points) const {
  const auto encoded = positional_encoding(points.to(dtype()), config.pos_frequencies);
  torch::Tensor h = encoded;
  for (size_t i = 0; i < trunk.size(); ++i) {
    if (static_cast<int>(i) == config.skip_layer && i > 0) h = torch::cat({h, encoded}, -1);
    h = torch::relu(trunk[i].forward(h));
  }
  Density out;
  out.sigma = torch::softplus(sigma_head.forward(h)).squeeze(-1);
  out.feature = feature_head.forward(h);
  return out;
}

torch::Tensor RadianceFieldParams::radiance(const torch::Tensor& feature, const torch::Tensor& directions) const {
  const auto encoded = positional_encoding(directions.to(dtype()), config.dir_frequencies);
  return torch::sigmoid(color_head.forward(torch::cat({feature, encoded}, -1)));
}

NamedTensors RadianceFieldParams::opacity_parameters() {
  NamedTensors out;
  for (size_t i = 0; i < trunk.size(); ++i) {
    out.emplace_back("trunk." + std::to_string(i) + ".weight", &trunk[i].weight);
    out.emplace_back("trunk." + std::to_string(i) + ".bias", &trunk[i].bias);
  }
  out.emplace_back("sigma.weight", &sigma_head.weight);
  out.emplace_back("sigma.bias", &sigma_head.bias);
  return out;
}

NamedTensors RadianceFieldParams::color_parameters() {
  NamedTensors out;
  out.emplace_back("feature.weight", &feature_head.weight);
  out.emplace_back("feature.bias", &feature_head.bias);
  color_head.append_named(out, "color.");
  return out;
}

NamedTensors RadianceFieldParams::named_parameters() {
  auto out = opacity_parameters();
  auto color = color_parameters();
  out.insert(out.end(), color.begin(), color.end());
  return out;
}

void RadianceFieldParams::to(torch::Dtype dtype) { convert_named(named_parameters(), dtype); }

void RadianceFieldParams::save(TensorArchive& archive) const {
  archive.meta()["radiance_field"] = config.to_json();
  write_named(archive, "radiance.", const_cast<RadianceFieldParams*>(this)->named_parameters());
}

RadianceFieldParams RadianceFieldParams::load(const TensorArchive& archive) {
  auto params = create(RadianceFieldConfig::from_json(archive.meta().at("radiance_field")), 0);
  read_named(archive, "radiance.", params.named_parameters());
  return params;
}

RenderOutput render_rays(const RadianceFieldParams& params, const RayBundle& rays, const RaySamples& samples) {
  const auto points = sample_points(rays, samples, params.dtype());
  const auto density = params.density(points);
  const auto dirs = rays.directions.to(params.dtype()).unsqueeze(1).expand({-1, samples.count(), 3});
  const auto colors = params.radiance(density.feature, dirs);
  RenderOutput out;
  out.compositing = composite(density.sigma, samples);
  out.color = composite_color(out.compositing, colors);
  if (params.config.background != 0.0)
    out.color = out.color + (1.0 - out.compositing.accumulation).unsqueeze(1) * params.config.background;
  return out;
}

RenderedImage render_image(const RadianceFieldParams& params, const CameraPose& camera, int samples, int64_t chunk) {
  return render_image(params, camera, samples, 0, nullptr, chunk);
}

RenderedImage render_image(const RadianceFieldParams& params, const CameraPose& camera, int samples, int top_k,
                           TopSamples* top, int64_t chunk) {
  if (top && (top_k < 1 || top_k > samples)) throw std::invalid_argument("render_image: top_k must be in [1, samples]");
  torch::NoGradGuard no_grad;
  const auto rays = generate_all_rays(camera);
  std::vector<torch::Tensor> colors, depths, accs, points, weights;
  for (int64_t begin = 0; begin < rays.size(); begin += chunk) {
    const auto end = std::min(rays.size(), begin + chunk);
    const auto part = rays.slice(begin, end);
    const auto s = sample_rays(part.size(), params.config.near, params.config.far, samples, false);
    const auto out = render_rays(params, part, s);
    colors.push_back(out.color);
    depths.push_back(out.compositing.depth);
    accs.push_back(out.compositing.accumulation);
    if (top) {
      const auto& w = out.compositing.weights;
      // Highest weights, kept in front-to-back order.
      const auto order = std::get<0>(std::get<1>(w.topk(top_k, 1, true, true)).sort(1));
      const auto pts = sample_points(part, s, params.dtype());
      points.push_back(pts.gather(1, order.unsqueeze(2).expand({-1, -1, 3})));
      weights.push_back(w.gather(1, order));
    }
  }
  const int h = camera.height(), w = camera.width();
  if (top) {
    top->points = torch::cat(points);
    top->weights = torch::cat(weights);
    top->directions = rays.directions.to(params.dtype());
  }
  return RenderedImage{torch::cat(colors).reshape({h, w, 3}).to(torch::kFloat32),
                       torch::cat(depths).reshape({h, w}).to(torch::kFloat32),
                       torch::cat(accs).reshape({h, w}).to(torch::kFloat32)};
}

double DepthMap::valid_fraction() const { return valid.to(torch::kFloat64).mean().item<double>(); }

DepthMap depth_map_from_render(const RenderedImage& render) {
  DepthMap map;
  map.valid = render.accumulation >= kMinValidAccumulation;
  map.depth = torch::where(map.valid, render.depth,
                           torch::full_like(render.depth, std::numeric_limits<float>::infinity()));
  return map;
}

DepthMap render_depth_map(const RadianceFieldParams& params, const CameraPose& camera, int samples) {
  return depth_map_from_render(render_image(params, camera, samples));
}

NerfFit fit_nerf(const std::vector<PosedImage>& views, const RadianceFieldConfig& model, const NerfTrainConfig& train) {
  return fit_nerf(views, RadianceFieldParams::create(model, train.seed), train);
}

NerfFit fit_nerf(const std::vector<PosedImage>& views, RadianceFieldParams params, const NerfTrainConfig& train) {
  if (views.empty()) throw std::invalid_argument("fit_nerf: empty dataset");
  if (train.batch_rays < 1 || train.samples < 2) throw std::invalid_argument("fit_nerf: invalid batch/sample count");

  std::vector<torch::Tensor> origins, directions, colors;
  for (const auto& view : views) {
    const auto rays = generate_all_rays(view.camera);
    origins.push_back(rays.origins);
    directions.push_back(rays.directions);
    colors.push_back(view.image.reshape({-1, 3}).to(params.dtype()));
  }
  const auto all_origins = torch::cat(origins);
  const auto all_directions = torch::cat(directions);
  const auto all_colors = torch::cat(colors);
  const int64_t total = all_origins.size(0);

  NerfFit fit{std::move(params), {}};
  auto named = fit.params.named_parameters();
  set_requires_grad(named, true);
  Adam optimizer(tensors_of(named), AdamOptions{train.lr});
  auto gen = make_generator(train.seed ^ 0x6e657266ULL);
  const double decay = train.steps > 1 ? std::pow(train.lr_final / train.lr, 1.0 / (train.steps - 1)) : 1.0;

  fit.loss_history.reserve(static_cast<size_t>(train.steps));
  for (int step = 0; step < train.steps; ++step) {
    const auto index = torch::randint(total, {train.batch_rays}, gen, torch::kInt64);
    RayBundle batch;
    batch.origins = all_origins.index_select(0, index);
    batch.directions = all_directions.index_select(0, index);
    const auto samples = sample_rays(train.batch_rays, fit.params.config.near, fit.params.config.far, train.samples,
                                     true, &gen);
    const auto out = render_rays(fit.params, batch, samples);
    const auto loss = (out.color - all_colors.index_select(0, index)).pow(2).mean();
    const double value = loss.item<double>();
    if (!std::isfinite(value)) {
      throw std::runtime_error("fit_nerf: non-finite photometric loss at step " + std::to_string(step));
    }
    optimizer.zero_grad();
    loss.backward();
    optimizer.step();
    optimizer.set_lr(optimizer.lr() * decay);
    fit.loss_history.push_back(value);
  }
  set_requires_grad(named, false);
  for (auto& [name, t] : named) t->mutable_grad() = torch::Tensor();
  return fit;
}

}  // namespace stylenerf
