#include "stylenerf/style_latents.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <torch/torch.h>

namespace stylenerf {

VaeParams VaeParams::create(int64_t input_dim, const VaeConfig& config) {
  if (config.latent_dim < 1 || config.hidden < 1) throw std::invalid_argument("vae: latent and hidden sizes must be >= 1");
  auto gen = make_generator(config.seed);
  VaeParams p;
  p.encoder = make_mlp({input_dim, config.hidden, 2 * config.latent_dim}, gen);
  p.decoder = make_mlp({config.latent_dim, config.hidden, input_dim}, gen);
  p.input_mean = torch::zeros({input_dim});
  p.input_scale = torch::ones({input_dim});
  return p;
}

NamedTensors VaeParams::named_parameters() {
  NamedTensors out;
  encoder.append_named(out, "encoder.");
  decoder.append_named(out, "decoder.");
  return out;
}

NamedTensors VaeParams::named_tensors() {
  auto out = named_parameters();
  out.emplace_back("input_mean", &input_mean);
  out.emplace_back("input_scale", &input_scale);
  return out;
}

void VaeParams::save(TensorArchive& archive) const {
  archive.meta()["vae"] = {{"input_dim", input_dim()},
                           {"latent_dim", latent_dim()},
                           {"hidden", encoder.layers.front().out_features()}};
  write_named(archive, "vae.", const_cast<VaeParams*>(this)->named_tensors());
}

VaeParams VaeParams::load(const TensorArchive& archive) {
  const auto& meta = archive.meta().at("vae");
  VaeConfig config;
  config.latent_dim = meta.at("latent_dim");
  config.hidden = meta.at("hidden");
  auto params = create(meta.at("input_dim").get<int64_t>(), config);
  read_named(archive, "vae.", params.named_tensors());
  return params;
}

torch::Tensor kl_to_standard_normal(const torch::Tensor& mu, const torch::Tensor& sigma) {
  return 0.5 * (mu.pow(2) + sigma.pow(2) - 1.0 - 2.0 * torch::log(sigma)).sum(-1);
}

namespace {

struct Posterior {
  torch::Tensor mu;
  torch::Tensor sigma;
};

Posterior posterior(const VaeParams& params, const torch::Tensor& stats) {
  const auto normalized = (stats - params.input_mean) / params.input_scale;
  const auto out = params.encoder.forward(normalized);
  const auto d = params.latent_dim();
  return Posterior{out.narrow(-1, 0, d), torch::exp(out.narrow(-1, d, d))};
}

}  // namespace

VaeFit train_vae(const torch::Tensor& corpus, const VaeConfig& config) {
  if (corpus.dim() != 2 || corpus.size(0) < 2) throw std::invalid_argument("train_vae: need a corpus of at least two style vectors");
  const auto data = corpus.to(torch::kFloat32);
  VaeFit fit{VaeParams::create(data.size(1), config), {}};
  fit.params.input_mean = data.mean(0);
  fit.params.input_scale = data.std(0, /*unbiased=*/false).clamp_min(1e-4);

  auto named = fit.params.named_parameters();
  set_requires_grad(named, true);
  Adam optimizer(tensors_of(named), AdamOptions{config.lr});
  auto gen = make_generator(config.seed ^ 0x766165ULL);
  const int64_t batch = std::min<int64_t>(config.batch, data.size(0));
  for (int step = 0; step < config.steps; ++step) {
    const auto index = torch::randint(data.size(0), {batch}, gen, torch::kInt64);
    const auto x = data.index_select(0, index);
    const auto post = posterior(fit.params, x);
    const auto eps = torch::randn(post.mu.sizes(), gen, torch::kFloat32);
    const auto z = post.mu + post.sigma * eps;
    const auto recon = fit.params.decoder.forward(z);
    const auto target = (x - fit.params.input_mean) / fit.params.input_scale;
    const auto loss = (recon - target).pow(2).mean() + config.beta * kl_to_standard_normal(post.mu, post.sigma).mean();
    const double value = loss.item<double>();
    if (!std::isfinite(value)) throw std::runtime_error("train_vae: non-finite loss at step " + std::to_string(step));
    optimizer.zero_grad();
    loss.backward();
    optimizer.step();
    fit.loss_history.push_back(value);
  }
  set_requires_grad(named, false);
  for (auto& [name, t] : named) t->mutable_grad() = torch::Tensor();
  return fit;
}

StyleDistribution encode_style(const VaeParams& params, const torch::Tensor& stats) {
  const auto flat = stats.reshape({-1});
  if (flat.size(0) != params.input_dim()) {
    throw std::invalid_argument("encode_style: expected " + std::to_string(params.input_dim()) +
                                "-dim style statistics, got " + std::to_string(flat.size(0)));
  }
  torch::NoGradGuard no_grad;
  const auto post = posterior(params, flat.to(torch::kFloat32));
  return StyleDistribution{post.mu.clone(), post.sigma.clone()};
}

int64_t LatentCodeTable::view_index(const std::string& id) const {
  auto it = std::find(view_ids.begin(), view_ids.end(), id);
  if (it == view_ids.end()) throw std::out_of_range("latent codes: unknown view '" + id + "'");
  return it - view_ids.begin();
}

int64_t LatentCodeTable::style_index(const std::string& id) const {
  auto it = std::find(style_ids.begin(), style_ids.end(), id);
  if (it == style_ids.end()) throw std::out_of_range("latent codes: unknown style '" + id + "'");
  return it - style_ids.begin();
}

void LatentCodeTable::save(TensorArchive& archive) const {
  archive.meta()["code_views"] = view_ids;
  archive.meta()["code_styles"] = style_ids;
  archive.put("codes", codes);
}

LatentCodeTable LatentCodeTable::load(const TensorArchive& archive) {
  LatentCodeTable table;
  table.view_ids = archive.meta().at("code_views").get<std::vector<std::string>>();
  table.style_ids = archive.meta().at("code_styles").get<std::vector<std::string>>();
  table.codes = archive.get("codes").clone();
  return table;
}

LatentCodeTable init_codes(const std::vector<StyleDistribution>& styles, const std::vector<std::string>& style_ids,
                           const std::vector<std::string>& view_ids, std::uint64_t seed) {
  if (styles.size() != style_ids.size()) throw std::invalid_argument("init_codes: one id per style required");
  if (styles.empty() || view_ids.empty()) throw std::invalid_argument("init_codes: need at least one view and style");
  auto gen = make_generator(seed);
  const auto d = styles.front().mu.size(0);
  const auto v = static_cast<int64_t>(view_ids.size());
  const auto s = static_cast<int64_t>(styles.size());
  std::vector<torch::Tensor> mus, sigmas;
  for (const auto& style : styles) {
    mus.push_back(style.mu.to(torch::kFloat32));
    sigmas.push_back(style.sigma.to(torch::kFloat32));
  }
  const auto mu = torch::stack(mus).unsqueeze(0);
  const auto sigma = torch::stack(sigmas).unsqueeze(0);
  const auto eps = torch::randn({v, s, d}, gen, torch::kFloat32);
  LatentCodeTable table;
  table.view_ids = view_ids;
  table.style_ids = style_ids;
  table.codes = (mu + sigma * eps).contiguous();
  return table;
}

torch::Tensor distribution_loss(const torch::Tensor& code, const StyleDistribution& dist, DistributionLossForm form) {
  if (code.size(-1) != dist.mu.size(-1)) throw std::invalid_argument("distribution_loss: latent dimension mismatch");
  if ((dist.sigma <= 0).any().item<bool>()) throw std::invalid_argument("distribution_loss: sigma must be positive");
  const auto mu = dist.mu.to(code.scalar_type());
  const auto sigma = dist.sigma.to(code.scalar_type());
  const auto sq = (code - mu).pow(2);
  if (form == DistributionLossForm::kPrinted) return (sq / (2.0 * std::numbers::pi * sigma.pow(2))).sum(-1);
  return (sq / (2.0 * sigma.pow(2)) + torch::log(sigma) + 0.5 * std::log(2.0 * std::numbers::pi)).sum(-1);
}

}  // namespace stylenerf
