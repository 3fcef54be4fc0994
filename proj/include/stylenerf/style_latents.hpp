#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/types.h>

#include "stylenerf/archive.hpp"
#include "stylenerf/nn.hpp"

namespace stylenerf {

/// Diagonal Gaussian over the latent space for one style.
struct StyleDistribution {
  torch::Tensor mu;     // D
  torch::Tensor sigma;  // D, strictly positive
};

struct VaeConfig {
  int latent_dim = 32;
  int hidden = 128;
  double beta = 0.01;  // KL weight
  int steps = 2000;
  int batch = 32;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

/// VAE over flattened style statistics. Inputs are standardized with the
/// corpus mean/scale stored alongside the weights.
struct VaeParams {
  Mlp encoder;  // F -> hidden -> 2D (mu, log sigma)
  Mlp decoder;  // D -> hidden -> F
  torch::Tensor input_mean;
  torch::Tensor input_scale;

  int64_t input_dim() const { return input_mean.size(0); }
  int64_t latent_dim() const { return decoder.layers.front().in_features(); }

  static VaeParams create(int64_t input_dim, const VaeConfig& config);
  NamedTensors named_parameters();   // trainable weights only
  NamedTensors named_tensors();      // weights plus normalization

  void save(TensorArchive& archive) const;
  static VaeParams load(const TensorArchive& archive);
};

/// KL(N(mu, sigma) || N(0, I)) summed over the last dimension.
torch::Tensor kl_to_standard_normal(const torch::Tensor& mu, const torch::Tensor& sigma);

struct VaeFit {
  VaeParams params;
  std::vector<double> loss_history;
};

/// Minimizes reconstruction MSE + beta * KL over the corpus (rows of `corpus`).
VaeFit train_vae(const torch::Tensor& corpus, const VaeConfig& config);

/// Deterministic posterior for one flattened style-statistics vector.
StyleDistribution encode_style(const VaeParams& params, const torch::Tensor& stats);

/// One learnable code per (view, style) pair.
struct LatentCodeTable {
  std::vector<std::string> view_ids;
  std::vector<std::string> style_ids;
  torch::Tensor codes;  // V x S x D, optimizer-visible leaf

  torch::Tensor code(int64_t view, int64_t style) const { return codes.select(0, view).select(0, style); }
  int64_t view_index(const std::string& id) const;
  int64_t style_index(const std::string& id) const;

  void save(TensorArchive& archive) const;
  static LatentCodeTable load(const TensorArchive& archive);
};

/// Draws l_{i,j} ~ N(mu_j, sigma_j) for every pair, seeded.
LatentCodeTable init_codes(const std::vector<StyleDistribution>& styles, const std::vector<std::string>& style_ids,
                           const std::vector<std::string>& view_ids, std::uint64_t seed);

enum class DistributionLossForm {
  kPrinted,      // sum (l - mu)^2 / (2 pi sigma^2)
  kGaussianNll,  // sum (l - mu)^2 / (2 sigma^2) + log sigma + log(2 pi) / 2
};

/// Pulls a latent code towards its style's Gaussian. Throws if any sigma <= 0.
torch::Tensor distribution_loss(const torch::Tensor& code, const StyleDistribution& dist,
                                DistributionLossForm form = DistributionLossForm::kPrinted);

/// The code used at inference time: the distribution mean itself.
inline torch::Tensor inference_code(const StyleDistribution& dist) { return dist.mu; }

}  // namespace stylenerf
