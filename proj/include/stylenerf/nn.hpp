#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <ATen/core/Generator.h>
#include <torch/types.h>

#include "stylenerf/archive.hpp"

namespace stylenerf {

/// Seeded CPU generator; every random draw in the library goes through one of these.
at::Generator make_generator(std::uint64_t seed);

/// Dense layer with weight stored [in, out] so that y = x W + b.
struct Linear {
  torch::Tensor weight;
  torch::Tensor bias;

  int64_t in_features() const { return weight.size(0); }
  int64_t out_features() const { return weight.size(1); }
  torch::Tensor forward(const torch::Tensor& x) const;
};

/// Glorot-uniform weights, zero bias.
Linear make_linear(int64_t in, int64_t out, at::Generator& gen, torch::Dtype dtype = torch::kFloat32);

/// Plain fully-connected stack: ReLU between layers, identity after the last.
struct Mlp {
  std::vector<Linear> layers;

  torch::Tensor forward(const torch::Tensor& x) const;
  void append_named(NamedTensors& out, const std::string& prefix);
};

Mlp make_mlp(const std::vector<int64_t>& widths, at::Generator& gen, torch::Dtype dtype = torch::kFloat32);

/// Converts every slot in place (detached, leaf).
void convert_named(const NamedTensors& tensors, torch::Dtype dtype);
void set_requires_grad(const NamedTensors& tensors, bool requires_grad);
std::vector<torch::Tensor> tensors_of(const NamedTensors& tensors);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam over an explicit parameter list. Moments live here so that a training
/// state can be checkpointed and resumed bit-exactly.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<torch::Tensor> params, AdamOptions options);

  void zero_grad();
  /// Parameters without a gradient are left untouched.
  void step();
  void set_lr(double lr) { options_.lr = lr; }
  double lr() const { return options_.lr; }
  int64_t step_count() const { return step_count_; }

  void save(TensorArchive& archive, const std::string& prefix) const;
  void load(const TensorArchive& archive, const std::string& prefix);

 private:
  std::vector<torch::Tensor> params_;
  std::vector<torch::Tensor> first_moment_;
  std::vector<torch::Tensor> second_moment_;
  AdamOptions options_;
  int64_t step_count_ = 0;
};

}  // namespace stylenerf
