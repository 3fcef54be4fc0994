#include "stylenerf/nn.hpp"

#include <cmath>
#include <stdexcept>

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

namespace stylenerf {

at::Generator make_generator(std::uint64_t seed) { return at::detail::createCPUGenerator(seed); }

torch::Tensor Linear::forward(const torch::Tensor& x) const {
  if (x.dim() == 2) return torch::addmm(bias, x, weight);
  return torch::matmul(x, weight) + bias;
}

Linear make_linear(int64_t in, int64_t out, at::Generator& gen, torch::Dtype dtype) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in + out));
  auto options = torch::TensorOptions().dtype(dtype);
  Linear layer;
  layer.weight = (torch::rand({in, out}, gen, options) * 2.0 - 1.0) * bound;
  layer.bias = torch::zeros({out}, options);
  return layer;
}

torch::Tensor Mlp::forward(const torch::Tensor& x) const {
  torch::Tensor h = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    h = layers[i].forward(h);
    if (i + 1 < layers.size()) h = torch::relu(h);
  }
  return h;
}

void Mlp::append_named(NamedTensors& out, const std::string& prefix) {
  for (size_t i = 0; i < layers.size(); ++i) {
    out.emplace_back(prefix + std::to_string(i) + ".weight", &layers[i].weight);
    out.emplace_back(prefix + std::to_string(i) + ".bias", &layers[i].bias);
  }
}

Mlp make_mlp(const std::vector<int64_t>& widths, at::Generator& gen, torch::Dtype dtype) {
  if (widths.size() < 2) throw std::invalid_argument("make_mlp: need at least input and output width");
  Mlp mlp;
  for (size_t i = 0; i + 1 < widths.size(); ++i) mlp.layers.push_back(make_linear(widths[i], widths[i + 1], gen, dtype));
  return mlp;
}

void convert_named(const NamedTensors& tensors, torch::Dtype dtype) {
  for (const auto& [name, tensor] : tensors) *tensor = tensor->detach().to(dtype).clone();
}

void set_requires_grad(const NamedTensors& tensors, bool requires_grad) {
  for (const auto& [name, tensor] : tensors) tensor->set_requires_grad(requires_grad);
}

std::vector<torch::Tensor> tensors_of(const NamedTensors& tensors) {
  std::vector<torch::Tensor> out;
  out.reserve(tensors.size());
  for (const auto& [name, tensor] : tensors) out.push_back(*tensor);
  return out;
}

Adam::Adam(std::vector<torch::Tensor> params, AdamOptions options)
    : params_(std::move(params)), options_(options) {
  for (const auto& p : params_) {
    first_moment_.push_back(torch::zeros_like(p));
    second_moment_.push_back(torch::zeros_like(p));
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) {
    if (p.grad().defined()) {
      p.mutable_grad().detach_();
      p.mutable_grad().zero_();
    }
  }
}

void Adam::step() {
  torch::NoGradGuard no_grad;
  ++step_count_;
  const double bias1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_count_));
  const double bias2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_count_));
  for (size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.grad().defined()) continue;
    const auto& g = p.grad();
    first_moment_[i].mul_(options_.beta1).add_(g, 1.0 - options_.beta1);
    second_moment_[i].mul_(options_.beta2).addcmul_(g, g, 1.0 - options_.beta2);
    auto denom = (second_moment_[i] / bias2).sqrt_().add_(options_.eps);
    p.addcdiv_(first_moment_[i], denom, -options_.lr / bias1);
  }
}

void Adam::save(TensorArchive& archive, const std::string& prefix) const {
  archive.put(prefix + "step", torch::tensor({step_count_}, torch::kInt64));
  archive.put(prefix + "lr", torch::tensor({options_.lr}, torch::kFloat64));
  for (size_t i = 0; i < params_.size(); ++i) {
    archive.put(prefix + "m." + std::to_string(i), first_moment_[i]);
    archive.put(prefix + "v." + std::to_string(i), second_moment_[i]);
  }
}

void Adam::load(const TensorArchive& archive, const std::string& prefix) {
  step_count_ = archive.get(prefix + "step").item<int64_t>();
  options_.lr = archive.get(prefix + "lr").item<double>();
  for (size_t i = 0; i < params_.size(); ++i) {
    first_moment_[i] = archive.get(prefix + "m." + std::to_string(i)).to(params_[i].scalar_type()).clone();
    second_moment_[i] = archive.get(prefix + "v." + std::to_string(i)).to(params_[i].scalar_type()).clone();
  }
}

}  // namespace stylenerf
