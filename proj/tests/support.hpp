#pragma once

#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>

#include <unistd.h>

#include <torch/torch.h>

namespace testing_support {

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("stylenerf_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Central differences of a scalar function with respect to every entry of `x`
/// (float64, modified in place and restored).
inline torch::Tensor numeric_gradient(const std::function<double()>& f, torch::Tensor x, double h = 1e-6) {
  torch::NoGradGuard no_grad;
  auto grad = torch::zeros_like(x);
  auto flat = x.view({-1});
  auto g = grad.view({-1});
  for (int64_t i = 0; i < flat.numel(); ++i) {
    const double orig = flat[i].item<double>();
    flat[i] = orig + h;
    const double up = f();
    flat[i] = orig - h;
    const double down = f();
    flat[i] = orig;
    g[i] = (up - down) / (2 * h);
  }
  return grad;
}

/// max |a - b| / max(max |b|, floor)
inline double relative_error(const torch::Tensor& a, const torch::Tensor& b, double floor = 1e-12) {
  const double num = (a - b).abs().max().item<double>();
  const double den = std::max(b.abs().max().item<double>(), floor);
  return num / den;
}

inline torch::Tensor f64(torch::IntArrayRef sizes) { return torch::empty(sizes, torch::kFloat64); }

}  // namespace testing_support
