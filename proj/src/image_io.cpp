#include "stylenerf/image_io.hpp"

#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <torch/torch.h>

namespace stylenerf {

torch::Tensor read_png(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw std::runtime_error("image file not found: " + path.string());
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw std::runtime_error("cannot decode image: " + path.string());
  if (!bgr.isContinuous()) bgr = bgr.clone();
  auto bytes = torch::from_blob(bgr.data, {bgr.rows, bgr.cols, 3}, torch::kUInt8).flip({2}).clone();
  return bytes.to(torch::kFloat32) / 255.0f;
}

torch::Tensor quantize_8bit(const torch::Tensor& image) {
  return (image.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0f).round() / 255.0f;
}

void write_png(const std::filesystem::path& path, const torch::Tensor& image) {
  if (image.dim() != 3 || image.size(2) != 3) throw std::invalid_argument("write_png: expected H x W x 3 image");
  auto bytes =
      (image.detach().to(torch::kFloat32).clamp(0.0, 1.0) * 255.0f).round().to(torch::kUInt8).flip({2}).contiguous();
  cv::Mat bgr(static_cast<int>(bytes.size(0)), static_cast<int>(bytes.size(1)), CV_8UC3, bytes.data_ptr());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), bgr)) throw std::runtime_error("cannot write image: " + path.string());
}

void write_pfm(const std::filesystem::path& path, const torch::Tensor& map) {
  if (map.dim() != 2) throw std::invalid_argument("write_pfm: expected H x W map");
  auto data = map.detach().to(torch::kFloat32).contiguous();
  const int64_t h = data.size(0), w = data.size(1);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "Pf\n" << w << " " << h << "\n-1.0\n";
  // PFM rows run bottom to top.
  const float* ptr = data.data_ptr<float>();
  for (int64_t row = h - 1; row >= 0; --row) {
    out.write(reinterpret_cast<const char*>(ptr + row * w), static_cast<std::streamsize>(w * sizeof(float)));
  }
}

torch::Tensor read_pfm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("depth file not found: " + path.string());
  std::string magic;
  int64_t w = 0, h = 0;
  double scale = 0.0;
  in >> magic >> w >> h >> scale;
  in.get();
  if (magic != "Pf" || w <= 0 || h <= 0 || scale >= 0.0) {
    throw std::runtime_error("unsupported PFM (need little-endian single channel): " + path.string());
  }
  auto data = torch::empty({h, w}, torch::kFloat32);
  float* ptr = data.data_ptr<float>();
  for (int64_t row = h - 1; row >= 0; --row) {
    in.read(reinterpret_cast<char*>(ptr + row * w), static_cast<std::streamsize>(w * sizeof(float)));
  }
  if (!in) throw std::runtime_error("truncated PFM: " + path.string());
  return data;
}

torch::Tensor to_nchw(const torch::Tensor& image) { return image.permute({2, 0, 1}).unsqueeze(0); }

torch::Tensor to_hwc(const torch::Tensor& batch) { return batch.squeeze(0).permute({1, 2, 0}); }

double psnr(const torch::Tensor& a, const torch::Tensor& b) {
  const double mse = (a.to(torch::kFloat64) - b.to(torch::kFloat64)).pow(2).mean().item<double>();
  return -10.0 * std::log10(std::max(mse, 1e-20));
}

}  // namespace stylenerf
