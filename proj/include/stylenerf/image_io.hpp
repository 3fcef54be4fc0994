#pragma once

#include <filesystem>

#include <torch/types.h>

namespace stylenerf {

/// Images are H x W x 3 float tensors in [0,1], RGB order.
torch::Tensor read_png(const std::filesystem::path& path);
/// Quantizes to 8 bits (round to nearest) and writes RGB PNG.
void write_png(const std::filesystem::path& path, const torch::Tensor& image);
/// Round-trips an image through 8-bit quantization, matching write_png/read_png.
torch::Tensor quantize_8bit(const torch::Tensor& image);

/// Single-channel float maps (depths) as little-endian PFM.
void write_pfm(const std::filesystem::path& path, const torch::Tensor& map);
torch::Tensor read_pfm(const std::filesystem::path& path);

/// HWC [0,1] image <-> NCHW batch of one.
torch::Tensor to_nchw(const torch::Tensor& image);
torch::Tensor to_hwc(const torch::Tensor& batch);

double psnr(const torch::Tensor& a, const torch::Tensor& b);

}  // namespace stylenerf
