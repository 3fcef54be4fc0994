#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/types.h>

#include "stylenerf/archive.hpp"
#include "stylenerf/camera.hpp"

namespace stylenerf {

/// Channel widths of the four encoder stages (relu1_1 .. relu4_1).
struct EncoderLayout {
  std::vector<int64_t> channels = {16, 32, 64, 128};
};

/// Per-layer activations, each N x C x H' x W'; layer k is downsampled by 2^k.
struct FeatureStack {
  std::vector<torch::Tensor> layers;

  const torch::Tensor& deepest() const { return layers.back(); }
};

struct ChannelStats {
  torch::Tensor mean;  // N x C
  torch::Tensor std;   // N x C
};

struct StyleStats {
  std::vector<ChannelStats> layers;

  /// [mean_1, std_1, mean_2, std_2, ...] per batch row: N x sum(2 C_k).
  torch::Tensor flatten() const;
  int64_t flat_size() const;
};

inline constexpr double kStatEpsilon = 1e-5;

/// Frozen VGG-style feature extractor: 3x3 reflection-padded convolutions with
/// ReLU, two per stage and 2x max pooling between stages. Its weights are an
/// external asset that is never trained.
class PerceptualEncoder {
 public:
  static constexpr int kMinImageSize = 16;

  PerceptualEncoder() = default;

  /// Deterministic weight generator used to produce the asset file.
  static PerceptualEncoder generate(const EncoderLayout& layout, std::uint64_t seed);
  /// Loads an asset and verifies its SHA-256 (empty `expected_sha256` skips the check).
  static PerceptualEncoder load(const std::filesystem::path& path, const std::string& expected_sha256);
  /// Loads the asset configured at build time, or $STYLENERF_ENCODER_ASSET.
  static const PerceptualEncoder& shared();
  static std::filesystem::path default_asset_path();
  static const char* pinned_sha256();

  void save(const std::filesystem::path& path) const;

  /// Image batch N x 3 x H x W in [0,1]. Throws if H or W < kMinImageSize.
  FeatureStack encode(const torch::Tensor& images) const;
  /// Convenience for a single H x W x 3 image.
  FeatureStack encode_image(const torch::Tensor& image) const { return encode(image.permute({2, 0, 1}).unsqueeze(0)); }

  const EncoderLayout& layout() const { return layout_; }
  int64_t num_layers() const { return static_cast<int64_t>(layout_.channels.size()); }
  torch::Dtype dtype() const { return convs_.front().weight.scalar_type(); }
  PerceptualEncoder to(torch::Dtype dtype) const;

 private:
  struct Conv {
    torch::Tensor weight;  // out x in x 3 x 3
    torch::Tensor bias;
  };
  EncoderLayout layout_;
  std::vector<Conv> convs_;  // two per stage except the last
};

StyleStats style_stats(const FeatureStack& features);

/// Aligns per-channel mean/std of `content` (N x C x H x W) to the given statistics.
torch::Tensor adain(const torch::Tensor& content, const ChannelStats& style);

/// Convolutional decoder mapping deepest-layer features back to an RGB image,
/// upsampling by 8 with nearest-neighbour steps and a logistic output.
struct DecoderParams {
  EncoderLayout layout;
  std::vector<torch::Tensor> weights;
  std::vector<torch::Tensor> biases;

  static DecoderParams create(const EncoderLayout& layout, std::uint64_t seed, torch::Dtype dtype = torch::kFloat32);
  torch::Tensor decode(const torch::Tensor& aligned) const;

  NamedTensors named_parameters();
  void to(torch::Dtype dtype);
  torch::Dtype dtype() const { return weights.front().scalar_type(); }
  /// Copy with its own storage.
  DecoderParams clone() const;

  void save(TensorArchive& archive) const;
  static DecoderParams load(const TensorArchive& archive);
};

/// Mean squared error between the deepest encoder layer of `output` and the AdaIN target.
torch::Tensor content_loss(const PerceptualEncoder& encoder, const torch::Tensor& output, const torch::Tensor& target);
torch::Tensor content_loss_from_features(const FeatureStack& output, const torch::Tensor& target);
/// Sum over layers of the mean squared difference of channel means plus that of channel stds.
torch::Tensor style_loss(const PerceptualEncoder& encoder, const torch::Tensor& output, const torch::Tensor& style_image);
torch::Tensor style_loss_from_stats(const StyleStats& output, const StyleStats& target);

struct Stylization {
  torch::Tensor image;   // N x 3 x H x W
  torch::Tensor target;  // AdaIN-aligned deepest features
};

/// encode -> adain (deepest layer, style statistics) -> decode.
/// Requires H and W to be multiples of 8 so the output matches the input size.
Stylization stylize(const PerceptualEncoder& encoder, const DecoderParams& decoder, const torch::Tensor& content,
                    const StyleStats& style);

struct ConsistencyLoss {
  torch::Tensor value;
  bool empty_mask = false;
};

/// Masked squared error between `frame` (H x W x 3) and another frame warped into
/// it, averaged over valid pixels and the three channels. Zero on an empty mask.
ConsistencyLoss consistency_loss(const torch::Tensor& frame, const WarpResult& warped);

/// Channels-first views of HWC images and back.
torch::Tensor image_batch(const std::vector<torch::Tensor>& images);

}  // namespace stylenerf
