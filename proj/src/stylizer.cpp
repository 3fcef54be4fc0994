#include "stylenerf/stylizer.hpp"

#include <cmath>
#include <cstdlib>
#include <mutex>
#include <numbers>
#include <stdexcept>

#include <torch/torch.h>

#include "stylenerf/nn.hpp"

#ifndef STYLENERF_ENCODER_ASSET_PATH
#define STYLENERF_ENCODER_ASSET_PATH "assets/perceptual_encoder.snrf"
#endif

namespace stylenerf {
namespace {

// SHA-256 of the asset written by `make_encoder_asset` (layout {16,32,64,128}, seed 20220601).
constexpr const char* kPinnedEncoderSha256 = "47d03ee74964a8112cdeb0ffc6036dbfa5d2f5e592f89db5d77cd0d4aa667210";

constexpr std::uint64_t kAssetSeed = 20220601;

/// SplitMix64 + Box-Muller; platform independent unlike std distributions.
class AssetRng {
 public:
  explicit AssetRng(std::uint64_t seed) : state_(seed) {}
  double uniform() {
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    return (static_cast<double>(z >> 11) + 0.5) * 0x1.0p-53;
  }
  double normal() {
    const double u1 = uniform(), u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

 private:
  std::uint64_t state_;
};

torch::Tensor reflect_conv(const torch::Tensor& x, const torch::Tensor& weight, const torch::Tensor& bias) {
  namespace F = torch::nn::functional;
  auto padded = F::pad(x, F::PadFuncOptions({1, 1, 1, 1}).mode(torch::kReflect));
  return torch::conv2d(padded, weight, bias);
}

ChannelStats channel_stats(const torch::Tensor& features) {
  auto flat = features.flatten(2);
  auto mean = flat.mean(2);
  auto var = flat.var(2, /*unbiased=*/false);
  return ChannelStats{mean, torch::sqrt(var + kStatEpsilon)};
}

}  // namespace

torch::Tensor StyleStats::flatten() const {
  std::vector<torch::Tensor> parts;
  for (const auto& layer : layers) {
    parts.push_back(layer.mean);
    parts.push_back(layer.std);
  }
  return torch::cat(parts, 1);
}

int64_t StyleStats::flat_size() const {
  int64_t n = 0;
  for (const auto& layer : layers) n += 2 * layer.mean.size(1);
  return n;
}

PerceptualEncoder PerceptualEncoder::generate(const EncoderLayout& layout, std::uint64_t seed) {
  PerceptualEncoder encoder;
  encoder.layout_ = layout;
  AssetRng rng(seed);
  auto make_conv = [&](int64_t in, int64_t out) {
    auto weight = torch::empty({out, in, 3, 3}, torch::kFloat32);
    const double scale = std::sqrt(2.0 / static_cast<double>(in * 9));
    auto* w = weight.data_ptr<float>();
    for (int64_t i = 0; i < weight.numel(); ++i) w[i] = static_cast<float>(rng.normal() * scale);
    return Conv{weight, torch::zeros({out}, torch::kFloat32)};
  };
  int64_t in = 3;
  for (size_t stage = 0; stage < layout.channels.size(); ++stage) {
    const auto c = layout.channels[stage];
    encoder.convs_.push_back(make_conv(in, c));
    if (stage + 1 < layout.channels.size()) encoder.convs_.push_back(make_conv(c, c));
    in = c;
  }
  return encoder;
}

void PerceptualEncoder::save(const std::filesystem::path& path) const {
  TensorArchive archive("perceptual_encoder");
  archive.meta()["channels"] = layout_.channels;
  for (size_t i = 0; i < convs_.size(); ++i) {
    archive.put("conv." + std::to_string(i) + ".weight", convs_[i].weight);
    archive.put("conv." + std::to_string(i) + ".bias", convs_[i].bias);
  }
  archive.save(path);
}

PerceptualEncoder PerceptualEncoder::load(const std::filesystem::path& path, const std::string& expected_sha256) {
  if (!std::filesystem::exists(path)) {
    throw std::runtime_error("perceptual encoder asset not found: " + path.string() +
                             " (build the make_encoder_asset target or set STYLENERF_ENCODER_ASSET)");
  }
  if (!expected_sha256.empty()) {
    const auto actual = sha256_file(path);
    if (actual != expected_sha256) {
      throw std::runtime_error("perceptual encoder asset checksum mismatch: " + path.string() + " has " + actual +
                               ", expected " + expected_sha256);
    }
  }
  const auto archive = TensorArchive::load(path, "perceptual_encoder");
  PerceptualEncoder encoder;
  encoder.layout_.channels = archive.meta().at("channels").get<std::vector<int64_t>>();
  const size_t count = 2 * encoder.layout_.channels.size() - 1;
  for (size_t i = 0; i < count; ++i) {
    encoder.convs_.push_back(
        Conv{archive.get("conv." + std::to_string(i) + ".weight"), archive.get("conv." + std::to_string(i) + ".bias")});
  }
  return encoder;
}

std::filesystem::path PerceptualEncoder::default_asset_path() {
  if (const char* env = std::getenv("STYLENERF_ENCODER_ASSET"); env && *env) return env;
  return STYLENERF_ENCODER_ASSET_PATH;
}

const char* PerceptualEncoder::pinned_sha256() { return kPinnedEncoderSha256; }

const PerceptualEncoder& PerceptualEncoder::shared() {
  static std::once_flag once;
  static PerceptualEncoder encoder;
  std::call_once(once, [] { encoder = load(default_asset_path(), kPinnedEncoderSha256); });
  return encoder;
}

PerceptualEncoder PerceptualEncoder::to(torch::Dtype dtype) const {
  PerceptualEncoder out = *this;
  for (auto& conv : out.convs_) {
    conv.weight = conv.weight.to(dtype);
    conv.bias = conv.bias.to(dtype);
  }
  return out;
}

FeatureStack PerceptualEncoder::encode(const torch::Tensor& images) const {
  if (images.dim() != 4 || images.size(1) != 3) throw std::invalid_argument("encode: expected N x 3 x H x W images");
  if (images.size(2) < kMinImageSize || images.size(3) < kMinImageSize) {
    throw std::invalid_argument("encode: image is " + std::to_string(images.size(2)) + "x" +
                                std::to_string(images.size(3)) + ", minimum size is " + std::to_string(kMinImageSize) +
                                "x" + std::to_string(kMinImageSize));
  }
  FeatureStack stack;
  auto h = (images.to(dtype()) - 0.5) / 0.25;
  size_t conv = 0;
  for (size_t stage = 0; stage < layout_.channels.size(); ++stage) {
    h = torch::relu(reflect_conv(h, convs_[conv].weight, convs_[conv].bias));
    ++conv;
    stack.layers.push_back(h);
    if (stage + 1 < layout_.channels.size()) {
      h = torch::relu(reflect_conv(h, convs_[conv].weight, convs_[conv].bias));
      ++conv;
      h = torch::max_pool2d(h, 2, 2);
    }
  }
  return stack;
}

StyleStats style_stats(const FeatureStack& features) {
  StyleStats stats;
  for (const auto& layer : features.layers) stats.layers.push_back(channel_stats(layer));
  return stats;
}

torch::Tensor adain(const torch::Tensor& content, const ChannelStats& style) {
  if (content.dim() != 4) throw std::invalid_argument("adain: content must be N x C x H x W");
  if (style.mean.size(-1) != content.size(1) || style.std.size(-1) != content.size(1)) {
    throw std::invalid_argument("adain: content has " + std::to_string(content.size(1)) +
                                " channels, style statistics have " + std::to_string(style.mean.size(-1)));
  }
  const auto own = channel_stats(content);
  const auto smean = style.mean.reshape({-1, content.size(1), 1, 1});
  const auto sstd = style.std.reshape({-1, content.size(1), 1, 1});
  const auto normalized = (content - own.mean.unsqueeze(2).unsqueeze(3)) / own.std.unsqueeze(2).unsqueeze(3);
  return normalized * sstd + smean;
}

DecoderParams DecoderParams::create(const EncoderLayout& layout, std::uint64_t seed, torch::Dtype dtype) {
  auto gen = make_generator(seed);
  DecoderParams p;
  p.layout = layout;
  auto add = [&](int64_t in, int64_t out) {
    const double scale = std::sqrt(2.0 / static_cast<double>(in * 9));
    p.weights.push_back(torch::randn({out, in, 3, 3}, gen, torch::TensorOptions().dtype(dtype)) * scale);
    p.biases.push_back(torch::zeros({out}, torch::TensorOptions().dtype(dtype)));
  };
  const auto& ch = layout.channels;
  for (size_t stage = ch.size() - 1; stage > 0; --stage) {
    add(ch[stage], ch[stage - 1]);
    add(ch[stage - 1], ch[stage - 1]);
  }
  add(ch.front(), 3);
  return p;
}

torch::Tensor DecoderParams::decode(const torch::Tensor& aligned) const {
  namespace F = torch::nn::functional;
  auto h = aligned.to(dtype());
  const size_t stages = layout.channels.size() - 1;
  for (size_t s = 0; s < stages; ++s) {
    h = torch::relu(reflect_conv(h, weights[2 * s], biases[2 * s]));
    h = F::interpolate(h, F::InterpolateFuncOptions().scale_factor(std::vector<double>{2.0, 2.0}).mode(torch::kNearest));
    h = torch::relu(reflect_conv(h, weights[2 * s + 1], biases[2 * s + 1]));
  }
  return torch::sigmoid(reflect_conv(h, weights.back(), biases.back()));
}

NamedTensors DecoderParams::named_parameters() {
  NamedTensors out;
  for (size_t i = 0; i < weights.size(); ++i) {
    out.emplace_back("conv." + std::to_string(i) + ".weight", &weights[i]);
    out.emplace_back("conv." + std::to_string(i) + ".bias", &biases[i]);
  }
  return out;
}

void DecoderParams::to(torch::Dtype dtype) { convert_named(named_parameters(), dtype); }

DecoderParams DecoderParams::clone() const {
  DecoderParams out{layout, {}, {}};
  for (const auto& w : weights) out.weights.push_back(w.detach().clone());
  for (const auto& b : biases) out.biases.push_back(b.detach().clone());
  return out;
}

void DecoderParams::save(TensorArchive& archive) const {
  archive.meta()["decoder_channels"] = layout.channels;
  write_named(archive, "decoder.", const_cast<DecoderParams*>(this)->named_parameters());
}

DecoderParams DecoderParams::load(const TensorArchive& archive) {
  EncoderLayout layout;
  layout.channels = archive.meta().at("decoder_channels").get<std::vector<int64_t>>();
  auto params = create(layout, 0);
  read_named(archive, "decoder.", params.named_parameters());
  return params;
}

torch::Tensor content_loss_from_features(const FeatureStack& output, const torch::Tensor& target) {
  return (output.deepest() - target).pow(2).mean();
}

torch::Tensor content_loss(const PerceptualEncoder& encoder, const torch::Tensor& output, const torch::Tensor& target) {
  return content_loss_from_features(encoder.encode(output), target);
}

torch::Tensor style_loss_from_stats(const StyleStats& output, const StyleStats& target) {
  if (output.layers.size() != target.layers.size()) throw std::invalid_argument("style_loss: layer count mismatch");
  torch::Tensor total = torch::zeros({}, output.layers.front().mean.options());
  for (size_t l = 0; l < output.layers.size(); ++l) {
    const auto& a = output.layers[l];
    const auto& b = target.layers[l];
    total = total + (a.mean - b.mean).pow(2).mean() + (a.std - b.std).pow(2).mean();
  }
  return total;
}

torch::Tensor style_loss(const PerceptualEncoder& encoder, const torch::Tensor& output, const torch::Tensor& style_image) {
  return style_loss_from_stats(style_stats(encoder.encode(output)), style_stats(encoder.encode(style_image)));
}

Stylization stylize(const PerceptualEncoder& encoder, const DecoderParams& decoder, const torch::Tensor& content,
                    const StyleStats& style) {
  if (content.size(2) % 8 != 0 || content.size(3) % 8 != 0) {
    throw std::invalid_argument("stylize: image size must be a multiple of 8");
  }
  const auto features = encoder.encode(content);
  Stylization out;
  out.target = adain(features.deepest(), style.layers.back());
  out.image = decoder.decode(out.target);
  return out;
}

ConsistencyLoss consistency_loss(const torch::Tensor& frame, const WarpResult& warped) {
  if (frame.sizes() != warped.image.sizes()) throw std::invalid_argument("consistency_loss: shape mismatch");
  const auto mask = warped.mask.to(frame.scalar_type()).unsqueeze(2);
  const double count = warped.mask.sum().item<double>();
  ConsistencyLoss out;
  if (count == 0.0) {
    out.value = torch::zeros({}, frame.options());
    out.empty_mask = true;
    return out;
  }
  out.value = ((frame - warped.image).pow(2) * mask).sum() / (3.0 * count);
  return out;
}

torch::Tensor image_batch(const std::vector<torch::Tensor>& images) {
  std::vector<torch::Tensor> chw;
  for (const auto& image : images) chw.push_back(image.permute({2, 0, 1}));
  return torch::stack(chw);
}

}  // namespace stylenerf
