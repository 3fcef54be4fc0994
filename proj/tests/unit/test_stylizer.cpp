#include <cmath>
#include <random>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "stylenerf/archive.hpp"
#include "stylenerf/nn.hpp"
#include "stylenerf/stylizer.hpp"
#include "support.hpp"

using namespace stylenerf;
using testing_support::relative_error;

namespace {

const PerceptualEncoder& encoder() { return PerceptualEncoder::shared(); }

torch::Tensor random_image(int h, int w, std::uint64_t seed) {
  return torch::rand({h, w, 3}, at::make_generator<at::CPUGeneratorImpl>(seed));
}

ChannelStats make_stats(std::vector<double> mean, std::vector<double> std) {
  return ChannelStats{torch::tensor(mean, torch::kFloat64).unsqueeze(0), torch::tensor(std, torch::kFloat64).unsqueeze(0)};
}

/// Spatial statistics computed the slow way: one pass for the mean, a second for the variance.
std::pair<double, double> two_pass(const torch::Tensor& map) {
  const auto a = map.contiguous();
  const double* p = a.data_ptr<double>();
  const int64_t n = a.numel();
  double sum = 0;
  for (int64_t i = 0; i < n; ++i) sum += p[i];
  const double mean = sum / static_cast<double>(n);
  double sq = 0;
  for (int64_t i = 0; i < n; ++i) sq += (p[i] - mean) * (p[i] - mean);
  return {mean, std::sqrt(sq / static_cast<double>(n) + kStatEpsilon)};
}

}  // namespace

TEST(Encoder, AssetMatchesPinnedChecksum) {
  EXPECT_EQ(sha256_file(PerceptualEncoder::default_asset_path()), PerceptualEncoder::pinned_sha256());
  EXPECT_THROW(PerceptualEncoder::load(PerceptualEncoder::default_asset_path(), std::string(64, '0')),
               std::runtime_error);
}

TEST(Encoder, Deterministic) {
  const auto img = random_image(32, 32, 1);
  const auto a = encoder().encode_image(img);
  const auto b = encoder().encode_image(img.clone());
  ASSERT_EQ(a.layers.size(), b.layers.size());
  for (size_t k = 0; k < a.layers.size(); ++k) EXPECT_TRUE(torch::equal(a.layers[k], b.layers[k]));
}

TEST(Encoder, DownsamplingPerLayer) {
  const auto f = encoder().encode_image(random_image(48, 64, 2));
  ASSERT_EQ(f.layers.size(), 4u);
  for (size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(f.layers[k].size(1), encoder().layout().channels[k]);
    EXPECT_EQ(f.layers[k].size(2), 48 >> k);
    EXPECT_EQ(f.layers[k].size(3), 64 >> k);
  }
}

TEST(Encoder, ConstantImageGivesConstantMaps) {
  const auto img = torch::empty({40, 40, 3});
  img.select(2, 0).fill_(0.2);
  img.select(2, 1).fill_(0.7);
  img.select(2, 2).fill_(0.45);
  const auto f = encoder().encode_image(img);
  for (const auto& layer : f.layers) {
    const int64_t h = layer.size(2), w = layer.size(3);
    const auto interior = layer.slice(2, 1, h - 1).slice(3, 1, w - 1);
    const auto spread = (interior.amax({2, 3}) - interior.amin({2, 3})).max().item<double>();
    EXPECT_LE(spread, 1e-5 * std::max(1.0, interior.abs().max().item<double>()));
  }
}

TEST(Encoder, RejectsSmallImages) {
  try {
    encoder().encode_image(random_image(15, 32, 3));
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("16"), std::string::npos) << e.what();
  }
}

TEST(StyleStats, ConstantMap) {
  const auto s = style_stats(FeatureStack{{torch::full({1, 2, 5, 5}, 3.5, torch::kFloat64)}});
  EXPECT_TRUE(torch::allclose(s.layers[0].mean, torch::full({1, 2}, 3.5, torch::kFloat64)));
  EXPECT_TRUE(torch::allclose(s.layers[0].std, torch::full({1, 2}, std::sqrt(kStatEpsilon), torch::kFloat64)));
}

TEST(StyleStats, TwoPointMap) {
  const auto map = torch::tensor({1.0, 3.0, 1.0, 3.0}, torch::kFloat64).reshape({1, 1, 2, 2}).expand({1, 3, 2, 2});
  const auto s = style_stats(FeatureStack{{map}});
  EXPECT_TRUE(torch::allclose(s.layers[0].mean, torch::full({1, 3}, 2.0, torch::kFloat64)));
  EXPECT_TRUE(torch::allclose(s.layers[0].std, torch::full({1, 3}, std::sqrt(1.0 + kStatEpsilon), torch::kFloat64)));
}

TEST(StyleStats, MatchesTwoPassOracle) {
  const auto map = torch::randn({2, 4, 9, 7}, at::make_generator<at::CPUGeneratorImpl>(5), torch::kFloat64) * 3 + 1;
  const auto s = style_stats(FeatureStack{{map}});
  for (int n = 0; n < 2; ++n) {
    for (int c = 0; c < 4; ++c) {
      const auto [mean, std] = two_pass(map[n][c]);
      EXPECT_NEAR(s.layers[0].mean[n][c].item<double>(), mean, 1e-6);
      EXPECT_NEAR(s.layers[0].std[n][c].item<double>(), std, 1e-6);
    }
  }
  EXPECT_EQ(s.flat_size(), 8);
  EXPECT_EQ(s.flatten().sizes(), (std::vector<int64_t>{2, 8}));
}

TEST(Adain, SelfStatisticsIsIdentity) {
  const auto x = torch::randn({1, 6, 8, 8}, at::make_generator<at::CPUGeneratorImpl>(7), torch::kFloat64) * 2;
  const auto own = style_stats(FeatureStack{{x}}).layers[0];
  EXPECT_LT((adain(x, own) - x).abs().max().item<double>(), 1e-9);
}

TEST(Adain, OutputCarriesStyleStatistics) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(8);
  for (int trial = 0; trial < 5; ++trial) {
    const auto x = torch::randn({1, 5, 12, 10}, gen, torch::kFloat64) * (1 + trial) + trial;
    const auto style = make_stats({0.5, -1, 3, 0, 2}, {1, 2, 0.5, 3, 1.5});
    const auto out = style_stats(FeatureStack{{adain(x, style)}}).layers[0];
    EXPECT_LT((out.mean - style.mean).abs().max().item<double>(), 1e-4);
    EXPECT_LT((out.std - style.std).abs().max().item<double>(), 1e-4);
  }
}

TEST(Adain, AffineForm) {
  auto c = torch::randn({1, 2, 16, 16}, at::make_generator<at::CPUGeneratorImpl>(9), torch::kFloat64);
  const auto st = style_stats(FeatureStack{{c}}).layers[0];
  c = (c - st.mean.reshape({1, 2, 1, 1})) / (st.std.reshape({1, 2, 1, 1}).pow(2) - kStatEpsilon).sqrt();
  const auto out = adain(c, make_stats({5, 5}, {2, 2}));
  EXPECT_LT((out - (2 * c + 5)).abs().max().item<double>(), 1e-4);
}

TEST(Adain, IdempotentInStatistics) {
  const auto x = torch::randn({1, 4, 8, 8}, at::make_generator<at::CPUGeneratorImpl>(10), torch::kFloat64);
  const auto style = make_stats({1, 2, 3, 4}, {0.5, 1, 2, 4});
  const auto once = adain(x, style);
  EXPECT_LT((adain(once, style) - once).abs().max().item<double>(), 1e-4);
}

TEST(Adain, ChannelMismatch) {
  EXPECT_THROW(adain(torch::zeros({1, 3, 4, 4}), make_stats({0, 0}, {1, 1})), std::invalid_argument);
}

TEST(Decoder, ShapeRangeAndDeterminism) {
  const auto decoder = DecoderParams::create(encoder().layout(), 3);
  const auto content = random_image(40, 56, 11).permute({2, 0, 1}).unsqueeze(0);
  const auto style = style_stats(encoder().encode_image(random_image(32, 32, 12)));
  const auto a = stylize(encoder(), decoder, content, style);
  const auto b = stylize(encoder(), decoder, content, style);
  EXPECT_EQ(a.image.sizes(), content.sizes());
  EXPECT_TRUE(torch::equal(a.image, b.image));
  EXPECT_GE(a.image.min().item<double>(), 0.0);
  EXPECT_LE(a.image.max().item<double>(), 1.0);
}

TEST(Decoder, CheckpointRoundTrip) {
  const auto decoder = DecoderParams::create(encoder().layout(), 4);
  TensorArchive archive("decoder");
  decoder.save(archive);
  const auto back = DecoderParams::load(archive);
  const auto x = torch::randn({1, 128, 4, 4});
  EXPECT_TRUE(torch::equal(decoder.decode(x), back.decode(x)));
}

TEST(Losses, FixedPointsAreZero) {
  const auto target = torch::randn({1, 128, 4, 4});
  FeatureStack same{{torch::zeros({1}), torch::zeros({1}), torch::zeros({1}), target}};
  EXPECT_EQ(content_loss_from_features(same, target).item<double>(), 0.0);
  const auto img = random_image(32, 32, 13).permute({2, 0, 1}).unsqueeze(0);
  EXPECT_EQ(style_loss(encoder(), img, img).item<double>(), 0.0);
}

TEST(Losses, HandBuiltTwoChannelValues) {
  const StyleStats out{{make_stats({1, 2}, {0.5, 1})}};
  const StyleStats target{{make_stats({0, 0}, {1, 1})}};
  // Means: (1 + 4) / 2; stds: (0.25 + 0) / 2.
  EXPECT_NEAR(style_loss_from_stats(out, target).item<double>(), 2.625, 1e-12);
  // Two layers add.
  const StyleStats out2{{make_stats({1, 2}, {0.5, 1}), make_stats({1, 1}, {1, 1})}};
  const StyleStats target2{{make_stats({0, 0}, {1, 1}), make_stats({0, 1}, {1, 3})}};
  EXPECT_NEAR(style_loss_from_stats(out2, target2).item<double>(), 2.625 + 0.5 + 2.0, 1e-12);

  const auto f = torch::tensor({1.0, 2.0, 3.0, 4.0}, torch::kFloat64).reshape({1, 2, 1, 2});
  const auto t = torch::tensor({0.0, 2.0, 1.0, 6.0}, torch::kFloat64).reshape({1, 2, 1, 2});
  FeatureStack stack{{f}};
  EXPECT_NEAR(content_loss_from_features(stack, t).item<double>(), (1.0 + 0 + 4 + 4) / 4, 1e-12);
}

TEST(Losses, NonNegative) {
  const auto decoder = DecoderParams::create(encoder().layout(), 5);
  for (std::uint64_t seed = 20; seed < 23; ++seed) {
    const auto content = random_image(32, 32, seed).permute({2, 0, 1}).unsqueeze(0);
    const auto style_img = random_image(32, 32, seed + 100).permute({2, 0, 1}).unsqueeze(0);
    const auto s = stylize(encoder(), decoder, content, style_stats(encoder().encode(style_img)));
    EXPECT_GT(content_loss(encoder(), s.image, s.target).item<double>(), 0.0);
    EXPECT_GT(style_loss(encoder(), s.image, style_img).item<double>(), 0.0);
  }
}

TEST(Losses, DecoderGradientMatchesFiniteDifferences) {
  const auto enc = encoder().to(torch::kFloat64);
  auto decoder = DecoderParams::create(enc.layout(), 6, torch::kFloat64);
  const auto content = random_image(16, 16, 30).to(torch::kFloat64).permute({2, 0, 1}).unsqueeze(0);
  const auto style_img = random_image(16, 16, 31).to(torch::kFloat64).permute({2, 0, 1}).unsqueeze(0);
  const auto style = style_stats(enc.encode(style_img));
  auto loss = [&] {
    const auto s = stylize(enc, decoder, content, style);
    return content_loss(enc, s.image, s.target) + style_loss(enc, s.image, style_img);
  };
  auto named = decoder.named_parameters();
  set_requires_grad(named, true);
  loss().backward();
  std::mt19937_64 rng(3);
  for (auto& [name, t] : named) {
    auto flat = t->view({-1});
    const auto grad = t->grad().view({-1});
    for (int trial = 0; trial < 3; ++trial) {
      const auto i = static_cast<int64_t>(rng() % static_cast<std::uint64_t>(flat.numel()));
      double up, down;
      const double h = 1e-6;
      {
        torch::NoGradGuard no_grad;
        const double orig = flat[i].item<double>();
        flat[i] = orig + h;
        up = loss().item<double>();
        flat[i] = orig - h;
        down = loss().item<double>();
        flat[i] = orig;
      }
      const double numeric = (up - down) / (2 * h);
      const double analytic = grad[i].item<double>();
      EXPECT_LE(std::abs(analytic - numeric), 1e-3 * std::max(std::abs(numeric), 1e-6)) << name << "[" << i << "]";
    }
  }
}

TEST(ConsistencyLoss, IdentityAndEmptyMask) {
  const auto img = random_image(8, 8, 40);
  const auto full = torch::ones({8, 8}, torch::kBool);
  const auto same = consistency_loss(img, WarpResult{img.clone(), full});
  EXPECT_EQ(same.value.item<double>(), 0.0);
  EXPECT_FALSE(same.empty_mask);
  const auto empty = consistency_loss(img, WarpResult{torch::zeros_like(img), torch::zeros({8, 8}, torch::kBool)});
  EXPECT_EQ(empty.value.item<double>(), 0.0);
  EXPECT_TRUE(empty.empty_mask);
}

TEST(ConsistencyLoss, ConstantOffsetAveragesChannels) {
  const auto warped = random_image(8, 8, 41).to(torch::kFloat64);
  const auto full = torch::ones({8, 8}, torch::kBool);
  EXPECT_NEAR(consistency_loss(warped + 0.1, WarpResult{warped, full}).value.item<double>(), 0.01, 1e-12);
  // Only masked pixels count, normalized by their number.
  auto half = full.clone();
  half.slice(0, 0, 4).fill_(false);
  auto frame = warped.clone();
  frame.slice(0, 4) += 0.2;
  frame.slice(0, 0, 4) += 5.0;
  EXPECT_NEAR(consistency_loss(frame, WarpResult{warped * half.unsqueeze(2), half}).value.item<double>(), 0.04, 1e-12);
}

TEST(ConsistencyLoss, SymmetricForIdentityCameras) {
  const auto a = random_image(8, 8, 42);
  const auto b = random_image(8, 8, 43);
  auto mask = torch::rand({8, 8}, at::make_generator<at::CPUGeneratorImpl>(44)) > 0.3;
  const auto ab = consistency_loss(a, WarpResult{b * mask.unsqueeze(2), mask}).value.item<double>();
  const auto ba = consistency_loss(b, WarpResult{a * mask.unsqueeze(2), mask}).value.item<double>();
  EXPECT_DOUBLE_EQ(ab, ba);
}
