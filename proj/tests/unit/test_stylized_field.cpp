#include <cmath>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "stylenerf/stylized_field.hpp"
#include "stylenerf/stylizer.hpp"
#include "support.hpp"

using namespace stylenerf;
using testing_support::numeric_gradient;
using testing_support::relative_error;

namespace {

RadianceFieldParams radiance(std::uint64_t seed = 1) {
  RadianceFieldConfig c;
  c.pos_frequencies = 3;
  c.dir_frequencies = 2;
  c.depth = 2;
  c.width = 16;
  c.skip_layer = 1;
  c.near = 1.0;
  c.far = 3.0;
  auto p = RadianceFieldParams::create(c, seed);
  torch::NoGradGuard no_grad;
  p.sigma_head.bias.fill_(1.0);  // visibly opaque
  return p;
}

StylizedFieldConfig style_config() {
  StylizedFieldConfig c;
  c.pos_frequencies = 3;
  c.latent_dim = 4;
  c.depth = 2;
  c.width = 16;
  return c;
}

CameraPose camera(int size = 8) {
  return CameraPose::look_at(Intrinsics::centered(size, size, size), {0, 0, 2}, {0, 0, 0});
}

bool all_zero_or_undefined(const NamedTensors& named) {
  for (const auto& [name, t] : named) {
    if (t->grad().defined() && t->grad().abs().max().item<double>() != 0.0) return false;
  }
  return true;
}

}  // namespace

TEST(StylizedColor, DeterministicBoundedAndChecked) {
  const auto p = StylizedFieldParams::create(style_config(), 2);
  const auto x = torch::randn({50, 3});
  const auto l = torch::randn({4});
  const auto a = stylized_color(p, x, l);
  EXPECT_TRUE(torch::equal(a, stylized_color(p, x, l)));
  EXPECT_GE(a.min().item<double>(), 0.0);
  EXPECT_LE(a.max().item<double>(), 1.0);
  EXPECT_EQ(a.sizes(), x.sizes());
  EXPECT_THROW(stylized_color(p, x, torch::randn({5})), std::invalid_argument);
}

TEST(StylizedColor, AblationFlags) {
  auto c = style_config();
  c.code_every_layer = true;
  const auto every = StylizedFieldParams::create(c, 2);
  EXPECT_EQ(stylized_color(every, torch::randn({7, 3}), torch::randn({4})).sizes(), (std::vector<int64_t>{7, 3}));
  c = style_config();
  c.use_view_direction = true;
  const auto view = StylizedFieldParams::create(c, 2);
  const auto x = torch::randn({7, 3});
  EXPECT_THROW(stylized_color(view, x, torch::randn({4})), std::invalid_argument);
  const auto d1 = torch::nn::functional::normalize(torch::randn({7, 3}), torch::nn::functional::NormalizeFuncOptions().dim(1));
  const auto l = torch::randn({4});
  EXPECT_FALSE(torch::equal(stylized_color(view, x, l, d1), stylized_color(view, x, l, -d1)));
}

TEST(RenderStylized, ConstantColorFactorsOut) {
  auto p = StylizedFieldParams::create(style_config(), 3);
  {
    torch::NoGradGuard no_grad;
    p.layers.back().weight.zero_();
    p.layers.back().bias.copy_(torch::tensor({0.0, 1.0, -2.0}));
  }
  const auto rad = radiance();
  const auto rays = generate_all_rays(camera());
  const auto s = sample_rays(rays.size(), 1.0, 3.0, 32, false);
  const auto out = render_stylized(p, rad, rays, s, torch::zeros({4}));
  const auto reference = render_rays(rad, rays, s);
  const auto c = torch::sigmoid(torch::tensor({0.0, 1.0, -2.0}));
  EXPECT_TRUE(torch::allclose(out, reference.compositing.accumulation.unsqueeze(1) * c, 0, 1e-6));
  EXPECT_GT(reference.compositing.accumulation.min().item<double>(), 0.5);
}

TEST(RenderStylized, VacuumIsBlack) {
  auto rad = radiance();
  {
    torch::NoGradGuard no_grad;
    rad.sigma_head.bias.fill_(-1000.0);
  }
  const auto p = StylizedFieldParams::create(style_config(), 3);
  const auto rays = generate_all_rays(camera());
  const auto s = sample_rays(rays.size(), 1.0, 3.0, 16, false);
  const auto out = render_stylized(p, rad, rays, s, torch::randn({4}));
  EXPECT_EQ(out.abs().max().item<double>(), 0.0);
}

TEST(RenderStylized, SharesTheFrozenCompositor) {
  const auto rad = radiance();
  const auto rays = generate_all_rays(camera());
  const auto s = sample_rays(rays.size(), 1.0, 3.0, 24, false);
  const auto weights = render_rays(rad, rays, s).compositing.weights;
  const auto again = composite(rad.density(sample_points(rays, s, rad.dtype())).sigma, s).weights;
  EXPECT_TRUE(torch::equal(weights, again));
  // Explicit-weights form agrees with the ray form.
  const auto p = StylizedFieldParams::create(style_config(), 5);
  const auto l = torch::randn({4});
  EXPECT_TRUE(torch::equal(render_stylized(p, rad, rays, s, l),
                           render_stylized(p, sample_points(rays, s, p.dtype()), weights, l, rays.directions)));
}

TEST(RenderStylized, PrunedFrameMatchesFullRender) {
  auto rad = radiance(7);
  {
    // Dense enough that samples behind the first few carry negligible weight.
    torch::NoGradGuard no_grad;
    rad.sigma_head.bias.fill_(8.0);
  }
  const auto p = StylizedFieldParams::create(style_config(), 6);
  const auto cam = camera(12);
  const auto rays = generate_all_rays(cam);
  const auto s = sample_rays(rays.size(), 1.0, 3.0, 48, false);
  const auto l = torch::randn({4});
  const auto full = render_stylized(p, rad, rays, s, l).reshape({12, 12, 3});
  const auto frame = FrameSamples::compute(rad, cam, 48);
  EXPECT_LT(frame.points.size(0), rays.size() * 48);
  const auto pruned = render_stylized_frame(p, frame, l);
  EXPECT_LE((pruned - full).abs().max().item<double>(), 48 * kStylizedWeightFloor + 1e-6);
  EXPECT_TRUE(torch::equal(pruned, render_stylized_image(p, rad, cam, 48, l)));
  // One frame serves any code.
  const auto l2 = torch::randn({4});
  EXPECT_LE((render_stylized_frame(p, frame, l2) - render_stylized(p, rad, rays, s, l2).reshape({12, 12, 3}))
                .abs()
                .max()
                .item<double>(),
            48 * kStylizedWeightFloor + 1e-6);
}

TEST(InferenceCode, RenderMatchesManualMean) {
  const auto rad = radiance();
  const auto p = StylizedFieldParams::create(style_config(), 8);
  const StyleDistribution d{torch::randn({4}), torch::rand({4}) + 0.1};
  const auto manual = d.mu.clone();
  EXPECT_TRUE(torch::equal(render_stylized_image(p, rad, camera(), 16, inference_code(d)),
                           render_stylized_image(p, rad, camera(), 16, manual)));
}

TEST(MimicLoss, ValuesAndAlignment) {
  const auto c = torch::rand({20, 3}, torch::kFloat64);
  EXPECT_EQ(mimic_loss(c, c.clone()).item<double>(), 0.0);
  EXPECT_NEAR(mimic_loss(c + 0.1, c).item<double>(), 0.01, 1e-12);
  EXPECT_THROW(mimic_loss(c, c.slice(0, 0, 19)), std::invalid_argument);
}

TEST(MimicLoss, GradientMatchesFiniteDifferences) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(2);
  auto a = torch::rand({6, 3}, gen, torch::kFloat64).requires_grad_(true);
  const auto b = torch::rand({6, 3}, gen, torch::kFloat64);
  mimic_loss(a, b).backward();
  const auto numeric = numeric_gradient([&] { return mimic_loss(a, b).item<double>(); }, a.detach());
  EXPECT_LT(relative_error(a.grad(), numeric), 1e-3);

  // Through the style MLP as well.
  auto p = StylizedFieldParams::create(style_config(), 9, torch::kFloat64);
  const auto rad = radiance();
  const auto rays = generate_rays(camera(4), {{0, 0}, {2, 3}});
  const auto s = sample_rays(rays.size(), 1.0, 3.0, 5, false);
  const auto target = torch::rand({2, 3}, gen, torch::kFloat64);
  const auto code = torch::randn({4}, gen, torch::kFloat64);
  auto named = p.named_parameters();
  set_requires_grad(named, true);
  auto loss = [&] { return mimic_loss(render_stylized(p, rad, rays, s, code), target); };
  loss().backward();
  for (auto& [name, t] : named) {
    const auto numeric_p = numeric_gradient([&] { return loss().item<double>(); }, *t);
    if (numeric_p.abs().max().item<double>() < 1e-10) continue;
    EXPECT_LT(relative_error(t->grad(), numeric_p), 1e-3) << name;
  }
}

TEST(Objectives, Formulas) {
  const auto m = torch::tensor(0.3, torch::kFloat64), d = torch::tensor(2.0, torch::kFloat64);
  const auto st = torch::tensor(0.7, torch::kFloat64), ct = torch::tensor(1.1, torch::kFloat64);
  const LossWeights defaults;
  EXPECT_EQ(defaults.lambda_d, 1e-5);
  EXPECT_EQ(defaults.lambda_s, 1.0);
  EXPECT_EQ(defaults.lambda_m, 10.0);
  EXPECT_DOUBLE_EQ(objective_n(m, d, defaults).item<double>(), 0.3 + 1e-5 * 2.0);
  EXPECT_DOUBLE_EQ(objective_c(m, st, ct, defaults).item<double>(), 10 * 0.3 + 0.7 + 1.1);
  LossWeights zero{0, 0, 0};
  EXPECT_EQ(objective_n(m, d, zero).item<double>(), 0.3);
  EXPECT_EQ(objective_c(m, st, ct, zero).item<double>(), 1.1);
  const auto z = torch::tensor(0.0, torch::kFloat64);
  EXPECT_EQ(objective_n(z, z, defaults).item<double>(), 0.0);
  EXPECT_EQ(objective_c(z, z, z, defaults).item<double>(), 0.0);
}

TEST(Objectives, GradientPartition) {
  const auto& encoder = PerceptualEncoder::shared();
  auto field = StylizedFieldParams::create(style_config(), 10);
  auto decoder = DecoderParams::create(encoder.layout(), 11);
  auto rad = radiance();
  auto field_named = field.named_parameters();
  auto decoder_named = decoder.named_parameters();
  auto rad_named = rad.named_parameters();
  set_requires_grad(field_named, true);
  set_requires_grad(decoder_named, true);
  auto code = torch::randn({4}).requires_grad_(true);

  const auto content = torch::rand({1, 3, 16, 16});
  const auto style_img = torch::rand({1, 3, 16, 16});
  const auto st = stylize(encoder, decoder, content, style_stats(encoder.encode(style_img)));
  const auto rays = generate_rays(camera(16), {{1, 1}, {5, 9}, {12, 3}, {15, 15}});
  const auto s = sample_rays(rays.size(), 1.0, 3.0, 8, false);
  const auto cn = render_stylized(field, rad, rays, s, code);
  std::vector<torch::Tensor> picked;
  for (const auto& px : rays.pixels) picked.push_back(st.image[0].select(1, px.row).select(1, px.col));
  const auto ca = torch::stack(picked);
  const StyleDistribution dist{torch::zeros({4}), torch::ones({4})};
  const auto o = mutual_objectives(cn, ca, distribution_loss(code, dist), style_loss(encoder, st.image, style_img),
                                   content_loss(encoder, st.image, st.target), LossWeights{});

  o.field.backward({}, true);
  EXPECT_TRUE(all_zero_or_undefined(decoder_named));
  EXPECT_TRUE(all_zero_or_undefined(rad_named));
  EXPECT_GT(code.grad().abs().max().item<double>(), 0.0);
  for (auto& [name, t] : field_named) EXPECT_TRUE(t->grad().defined()) << name;
  EXPECT_GT(field.layers.back().weight.grad().abs().max().item<double>(), 0.0);

  for (auto& [name, t] : field_named) t->mutable_grad() = torch::Tensor();
  code.mutable_grad() = torch::Tensor();
  o.decoder.backward();
  EXPECT_TRUE(all_zero_or_undefined(field_named));
  EXPECT_FALSE(code.grad().defined() && code.grad().abs().max().item<double>() != 0.0);
  EXPECT_GT(decoder.weights.front().grad().abs().max().item<double>(), 0.0);
  EXPECT_TRUE(all_zero_or_undefined(rad_named));
}

TEST(GeometryFreeze, TrainingTheStyleModuleLeavesOpacityUntouched) {
  const auto rad = radiance(12);
  auto snapshot = rad;
  std::vector<torch::Tensor> before;
  for (auto& [name, t] : snapshot.named_parameters()) before.push_back(t->clone());
  const auto cam = camera(8);
  const auto ref = render_image(rad, cam, 16);

  auto field = StylizedFieldParams::create(style_config(), 13);
  auto named = field.named_parameters();
  set_requires_grad(named, true);
  auto code = torch::randn({4}).requires_grad_(true);
  auto params = tensors_of(named);
  params.push_back(code);
  Adam adam(params, AdamOptions{1e-2});
  const auto rays = generate_all_rays(cam);
  const auto s = sample_rays(rays.size(), 1.0, 3.0, 16, false);
  const auto target = torch::rand({rays.size(), 3});
  const StyleDistribution dist{torch::zeros({4}), torch::ones({4})};
  double first = 0, last = 0;
  for (int step = 0; step < 30; ++step) {
    adam.zero_grad();
    const auto loss = objective_n(mimic_loss(render_stylized(field, rad, rays, s, code), target),
                                  distribution_loss(code, dist), LossWeights{});
    loss.backward();
    adam.step();
    (step == 0 ? first : last) = loss.item<double>();
  }
  EXPECT_LT(last, first);
  size_t i = 0;
  for (auto& [name, t] : const_cast<RadianceFieldParams&>(rad).named_parameters()) {
    EXPECT_TRUE(torch::equal(*t, before[i++])) << name;
  }
  const auto after = render_image(rad, cam, 16);
  EXPECT_TRUE(torch::equal(ref.accumulation, after.accumulation));
  EXPECT_TRUE(torch::equal(ref.depth, after.depth));
}
