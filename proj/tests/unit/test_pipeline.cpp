#include <cmath>
#include <fstream>
#include <limits>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "stylenerf/image_io.hpp"
#include "stylenerf/pipeline.hpp"
#include "stylenerf/synthetic_scene.hpp"
#include "support.hpp"

using namespace stylenerf;
using testing_support::TempDir;

namespace {

SceneSpec tiny_scene() {
  SceneSpec s;
  s.views = 6;
  s.holdout_views = 1;
  s.width = s.height = 32;
  return s;
}

StageSchedule tiny_schedule() {
  StageSchedule s;
  s.decoder_base_steps = 3;
  s.decoder_pretrain_steps = 3;
  s.mutual_steps = 12;
  s.decoder_freeze_steps = 5;
  s.mutual_batch_rays = 64;
  s.mutual_lr = 1e-3;
  s.seed = 4;
  return s;
}

StylizedFieldConfig tiny_field() {
  StylizedFieldConfig c;
  c.pos_frequencies = 3;
  c.latent_dim = 8;
  c.depth = 2;
  c.width = 16;
  return c;
}

/// Untrained but opaque radiance field over the tiny scene's bounds; its
/// density is a fixed 3D function, so depth maps agree across views.
struct Fixture {
  SyntheticScene scene{tiny_scene()};
  Dataset dataset = scene.make_dataset();
  RadianceFieldParams radiance;
  AugmentedSet augmented;
  StyleSet styles;
  std::vector<StyleDistribution> distributions;

  Fixture() {
    RadianceFieldConfig c;
    c.pos_frequencies = 3;
    c.dir_frequencies = 2;
    c.depth = 2;
    c.width = 16;
    c.skip_layer = -1;
    c.near = dataset.near;
    c.far = dataset.far;
    radiance = RadianceFieldParams::create(c, 2);
    {
      torch::NoGradGuard no_grad;
      radiance.sigma_head.bias.fill_(2.0);
    }
    augmented = AugmentedSet::render(radiance, cameras(), 6, 16, 4);
    const auto images = generate_style_images(2, 32, 1);
    styles = StyleSet::from_images(PerceptualEncoder::shared(), {images[0].id, images[1].id},
                                   {images[0].image, images[1].image});
    auto gen = at::make_generator<at::CPUGeneratorImpl>(3);
    for (int s = 0; s < 2; ++s)
      distributions.push_back({torch::randn({8}, gen), torch::rand({8}, gen) * 0.5 + 0.25});
  }

  std::vector<CameraPose> cameras() const {
    std::vector<CameraPose> out;
    for (const auto* v : dataset.select("train")) out.push_back(v->camera);
    return out;
  }

  MutualInputs inputs() const {
    MutualInputs in;
    in.encoder = &PerceptualEncoder::shared();
    in.radiance = &radiance;
    in.views = augmented.views;
    in.styles = styles;
    in.distributions = distributions;
    in.cache = augmented.cache;
    in.prepare();
    return in;
  }
};

const Fixture& fixture() {
  static const Fixture f;
  return f;
}

bool same_decoder(DecoderParams a, DecoderParams b) {
  auto na = a.named_parameters(), nb = b.named_parameters();
  for (size_t i = 0; i < na.size(); ++i)
    if (!torch::equal(*na[i].second, *nb[i].second)) return false;
  return true;
}

TrainingState fresh_state(const MutualInputs& in, const StageSchedule& s) {
  return TrainingState::create(tiny_field(), DecoderParams::create(PerceptualEncoder::shared().layout(), 9), in, s);
}

}  // namespace

TEST(Schedule, DefaultsAndValidation) {
  StageSchedule s;
  EXPECT_EQ(s.decoder_pretrain_steps, 1000);
  EXPECT_EQ(s.mutual_steps, 5000);
  EXPECT_EQ(s.decoder_freeze_steps, 2000);
  EXPECT_NO_THROW(s.validate());
  s.decoder_freeze_steps = 6000;
  EXPECT_THROW(s.validate(), std::invalid_argument);
  s = StageSchedule{};
  s.vae_steps = -1;
  try {
    s.validate();
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("vae_steps"), std::string::npos);
  }
}

TEST(DensifyPath, ReproducesAnchorsAndInterpolates) {
  const auto anchors = fixture().cameras();
  const auto same = densify_path(anchors, static_cast<int>(anchors.size()));
  for (size_t i = 0; i < anchors.size(); ++i) {
    EXPECT_TRUE(same[i].camera_to_world().isApprox(anchors[i].camera_to_world(), 1e-12));
  }
  const auto dense = densify_path(anchors, 16);
  ASSERT_EQ(dense.size(), 16u);
  EXPECT_TRUE(dense.front().camera_to_world().isApprox(anchors.front().camera_to_world(), 1e-12));
  EXPECT_TRUE(dense.back().camera_to_world().isApprox(anchors.back().camera_to_world(), 1e-12));
  const auto again = densify_path(anchors, 16);
  for (size_t i = 0; i < 16; ++i) EXPECT_EQ(dense[i].camera_to_world(), again[i].camera_to_world());
  EXPECT_EQ(densify_path(anchors, 1).size(), 1u);
  EXPECT_THROW(densify_path(anchors, 0), std::invalid_argument);
  EXPECT_THROW(densify_path({}, 3), std::invalid_argument);
}

TEST(AugmentViews, SingleViewMatchesRenderBitwise) {
  const auto& f = fixture();
  const auto views = augment_views(f.radiance, {f.cameras()[2]}, 1, 16);
  ASSERT_EQ(views.size(), 1u);
  EXPECT_TRUE(torch::equal(views[0].image, render_image(f.radiance, f.cameras()[2], 16).color));
  EXPECT_THROW(augment_views(f.radiance, f.cameras(), 0, 16), std::invalid_argument);
}

TEST(AugmentViews, SetMatchesSeparatePasses) {
  const auto& f = fixture();
  const auto views = augment_views(f.radiance, f.cameras(), 6, 16);
  const auto cache = SampleCache::build(f.radiance, views, 16, 4);
  ASSERT_EQ(views.size(), f.augmented.views.size());
  for (size_t i = 0; i < views.size(); ++i) {
    EXPECT_EQ(views[i].id, f.augmented.views[i].id);
    EXPECT_TRUE(torch::equal(views[i].image, f.augmented.views[i].image));
    EXPECT_TRUE(torch::equal(views[i].depth.valid, f.augmented.views[i].depth.valid));
  }
  EXPECT_TRUE(torch::allclose(cache.points, f.augmented.cache.points, 1e-5, 1e-6));
  EXPECT_TRUE(torch::allclose(cache.weights, f.augmented.cache.weights, 1e-5, 1e-6));
  EXPECT_TRUE(torch::equal(cache.directions, f.augmented.cache.directions));
  EXPECT_GT(f.augmented.views[0].depth.valid_fraction(), 0.9);
}

TEST(AugmentViews, ArchiveRoundTrip) {
  const auto& f = fixture();
  TensorArchive archive("augmented_views");
  f.augmented.save(archive);
  TempDir dir("views");
  archive.save(dir.path() / "views.snrf");
  const auto back = AugmentedSet::load(TensorArchive::load(dir.path() / "views.snrf", "augmented_views"), f.cameras());
  ASSERT_EQ(back.views.size(), f.augmented.views.size());
  for (size_t i = 0; i < back.views.size(); ++i) {
    EXPECT_TRUE(torch::equal(back.views[i].image, f.augmented.views[i].image));
    EXPECT_TRUE(torch::equal(back.views[i].depth.depth, f.augmented.views[i].depth.depth));
    EXPECT_EQ(back.views[i].camera.camera_to_world(), f.augmented.views[i].camera.camera_to_world());
  }
  EXPECT_TRUE(torch::equal(back.cache.points, f.augmented.cache.points));
  // Cameras of another size are rejected.
  auto other = f.cameras();
  for (auto& c : other) c = CameraPose(Intrinsics::centered(20, 40, 40), c.rotation(), c.center());
  EXPECT_THROW(AugmentedSet::load(archive, other), std::runtime_error);
}

TEST(StyleSets, LoadDirIsSorted) {
  TempDir dir("styles");
  const auto images = generate_style_images(3, 32, 2);
  write_png(dir.path() / "zeta.png", images[0].image);
  write_png(dir.path() / "alpha.png", images[1].image);
  write_png(dir.path() / "mid.png", images[2].image);
  std::ofstream(dir.path() / "notes.txt") << "ignored\n";
  const auto set = StyleSet::load_dir(PerceptualEncoder::shared(), dir.path());
  EXPECT_EQ(set.ids, (std::vector<std::string>{"alpha", "mid", "zeta"}));
  EXPECT_EQ(set.stats.size(), 3u);
  const auto corpus = style_corpus(PerceptualEncoder::shared(), set, 4, 1);
  EXPECT_EQ(corpus.size(0), 3 * 5);
  EXPECT_TRUE(torch::equal(corpus, style_corpus(PerceptualEncoder::shared(), set, 4, 1)));
}

TEST(LossLogs, CsvAndArchive) {
  LossLog log;
  log.add(0, "mimic", 0.5);
  log.add(0, "total", 1.25);
  log.add(1, "mimic", 0.25);
  EXPECT_EQ(log.series("mimic"), (std::vector<double>{0.5, 0.25}));
  TempDir dir("log");
  log.write_csv(dir.path() / "log.csv");
  std::ifstream in(dir.path() / "log.csv");
  std::string header, first;
  std::getline(in, header);
  std::getline(in, first);
  EXPECT_EQ(header, "step,term,value");
  EXPECT_EQ(first, "0,mimic,0.5");
  TensorArchive archive("log");
  log.save(archive, "log");
  LossLog back;
  back.load(archive, "log");
  ASSERT_EQ(back.records().size(), 3u);
  EXPECT_EQ(back.records()[1].term, "total");
  EXPECT_EQ(back.records()[1].value, 1.25);
}

TEST(CovisiblePairs, BothDirectionsAndThreshold) {
  const auto& f = fixture();
  const auto pairs = covisible_pairs(f.augmented.views, {1}, default_depth_tolerance(f.dataset.far));
  ASSERT_EQ(pairs.size(), 10u);
  for (const auto& p : pairs) {
    EXPECT_EQ(std::abs(p.target - p.source), 1);
    EXPECT_GE(p.warp.valid_fraction(), 0.2);
  }
  EXPECT_TRUE(covisible_pairs(f.augmented.views, {1}, default_depth_tolerance(f.dataset.far), 1.01).empty());
}

TEST(DecoderStages, SmokeAndReproducible) {
  const auto& f = fixture();
  const auto& enc = PerceptualEncoder::shared();
  const auto schedule = tiny_schedule();
  const auto base = train_decoder_base(enc, f.augmented.views, f.styles, schedule, 1.0);
  const double tol = default_depth_tolerance(f.dataset.far);
  const auto a = pretrain_decoder(enc, base.decoder, f.augmented.views, f.styles, schedule, 1.0, 50.0, tol);
  const auto b = pretrain_decoder(enc, base.decoder, f.augmented.views, f.styles, schedule, 1.0, 50.0, tol);
  for (const auto* term : {"content", "style", "consistency", "total"}) {
    const auto series = a.log.series(term);
    ASSERT_EQ(series.size(), 3u) << term;
    for (double v : series) EXPECT_TRUE(std::isfinite(v)) << term;
  }
  // Recorded total is the weighted sum of its terms.
  for (size_t i = 0; i < 3; ++i) {
    const double sum = a.log.series("content")[i] + a.log.series("style")[i] + 50.0 * a.log.series("consistency")[i];
    EXPECT_NEAR(a.log.series("total")[i], sum, 1e-6 * std::max(1.0, std::abs(sum)));
  }
  EXPECT_EQ(a.log.series("total"), b.log.series("total"));
  EXPECT_TRUE(same_decoder(a.decoder, b.decoder));
  EXPECT_FALSE(a.heldout_pair.empty());
  EXPECT_TRUE(std::isfinite(a.heldout_consistency_start));
}

TEST(DecoderStages, NoCovisiblePairs) {
  const auto& f = fixture();
  const auto& enc = PerceptualEncoder::shared();
  std::vector<AugmentedView> lonely = {f.augmented.views[0]};
  EXPECT_THROW(pretrain_decoder(enc, DecoderParams::create(enc.layout(), 1), lonely, f.styles, tiny_schedule(), 1.0,
                                50.0, 0.1),
               std::runtime_error);
}

TEST(MutualLearning, FreezeScheduleAndGeometry) {
  const auto& f = fixture();
  const auto in = f.inputs();
  const auto schedule = tiny_schedule();
  auto state = fresh_state(in, schedule);
  const auto decoder0 = DecoderParams::create(PerceptualEncoder::shared().layout(), 9);
  std::vector<torch::Tensor> opacity;
  for (auto& [name, t] : const_cast<RadianceFieldParams&>(f.radiance).named_parameters()) opacity.push_back(t->clone());

  mutual_learn(state, in, schedule, schedule.decoder_freeze_steps);
  EXPECT_EQ(state.step, schedule.decoder_freeze_steps);
  EXPECT_TRUE(same_decoder(state.decoder, decoder0));
  EXPECT_TRUE(state.log.series("objective_c").empty());

  mutual_learn(state, in, schedule);
  EXPECT_EQ(state.step, schedule.mutual_steps);
  EXPECT_FALSE(same_decoder(state.decoder, decoder0));
  EXPECT_EQ(state.log.series("objective_c").size(),
            static_cast<size_t>(schedule.mutual_steps - schedule.decoder_freeze_steps));
  size_t i = 0;
  for (auto& [name, t] : const_cast<RadianceFieldParams&>(f.radiance).named_parameters())
    EXPECT_TRUE(torch::equal(*t, opacity[i++])) << name;

  // Loss-term accounting.
  const LossWeights w;
  const auto mimic = state.log.series("mimic"), dist = state.log.series("distribution");
  const auto on = state.log.series("objective_n");
  for (size_t k = 0; k < on.size(); ++k) EXPECT_NEAR(on[k], mimic[k] + w.lambda_d * dist[k], 1e-6 * std::max(1.0, on[k]));
  const auto oc = state.log.series("objective_c"), ls = state.log.series("style"), lc = state.log.series("content");
  for (size_t k = 0; k < oc.size(); ++k) {
    const double m = mimic[schedule.decoder_freeze_steps + k];
    EXPECT_NEAR(oc[k], w.lambda_m * m + w.lambda_s * ls[k] + lc[k], 1e-6 * std::max(1.0, oc[k]));
  }
}

TEST(MutualLearning, ResumeReproducesLosses) {
  const auto& f = fixture();
  const auto in = f.inputs();
  const auto schedule = tiny_schedule();
  auto straight = fresh_state(in, schedule);
  mutual_learn(straight, in, schedule);

  TempDir dir("resume");
  for (int64_t cut : {3, 7}) {
    auto first = fresh_state(in, schedule);
    mutual_learn(first, in, schedule, cut);
    first.save(dir.path() / "state.snrf");
    auto resumed = TrainingState::load(dir.path() / "state.snrf", schedule);
    EXPECT_EQ(resumed.step, cut);
    mutual_learn(resumed, in, schedule);
    for (const auto* term : {"mimic", "distribution", "objective_n", "objective_c"})
      EXPECT_EQ(resumed.log.series(term), straight.log.series(term)) << term << " cut " << cut;
    EXPECT_TRUE(torch::equal(resumed.codes.codes, straight.codes.codes));
    EXPECT_TRUE(same_decoder(resumed.decoder, straight.decoder));
  }
}

TEST(MutualLearning, NonFiniteLossNamesTheTerm) {
  const auto& f = fixture();
  const auto in = f.inputs();
  auto state = fresh_state(in, tiny_schedule());
  {
    torch::NoGradGuard no_grad;
    state.codes.codes.fill_(std::numeric_limits<float>::quiet_NaN());
  }
  try {
    mutual_learn(state, in, tiny_schedule(), 1);
    FAIL();
  } catch (const std::runtime_error& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("non-finite"), std::string::npos) << what;
    EXPECT_TRUE(what.find("mimic") != std::string::npos || what.find("distribution") != std::string::npos) << what;
    EXPECT_NE(what.find("step 0"), std::string::npos) << what;
  }
}

TEST(CodeClusteringTest, HandBuiltTable) {
  LatentCodeTable t;
  t.view_ids = {"a", "b"};
  t.style_ids = {"x", "y"};
  // V x S x D: style x near the origin, style y near (10, 0).
  t.codes = torch::tensor({0.0, 0.0, 10.0, 0.0, 0.0, 1.0, 10.0, 1.0}).reshape({2, 2, 2});
  const auto c = code_clustering(t);
  EXPECT_NEAR(c.intra, 1.0, 1e-12);
  EXPECT_NEAR(c.inter, (10.0 + 10.0 + 2 * std::sqrt(101.0)) / 4, 1e-12);
}
