#include <cmath>
#include <numbers>

#include <gtest/gtest.h>
#include <torch/torch.h>

#include "stylenerf/camera.hpp"
#include "stylenerf/synthetic_scene.hpp"

using namespace stylenerf;

namespace {

Eigen::Matrix3d rot_y(double a) {
  Eigen::Matrix3d r;
  r << std::cos(a), 0, std::sin(a), 0, 1, 0, -std::sin(a), 0, std::cos(a);
  return r;
}

/// Ray distance to the plane z = -depth for every pixel of a camera at the origin looking down -z.
torch::Tensor plane_depth(const CameraPose& cam, double depth) {
  auto out = torch::empty({cam.height(), cam.width()}, torch::kFloat64);
  auto a = out.accessor<double, 2>();
  for (int r = 0; r < cam.height(); ++r) {
    for (int c = 0; c < cam.width(); ++c) {
      const auto d = cam.direction(c, r);
      a[r][c] = (cam.center().z() + depth) / -d.z();
    }
  }
  return out;
}

torch::Tensor grid_to_pixels(const WarpField& field, int w, int h) {
  auto g = field.grid.squeeze(0);
  auto u = (g.select(2, 0) + 1.0) * 0.5 * (w - 1);
  auto v = (g.select(2, 1) + 1.0) * 0.5 * (h - 1);
  return torch::stack({u, v}, 2);
}

}  // namespace

TEST(Camera, CentrePixelLooksDownNegativeZ) {
  const auto cam = CameraPose(Intrinsics::centered(50.0, 33, 21), Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero());
  const auto d = cam.direction(16, 10);
  EXPECT_NEAR(d.x(), 0.0, 1e-15);
  EXPECT_NEAR(d.y(), 0.0, 1e-15);
  EXPECT_NEAR(d.z(), -1.0, 1e-15);
  // v grows downwards, so the top row looks up.
  EXPECT_GT(cam.direction(16, 0).y(), 0.0);
  EXPECT_GT(cam.direction(32, 10).x(), 0.0);
}

TEST(Camera, ProjectInvertsDirection) {
  const auto cam = CameraPose::look_at(Intrinsics::centered(70.0, 64, 48), {1.0, 0.5, 3.0}, {0.0, 0.0, 0.0});
  for (double u : {0.0, 13.25, 63.0}) {
    for (double v : {0.0, 20.5, 47.0}) {
      const double t = 2.7;
      const auto p = cam.project(cam.center() + t * cam.direction(u, v));
      ASSERT_TRUE(p.has_value());
      EXPECT_NEAR((*p)[0], u, 1e-9);
      EXPECT_NEAR((*p)[1], v, 1e-9);
      EXPECT_NEAR((*p)[2], t, 1e-12);
    }
  }
  EXPECT_FALSE(cam.project(cam.center() - cam.direction(32, 24)).has_value());
}

TEST(Camera, LookAtProducesRotation) {
  const auto cam = CameraPose::look_at(Intrinsics::centered(10.0, 8, 8), {4.0, 1.0, -2.0}, {0.0, 0.5, 0.0});
  EXPECT_TRUE(is_rotation(cam.rotation(), 1e-12));
  const Eigen::Vector3d forward = -cam.rotation().col(2);
  EXPECT_NEAR(forward.dot((Eigen::Vector3d(0.0, 0.5, 0.0) - cam.center()).normalized()), 1.0, 1e-12);
}

TEST(Camera, RejectsInvalidPoses) {
  Eigen::Matrix3d bad = Eigen::Matrix3d::Identity();
  bad(0, 1) = 0.01;
  EXPECT_THROW(CameraPose(Intrinsics::centered(10.0, 8, 8), bad, Eigen::Vector3d::Zero()), std::invalid_argument);
  Eigen::Matrix3d reflection = Eigen::Matrix3d::Identity();
  reflection(2, 2) = -1.0;
  EXPECT_THROW(CameraPose(Intrinsics::centered(10.0, 8, 8), reflection, Eigen::Vector3d::Zero()), std::invalid_argument);
  EXPECT_THROW(CameraPose(Intrinsics::centered(0.0, 8, 8), Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero()),
               std::invalid_argument);
}

TEST(Camera, RayGenerationNamesOutOfRangePixel) {
  const auto cam = CameraPose(Intrinsics::centered(10.0, 8, 6), Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero());
  try {
    generate_rays(cam, {{0, 0}, {6, 2}});
    FAIL() << "expected out_of_range";
  } catch (const std::out_of_range& e) {
    EXPECT_NE(std::string(e.what()).find("row 6, col 2"), std::string::npos) << e.what();
  }
  const auto all = generate_all_rays(cam);
  EXPECT_EQ(all.size(), 48);
  EXPECT_NEAR((all.directions.norm(2, 1) - 1.0).abs().max().item<double>(), 0.0, 1e-14);
  // Row-major order.
  EXPECT_EQ(all.pixels[9].row, 1);
  EXPECT_EQ(all.pixels[9].col, 1);
}

TEST(Warp, IdentityWarpIsExact) {
  SceneSpec spec;
  spec.width = spec.height = 48;
  SyntheticScene scene(spec);
  const auto cam = scene.arc_camera(0.3);
  const auto r = scene.render(cam);
  const auto warped = warp_view(r.image, cam, cam, r.depth, r.depth, 0.05);
  EXPECT_TRUE(warped.mask.all().item<bool>());
  EXPECT_LT((warped.image - r.image).abs().max().item<double>(), 1e-5);
}

TEST(Warp, PlaneTranslationMatchesHomography) {
  const auto k = Intrinsics::centered(60.0, 64, 48);
  const CameraPose target(k, Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero());
  const double plane = 5.0;

  // Pure sideways translation: every pixel shifts by f * b / Z.
  {
    const double b = 0.4;
    const CameraPose source(k, Eigen::Matrix3d::Identity(), Eigen::Vector3d(b, 0.0, 0.0));
    const auto field = compute_warp_field(source, target, plane_depth(target, plane), plane_depth(source, plane), 0.05);
    const auto px = grid_to_pixels(field, 64, 48);
    const double shift = 60.0 * b / plane;
    auto a = px.accessor<double, 3>();
    auto m = field.mask.accessor<bool, 2>();
    int checked = 0;
    for (int r = 0; r < 48; ++r) {
      for (int c = 0; c < 64; ++c) {
        if (c - shift < 0) {
          EXPECT_FALSE(m[r][c]);
          continue;
        }
        ASSERT_TRUE(m[r][c]) << r << "," << c;
        EXPECT_NEAR(a[r][c][0], c - shift, 0.5);
        EXPECT_NEAR(a[r][c][1], r, 0.5);
        ++checked;
      }
    }
    EXPECT_GT(checked, 1000);
  }

  // General motion: x_s ~ R^T (I - c n^T / Z) x_t for the plane n . X = 1 on rays with z = -1.
  {
    const Eigen::Matrix3d rs = rot_y(0.08);
    const Eigen::Vector3d cs(0.3, -0.1, 0.2);
    const CameraPose source(k, rs, cs);
    const auto field = compute_warp_field(source, target, plane_depth(target, plane), plane_depth(source, plane), 0.05);
    const auto px = grid_to_pixels(field, 64, 48);
    const Eigen::Vector3d n(0.0, 0.0, -1.0);
    const Eigen::Matrix3d h = rs.transpose() * (Eigen::Matrix3d::Identity() - cs * n.transpose() / plane);
    auto a = px.accessor<double, 3>();
    auto m = field.mask.accessor<bool, 2>();
    int checked = 0;
    for (int r = 0; r < 48; ++r) {
      for (int c = 0; c < 64; ++c) {
        if (!m[r][c]) continue;
        const Eigen::Vector3d ray((c - k.cx) / k.focal, -(r - k.cy) / k.focal, -1.0);
        const Eigen::Vector3d q = h * ray;
        EXPECT_NEAR(a[r][c][0], k.cx + k.focal * q.x() / -q.z(), 0.5);
        EXPECT_NEAR(a[r][c][1], k.cy - k.focal * q.y() / -q.z(), 0.5);
        ++checked;
      }
    }
    EXPECT_GT(checked, 1500);
  }
}

TEST(Warp, RoundTripOnSceneIsClose) {
  SceneSpec spec;
  SyntheticScene scene(spec);
  const auto cams = scene.training_cameras();
  const auto& a = cams[9];
  const auto& b = cams[10];
  const auto ra = scene.render(a);
  const auto rb = scene.render(b);
  const double tol = default_depth_tolerance(8.0);
  const auto a_in_b = warp_view(ra.image, a, b, rb.depth, ra.depth, tol);
  const auto back = warp_view(a_in_b.image, b, a, ra.depth, rb.depth, tol);
  // Doubly valid: valid going back, and every tap it read was valid going forward.
  const auto forward_mask = a_in_b.mask.to(torch::kFloat32).unsqueeze(2).expand({-1, -1, 3}).contiguous();
  const auto mask_back = warp_view(forward_mask, b, a, ra.depth, rb.depth, tol);
  const auto both = back.mask & (mask_back.image.select(2, 0) >= 1.0 - 1e-6);
  ASSERT_GT(both.to(torch::kFloat64).mean().item<double>(), 0.5);
  const auto diff = (back.image - ra.image).abs().mean(2);
  const double mae = diff.masked_select(both).mean().item<double>();
  EXPECT_LE(mae, 2.0 / 255.0);
}

TEST(Warp, OcclusionAndBoundsAreMasked) {
  SceneSpec spec;
  spec.width = spec.height = 64;
  SyntheticScene scene(spec);
  const auto src = scene.arc_camera(0.0);
  const auto tgt = scene.arc_camera(1.0);
  const auto rs = scene.render(src);
  const auto rt = scene.render(tgt);
  const double tol = 0.05;
  const auto field = compute_warp_field(src, tgt, rt.depth, rs.depth, tol);
  auto m = field.mask.accessor<bool, 2>();
  auto td = rt.depth.accessor<double, 2>();
  int rejected_in_view = 0;
  for (int r = 0; r < 64; ++r) {
    for (int c = 0; c < 64; ++c) {
      const Eigen::Vector3d p = tgt.center() + td[r][c] * tgt.direction(c, r);
      const auto proj = src.project(p);
      ASSERT_TRUE(proj.has_value());
      const bool inside = (*proj)[0] >= 0 && (*proj)[0] <= 63 && (*proj)[1] >= 0 && (*proj)[1] <= 63;
      if (!inside) {
        EXPECT_FALSE(m[r][c]);
        continue;
      }
      // Independent visibility: does the source see this point first?
      const auto hit = scene.trace(src.center(), (p - src.center()).normalized());
      const bool visible = std::abs(hit.distance - (*proj)[2]) < 1e-3;
      if (!visible && std::abs(hit.distance - (*proj)[2]) > 0.5) {
        EXPECT_FALSE(m[r][c]) << "occluded pixel " << r << "," << c << " kept";
        ++rejected_in_view;
      }
    }
  }
  EXPECT_GT(rejected_in_view, 0);
}

TEST(Warp, WarpIsDifferentiableInSource) {
  const auto k = Intrinsics::centered(20.0, 16, 16);
  const CameraPose target(k, Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero());
  const CameraPose source(k, Eigen::Matrix3d::Identity(), Eigen::Vector3d(0.05, 0.0, 0.0));
  const auto field = compute_warp_field(source, target, plane_depth(target, 3.0), plane_depth(source, 3.0), 0.1);
  auto image = torch::rand({16, 16, 3}, torch::kFloat64).requires_grad_(true);
  apply_warp(field, image).image.sum().backward();
  EXPECT_GT(image.grad().abs().sum().item<double>(), 0.0);
}

TEST(Warp, SourceShapeIsChecked) {
  const auto cam = CameraPose(Intrinsics::centered(10.0, 8, 8), Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero());
  const auto depth = torch::ones({8, 8}, torch::kFloat64);
  EXPECT_THROW(warp_view(torch::zeros({7, 8, 3}), cam, cam, depth, depth, 0.1), std::invalid_argument);
  EXPECT_THROW(compute_warp_field(cam, cam, torch::ones({4, 4}), depth, 0.1), std::invalid_argument);
}

TEST(Warp, DefaultToleranceIsFivePercentOfScale) { EXPECT_DOUBLE_EQ(default_depth_tolerance(6.0), 0.3); }

TEST(Camera, InterpolationEndpointsAndMidpoint) {
  const auto k = Intrinsics::centered(30.0, 16, 16);
  const auto a = CameraPose::look_at(k, {0.0, 0.0, 4.0}, Eigen::Vector3d::Zero());
  const auto b = CameraPose::look_at(k, {4.0 * std::sin(0.5), 0.0, 4.0 * std::cos(0.5)}, Eigen::Vector3d::Zero());
  EXPECT_EQ(interpolate_pose(a, b, 0.0).rotation(), a.rotation());
  EXPECT_EQ(interpolate_pose(a, b, 1.0).center(), b.center());
  const auto mid = interpolate_pose(a, b, 0.5);
  EXPECT_TRUE(is_rotation(mid.rotation(), 1e-10));
  // Half the rotation angle about y.
  const Eigen::Matrix3d expected = a.rotation() * rot_y(0.25);
  EXPECT_LT((mid.rotation() - expected).cwiseAbs().maxCoeff(), 1e-9);
}
