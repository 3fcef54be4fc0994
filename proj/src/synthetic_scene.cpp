#include "stylenerf/synthetic_scene.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>

#include <torch/torch.h>

#include "stylenerf/image_io.hpp"

namespace stylenerf {
namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct Sphere {
  Eigen::Vector3d center;
  double radius;
};

const Sphere kSpheres[2] = {{{-0.55, -0.15, 0.25}, 0.5}, {{0.65, 0.25, -0.35}, 0.42}};
const Eigen::Vector3d kBoxCenter(0.05, -0.7, 0.75);
const Eigen::Vector3d kBoxHalf(0.3, 0.25, 0.3);
const Eigen::Vector3d kBoxFaceColors[3] = {{0.85, 0.55, 0.2}, {0.9, 0.85, 0.6}, {0.35, 0.6, 0.8}};

double intersect_sphere(const Sphere& s, const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  const Eigen::Vector3d oc = o - s.center;
  const double b = oc.dot(d);
  const double c = oc.squaredNorm() - s.radius * s.radius;
  const double disc = b * b - c;
  if (disc < 0.0) return kInf;
  const double root = std::sqrt(disc);
  double t = -b - root;
  if (t <= 1e-9) t = -b + root;
  return t > 1e-9 ? t : kInf;
}

/// Slab test; returns distance and the axis of the entered face.
std::pair<double, int> intersect_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d) {
  double t_near = -kInf, t_far = kInf;
  int axis = -1;
  for (int a = 0; a < 3; ++a) {
    const double lo = kBoxCenter[a] - kBoxHalf[a], hi = kBoxCenter[a] + kBoxHalf[a];
    if (std::abs(d[a]) < 1e-12) {
      if (o[a] < lo || o[a] > hi) return {kInf, -1};
      continue;
    }
    double t0 = (lo - o[a]) / d[a], t1 = (hi - o[a]) / d[a];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > t_near) {
      t_near = t0;
      axis = a;
    }
    t_far = std::min(t_far, t1);
  }
  if (t_near > t_far || t_near <= 1e-9) return {kInf, -1};
  return {t_near, axis};
}

double shade(const Eigen::Vector3d& normal) {
  static const Eigen::Vector3d light = Eigen::Vector3d(0.4, 0.8, 0.6).normalized();
  constexpr double ambient = 0.35;
  return ambient + (1.0 - ambient) * std::max(0.0, normal.dot(light));
}

}  // namespace

void SceneSpec::validate() const {
  if (views < 2) throw std::invalid_argument("scene: need at least 2 training views");
  if (holdout_views < 0) throw std::invalid_argument("scene: holdout_views must be >= 0");
  if (width < 16 || height < 16) throw std::invalid_argument("scene: image size must be at least 16x16");
  if (!(fov_degrees > 0.0 && fov_degrees < 170.0)) throw std::invalid_argument("scene: fov_degrees must be in (0, 170)");
  if (!(arc_degrees >= 0.0 && arc_degrees < 120.0)) throw std::invalid_argument("scene: arc_degrees must be in [0, 120)");
  if (!(radius > 2.0)) throw std::invalid_argument("scene: radius must exceed 2 so cameras sit outside the objects");
}

nlohmann::json SceneSpec::to_json() const {
  return {{"views", views}, {"holdout_views", holdout_views}, {"width", width}, {"height", height},
          {"fov_degrees", fov_degrees}, {"arc_degrees", arc_degrees}, {"radius", radius},
          {"elevation", elevation}, {"seed", seed}};
}

SyntheticScene::SyntheticScene(const SceneSpec& spec) : spec_(spec) {
  spec_.validate();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  wall_base_ = Eigen::Vector3d(0.45 + 0.2 * unit(rng), 0.45 + 0.2 * unit(rng), 0.45 + 0.2 * unit(rng));
  for (int k = 0; k < 5; ++k) {
    const double freq = 1.5 + 2.5 * unit(rng);
    const double angle = 2.0 * std::numbers::pi * unit(rng);
    wall_waves_.emplace_back(freq * std::cos(angle), freq * std::sin(angle), 2.0 * std::numbers::pi * unit(rng),
                             std::floor(3.0 * unit(rng)));
  }
  const Eigen::Vector3d sphere_base[2] = {{0.85, 0.3, 0.25}, {0.3, 0.75, 0.4}};
  for (int i = 0; i < 2; ++i) {
    for (int k = 0; k < 3; ++k) sphere_colors_[i][k] = std::clamp(sphere_base[i][k] + 0.2 * (unit(rng) - 0.5), 0.0, 1.0);
  }
}

Eigen::Vector3d SyntheticScene::wall_color(const Eigen::Vector3d& p) const {
  Eigen::Vector3d color = wall_base_;
  for (const auto& w : wall_waves_) {
    const double s = 0.1 * std::sin(w[0] * p.x() + w[1] * p.y() + w[2]);
    const int channel = static_cast<int>(w[3]);
    color[channel] += s;
    color[(channel + 1) % 3] -= 0.5 * s;
  }
  return color.cwiseMax(0.0).cwiseMin(1.0);
}

SurfaceHit SyntheticScene::trace(const Eigen::Vector3d& origin, const Eigen::Vector3d& direction) const {
  SurfaceHit hit{kInf, Eigen::Vector3d::Zero()};
  if (direction.z() < -1e-12) {
    const double t = (kWallZ - origin.z()) / direction.z();
    if (t > 1e-9) {
      hit.distance = t;
      hit.color = wall_color(origin + t * direction) * shade(Eigen::Vector3d::UnitZ());
    }
  }
  for (int i = 0; i < 2; ++i) {
    const double t = intersect_sphere(kSpheres[i], origin, direction);
    if (t < hit.distance) {
      const Eigen::Vector3d n = (origin + t * direction - kSpheres[i].center).normalized();
      const double band = 0.85 + 0.15 * std::sin(6.0 * n.y());
      hit.distance = t;
      hit.color = (sphere_colors_[i] * band * shade(n)).cwiseMin(1.0);
    }
  }
  const auto [t_box, axis] = intersect_box(origin, direction);
  if (t_box < hit.distance) {
    Eigen::Vector3d n = Eigen::Vector3d::Zero();
    n[axis] = direction[axis] > 0.0 ? -1.0 : 1.0;
    hit.distance = t_box;
    hit.color = kBoxFaceColors[axis] * shade(n);
  }
  return hit;
}

CameraPose SyntheticScene::arc_camera(double s) const {
  const double theta = (s - 0.5) * spec_.arc_degrees * std::numbers::pi / 180.0;
  const Eigen::Vector3d eye(spec_.radius * std::sin(theta), spec_.elevation, spec_.radius * std::cos(theta));
  const double focal = 0.5 * spec_.width / std::tan(0.5 * spec_.fov_degrees * std::numbers::pi / 180.0);
  return CameraPose::look_at(Intrinsics::centered(focal, spec_.width, spec_.height), eye, Eigen::Vector3d::Zero());
}

std::vector<CameraPose> SyntheticScene::training_cameras() const { return path_cameras(spec_.views); }

std::vector<CameraPose> SyntheticScene::holdout_cameras() const {
  std::vector<CameraPose> out;
  const double half_step = 0.5 / (spec_.views - 1);
  for (int h = 0; h < spec_.holdout_views; ++h) {
    // Midway between two neighbouring training cameras.
    const int k = std::min(spec_.views - 2, (h + 1) * (spec_.views - 1) / (spec_.holdout_views + 1));
    out.push_back(arc_camera(static_cast<double>(k) / (spec_.views - 1) + half_step));
  }
  return out;
}

std::vector<CameraPose> SyntheticScene::path_cameras(int count) const {
  if (count < 1) throw std::invalid_argument("scene: path needs at least one camera");
  std::vector<CameraPose> out;
  for (int i = 0; i < count; ++i) out.push_back(arc_camera(count == 1 ? 0.5 : static_cast<double>(i) / (count - 1)));
  return out;
}

SyntheticScene::Render SyntheticScene::render(const CameraPose& camera) const {
  const int h = camera.height(), w = camera.width();
  auto image = torch::empty({h, w, 3}, torch::kFloat32);
  auto depth = torch::empty({h, w}, torch::kFloat64);
  auto img = image.accessor<float, 3>();
  auto dep = depth.accessor<double, 2>();
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const auto hit = trace(camera.center(), camera.direction(c, r));
      dep[r][c] = hit.distance;
      for (int k = 0; k < 3; ++k) img[r][c][k] = static_cast<float>(hit.color[k]);
    }
  }
  return Render{quantize_8bit(image), depth};
}

Dataset SyntheticScene::make_dataset() const {
  Dataset dataset;
  double lo = kInf, hi = 0.0;
  auto add = [&](const CameraPose& camera, const std::string& id, const std::string& split) {
    auto render_out = render(camera);
    lo = std::min(lo, render_out.depth.min().item<double>());
    hi = std::max(hi, render_out.depth.max().item<double>());
    DatasetView view;
    view.id = id;
    view.image_file = id + ".png";
    view.depth_file = id + "_depth.pfm";
    view.split = split;
    view.camera = camera;
    view.image = render_out.image;
    view.depth = render_out.depth;
    dataset.views.push_back(std::move(view));
  };
  const auto train = training_cameras();
  for (size_t i = 0; i < train.size(); ++i) add(train[i], "view_" + std::string(i < 10 ? "0" : "") + std::to_string(i), "train");
  const auto test = holdout_cameras();
  for (size_t i = 0; i < test.size(); ++i) add(test[i], "test_" + std::string(i < 10 ? "0" : "") + std::to_string(i), "test");
  if (!std::isfinite(hi)) throw std::runtime_error("scene: some pixels see no geometry");
  dataset.near = 0.9 * lo;
  dataset.far = 1.05 * hi;
  return dataset;
}

namespace {

Eigen::Vector3d hsv(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int sector = static_cast<int>(h) % 6;
  const double f = h - std::floor(h);
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (sector) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

// Pattern value in [0, 1] at normalized coordinates (x, y) in [0, 1).
double pattern(int kind, double x, double y, const std::vector<Eigen::Vector3d>& blobs, double freq) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  switch (kind) {
    case 0: return 0.5 + 0.5 * std::sin(two_pi * freq * (x + y));
    case 1: {
      const double cx = std::fmod(x * freq, 1.0) - 0.5, cy = std::fmod(y * freq, 1.0) - 0.5;
      return std::sqrt(cx * cx + cy * cy) < 0.3 ? 1.0 : 0.0;
    }
    case 2: {
      const double r = std::hypot(x - 0.5, y - 0.5);
      return 0.5 + 0.5 * std::sin(two_pi * freq * 1.5 * r);
    }
    case 3: {
      const double u = x * std::cos(0.5) - y * std::sin(0.5), v = x * std::sin(0.5) + y * std::cos(0.5);
      return (static_cast<int>(std::floor(u * freq)) + static_cast<int>(std::floor(v * freq))) % 2 == 0 ? 1.0 : 0.0;
    }
    default: {
      double acc = 0.0;
      for (const auto& b : blobs) acc += std::exp(-((x - b.x()) * (x - b.x()) + (y - b.y()) * (y - b.y())) / (b.z() * b.z()));
      return std::min(1.0, acc);
    }
  }
}

}  // namespace

std::vector<StyleImage> generate_style_images(int count, int size, std::uint64_t seed) {
  if (count < 1) throw std::invalid_argument("style images: count must be >= 1");
  if (size < 16) throw std::invalid_argument("style images: size must be >= 16");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<StyleImage> out;
  for (int i = 0; i < count; ++i) {
    // Hues spread around the wheel so palettes stay apart.
    const double hue = (i + 0.3 * unit(rng)) / count;
    const Eigen::Vector3d a = hsv(hue, 0.75 + 0.2 * unit(rng), 0.85 + 0.15 * unit(rng));
    const Eigen::Vector3d b = hsv(hue + 0.45 + 0.1 * unit(rng), 0.6 + 0.3 * unit(rng), 0.15 + 0.3 * unit(rng));
    const Eigen::Vector3d c = hsv(hue + 0.2, 0.3, 0.95);
    const double freq = 3.0 + 3.0 * unit(rng);
    std::vector<Eigen::Vector3d> blobs;
    for (int k = 0; k < 6; ++k) blobs.emplace_back(unit(rng), unit(rng), 0.08 + 0.1 * unit(rng));
    const int kind = i % 5;

    auto image = torch::empty({size, size, 3}, torch::kFloat32);
    auto acc = image.accessor<float, 3>();
    for (int r = 0; r < size; ++r) {
      for (int col = 0; col < size; ++col) {
        const double x = (col + 0.5) / size, y = (r + 0.5) / size;
        const double p = pattern(kind, x, y, blobs, freq);
        const double accent = 0.5 + 0.5 * std::sin(2.0 * std::numbers::pi * (2.0 * x - 1.3 * y));
        Eigen::Vector3d color = p * a + (1.0 - p) * b;
        color = 0.8 * color + 0.2 * accent * c;
        for (int k = 0; k < 3; ++k) acc[r][col][k] = static_cast<float>(std::clamp(color[k], 0.0, 1.0));
      }
    }
    out.push_back(StyleImage{"style_" + std::string(i < 10 ? "0" : "") + std::to_string(i), quantize_8bit(image)});
  }
  return out;
}

}  // namespace stylenerf
