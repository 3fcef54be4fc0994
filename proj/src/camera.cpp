#include "stylenerf/camera.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include <Eigen/Geometry>
#include <torch/torch.h>

namespace stylenerf {

Intrinsics Intrinsics::centered(double focal, int width, int height) {
  return Intrinsics{focal, 0.5 * (width - 1), 0.5 * (height - 1), width, height};
}

bool is_rotation(const Eigen::Matrix3d& rotation, double tolerance) {
  const double orthonormal_error = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  return orthonormal_error <= tolerance && std::abs(rotation.determinant() - 1.0) <= tolerance;
}

CameraPose::CameraPose(Intrinsics intrinsics, const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation)
    : intrinsics_(intrinsics), rotation_(rotation), translation_(translation) {
  if (!(intrinsics.focal > 0.0)) throw std::invalid_argument("camera: focal length must be positive");
  if (intrinsics.width < 1 || intrinsics.height < 1) throw std::invalid_argument("camera: image size must be >= 1");
  if (!is_rotation(rotation)) throw std::invalid_argument("camera: rotation is not orthonormal with det +1");
  if (!translation.allFinite()) throw std::invalid_argument("camera: translation is not finite");
}

CameraPose CameraPose::look_at(Intrinsics intrinsics, const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                               const Eigen::Vector3d& up) {
  const Eigen::Vector3d back = (eye - target).normalized();  // camera +z
  const Eigen::Vector3d right = up.cross(back).normalized();
  const Eigen::Vector3d true_up = back.cross(right);
  Eigen::Matrix3d rotation;
  rotation.col(0) = right;
  rotation.col(1) = true_up;
  rotation.col(2) = back;
  return CameraPose(intrinsics, rotation, eye);
}

Eigen::Matrix<double, 3, 4> CameraPose::camera_to_world() const {
  Eigen::Matrix<double, 3, 4> m;
  m.leftCols<3>() = rotation_;
  m.col(3) = translation_;
  return m;
}

Eigen::Vector3d CameraPose::direction(double u, double v) const {
  const Eigen::Vector3d local((u - intrinsics_.cx) / intrinsics_.focal, -(v - intrinsics_.cy) / intrinsics_.focal, -1.0);
  return (rotation_ * local).normalized();
}

std::optional<Eigen::Vector3d> CameraPose::project(const Eigen::Vector3d& world) const {
  const Eigen::Vector3d local = rotation_.transpose() * (world - translation_);
  const double z = -local.z();
  if (z <= 1e-12) return std::nullopt;
  return Eigen::Vector3d(intrinsics_.cx + intrinsics_.focal * local.x() / z,
                         intrinsics_.cy - intrinsics_.focal * local.y() / z, (world - translation_).norm());
}

CameraPose CameraPose::transformed(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation) const {
  return CameraPose(intrinsics_, rotation * rotation_, rotation * translation_ + translation);
}

RayBundle RayBundle::slice(int64_t begin, int64_t end) const {
  RayBundle out;
  out.origins = origins.slice(0, begin, end);
  out.directions = directions.slice(0, begin, end);
  if (!pixels.empty()) out.pixels.assign(pixels.begin() + begin, pixels.begin() + end);
  return out;
}

RayBundle generate_rays(const CameraPose& camera, const std::vector<PixelIndex>& pixels) {
  const auto n = static_cast<int64_t>(pixels.size());
  RayBundle bundle;
  bundle.origins = torch::empty({n, 3}, torch::kFloat64);
  bundle.directions = torch::empty({n, 3}, torch::kFloat64);
  auto origins = bundle.origins.accessor<double, 2>();
  auto directions = bundle.directions.accessor<double, 2>();
  const Eigen::Vector3d center = camera.center();
  for (int64_t i = 0; i < n; ++i) {
    const auto& p = pixels[static_cast<size_t>(i)];
    if (p.row < 0 || p.col < 0 || p.row >= camera.height() || p.col >= camera.width()) {
      throw std::out_of_range("generate_rays: pixel (row " + std::to_string(p.row) + ", col " + std::to_string(p.col) +
                              ") outside " + std::to_string(camera.height()) + "x" + std::to_string(camera.width()) +
                              " image");
    }
    const Eigen::Vector3d d = camera.direction(p.col, p.row);
    for (int k = 0; k < 3; ++k) {
      origins[i][k] = center[k];
      directions[i][k] = d[k];
    }
  }
  bundle.pixels = pixels;
  return bundle;
}

RayBundle generate_all_rays(const CameraPose& camera) {
  std::vector<PixelIndex> pixels;
  pixels.reserve(static_cast<size_t>(camera.width()) * camera.height());
  for (int r = 0; r < camera.height(); ++r)
    for (int c = 0; c < camera.width(); ++c) pixels.push_back({r, c});
  return generate_rays(camera, pixels);
}

double WarpField::valid_fraction() const { return mask.to(torch::kFloat64).mean().item<double>(); }

namespace {

torch::Tensor eigen_to_tensor(const Eigen::Matrix3d& m) {
  auto t = torch::empty({3, 3}, torch::kFloat64);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) t[r][c] = m(r, c);
  return t;
}

torch::Tensor valid_depth(const torch::Tensor& depth) { return torch::isfinite(depth) & (depth > 0); }

}  // namespace

WarpField compute_warp_field(const CameraPose& source_cam, const CameraPose& target_cam,
                             const torch::Tensor& target_depth, const torch::Tensor& source_depth,
                             double depth_tolerance) {
  torch::NoGradGuard no_grad;
  const int th = target_cam.height(), tw = target_cam.width();
  const int sh = source_cam.height(), sw = source_cam.width();
  if (target_depth.dim() != 2 || target_depth.size(0) != th || target_depth.size(1) != tw) {
    throw std::invalid_argument("warp: target depth shape does not match the target camera");
  }
  if (source_depth.dim() != 2 || source_depth.size(0) != sh || source_depth.size(1) != sw) {
    throw std::invalid_argument("warp: source depth shape does not match the source camera");
  }

  const auto rays = generate_all_rays(target_cam);
  auto tdepth = target_depth.to(torch::kFloat64).reshape({-1, 1});
  const auto target_valid = valid_depth(tdepth).squeeze(1);
  tdepth = torch::where(torch::isfinite(tdepth), tdepth, torch::zeros_like(tdepth));
  const auto points = rays.origins + rays.directions * tdepth;

  const auto& sc = source_cam.center();
  const auto center = torch::tensor({sc.x(), sc.y(), sc.z()}, torch::kFloat64);
  const auto relative = points - center;
  const auto local = relative.matmul(eigen_to_tensor(source_cam.rotation()));
  const auto z = -local.select(1, 2);
  const auto in_front = z > 1e-9;
  const auto safe_z = torch::where(in_front, z, torch::ones_like(z));
  const auto& k = source_cam.intrinsics();
  auto u = k.cx + k.focal * local.select(1, 0) / safe_z;
  auto v = k.cy - k.focal * local.select(1, 1) / safe_z;

  constexpr double kEdge = 1e-6;
  const auto in_bounds = (u >= -kEdge) & (u <= sw - 1 + kEdge) & (v >= -kEdge) & (v <= sh - 1 + kEdge);
  u = u.clamp(0.0, sw - 1);
  v = v.clamp(0.0, sh - 1);
  const auto gx = sw > 1 ? u * (2.0 / (sw - 1)) - 1.0 : torch::zeros_like(u);
  const auto gy = sh > 1 ? v * (2.0 / (sh - 1)) - 1.0 : torch::zeros_like(v);
  const auto grid = torch::stack({gx, gy}, 1).reshape({1, th, tw, 2});

  // Source validity sampled bilinearly equals 1 only if every contributing tap is valid.
  const auto source_valid = valid_depth(source_depth.to(torch::kFloat64));
  const auto sdepth = torch::where(source_valid, source_depth.to(torch::kFloat64), torch::zeros_like(source_valid, torch::kFloat64));
  namespace F = torch::nn::functional;
  const auto sample_opts = F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kZeros).align_corners(true);
  const auto stacked = torch::stack({source_valid.to(torch::kFloat64), sdepth}, 0).unsqueeze(0);
  const auto sampled = F::grid_sample(stacked, grid, sample_opts).squeeze(0).reshape({2, -1});
  const auto taps_valid = sampled[0] >= 1.0 - 1e-9;
  const auto reprojected = relative.norm(2, 1);
  const auto depth_agrees = (reprojected - sampled[1]).abs() <= depth_tolerance;

  WarpField field;
  field.grid = grid;
  field.mask = (target_valid & in_front & in_bounds & taps_valid & depth_agrees).reshape({th, tw});
  return field;
}

WarpResult apply_warp(const WarpField& field, const torch::Tensor& source) {
  if (source.dim() != 3 || source.size(2) != 3) throw std::invalid_argument("warp: source must be H x W x 3");
  namespace F = torch::nn::functional;
  const auto opts = F::GridSampleFuncOptions().mode(torch::kBilinear).padding_mode(torch::kZeros).align_corners(true);
  const auto input = source.permute({2, 0, 1}).unsqueeze(0);
  const auto sampled = F::grid_sample(input, field.grid.to(source.scalar_type()), opts).squeeze(0).permute({1, 2, 0});
  WarpResult result;
  result.mask = field.mask;
  result.image = sampled * field.mask.unsqueeze(2).to(source.scalar_type());
  return result;
}

WarpResult warp_view(const torch::Tensor& source, const CameraPose& source_cam, const CameraPose& target_cam,
                     const torch::Tensor& target_depth, const torch::Tensor& source_depth, double depth_tolerance) {
  if (source.dim() != 3 || source.size(0) != source_cam.height() || source.size(1) != source_cam.width()) {
    throw std::invalid_argument("warp: source image shape does not match the source camera");
  }
  return apply_warp(compute_warp_field(source_cam, target_cam, target_depth, source_depth, depth_tolerance), source);
}

CameraPose interpolate_pose(const CameraPose& a, const CameraPose& b, double t) {
  const Eigen::Quaterniond qa(a.rotation());
  const Eigen::Quaterniond qb(b.rotation());
  const Eigen::Matrix3d rotation = qa.slerp(t, qb).normalized().toRotationMatrix();
  const Eigen::Vector3d center = (1.0 - t) * a.center() + t * b.center();
  if (t == 0.0) return a;
  if (t == 1.0) return b;
  return CameraPose(a.intrinsics(), rotation, center);
}

}  // namespace stylenerf
