#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>
#include <torch/types.h>

namespace stylenerf {

// Conventions
//   * Right-handed camera frame: +x right, +y up, the camera looks down -z.
//   * Pixel (row, col) has its centre at image coordinates u = col, v = row;
//     v grows downwards.
//   * Depth maps hold the Euclidean distance from the camera centre along the
//     unit ray through the pixel (the same quantity volume rendering returns),
//     not the z coordinate.

struct Intrinsics {
  double focal = 1.0;  // pixels
  double cx = 0.0;     // pixels
  double cy = 0.0;
  int width = 1;
  int height = 1;

  /// Principal point at the image centre ((W-1)/2, (H-1)/2).
  static Intrinsics centered(double focal, int width, int height);
};

struct PixelIndex {
  int row = 0;
  int col = 0;
};

class CameraPose {
 public:
  /// Identity pose of a 1x1 camera with unit focal length.
  CameraPose() : CameraPose(Intrinsics{}, Eigen::Matrix3d::Identity(), Eigen::Vector3d::Zero()) {}
  /// Validates focal > 0, size >= 1 and an orthonormal, det +1 rotation (1e-6).
  CameraPose(Intrinsics intrinsics, const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation);

  /// Camera at `eye` looking at `target`, with `up` resolving the roll.
  static CameraPose look_at(Intrinsics intrinsics, const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                            const Eigen::Vector3d& up = Eigen::Vector3d::UnitY());

  const Intrinsics& intrinsics() const { return intrinsics_; }
  int width() const { return intrinsics_.width; }
  int height() const { return intrinsics_.height; }
  /// Camera-to-world rotation; columns are the camera axes in world coordinates.
  const Eigen::Matrix3d& rotation() const { return rotation_; }
  const Eigen::Vector3d& center() const { return translation_; }
  /// Row-major 3x4 camera-to-world matrix [R | t].
  Eigen::Matrix<double, 3, 4> camera_to_world() const;

  /// Unit world-space direction through image point (u, v).
  Eigen::Vector3d direction(double u, double v) const;
  /// Image coordinates and ray distance of a world point; empty when the point
  /// is not in front of the camera.
  std::optional<Eigen::Vector3d> project(const Eigen::Vector3d& world) const;

  /// Pose with the extrinsics composed on the left by the rigid transform (R, t).
  CameraPose transformed(const Eigen::Matrix3d& rotation, const Eigen::Vector3d& translation) const;

 private:
  Intrinsics intrinsics_;
  Eigen::Matrix3d rotation_;
  Eigen::Vector3d translation_;
};

bool is_rotation(const Eigen::Matrix3d& rotation, double tolerance = 1e-6);

struct RayBundle {
  torch::Tensor origins;     // N x 3, float64
  torch::Tensor directions;  // N x 3, float64, unit norm
  std::vector<PixelIndex> pixels;

  int64_t size() const { return origins.size(0); }
  RayBundle slice(int64_t begin, int64_t end) const;
};

/// One ray per listed pixel. Throws std::out_of_range naming the offending pixel.
RayBundle generate_rays(const CameraPose& camera, const std::vector<PixelIndex>& pixels);
/// Every pixel in row-major order.
RayBundle generate_all_rays(const CameraPose& camera);

struct WarpResult {
  torch::Tensor image;  // H x W x 3, zero where mask is false
  torch::Tensor mask;   // H x W bool
};

/// Per-pixel sampling locations from a target view into a source view.
/// Computed once per camera pair and reused for every image rendered from
/// those two views (e.g. one per style).
struct WarpField {
  torch::Tensor grid;  // 1 x H x W x 2 normalized source coordinates (align_corners = true)
  torch::Tensor mask;  // H x W bool

  double valid_fraction() const;
};

/// Backward warp geometry: each target pixel is lifted with `target_depth`,
/// projected into `source_cam`, and kept only when it lands inside the source
/// frame and agrees with `source_depth` to within `depth_tolerance`.
/// Depths <= 0 or non-finite mark pixels without geometry.
WarpField compute_warp_field(const CameraPose& source_cam, const CameraPose& target_cam,
                             const torch::Tensor& target_depth, const torch::Tensor& source_depth,
                             double depth_tolerance);

/// Bilinear resampling of an H x W x 3 source image; differentiable in `source`.
WarpResult apply_warp(const WarpField& field, const torch::Tensor& source);

WarpResult warp_view(const torch::Tensor& source, const CameraPose& source_cam, const CameraPose& target_cam,
                     const torch::Tensor& target_depth, const torch::Tensor& source_depth, double depth_tolerance);

/// Occlusion tolerance used when none is configured: 5% of the scene scale.
inline double default_depth_tolerance(double scene_scale) { return 0.05 * scene_scale; }

/// Pose interpolation: linear in the centre, spherical-linear in rotation.
CameraPose interpolate_pose(const CameraPose& a, const CameraPose& b, double t);

}  // namespace stylenerf
