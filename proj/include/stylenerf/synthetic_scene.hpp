#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>
#include <torch/types.h>

#include "stylenerf/dataset.hpp"

namespace stylenerf {

/// Procedural forward-facing scene: a textured back wall, two spheres and a
/// box, lit by one directional light, seen from cameras on a horizontal arc
/// that all look at the origin.
struct SceneSpec {
  int views = 20;           // training cameras, evenly spread over the arc
  int holdout_views = 3;    // test cameras placed between training cameras
  int width = 96;
  int height = 96;
  double fov_degrees = 45.0;
  double arc_degrees = 40.0;  // total angular span of the arc
  double radius = 4.0;
  double elevation = 0.4;     // camera height above the scene centre
  std::uint64_t seed = 0;

  void validate() const;
  nlohmann::json to_json() const;
};

struct SurfaceHit {
  double distance = 0.0;  // along the unit ray
  Eigen::Vector3d color = Eigen::Vector3d::Zero();
};

class SyntheticScene {
 public:
  explicit SyntheticScene(const SceneSpec& spec);

  const SceneSpec& spec() const { return spec_; }
  /// Nearest hit along a unit-direction ray, or distance = +inf.
  SurfaceHit trace(const Eigen::Vector3d& origin, const Eigen::Vector3d& direction) const;

  /// Camera at arc parameter s in [0, 1].
  CameraPose arc_camera(double s) const;
  std::vector<CameraPose> training_cameras() const;
  std::vector<CameraPose> holdout_cameras() const;
  /// `count` cameras evenly spread over the whole arc.
  std::vector<CameraPose> path_cameras(int count) const;

  struct Render {
    torch::Tensor image;  // H x W x 3, quantized to 8 bits
    torch::Tensor depth;  // H x W ray distances, float64
  };
  Render render(const CameraPose& camera) const;

  /// Dataset with exact poses and depths; near/far bracket every rendered depth.
  Dataset make_dataset() const;

  static constexpr double kWallZ = -1.2;

 private:
  Eigen::Vector3d wall_color(const Eigen::Vector3d& p) const;

  SceneSpec spec_;
  std::vector<Eigen::Vector4d> wall_waves_;  // (fx, fy, phase, channel mix)
  Eigen::Vector3d wall_base_;
  Eigen::Vector3d sphere_colors_[2];
};

/// Procedural style images (stripes, dots, waves, checks, blobs) with
/// distinct palettes. Ids are "style_00", "style_01", ...
struct StyleImage {
  std::string id;
  torch::Tensor image;  // H x W x 3
};

std::vector<StyleImage> generate_style_images(int count, int size, std::uint64_t seed);

}  // namespace stylenerf
