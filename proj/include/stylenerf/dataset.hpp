#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <torch/types.h>

#include "stylenerf/camera.hpp"
#include "stylenerf/radiance_field.hpp"

namespace stylenerf {

// Dataset directory layout
//
//   <dir>/cameras.txt     manifest, one record per line, '#' starts a comment
//   <dir>/<image files>   8-bit RGB PNG
//   <dir>/<depth files>   optional ground-truth depth maps (PFM, ray distance)
//
// Manifest records:
//   stylenerf-dataset 1
//   bounds <near> <far>
//   view <id> <image> <split> <width> <height> <focal> <cx> <cy> <m00> <m01> ... <m23> <depth|->
//
// m00..m23 is the row-major 3x4 camera-to-world matrix [R | t] in the
// right-handed, looking-down -z convention of camera.hpp. <split> is
// "train" or "test".

struct DatasetView {
  std::string id;
  std::string image_file;
  std::string split = "train";
  CameraPose camera;
  torch::Tensor image;  // H x W x 3 in [0,1]
  std::string depth_file;
  torch::Tensor depth;  // H x W ground truth, undefined when absent
};

struct Dataset {
  double near = 0.0;
  double far = 0.0;
  std::vector<DatasetView> views;

  std::vector<PosedImage> posed(const std::string& split) const;
  std::vector<const DatasetView*> select(const std::string& split) const;
  std::string summary() const;
};

inline constexpr const char* kManifestName = "cameras.txt";

/// Parses and validates a dataset directory. Manifest errors carry
/// "<file>:<line>:"; missing image files are named.
Dataset ingest_dataset(const std::filesystem::path& dir);
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);

/// Camera path files use the same record syntax:
///   stylenerf-camera-path 1
///   camera <id> <width> <height> <focal> <cx> <cy> <m00> ... <m23>
struct NamedCamera {
  std::string id;
  CameraPose camera;
};

std::vector<NamedCamera> read_camera_path(const std::filesystem::path& file);
void write_camera_path(const std::filesystem::path& file, const std::vector<NamedCamera>& cameras);

}  // namespace stylenerf
