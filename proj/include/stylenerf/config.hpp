#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stylenerf/consistency.hpp"
#include "stylenerf/pipeline.hpp"
#include "stylenerf/radiance_field.hpp"
#include "stylenerf/style_latents.hpp"
#include "stylenerf/stylized_field.hpp"
#include "stylenerf/synthetic_scene.hpp"

namespace stylenerf {

/// Raised for invalid configuration; the message starts with the field path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  RadianceFieldConfig radiance;  // near/far come from the dataset
  StylizedFieldConfig stylized;
  int vae_hidden = 128;
  double vae_beta = 0.01;
  int train_samples = 64;  // stratified samples per ray while fitting
  int eval_samples = 128;  // midpoint samples for every full-frame render
  int cache_top_k = 16;    // samples kept per ray for stylized training
  DistributionLossForm distribution_loss = DistributionLossForm::kPrinted;
  bool hierarchical_sampling = false;  // reserved; only single-stage sampling exists
};

struct LossConfig {
  LossWeights weights;
  double lambda_co = 50.0;
};

struct EvalConfig {
  std::vector<int> gaps = {5, 35};
  int max_pairs = 20;
  double depth_tolerance = 0.0;  // 0 selects 5% of the far bound
  int frame_multiplier = 3;      // evaluation frames per training view
  bool ground_truth_depth = false;
};

struct RunConfig {
  std::string dataset;  // empty: <output>/scene
  std::string styles;   // empty: <output>/styles
  std::string output = "run";
  std::uint64_t seed = 0;
  int threads = 1;
  SceneSpec scene;
  int style_count = 5;
  int style_size = 128;
  int augment_views = 0;  // 0: one per training view
  ModelConfig model;
  StageSchedule schedule;
  LossConfig loss;
  EvalConfig eval;

  std::filesystem::path dataset_dir() const;
  std::filesystem::path styles_dir() const;
  /// Propagates the top-level seed into the scene and schedule.
  void apply_seed(std::uint64_t new_seed);
  void validate() const;
  nlohmann::json to_json() const;
};

/// Overlays `j` on the defaults; unknown keys and type errors raise ConfigError.
RunConfig config_from_json(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace stylenerf
