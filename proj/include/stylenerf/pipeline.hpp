#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/types.h>

#include "stylenerf/archive.hpp"
#include "stylenerf/camera.hpp"
#include "stylenerf/nn.hpp"
#include "stylenerf/radiance_field.hpp"
#include "stylenerf/style_latents.hpp"
#include "stylenerf/stylized_field.hpp"
#include "stylenerf/stylizer.hpp"

namespace stylenerf {

struct StageSchedule {
  // radiance field
  int nerf_steps = 20000;
  int nerf_batch_rays = 1024;
  double nerf_lr = 5e-4;
  double nerf_lr_final = 5e-5;
  // style VAE
  int vae_steps = 2000;
  int vae_batch = 32;
  double vae_lr = 1e-3;
  int vae_crops_per_style = 16;
  // decoder: plain AdaIN training, then consistency pre-training
  int decoder_base_steps = 2000;
  int decoder_pretrain_steps = 1000;
  double decoder_base_lr = 1e-3;
  double decoder_lr = 1e-4;
  // mutual learning
  int mutual_steps = 5000;
  int decoder_freeze_steps = 2000;
  int mutual_batch_rays = 1024;
  double mutual_lr = 1e-4;
  double code_lr = 1e-3;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  nlohmann::json to_json() const;
};

// ---------------------------------------------------------------- camera paths

/// `count` poses spread evenly (in arc-length of the anchor index) along the
/// piecewise interpolated anchor path. count == anchors.size() reproduces the
/// anchors exactly. Throws when count < 1 or there are no anchors.
std::vector<CameraPose> densify_path(const std::vector<CameraPose>& anchors, int count);

/// A NeRF-rendered training view for the style stages.
struct AugmentedView {
  std::string id;
  CameraPose camera;
  torch::Tensor image;  // H x W x 3
  DepthMap depth;
};

/// Renders `count` views along the anchor path with the frozen radiance field.
std::vector<AugmentedView> augment_views(const RadianceFieldParams& radiance, const std::vector<CameraPose>& anchors,
                                         int count, int samples);

// ---------------------------------------------------------------- styles

struct StyleSet {
  std::vector<std::string> ids;
  std::vector<torch::Tensor> images;  // H x W x 3
  std::vector<StyleStats> stats;      // whole-image statistics

  size_t size() const { return ids.size(); }
  static StyleSet from_images(const PerceptualEncoder& encoder, std::vector<std::string> ids,
                              std::vector<torch::Tensor> images);
  static StyleSet load_dir(const PerceptualEncoder& encoder, const std::filesystem::path& dir);
};

/// Rows of flattened statistics of random square crops (plus each whole image).
torch::Tensor style_corpus(const PerceptualEncoder& encoder, const StyleSet& styles, int crops_per_style,
                           std::uint64_t seed);

std::vector<StyleDistribution> style_distributions(const VaeParams& vae, const StyleSet& styles);

// ---------------------------------------------------------------- loss log

struct LossRecord {
  int64_t step;
  std::string term;
  double value;
};

class LossLog {
 public:
  void add(int64_t step, const std::string& term, double value) { records_.push_back({step, term, value}); }
  const std::vector<LossRecord>& records() const { return records_; }
  /// Values of one term in step order.
  std::vector<double> series(const std::string& term) const;
  void write_csv(const std::filesystem::path& path) const;

  void save(TensorArchive& archive, const std::string& key) const;
  void load(const TensorArchive& archive, const std::string& key);

 private:
  std::vector<LossRecord> records_;
};

// ---------------------------------------------------------------- warping helpers

struct ViewPair {
  int target = 0;
  int source = 0;
  WarpField warp;  // source -> target
};

/// Pairs (i, i + g) for the given gaps, in both directions, whose warp keeps
/// at least `min_valid` of the target pixels.
std::vector<ViewPair> covisible_pairs(const std::vector<AugmentedView>& views, const std::vector<int>& gaps,
                                      double depth_tolerance, double min_valid = 0.2);

// ---------------------------------------------------------------- decoder

struct DecoderTraining {
  DecoderParams decoder;
  LossLog log;
  double heldout_consistency_start = 0.0;
  double heldout_consistency_end = 0.0;
  std::string heldout_pair;  // "target<-source"
};

/// Plain AdaIN decoder training on the views: L_c + lambda_s L_s.
DecoderTraining train_decoder_base(const PerceptualEncoder& encoder, const std::vector<AugmentedView>& views,
                                   const StyleSet& styles, const StageSchedule& schedule, double lambda_s);

/// Consistency pre-training: L_c + lambda_s L_s + lambda_co L_co over
/// co-visible pairs. One pair is held out and its L_co is reported before and
/// after. Throws if no co-visible pair exists.
DecoderTraining pretrain_decoder(const PerceptualEncoder& encoder, const DecoderParams& decoder,
                                 const std::vector<AugmentedView>& views, const StyleSet& styles,
                                 const StageSchedule& schedule, double lambda_s, double lambda_co,
                                 double depth_tolerance);

// ---------------------------------------------------------------- mutual learning

/// Per pixel, the `top_k` highest-weight samples of the frozen opacity along
/// its ray. Stylized colours are composited over these points only.
struct SampleCache {
  torch::Tensor points;      // V x P x k x 3
  torch::Tensor weights;     // V x P x k
  torch::Tensor directions;  // V x P x 3

  static SampleCache build(const RadianceFieldParams& radiance, const std::vector<AugmentedView>& views, int samples,
                           int top_k);
};

/// Augmented views plus their sample cache, produced by a single render per view.
struct AugmentedSet {
  std::vector<AugmentedView> views;
  SampleCache cache;

  static AugmentedSet render(const RadianceFieldParams& radiance, const std::vector<CameraPose>& anchors, int count,
                             int samples, int top_k);
  /// Cameras are not stored; they are recomputed from the anchors on load.
  void save(TensorArchive& archive) const;
  static AugmentedSet load(const TensorArchive& archive, const std::vector<CameraPose>& anchors);
};

/// Everything the mutual loop reads but never writes.
struct MutualInputs {
  const PerceptualEncoder* encoder = nullptr;
  const RadianceFieldParams* radiance = nullptr;
  std::vector<AugmentedView> views;
  StyleSet styles;
  std::vector<StyleDistribution> distributions;
  SampleCache cache;
  LossWeights weights;
  DistributionLossForm distribution_form = DistributionLossForm::kPrinted;

  // Derived once: content features and AdaIN targets per (view, style).
  torch::Tensor content_batch;               // V x 3 x H x W
  std::vector<torch::Tensor> adain_targets;  // V * S entries, index v * S + s

  void prepare();
};

struct TrainingState {
  std::string stage = "mutual";
  int64_t step = 0;
  StylizedFieldParams field;
  DecoderParams decoder;
  LatentCodeTable codes;
  Adam field_optimizer;
  Adam code_optimizer;
  Adam decoder_optimizer;
  std::string rng_state;
  LossLog log;
  nlohmann::json config = nlohmann::json::object();

  /// Fresh state: style module and codes seeded, optimizers over them.
  static TrainingState create(const StylizedFieldConfig& field_config, const DecoderParams& decoder,
                              const MutualInputs& inputs, const StageSchedule& schedule);
  void save(const std::filesystem::path& path) const;
  static TrainingState load(const std::filesystem::path& path, const StageSchedule& schedule);
  NamedTensors field_tensors();
};

/// Runs mutual learning until `state.step == until_step` (capped at
/// schedule.mutual_steps). The decoder is only updated at steps with index
/// >= decoder_freeze_steps. Throws naming the term on a non-finite loss.
void mutual_learn(TrainingState& state, const MutualInputs& inputs, const StageSchedule& schedule,
                  int64_t until_step = -1);

/// Mean pairwise code distance within and across styles.
struct CodeClustering {
  double intra = 0.0;
  double inter = 0.0;
};
CodeClustering code_clustering(const LatentCodeTable& codes);

}  // namespace stylenerf
