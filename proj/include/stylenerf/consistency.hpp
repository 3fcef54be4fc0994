#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/types.h>

#include "stylenerf/camera.hpp"
#include "stylenerf/stylizer.hpp"

namespace stylenerf {

/// Feature-space distance over the frozen encoder: per layer, channel vectors
/// are scaled to unit length, squared differences are summed over channels and
/// averaged over the valid pixels of that layer; layers are summed.
class PerceptualMetric {
 public:
  explicit PerceptualMetric(const PerceptualEncoder& encoder) : encoder_(&encoder) {}

  struct Result {
    double error = 0.0;
    double valid_fraction = 0.0;
    bool valid = false;  // false when the mask is empty
  };

  /// `a`, `b` are H x W x 3; `mask` is H x W bool. Pixels outside the mask are
  /// copied from `a` into `b` first, so whatever `b` holds there is irrelevant.
  Result distance(const torch::Tensor& a, const torch::Tensor& b, const torch::Tensor& mask) const;

 private:
  const PerceptualEncoder* encoder_;
};

/// E(O_i, O_j): distance between O_i and O_j warped into view i, restricted to the warp mask.
PerceptualMetric::Result warped_perceptual_error(const PerceptualMetric& metric, const torch::Tensor& frame_i,
                                                 const torch::Tensor& frame_j, const WarpResult& warp);

struct EvalSequence {
  std::string style_id;
  std::vector<torch::Tensor> frames;  // H x W x 3
  std::vector<torch::Tensor> depths;  // H x W expected ray distance; non-finite = no geometry
  std::vector<CameraPose> cameras;

  size_t size() const { return frames.size(); }
  /// Throws when the lengths differ or frames disagree in resolution.
  void validate() const;
};

struct PairError {
  int gap = 0;
  int first = 0;
  int second = 0;
  double error = 0.0;
  double valid_fraction = 0.0;
  bool valid = false;
};

struct GapSummary {
  int gap = 0;
  double mean_error = 0.0;
  int valid_pairs = 0;
  int excluded_pairs = 0;
};

struct ConsistencyReport {
  std::string style_id;
  std::string method;
  std::vector<GapSummary> gaps;
  std::vector<PairError> pairs;
  nlohmann::json config = nlohmann::json::object();

  const GapSummary& gap(int g) const;
  std::string to_text() const;
  /// Long format: method,style,gap,first,second,error,valid_fraction,valid
  std::string to_csv(bool header = true) const;
};

struct EvalOptions {
  std::vector<int> gaps = {5, 35};
  int max_pairs = 20;           // per gap, spread evenly over the sequence; <= 0 uses every pair
  double depth_tolerance = 0.0;  // required, > 0

  nlohmann::json to_json() const;
};

/// Warps O_{i+g} into view i for the selected pairs of every gap and averages
/// the valid ones. Throws when a gap is < 1 or >= the sequence length.
ConsistencyReport evaluate_sequence(const PerceptualMetric& metric, const EvalSequence& seq, const EvalOptions& options,
                                    const std::string& method = "");

/// Indices i of the pairs (i, i + gap) used for a gap.
std::vector<int> select_pairs(int length, int gap, int max_pairs);

}  // namespace stylenerf
