#include "stylenerf/consistency.hpp"

#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <torch/torch.h>

namespace stylenerf {

PerceptualMetric::Result PerceptualMetric::distance(const torch::Tensor& a, const torch::Tensor& b,
                                                    const torch::Tensor& mask) const {
  if (a.sizes() != b.sizes()) throw std::invalid_argument("perceptual distance: frame shapes differ");
  if (mask.dim() != 2 || mask.size(0) != a.size(0) || mask.size(1) != a.size(1)) {
    throw std::invalid_argument("perceptual distance: mask does not match the frames");
  }
  torch::NoGradGuard no_grad;
  Result out;
  const auto m = mask.to(torch::kBool);
  out.valid_fraction = m.to(torch::kFloat64).mean().item<double>();
  if (!m.any().item<bool>()) return out;
  out.valid = true;

  const auto filled = torch::where(m.unsqueeze(2), b, a);
  const auto fa = encoder_->encode_image(a.to(torch::kFloat32));
  const auto fb = encoder_->encode_image(filled.to(torch::kFloat32));
  auto layer_mask = m.to(torch::kFloat32).unsqueeze(0).unsqueeze(0);
  double total = 0.0;
  for (size_t l = 0; l < fa.layers.size(); ++l) {
    const auto& x = fa.layers[l];
    const auto& y = fb.layers[l];
    // Mask at this layer's resolution: a cell counts when at least half its pixels are valid.
    const int64_t factor = m.size(0) / x.size(2);
    const auto pooled = factor > 1 ? torch::avg_pool2d(layer_mask, factor, factor) : layer_mask;
    const auto keep = (pooled >= 0.5).squeeze(0).squeeze(0);
    const double count = keep.sum().item<double>();
    if (count == 0.0) continue;
    const auto nx = x / (x.pow(2).sum(1, true).sqrt() + 1e-10);
    const auto ny = y / (y.pow(2).sum(1, true).sqrt() + 1e-10);
    const auto d = (nx - ny).pow(2).sum(1).squeeze(0);
    total += (d * keep.to(d.scalar_type())).sum().item<double>() / count;
  }
  out.error = total;
  return out;
}

PerceptualMetric::Result warped_perceptual_error(const PerceptualMetric& metric, const torch::Tensor& frame_i,
                                                 const torch::Tensor& frame_j, const WarpResult& warp) {
  if (frame_i.sizes() != frame_j.sizes()) throw std::invalid_argument("warped_perceptual_error: frame shapes differ");
  return metric.distance(frame_i, warp.image, warp.mask);
}

void EvalSequence::validate() const {
  if (frames.empty()) throw std::invalid_argument("eval sequence: no frames");
  if (depths.size() != frames.size() || cameras.size() != frames.size()) {
    throw std::invalid_argument("eval sequence: " + std::to_string(frames.size()) + " frames, " +
                                std::to_string(depths.size()) + " depth maps, " + std::to_string(cameras.size()) +
                                " cameras");
  }
  for (size_t i = 0; i < frames.size(); ++i) {
    if (frames[i].sizes() != frames[0].sizes()) {
      throw std::invalid_argument("eval sequence: frame " + std::to_string(i) + " has a different resolution");
    }
    if (depths[i].size(0) != frames[i].size(0) || depths[i].size(1) != frames[i].size(1)) {
      throw std::invalid_argument("eval sequence: depth map " + std::to_string(i) + " does not match its frame");
    }
  }
}

const GapSummary& ConsistencyReport::gap(int g) const {
  for (const auto& s : gaps)
    if (s.gap == g) return s;
  throw std::out_of_range("consistency report has no gap " + std::to_string(g));
}

std::string ConsistencyReport::to_text() const {
  std::ostringstream out;
  out << "warped perceptual error";
  if (!method.empty()) out << "  method " << method;
  if (!style_id.empty()) out << "  style " << style_id;
  out << "\n  gap   mean error   pairs   excluded\n" << std::fixed;
  for (const auto& g : gaps) {
    out << "  " << std::setw(3) << g.gap << "   " << std::setprecision(6) << std::setw(10) << g.mean_error << "   "
        << std::setw(5) << g.valid_pairs << "   " << std::setw(8) << g.excluded_pairs << "\n";
  }
  for (const auto& p : pairs) {
    if (!p.valid) out << "  excluded pair (" << p.first << ", " << p.second << "): empty mask\n";
  }
  return out.str();
}

std::string ConsistencyReport::to_csv(bool header) const {
  std::ostringstream out;
  if (header) out << "method,style,gap,first,second,error,valid_fraction,valid\n";
  out << std::setprecision(17);
  for (const auto& p : pairs) {
    out << method << "," << style_id << "," << p.gap << "," << p.first << "," << p.second << "," << p.error << ","
        << p.valid_fraction << "," << (p.valid ? 1 : 0) << "\n";
  }
  return out.str();
}

nlohmann::json EvalOptions::to_json() const {
  return {{"gaps", gaps}, {"max_pairs", max_pairs}, {"depth_tolerance", depth_tolerance}};
}

std::vector<int> select_pairs(int length, int gap, int max_pairs) {
  const int available = length - gap;
  std::vector<int> out;
  if (available <= 0) return out;
  if (max_pairs <= 0 || max_pairs >= available) {
    for (int i = 0; i < available; ++i) out.push_back(i);
    return out;
  }
  for (int k = 0; k < max_pairs; ++k) {
    out.push_back(max_pairs == 1 ? 0 : static_cast<int>(std::lround(static_cast<double>(k) * (available - 1) / (max_pairs - 1))));
  }
  return out;
}

ConsistencyReport evaluate_sequence(const PerceptualMetric& metric, const EvalSequence& seq, const EvalOptions& options,
                                    const std::string& method) {
  seq.validate();
  if (!(options.depth_tolerance > 0.0)) throw std::invalid_argument("evaluate_sequence: depth_tolerance must be > 0");
  const int length = static_cast<int>(seq.size());
  for (int g : options.gaps) {
    if (g < 1) throw std::invalid_argument("evaluate_sequence: gap " + std::to_string(g) + " must be >= 1");
    if (g >= length) {
      throw std::invalid_argument("evaluate_sequence: gap " + std::to_string(g) + " needs more than " +
                                  std::to_string(length) + " frames");
    }
  }
  ConsistencyReport report;
  report.style_id = seq.style_id;
  report.method = method;
  report.config = options.to_json();
  for (int g : options.gaps) {
    GapSummary summary{g, 0.0, 0, 0};
    double sum = 0.0;
    for (int i : select_pairs(length, g, options.max_pairs)) {
      const int j = i + g;
      const auto warp = warp_view(seq.frames[j], seq.cameras[j], seq.cameras[i], seq.depths[i], seq.depths[j],
                                  options.depth_tolerance);
      const auto r = warped_perceptual_error(metric, seq.frames[i], seq.frames[j], warp);
      report.pairs.push_back(PairError{g, i, j, r.error, r.valid_fraction, r.valid});
      if (r.valid) {
        sum += r.error;
        ++summary.valid_pairs;
      } else {
        ++summary.excluded_pairs;
      }
    }
    summary.mean_error = summary.valid_pairs ? sum / summary.valid_pairs : std::nan("");
    report.gaps.push_back(summary);
  }
  return report;
}

}  // namespace stylenerf
