#include "stylenerf/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <stdexcept>

#include <torch/torch.h>

#include "stylenerf/image_io.hpp"

namespace stylenerf {
namespace {

void require(bool ok, const std::string& field, const std::string& rule) {
  if (!ok) throw std::invalid_argument("schedule." + field + " " + rule);
}

std::string padded(const std::string& prefix, size_t i, int width = 3) {
  std::ostringstream out;
  out << prefix << std::setw(width) << std::setfill('0') << i;
  return out.str();
}

torch::Tensor hwc(const torch::Tensor& chw) { return chw.permute({1, 2, 0}); }

std::mt19937_64 restore_rng(const std::string& state, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  if (!state.empty()) {
    std::istringstream in(state);
    in >> rng;
  }
  return rng;
}

std::string store_rng(const std::mt19937_64& rng) {
  std::ostringstream out;
  out << rng;
  return out.str();
}

int uniform_index(std::mt19937_64& rng, size_t n) {
  return static_cast<int>(std::uniform_int_distribution<size_t>(0, n - 1)(rng));
}

void check_finite(const torch::Tensor& t, const std::string& term, const std::string& stage, int64_t step) {
  const double v = t.item<double>();
  if (!std::isfinite(v)) {
    throw std::runtime_error(stage + ": non-finite " + term + " loss at step " + std::to_string(step));
  }
}

// Seeds for the independent random streams of each stage.
constexpr std::uint64_t kDecoderBaseStream = 0x6465636f64657231ULL;
constexpr std::uint64_t kDecoderPretrainStream = 0x6465636f64657232ULL;
constexpr std::uint64_t kMutualStream = 0x6d757475616c0001ULL;
constexpr std::uint64_t kFieldInitStream = 0x6669656c64000001ULL;
constexpr std::uint64_t kCodeInitStream = 0x636f646573000001ULL;

std::vector<torch::Tensor> adain_targets(const PerceptualEncoder& encoder, const torch::Tensor& content_batch,
                                         const StyleSet& styles) {
  torch::NoGradGuard no_grad;
  const auto deep = encoder.encode(content_batch).deepest();
  std::vector<torch::Tensor> out;
  for (int64_t v = 0; v < deep.size(0); ++v) {
    for (const auto& stats : styles.stats) out.push_back(adain(deep.slice(0, v, v + 1), stats.layers.back()));
  }
  return out;
}

torch::Tensor views_batch(const std::vector<AugmentedView>& views) {
  std::vector<torch::Tensor> images;
  for (const auto& v : views) images.push_back(v.image);
  return image_batch(images).contiguous();
}

}  // namespace

// ---------------------------------------------------------------- schedule

void StageSchedule::validate() const {
  require(nerf_steps >= 0, "nerf_steps", "must be >= 0");
  require(nerf_batch_rays >= 1, "nerf_batch_rays", "must be >= 1");
  require(nerf_lr > 0 && nerf_lr_final > 0, "nerf_lr", "and nerf_lr_final must be > 0");
  require(vae_steps >= 0, "vae_steps", "must be >= 0");
  require(vae_batch >= 1, "vae_batch", "must be >= 1");
  require(vae_lr > 0, "vae_lr", "must be > 0");
  require(vae_crops_per_style >= 0, "vae_crops_per_style", "must be >= 0");
  require(decoder_base_steps >= 0, "decoder_base_steps", "must be >= 0");
  require(decoder_pretrain_steps >= 0, "decoder_pretrain_steps", "must be >= 0");
  require(decoder_base_lr > 0 && decoder_lr > 0, "decoder_lr", "and decoder_base_lr must be > 0");
  require(mutual_steps >= 0, "mutual_steps", "must be >= 0");
  require(decoder_freeze_steps >= 0, "decoder_freeze_steps", "must be >= 0");
  require(decoder_freeze_steps <= mutual_steps, "decoder_freeze_steps", "must not exceed mutual_steps");
  require(mutual_batch_rays >= 1, "mutual_batch_rays", "must be >= 1");
  require(mutual_lr > 0 && code_lr > 0, "mutual_lr", "and code_lr must be > 0");
}

nlohmann::json StageSchedule::to_json() const {
  return {{"nerf_steps", nerf_steps},
          {"nerf_batch_rays", nerf_batch_rays},
          {"nerf_lr", nerf_lr},
          {"nerf_lr_final", nerf_lr_final},
          {"vae_steps", vae_steps},
          {"vae_batch", vae_batch},
          {"vae_lr", vae_lr},
          {"vae_crops_per_style", vae_crops_per_style},
          {"decoder_base_steps", decoder_base_steps},
          {"decoder_pretrain_steps", decoder_pretrain_steps},
          {"decoder_base_lr", decoder_base_lr},
          {"decoder_lr", decoder_lr},
          {"mutual_steps", mutual_steps},
          {"decoder_freeze_steps", decoder_freeze_steps},
          {"mutual_batch_rays", mutual_batch_rays},
          {"mutual_lr", mutual_lr},
          {"code_lr", code_lr},
          {"seed", seed}};
}

// ---------------------------------------------------------------- camera paths

std::vector<CameraPose> densify_path(const std::vector<CameraPose>& anchors, int count) {
  if (count < 1) throw std::invalid_argument("densify_path: count must be >= 1, got " + std::to_string(count));
  if (anchors.empty()) throw std::invalid_argument("densify_path: no anchor cameras");
  const auto n = static_cast<int64_t>(anchors.size());
  std::vector<CameraPose> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    if (n == 1) {
      out.push_back(anchors.front());
      continue;
    }
    const double s = count == 1 ? 0.0 : static_cast<double>(i) * static_cast<double>(n - 1) / (count - 1);
    const int64_t seg = std::min<int64_t>(static_cast<int64_t>(std::floor(s)), n - 2);
    out.push_back(interpolate_pose(anchors[seg], anchors[seg + 1], s - static_cast<double>(seg)));
  }
  return out;
}

std::vector<AugmentedView> augment_views(const RadianceFieldParams& radiance, const std::vector<CameraPose>& anchors,
                                         int count, int samples) {
  if (count < 1) throw std::invalid_argument("augment_views: count must be >= 1, got " + std::to_string(count));
  std::vector<AugmentedView> out;
  const auto poses = densify_path(anchors, count);
  for (size_t i = 0; i < poses.size(); ++i) {
    const auto render = render_image(radiance, poses[i], samples);
    out.push_back(AugmentedView{padded("aug_", i), poses[i], render.color, depth_map_from_render(render)});
  }
  return out;
}

// ---------------------------------------------------------------- styles

StyleSet StyleSet::from_images(const PerceptualEncoder& encoder, std::vector<std::string> ids,
                               std::vector<torch::Tensor> images) {
  if (ids.size() != images.size()) throw std::invalid_argument("style set: id/image count mismatch");
  if (ids.empty()) throw std::invalid_argument("style set: no style images");
  StyleSet set;
  torch::NoGradGuard no_grad;
  for (size_t i = 0; i < ids.size(); ++i) {
    set.stats.push_back(style_stats(encoder.encode_image(images[i])));
    set.ids.push_back(std::move(ids[i]));
    set.images.push_back(std::move(images[i]));
  }
  return set;
}

StyleSet StyleSet::load_dir(const PerceptualEncoder& encoder, const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("style directory not found: " + dir.string());
  std::vector<std::filesystem::path> files;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw std::runtime_error("no .png style images in " + dir.string());
  std::vector<std::string> ids;
  std::vector<torch::Tensor> images;
  for (const auto& f : files) {
    ids.push_back(f.stem().string());
    images.push_back(read_png(f));
  }
  return from_images(encoder, std::move(ids), std::move(images));
}

torch::Tensor style_corpus(const PerceptualEncoder& encoder, const StyleSet& styles, int crops_per_style,
                           std::uint64_t seed) {
  torch::NoGradGuard no_grad;
  std::mt19937_64 rng(seed);
  std::vector<torch::Tensor> rows;
  for (size_t s = 0; s < styles.size(); ++s) {
    const auto& image = styles.images[s];
    rows.push_back(styles.stats[s].flatten());
    const int64_t h = image.size(0), w = image.size(1);
    const int64_t crop = std::max<int64_t>(PerceptualEncoder::kMinImageSize, std::min(h, w) / 2);
    if (crop > std::min(h, w)) continue;
    for (int c = 0; c < crops_per_style; ++c) {
      const auto top = std::uniform_int_distribution<int64_t>(0, h - crop)(rng);
      const auto left = std::uniform_int_distribution<int64_t>(0, w - crop)(rng);
      const auto patch = image.slice(0, top, top + crop).slice(1, left, left + crop);
      rows.push_back(style_stats(encoder.encode_image(patch)).flatten());
    }
  }
  return torch::cat(rows).to(torch::kFloat32);
}

std::vector<StyleDistribution> style_distributions(const VaeParams& vae, const StyleSet& styles) {
  std::vector<StyleDistribution> out;
  for (const auto& stats : styles.stats) out.push_back(encode_style(vae, stats.flatten()));
  return out;
}

// ---------------------------------------------------------------- loss log

std::vector<double> LossLog::series(const std::string& term) const {
  std::vector<double> out;
  for (const auto& r : records_)
    if (r.term == term) out.push_back(r.value);
  return out;
}

void LossLog::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,term,value\n" << std::setprecision(17);
  for (const auto& r : records_) out << r.step << "," << r.term << "," << r.value << "\n";
}

void LossLog::save(TensorArchive& archive, const std::string& key) const {
  std::vector<std::string> terms;
  std::map<std::string, int64_t> term_index;
  auto steps = torch::empty({static_cast<int64_t>(records_.size())}, torch::kInt64);
  auto ids = torch::empty_like(steps);
  auto values = torch::empty({static_cast<int64_t>(records_.size())}, torch::kFloat64);
  for (size_t i = 0; i < records_.size(); ++i) {
    auto [it, inserted] = term_index.emplace(records_[i].term, static_cast<int64_t>(terms.size()));
    if (inserted) terms.push_back(records_[i].term);
    steps[static_cast<int64_t>(i)] = records_[i].step;
    ids[static_cast<int64_t>(i)] = it->second;
    values[static_cast<int64_t>(i)] = records_[i].value;
  }
  archive.meta()[key + "_terms"] = terms;
  archive.put(key + ".steps", steps);
  archive.put(key + ".terms", ids);
  archive.put(key + ".values", values);
}

void LossLog::load(const TensorArchive& archive, const std::string& key) {
  const auto terms = archive.meta().at(key + "_terms").get<std::vector<std::string>>();
  const auto steps = archive.get(key + ".steps");
  const auto ids = archive.get(key + ".terms");
  const auto values = archive.get(key + ".values");
  records_.clear();
  for (int64_t i = 0; i < steps.size(0); ++i) {
    records_.push_back({steps[i].item<int64_t>(), terms.at(static_cast<size_t>(ids[i].item<int64_t>())),
                        values[i].item<double>()});
  }
}

// ---------------------------------------------------------------- pairs

std::vector<ViewPair> covisible_pairs(const std::vector<AugmentedView>& views, const std::vector<int>& gaps,
                                      double depth_tolerance, double min_valid) {
  std::vector<ViewPair> out;
  const int n = static_cast<int>(views.size());
  for (int gap : gaps) {
    if (gap < 1) throw std::invalid_argument("covisible_pairs: gaps must be >= 1");
    for (int i = 0; i + gap < n; ++i) {
      for (auto [t, s] : {std::pair{i, i + gap}, std::pair{i + gap, i}}) {
        auto warp = compute_warp_field(views[s].camera, views[t].camera, views[t].depth.depth, views[s].depth.depth,
                                       depth_tolerance);
        if (warp.valid_fraction() >= min_valid) out.push_back(ViewPair{t, s, std::move(warp)});
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------- decoder

DecoderTraining train_decoder_base(const PerceptualEncoder& encoder, const std::vector<AugmentedView>& views,
                                   const StyleSet& styles, const StageSchedule& schedule, double lambda_s) {
  if (views.empty() || styles.size() == 0) throw std::invalid_argument("train_decoder_base: need views and styles");
  const auto content = views_batch(views);
  const auto targets = adain_targets(encoder, content, styles);
  DecoderTraining out{DecoderParams::create(encoder.layout(), schedule.seed ^ kDecoderBaseStream), {}, 0, 0, {}};
  auto named = out.decoder.named_parameters();
  set_requires_grad(named, true);
  Adam optimizer(tensors_of(named), AdamOptions{schedule.decoder_base_lr});
  std::mt19937_64 rng(schedule.seed ^ kDecoderBaseStream);
  for (int step = 0; step < schedule.decoder_base_steps; ++step) {
    const int v = uniform_index(rng, views.size());
    const int s = uniform_index(rng, styles.size());
    const auto& target = targets[static_cast<size_t>(v) * styles.size() + static_cast<size_t>(s)];
    const auto image = out.decoder.decode(target);
    const auto features = encoder.encode(image);
    const auto lc = content_loss_from_features(features, target);
    const auto ls = style_loss_from_stats(style_stats(features), styles.stats[s]);
    const auto total = lc + lambda_s * ls;
    check_finite(lc, "content", "train_decoder_base", step);
    check_finite(ls, "style", "train_decoder_base", step);
    optimizer.zero_grad();
    total.backward();
    optimizer.step();
    out.log.add(step, "content", lc.item<double>());
    out.log.add(step, "style", ls.item<double>());
    out.log.add(step, "total", total.item<double>());
  }
  set_requires_grad(named, false);
  for (auto& [name, t] : named) t->mutable_grad() = torch::Tensor();
  return out;
}

DecoderTraining pretrain_decoder(const PerceptualEncoder& encoder, const DecoderParams& decoder,
                                 const std::vector<AugmentedView>& views, const StyleSet& styles,
                                 const StageSchedule& schedule, double lambda_s, double lambda_co,
                                 double depth_tolerance) {
  auto pairs = covisible_pairs(views, {1, 2}, depth_tolerance);
  if (pairs.empty()) throw std::runtime_error("pretrain_decoder: no co-visible view pairs to enforce consistency on");
  // Hold out the middle pair when there is more than one.
  const size_t held = pairs.size() / 2;
  ViewPair heldout = pairs[held];
  if (pairs.size() > 1) pairs.erase(pairs.begin() + static_cast<std::ptrdiff_t>(held));

  const auto content = views_batch(views);
  const auto targets = adain_targets(encoder, content, styles);
  auto target_of = [&](int v, int s) -> const torch::Tensor& {
    return targets[static_cast<size_t>(v) * styles.size() + static_cast<size_t>(s)];
  };
  auto heldout_error = [&](const DecoderParams& d) {
    torch::NoGradGuard no_grad;
    double sum = 0.0;
    for (size_t s = 0; s < styles.size(); ++s) {
      const auto a = hwc(d.decode(target_of(heldout.target, static_cast<int>(s)))[0]);
      const auto b = hwc(d.decode(target_of(heldout.source, static_cast<int>(s)))[0]);
      sum += consistency_loss(a, apply_warp(heldout.warp, b)).value.item<double>();
    }
    return sum / static_cast<double>(styles.size());
  };

  DecoderTraining out{decoder.clone(), {}, 0, 0,
                      views[heldout.target].id + "<-" + views[heldout.source].id};
  out.heldout_consistency_start = heldout_error(out.decoder);
  auto named = out.decoder.named_parameters();
  set_requires_grad(named, true);
  Adam optimizer(tensors_of(named), AdamOptions{schedule.decoder_lr});
  std::mt19937_64 rng(schedule.seed ^ kDecoderPretrainStream);
  for (int step = 0; step < schedule.decoder_pretrain_steps; ++step) {
    const auto& pair = pairs[static_cast<size_t>(uniform_index(rng, pairs.size()))];
    const int s = uniform_index(rng, styles.size());
    const auto both = torch::cat({target_of(pair.target, s), target_of(pair.source, s)});
    const auto images = out.decoder.decode(both);
    const auto features = encoder.encode(images);
    const auto lc = content_loss_from_features(features, both);
    const auto ls = style_loss_from_stats(style_stats(features), styles.stats[s]);
    const auto lco = consistency_loss(hwc(images[0]), apply_warp(pair.warp, hwc(images[1]))).value;
    const auto total = lc + lambda_s * ls + lambda_co * lco;
    check_finite(lc, "content", "pretrain_decoder", step);
    check_finite(ls, "style", "pretrain_decoder", step);
    check_finite(lco, "consistency", "pretrain_decoder", step);
    optimizer.zero_grad();
    total.backward();
    optimizer.step();
    out.log.add(step, "content", lc.item<double>());
    out.log.add(step, "style", ls.item<double>());
    out.log.add(step, "consistency", lco.item<double>());
    out.log.add(step, "total", total.item<double>());
  }
  set_requires_grad(named, false);
  for (auto& [name, t] : named) t->mutable_grad() = torch::Tensor();
  out.heldout_consistency_end = heldout_error(out.decoder);
  return out;
}

// ---------------------------------------------------------------- sample cache

SampleCache SampleCache::build(const RadianceFieldParams& radiance, const std::vector<AugmentedView>& views,
                               int samples, int top_k) {
  if (views.empty()) throw std::invalid_argument("sample cache: no views");
  if (top_k < 1 || top_k > samples) throw std::invalid_argument("sample cache: top_k must be in [1, samples]");
  torch::NoGradGuard no_grad;
  std::vector<torch::Tensor> points, weights, directions;
  for (const auto& view : views) {
    const auto rays = generate_all_rays(view.camera);
    const auto s = sample_rays(rays.size(), radiance.config.near, radiance.config.far, samples, false);
    const auto pts = sample_points(rays, s, radiance.dtype());
    const auto c = composite(radiance.density(pts).sigma, s);
    const auto top = std::get<1>(c.weights.topk(top_k, 1, true, true));
    const auto order = std::get<0>(top.sort(1));  // keep front-to-back order
    points.push_back(pts.gather(1, order.unsqueeze(2).expand({-1, -1, 3})));
    weights.push_back(c.weights.gather(1, order));
    directions.push_back(rays.directions.to(radiance.dtype()));
  }
  return SampleCache{torch::stack(points), torch::stack(weights), torch::stack(directions)};
}

AugmentedSet AugmentedSet::render(const RadianceFieldParams& radiance, const std::vector<CameraPose>& anchors,
                                  int count, int samples, int top_k) {
  if (count < 1) throw std::invalid_argument("augment_views: count must be >= 1, got " + std::to_string(count));
  AugmentedSet set;
  std::vector<torch::Tensor> points, weights, directions;
  const auto poses = densify_path(anchors, count);
  for (size_t i = 0; i < poses.size(); ++i) {
    TopSamples top;
    const auto render = render_image(radiance, poses[i], samples, top_k, &top);
    set.views.push_back(AugmentedView{padded("aug_", i), poses[i], render.color, depth_map_from_render(render)});
    points.push_back(top.points);
    weights.push_back(top.weights);
    directions.push_back(top.directions);
  }
  set.cache = SampleCache{torch::stack(points), torch::stack(weights), torch::stack(directions)};
  return set;
}

void AugmentedSet::save(TensorArchive& archive) const {
  std::vector<torch::Tensor> images, depths, valid;
  for (const auto& v : views) {
    images.push_back(v.image);
    depths.push_back(v.depth.depth);
    valid.push_back(v.depth.valid);
  }
  archive.meta()["count"] = views.size();
  archive.put("images", torch::stack(images));
  archive.put("depths", torch::stack(depths));
  archive.put("valid", torch::stack(valid));
  archive.put("cache.points", cache.points);
  archive.put("cache.weights", cache.weights);
  archive.put("cache.directions", cache.directions);
}

AugmentedSet AugmentedSet::load(const TensorArchive& archive, const std::vector<CameraPose>& anchors) {
  const int count = archive.meta().at("count").get<int>();
  const auto poses = densify_path(anchors, count);
  const auto& images = archive.get("images");
  if (images.size(0) != count || images.size(1) != poses.front().height() || images.size(2) != poses.front().width())
    throw std::runtime_error("augmented views do not match the dataset cameras");
  AugmentedSet set;
  for (int i = 0; i < count; ++i)
    set.views.push_back(AugmentedView{padded("aug_", static_cast<size_t>(i)), poses[static_cast<size_t>(i)],
                                      images[i].clone(),
                                      DepthMap{archive.get("depths")[i].clone(), archive.get("valid")[i].clone()}});
  set.cache = SampleCache{archive.get("cache.points"), archive.get("cache.weights"), archive.get("cache.directions")};
  return set;
}

// ---------------------------------------------------------------- mutual learning

void MutualInputs::prepare() {
  if (!encoder || !radiance) throw std::invalid_argument("mutual inputs: encoder and radiance field are required");
  if (views.empty() || styles.size() == 0) throw std::invalid_argument("mutual inputs: need views and styles");
  if (distributions.size() != styles.size()) throw std::invalid_argument("mutual inputs: one distribution per style");
  content_batch = views_batch(views);
  adain_targets = stylenerf::adain_targets(*encoder, content_batch, styles);
}

NamedTensors TrainingState::field_tensors() { return field.named_parameters(); }

TrainingState TrainingState::create(const StylizedFieldConfig& field_config, const DecoderParams& decoder,
                                    const MutualInputs& inputs, const StageSchedule& schedule) {
  TrainingState state;
  state.field = StylizedFieldParams::create(field_config, schedule.seed ^ kFieldInitStream);
  state.decoder = decoder.clone();
  std::vector<std::string> view_ids;
  for (const auto& v : inputs.views) view_ids.push_back(v.id);
  state.codes = init_codes(inputs.distributions, inputs.styles.ids, view_ids, schedule.seed ^ kCodeInitStream);
  auto field_named = state.field.named_parameters();
  set_requires_grad(field_named, true);
  state.codes.codes.set_requires_grad(true);
  state.field_optimizer = Adam(tensors_of(field_named), AdamOptions{schedule.mutual_lr});
  state.code_optimizer = Adam({state.codes.codes}, AdamOptions{schedule.code_lr});
  state.decoder_optimizer = Adam(tensors_of(state.decoder.named_parameters()), AdamOptions{schedule.decoder_lr});
  state.rng_state = store_rng(std::mt19937_64(schedule.seed ^ kMutualStream));
  return state;
}

void TrainingState::save(const std::filesystem::path& path) const {
  TensorArchive archive("training_state");
  archive.meta()["stage"] = stage;
  archive.meta()["step"] = step;
  archive.meta()["rng_state"] = rng_state;
  archive.meta()["config"] = config;
  field.save(archive);
  decoder.save(archive);
  codes.save(archive);
  field_optimizer.save(archive, "adam.field.");
  code_optimizer.save(archive, "adam.codes.");
  decoder_optimizer.save(archive, "adam.decoder.");
  log.save(archive, "log");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  archive.save(path);
}

TrainingState TrainingState::load(const std::filesystem::path& path, const StageSchedule& schedule) {
  const auto archive = TensorArchive::load(path, "training_state");
  TrainingState state;
  state.stage = archive.meta().at("stage").get<std::string>();
  state.step = archive.meta().at("step").get<int64_t>();
  state.rng_state = archive.meta().at("rng_state").get<std::string>();
  state.config = archive.meta().at("config");
  state.field = StylizedFieldParams::load(archive);
  state.decoder = DecoderParams::load(archive);
  state.codes = LatentCodeTable::load(archive);
  auto field_named = state.field.named_parameters();
  set_requires_grad(field_named, true);
  state.codes.codes.set_requires_grad(true);
  state.field_optimizer = Adam(tensors_of(field_named), AdamOptions{schedule.mutual_lr});
  state.code_optimizer = Adam({state.codes.codes}, AdamOptions{schedule.code_lr});
  state.decoder_optimizer = Adam(tensors_of(state.decoder.named_parameters()), AdamOptions{schedule.decoder_lr});
  state.field_optimizer.load(archive, "adam.field.");
  state.code_optimizer.load(archive, "adam.codes.");
  state.decoder_optimizer.load(archive, "adam.decoder.");
  state.log.load(archive, "log");
  return state;
}

void mutual_learn(TrainingState& state, const MutualInputs& inputs, const StageSchedule& schedule,
                  int64_t until_step) {
  if (inputs.adain_targets.empty()) throw std::invalid_argument("mutual_learn: inputs not prepared");
  const int64_t end = until_step < 0 ? schedule.mutual_steps : std::min<int64_t>(until_step, schedule.mutual_steps);
  const auto& encoder = *inputs.encoder;
  const size_t n_views = inputs.views.size(), n_styles = inputs.styles.size();
  const int64_t n_pixels = inputs.cache.points.size(1);
  const auto& w = inputs.weights;
  auto rng = restore_rng(state.rng_state, schedule.seed ^ kMutualStream);
  std::map<size_t, torch::Tensor> frozen_outputs;  // C_a per (view, style) while the decoder is frozen
  auto decoder_named = state.decoder.named_parameters();

  for (; state.step < end; ++state.step) {
    const int64_t step = state.step;
    const int v = uniform_index(rng, n_views);
    const int s = uniform_index(rng, n_styles);
    std::vector<int64_t> pixel_ids(static_cast<size_t>(schedule.mutual_batch_rays));
    std::uniform_int_distribution<int64_t> pick(0, n_pixels - 1);
    for (auto& p : pixel_ids) p = pick(rng);
    const auto index = torch::tensor(pixel_ids, torch::kInt64);
    const size_t key = static_cast<size_t>(v) * n_styles + static_cast<size_t>(s);
    const auto& target = inputs.adain_targets[key];
    const bool decoder_active = step >= schedule.decoder_freeze_steps;

    torch::Tensor stylized;  // 1 x 3 x H x W
    if (decoder_active) {
      set_requires_grad(decoder_named, true);
      stylized = state.decoder.decode(target);
    } else {
      auto it = frozen_outputs.find(key);
      if (it == frozen_outputs.end()) {
        torch::NoGradGuard no_grad;
        it = frozen_outputs.emplace(key, state.decoder.decode(target)).first;
      }
      stylized = it->second;
    }
    const auto c_a = hwc(stylized[0]).reshape({-1, 3}).index_select(0, index);
    const auto code = state.codes.code(v, s);
    const auto c_n = render_stylized(state.field, inputs.cache.points[v].index_select(0, index),
                                     inputs.cache.weights[v].index_select(0, index), code,
                                     inputs.cache.directions[v].index_select(0, index));
    const auto l_d = distribution_loss(code, inputs.distributions[static_cast<size_t>(s)], inputs.distribution_form);

    torch::Tensor l_s, l_c;
    if (decoder_active) {
      const auto features = encoder.encode(stylized);
      l_s = style_loss_from_stats(style_stats(features), inputs.styles.stats[static_cast<size_t>(s)]);
      l_c = content_loss_from_features(features, target);
    } else {
      l_s = torch::zeros({}, c_n.options());
      l_c = torch::zeros({}, c_n.options());
    }
    const auto obj = mutual_objectives(c_n, c_a, l_d, l_s, l_c, w);
    check_finite(obj.mimic_for_field, "mimic", "mutual_learn", step);
    check_finite(l_d, "distribution", "mutual_learn", step);
    if (decoder_active) {
      check_finite(l_s, "style", "mutual_learn", step);
      check_finite(l_c, "content", "mutual_learn", step);
    }

    state.field_optimizer.zero_grad();
    state.code_optimizer.zero_grad();
    if (decoder_active) {
      state.decoder_optimizer.zero_grad();
      (obj.field + obj.decoder).backward();
      state.decoder_optimizer.step();
    } else {
      obj.field.backward();
    }
    state.field_optimizer.step();
    state.code_optimizer.step();

    state.log.add(step, "mimic", obj.mimic_for_field.item<double>());
    state.log.add(step, "distribution", l_d.item<double>());
    state.log.add(step, "objective_n", obj.field.item<double>());
    if (decoder_active) {
      state.log.add(step, "style", l_s.item<double>());
      state.log.add(step, "content", l_c.item<double>());
      state.log.add(step, "objective_c", obj.decoder.item<double>());
    }
  }
  set_requires_grad(decoder_named, false);
  for (auto& [name, t] : decoder_named) t->mutable_grad() = torch::Tensor();
  state.rng_state = store_rng(rng);
}

CodeClustering code_clustering(const LatentCodeTable& codes) {
  torch::NoGradGuard no_grad;
  const int64_t views = codes.codes.size(0), styles = codes.codes.size(1);
  const auto flat = codes.codes.reshape({views * styles, -1}).to(torch::kFloat64);
  const auto dist = torch::cdist(flat, flat);
  auto acc = dist.accessor<double, 2>();
  double intra = 0, inter = 0;
  int64_t n_intra = 0, n_inter = 0;
  for (int64_t a = 0; a < views * styles; ++a) {
    for (int64_t b = a + 1; b < views * styles; ++b) {
      if (a % styles == b % styles) {
        intra += acc[a][b];
        ++n_intra;
      } else {
        inter += acc[a][b];
        ++n_inter;
      }
    }
  }
  return CodeClustering{n_intra ? intra / n_intra : 0.0, n_inter ? inter / n_inter : 0.0};
}

}  // namespace stylenerf
