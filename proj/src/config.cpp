#include "stylenerf/config.hpp"

#include <fstream>
#include <set>

namespace stylenerf {
namespace {

/// Walks one JSON object, remembering which keys were consumed.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    const auto& v = j_.at(key);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw ConfigError(field(key) + ": expected true or false");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw ConfigError(field(key) + ": expected an integer");
      if constexpr (std::is_unsigned_v<T>) {
        if (v.is_number_integer() && !v.is_number_unsigned() && v.get<int64_t>() < 0) {
          throw ConfigError(field(key) + ": must be non-negative");
        }
      }
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw ConfigError(field(key) + ": expected a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw ConfigError(field(key) + ": expected a string");
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      if (!v.is_array()) throw ConfigError(field(key) + ": expected an array of integers");
      for (const auto& e : v)
        if (!e.is_number_integer()) throw ConfigError(field(key) + ": expected an array of integers");
    }
    out = v.get<T>();
  }

  Section child(const char* key) {
    seen_.insert(key);
    static const nlohmann::json empty = nlohmann::json::object();
    return Section(j_.contains(key) ? j_.at(key) : empty, field(key));
  }

  /// Rejects keys nobody asked for.
  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.count(key)) throw ConfigError(field(key) + ": unknown key");
    }
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

void check(bool ok, const std::string& field, const std::string& rule) {
  if (!ok) throw ConfigError(field + ": " + rule);
}

}  // namespace

std::filesystem::path RunConfig::dataset_dir() const {
  return dataset.empty() ? std::filesystem::path(output) / "scene" : std::filesystem::path(dataset);
}

std::filesystem::path RunConfig::styles_dir() const {
  return styles.empty() ? std::filesystem::path(output) / "styles" : std::filesystem::path(styles);
}

void RunConfig::apply_seed(std::uint64_t new_seed) {
  seed = new_seed;
  scene.seed = new_seed;
  schedule.seed = new_seed;
}

void RunConfig::validate() const {
  check(!output.empty(), "output", "must not be empty");
  check(threads >= 1, "threads", "must be >= 1");
  check(style_count >= 1, "style_count", "must be >= 1");
  check(style_size >= 16 && style_size % 8 == 0, "style_size", "must be a multiple of 8 and >= 16");
  check(augment_views >= 0, "augment_views", "must be >= 0");
  try {
    scene.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string(e.what()));
  }
  const auto& r = model.radiance;
  check(r.pos_frequencies >= 1, "model.radiance.pos_frequencies", "must be >= 1");
  check(r.dir_frequencies >= 1, "model.radiance.dir_frequencies", "must be >= 1");
  check(r.depth >= 1, "model.radiance.depth", "must be >= 1");
  check(r.width >= 2, "model.radiance.width", "must be >= 2");
  check(r.background >= 0 && r.background <= 1, "model.radiance.background", "must be in [0, 1]");
  check(!model.hierarchical_sampling, "model.hierarchical_sampling", "not supported; sampling is single-stage");
  check(r.skip_layer < r.depth, "model.radiance.skip_layer", "must be below depth (negative disables)");
  const auto& s = model.stylized;
  check(s.pos_frequencies >= 1, "model.stylized.pos_frequencies", "must be >= 1");
  check(s.latent_dim >= 1, "model.latent_dim", "must be >= 1");
  check(s.depth >= 1, "model.stylized.depth", "must be >= 1");
  check(s.width >= 1, "model.stylized.width", "must be >= 1");
  check(s.dir_frequencies >= 1, "model.stylized.dir_frequencies", "must be >= 1");
  check(model.vae_hidden >= 1, "model.vae_hidden", "must be >= 1");
  check(model.vae_beta >= 0, "model.vae_beta", "must be >= 0");
  check(model.train_samples >= 2, "model.train_samples", "must be >= 2");
  check(model.eval_samples >= 2, "model.eval_samples", "must be >= 2");
  check(model.cache_top_k >= 1 && model.cache_top_k <= model.eval_samples, "model.cache_top_k",
        "must be in [1, eval_samples]");
  try {
    schedule.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string(e.what()));
  }
  check(loss.weights.lambda_d >= 0, "loss_weights.lambda_d", "must be >= 0");
  check(loss.weights.lambda_s >= 0, "loss_weights.lambda_s", "must be >= 0");
  check(loss.weights.lambda_m >= 0, "loss_weights.lambda_m", "must be >= 0");
  check(loss.lambda_co >= 0, "loss_weights.lambda_co", "must be >= 0");
  check(!eval.gaps.empty(), "eval.gaps", "must list at least one gap");
  for (int g : eval.gaps) check(g >= 1, "eval.gaps", "entries must be >= 1");
  check(eval.depth_tolerance >= 0, "eval.depth_tolerance", "must be >= 0");
  check(eval.frame_multiplier >= 1, "eval.frame_multiplier", "must be >= 1");
}

nlohmann::json RunConfig::to_json() const {
  auto radiance = model.radiance.to_json();
  radiance.erase("near");
  radiance.erase("far");
  auto stylized = model.stylized.to_json();
  stylized.erase("latent_dim");
  auto sched = schedule.to_json();
  sched.erase("seed");
  auto scene_json = scene.to_json();
  scene_json.erase("seed");
  return {{"dataset", dataset},
          {"styles", styles},
          {"output", output},
          {"seed", seed},
          {"threads", threads},
          {"scene", scene_json},
          {"style_count", style_count},
          {"style_size", style_size},
          {"augment_views", augment_views},
          {"model",
           {{"radiance", radiance},
            {"stylized", stylized},
            {"latent_dim", model.stylized.latent_dim},
            {"vae_hidden", model.vae_hidden},
            {"vae_beta", model.vae_beta},
            {"train_samples", model.train_samples},
            {"eval_samples", model.eval_samples},
            {"cache_top_k", model.cache_top_k},
            {"hierarchical_sampling", model.hierarchical_sampling},
            {"distribution_loss",
             model.distribution_loss == DistributionLossForm::kPrinted ? "printed" : "gaussian_nll"}}},
          {"schedule", sched},
          {"loss_weights",
           {{"lambda_d", loss.weights.lambda_d},
            {"lambda_s", loss.weights.lambda_s},
            {"lambda_m", loss.weights.lambda_m},
            {"lambda_co", loss.lambda_co}}},
          {"eval",
           {{"gaps", eval.gaps},
            {"max_pairs", eval.max_pairs},
            {"depth_tolerance", eval.depth_tolerance},
            {"frame_multiplier", eval.frame_multiplier},
            {"ground_truth_depth", eval.ground_truth_depth}}}};
}

RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig c;
  Section root(j, "");
  root.read("dataset", c.dataset);
  root.read("styles", c.styles);
  root.read("output", c.output);
  std::uint64_t seed = 0;
  root.read("seed", seed);
  root.read("threads", c.threads);
  root.read("style_count", c.style_count);
  root.read("style_size", c.style_size);
  root.read("augment_views", c.augment_views);

  auto scene = root.child("scene");
  scene.read("views", c.scene.views);
  scene.read("holdout_views", c.scene.holdout_views);
  scene.read("width", c.scene.width);
  scene.read("height", c.scene.height);
  scene.read("fov_degrees", c.scene.fov_degrees);
  scene.read("arc_degrees", c.scene.arc_degrees);
  scene.read("radius", c.scene.radius);
  scene.read("elevation", c.scene.elevation);
  scene.finish();

  auto model = root.child("model");
  auto rad = model.child("radiance");
  rad.read("pos_frequencies", c.model.radiance.pos_frequencies);
  rad.read("dir_frequencies", c.model.radiance.dir_frequencies);
  rad.read("depth", c.model.radiance.depth);
  rad.read("width", c.model.radiance.width);
  rad.read("skip_layer", c.model.radiance.skip_layer);
  rad.read("background", c.model.radiance.background);
  rad.finish();
  auto sty = model.child("stylized");
  sty.read("pos_frequencies", c.model.stylized.pos_frequencies);
  sty.read("depth", c.model.stylized.depth);
  sty.read("width", c.model.stylized.width);
  sty.read("code_every_layer", c.model.stylized.code_every_layer);
  sty.read("use_view_direction", c.model.stylized.use_view_direction);
  sty.read("dir_frequencies", c.model.stylized.dir_frequencies);
  sty.finish();
  model.read("latent_dim", c.model.stylized.latent_dim);
  model.read("vae_hidden", c.model.vae_hidden);
  model.read("vae_beta", c.model.vae_beta);
  model.read("train_samples", c.model.train_samples);
  model.read("eval_samples", c.model.eval_samples);
  model.read("cache_top_k", c.model.cache_top_k);
  model.read("hierarchical_sampling", c.model.hierarchical_sampling);
  std::string form = "printed";
  model.read("distribution_loss", form);
  if (form == "printed") c.model.distribution_loss = DistributionLossForm::kPrinted;
  else if (form == "gaussian_nll") c.model.distribution_loss = DistributionLossForm::kGaussianNll;
  else throw ConfigError("model.distribution_loss: expected \"printed\" or \"gaussian_nll\"");
  model.finish();

  auto sch = root.child("schedule");
  auto& s = c.schedule;
  sch.read("nerf_steps", s.nerf_steps);
  sch.read("nerf_batch_rays", s.nerf_batch_rays);
  sch.read("nerf_lr", s.nerf_lr);
  sch.read("nerf_lr_final", s.nerf_lr_final);
  sch.read("vae_steps", s.vae_steps);
  sch.read("vae_batch", s.vae_batch);
  sch.read("vae_lr", s.vae_lr);
  sch.read("vae_crops_per_style", s.vae_crops_per_style);
  sch.read("decoder_base_steps", s.decoder_base_steps);
  sch.read("decoder_pretrain_steps", s.decoder_pretrain_steps);
  sch.read("decoder_base_lr", s.decoder_base_lr);
  sch.read("decoder_lr", s.decoder_lr);
  sch.read("mutual_steps", s.mutual_steps);
  sch.read("decoder_freeze_steps", s.decoder_freeze_steps);
  sch.read("mutual_batch_rays", s.mutual_batch_rays);
  sch.read("mutual_lr", s.mutual_lr);
  sch.read("code_lr", s.code_lr);
  sch.finish();

  auto lw = root.child("loss_weights");
  lw.read("lambda_d", c.loss.weights.lambda_d);
  lw.read("lambda_s", c.loss.weights.lambda_s);
  lw.read("lambda_m", c.loss.weights.lambda_m);
  lw.read("lambda_co", c.loss.lambda_co);
  lw.finish();

  auto ev = root.child("eval");
  ev.read("gaps", c.eval.gaps);
  ev.read("max_pairs", c.eval.max_pairs);
  ev.read("depth_tolerance", c.eval.depth_tolerance);
  ev.read("frame_multiplier", c.eval.frame_multiplier);
  ev.read("ground_truth_depth", c.eval.ground_truth_depth);
  ev.finish();

  root.finish();
  c.apply_seed(seed);
  c.validate();
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

}  // namespace stylenerf
