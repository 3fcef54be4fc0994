#include "stylenerf/cli.hpp"

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include <torch/torch.h>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "CLI11.hpp"
#include "stylenerf/config.hpp"
#include "stylenerf/consistency.hpp"
#include "stylenerf/dataset.hpp"
#include "stylenerf/image_io.hpp"
#include "stylenerf/pipeline.hpp"
#include "stylenerf/synthetic_scene.hpp"

namespace stylenerf {
namespace {

namespace fs = std::filesystem;

/// A stage whose output is missing.
class PrerequisiteError : public std::runtime_error {
 public:
  PrerequisiteError(const fs::path& missing, const std::string& command)
      : std::runtime_error("missing " + missing.string() + "; run `stylenerf " + command + "` first") {}
};

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

struct Paths {
  fs::path root;
  fs::path checkpoint(const std::string& name) const { return root / "checkpoints" / (name + ".snrf"); }
  fs::path log(const std::string& name) const { return root / "logs" / (name + ".csv"); }
  fs::path manifest(const std::string& command) const { return root / "manifests" / (command + ".json"); }
};

class Context {
 public:
  Context(const CommonOptions& opts, std::ostream& out) : out_(out) {
    config_ = opts.config.empty() ? RunConfig{} : load_config(opts.config);
    if (opts.seed) config_.apply_seed(*opts.seed);
    if (!opts.out.empty()) config_.output = opts.out;
    config_.validate();
    paths_.root = config_.output;
    torch::set_num_threads(config_.threads);
  }

  const RunConfig& config() const { return config_; }
  const Paths& paths() const { return paths_; }
  std::ostream& out() { return out_; }

  void wrote(const fs::path& p) { outputs_.push_back(p); }
  void read(const fs::path& p) { inputs_.push_back(p); }

  /// Content hashes of everything this run read and wrote.
  void write_manifest(const std::string& command) {
    nlohmann::json j;
    j["command"] = command;
    j["config"] = config_.to_json();
    auto hashes = [&](std::vector<fs::path> files) {
      nlohmann::json h = nlohmann::json::object();
      std::sort(files.begin(), files.end());
      files.erase(std::unique(files.begin(), files.end()), files.end());
      for (const auto& f : files) {
        if (fs::is_directory(f)) {
          std::vector<fs::path> inner;
          for (const auto& e : fs::recursive_directory_iterator(f))
            if (e.is_regular_file()) inner.push_back(e.path());
          std::sort(inner.begin(), inner.end());
          for (const auto& p : inner) h[fs::relative(p, paths_.root).generic_string()] = sha256_file(p);
        } else if (fs::exists(f)) {
          h[fs::relative(f, paths_.root).generic_string()] = sha256_file(f);
        }
      }
      return h;
    };
    j["inputs"] = hashes(inputs_);
    j["outputs"] = hashes(outputs_);
    const auto path = paths_.manifest(command);
    fs::create_directories(path.parent_path());
    std::ofstream(path) << j.dump(2) << "\n";
  }

  TensorArchive require(const std::string& name, const std::string& kind, const std::string& command) {
    const auto path = paths_.checkpoint(name);
    if (!fs::exists(path)) throw PrerequisiteError(path, command);
    read(path);
    return TensorArchive::load(path, kind);
  }

  Dataset dataset() {
    const auto dir = config_.dataset_dir();
    if (!fs::exists(dir / kManifestName)) throw PrerequisiteError(dir / kManifestName, "make-scene");
    read(dir);
    return ingest_dataset(dir);
  }

  StyleSet styles(const PerceptualEncoder& encoder) {
    const auto dir = config_.styles_dir();
    if (!fs::is_directory(dir)) throw PrerequisiteError(dir, "make-scene");
    read(dir);
    return StyleSet::load_dir(encoder, dir);
  }

  RadianceFieldParams radiance() { return RadianceFieldParams::load(require("nerf", "nerf", "train-nerf")); }

  double depth_tolerance(double far) const {
    return config_.eval.depth_tolerance > 0 ? config_.eval.depth_tolerance : default_depth_tolerance(far);
  }

  std::vector<CameraPose> train_cameras(const Dataset& d) const {
    std::vector<CameraPose> out;
    for (const auto* v : d.select("train")) out.push_back(v->camera);
    return out;
  }

  int augmented_count(const Dataset& d) const {
    return config_.augment_views > 0 ? config_.augment_views : static_cast<int>(train_cameras(d).size());
  }

  AugmentedSet augmented(const Dataset& d) {
    return AugmentedSet::load(require("views", "augmented_views", "pretrain-decoder"), train_cameras(d));
  }

  void save(TensorArchive& archive, const std::string& name) {
    archive.meta()["config"] = config_.to_json();
    const auto path = paths_.checkpoint(name);
    fs::create_directories(path.parent_path());
    archive.save(path);
    wrote(path);
  }

  void write_log(const LossLog& log, const std::string& name) {
    log.write_csv(paths_.log(name));
    wrote(paths_.log(name));
  }

 private:
  RunConfig config_;
  Paths paths_;
  std::ostream& out_;
  std::vector<fs::path> inputs_;
  std::vector<fs::path> outputs_;
};

std::string frame_name(size_t i) {
  std::ostringstream s;
  s << "frame_" << std::setw(4) << std::setfill('0') << i << ".png";
  return s.str();
}

// ---------------------------------------------------------------- commands

void cmd_make_scene(Context& ctx) {
  const auto& c = ctx.config();
  SyntheticScene scene(c.scene);
  const auto dataset = scene.make_dataset();
  write_dataset(dataset, c.dataset_dir());
  ctx.wrote(c.dataset_dir());
  const auto styles = generate_style_images(c.style_count, c.style_size, c.seed);
  fs::create_directories(c.styles_dir());
  for (const auto& s : styles) write_png(c.styles_dir() / (s.id + ".png"), s.image);
  ctx.wrote(c.styles_dir());
  ctx.out() << "scene: " << dataset.summary() << "\n"
            << "styles: " << styles.size() << " images in " << c.styles_dir().string() << "\n";
}

void cmd_train_nerf(Context& ctx) {
  const auto& c = ctx.config();
  const auto dataset = ctx.dataset();
  ctx.out() << "dataset: " << dataset.summary() << "\n";
  auto model = c.model.radiance;
  model.near = dataset.near;
  model.far = dataset.far;
  NerfTrainConfig train;
  train.steps = c.schedule.nerf_steps;
  train.batch_rays = c.schedule.nerf_batch_rays;
  train.samples = c.model.train_samples;
  train.lr = c.schedule.nerf_lr;
  train.lr_final = c.schedule.nerf_lr_final;
  train.seed = c.seed;
  auto fit = fit_nerf(dataset.posed("train"), model, train);

  TensorArchive archive("nerf");
  fit.params.save(archive);
  nlohmann::json psnrs = nlohmann::json::object();
  for (const auto* view : dataset.select("test")) {
    const auto render = render_image(fit.params, view->camera, c.model.eval_samples);
    const double value = psnr(render.color, view->image);
    psnrs[view->id] = value;
    ctx.out() << "held-out " << view->id << " psnr " << std::fixed << std::setprecision(2) << value << " dB\n";
  }
  archive.meta()["heldout_psnr"] = psnrs;
  ctx.save(archive, "nerf");
  LossLog log;
  for (size_t i = 0; i < fit.loss_history.size(); ++i) log.add(static_cast<int64_t>(i), "photometric", fit.loss_history[i]);
  ctx.write_log(log, "nerf");
}

void cmd_train_vae(Context& ctx) {
  const auto& c = ctx.config();
  const auto& encoder = PerceptualEncoder::shared();
  const auto styles = ctx.styles(encoder);
  const auto corpus = style_corpus(encoder, styles, c.schedule.vae_crops_per_style, c.seed);
  VaeConfig vc;
  vc.latent_dim = c.model.stylized.latent_dim;
  vc.hidden = c.model.vae_hidden;
  vc.beta = c.model.vae_beta;
  vc.steps = c.schedule.vae_steps;
  vc.batch = c.schedule.vae_batch;
  vc.lr = c.schedule.vae_lr;
  vc.seed = c.seed;
  auto fit = train_vae(corpus, vc);
  TensorArchive archive("vae");
  fit.params.save(archive);
  archive.meta()["style_ids"] = styles.ids;
  ctx.save(archive, "vae");
  LossLog log;
  for (size_t i = 0; i < fit.loss_history.size(); ++i) log.add(static_cast<int64_t>(i), "elbo", fit.loss_history[i]);
  ctx.write_log(log, "vae");
  ctx.out() << "vae: " << corpus.size(0) << " style vectors, final loss "
            << (fit.loss_history.empty() ? 0.0 : fit.loss_history.back()) << "\n";
}

void cmd_pretrain_decoder(Context& ctx) {
  const auto& c = ctx.config();
  const auto& encoder = PerceptualEncoder::shared();
  const auto dataset = ctx.dataset();
  const auto radiance = ctx.radiance();
  const auto styles = ctx.styles(encoder);
  const auto augmented = AugmentedSet::render(radiance, ctx.train_cameras(dataset), ctx.augmented_count(dataset),
                                               c.model.eval_samples, c.model.cache_top_k);
  {
    TensorArchive archive("augmented_views");
    augmented.save(archive);
    ctx.save(archive, "views");
  }
  const auto& views = augmented.views;
  auto base = train_decoder_base(encoder, views, styles, c.schedule, c.loss.weights.lambda_s);
  ctx.write_log(base.log, "decoder_base");
  auto result = pretrain_decoder(encoder, base.decoder, views, styles, c.schedule,
                                 c.loss.weights.lambda_s, c.loss.lambda_co, ctx.depth_tolerance(dataset.far));
  ctx.write_log(result.log, "decoder_pretrain");
  TensorArchive archive("decoder");
  result.decoder.save(archive);
  archive.meta()["heldout_pair"] = result.heldout_pair;
  archive.meta()["heldout_consistency"] = {result.heldout_consistency_start, result.heldout_consistency_end};
  ctx.save(archive, "decoder");
  ctx.out() << "decoder: held-out pair " << result.heldout_pair << " consistency loss "
            << result.heldout_consistency_start << " -> " << result.heldout_consistency_end << "\n";
}

struct MutualSetup {
  Dataset dataset;
  RadianceFieldParams radiance;
  VaeParams vae;
  MutualInputs inputs;
};

MutualSetup mutual_setup(Context& ctx) {
  const auto& c = ctx.config();
  const auto& encoder = PerceptualEncoder::shared();
  MutualSetup s;
  s.dataset = ctx.dataset();
  s.radiance = ctx.radiance();
  s.vae = VaeParams::load(ctx.require("vae", "vae", "train-vae"));
  s.inputs.encoder = &encoder;
  s.inputs.radiance = &s.radiance;
  auto augmented = ctx.augmented(s.dataset);
  s.inputs.views = std::move(augmented.views);
  s.inputs.cache = std::move(augmented.cache);
  s.inputs.styles = ctx.styles(encoder);
  s.inputs.distributions = style_distributions(s.vae, s.inputs.styles);
  s.inputs.weights = c.loss.weights;
  s.inputs.distribution_form = c.model.distribution_loss;
  return s;
}

void cmd_mutual_train(Context& ctx, bool resume, int64_t until) {
  const auto& c = ctx.config();
  const auto decoder_archive = ctx.require("decoder", "decoder", "pretrain-decoder");
  auto setup = mutual_setup(ctx);
  setup.inputs.radiance = &setup.radiance;
  setup.inputs.prepare();
  const auto path = ctx.paths().checkpoint("mutual");
  TrainingState state;
  if (resume && fs::exists(path)) {
    state = TrainingState::load(path, c.schedule);
    ctx.out() << "resuming mutual learning at step " << state.step << "\n";
  } else {
    state = TrainingState::create(c.model.stylized, DecoderParams::load(decoder_archive), setup.inputs, c.schedule);
  }
  state.config = c.to_json();
  mutual_learn(state, setup.inputs, c.schedule, until);
  state.save(path);
  ctx.wrote(path);
  ctx.write_log(state.log, "mutual");
  const auto clusters = code_clustering(state.codes);
  ctx.out() << "mutual: step " << state.step << "/" << c.schedule.mutual_steps << ", code distance intra "
            << clusters.intra << " inter " << clusters.inter << "\n";
}

std::vector<NamedCamera> eval_path(Context& ctx, const Dataset& dataset) {
  const auto anchors = ctx.train_cameras(dataset);
  const int count = static_cast<int>(anchors.size()) * ctx.config().eval.frame_multiplier;
  const auto poses = densify_path(anchors, count);
  std::vector<NamedCamera> out;
  for (size_t i = 0; i < poses.size(); ++i) out.push_back({"cam_" + std::to_string(i), poses[i]});
  return out;
}

void cmd_render(Context& ctx, const std::string& method, const std::string& style_path, const std::string& path_file,
                const std::string& frames_dir) {
  const auto& c = ctx.config();
  if (method != "nerf" && method != "stylizer") throw CLI::ValidationError("--method", "must be nerf or stylizer");
  const auto& encoder = PerceptualEncoder::shared();
  const auto dataset = ctx.dataset();
  const auto radiance = ctx.radiance();
  const auto mutual_path = ctx.paths().checkpoint("mutual");
  if (!fs::exists(mutual_path)) throw PrerequisiteError(mutual_path, "mutual-train");
  ctx.read(mutual_path);
  const auto state = TrainingState::load(mutual_path, c.schedule);

  std::vector<std::pair<std::string, torch::Tensor>> styles;
  if (!style_path.empty()) {
    if (!fs::exists(style_path)) throw std::runtime_error("style image not found: " + style_path);
    ctx.read(style_path);
    styles.emplace_back(fs::path(style_path).stem().string(), read_png(style_path));
  } else {
    const auto set = ctx.styles(encoder);
    for (size_t i = 0; i < set.size(); ++i) styles.emplace_back(set.ids[i], set.images[i]);
  }
  std::vector<NamedCamera> cameras;
  if (!path_file.empty()) {
    ctx.read(path_file);
    cameras = read_camera_path(path_file);
  } else {
    cameras = eval_path(ctx, dataset);
  }
  std::optional<VaeParams> vae;
  if (method == "nerf") vae = VaeParams::load(ctx.require("vae", "vae", "train-vae"));

  struct Target {
    std::string id;
    StyleStats stats;
    torch::Tensor code;
    fs::path dir;
  };
  std::vector<Target> targets;
  for (const auto& [id, image] : styles) {
    Target t{id, style_stats(encoder.encode_image(image)), {},
             frames_dir.empty() || styles.size() > 1 ? ctx.paths().root / "renders" / (method + "_" + id)
                                                     : fs::path(frames_dir)};
    if (vae) t.code = inference_code(encode_style(*vae, t.stats.flatten()));
    fs::create_directories(t.dir);
    targets.push_back(std::move(t));
  }
  // Geometry and content are computed once per camera and shared by every style.
  for (size_t i = 0; i < cameras.size(); ++i) {
    if (method == "nerf") {
      const auto frame = FrameSamples::compute(radiance, cameras[i].camera, c.model.eval_samples);
      for (const auto& t : targets) write_png(t.dir / frame_name(i), render_stylized_frame(state.field, frame, t.code));
    } else {
      torch::NoGradGuard no_grad;
      const auto content = to_nchw(render_image(radiance, cameras[i].camera, c.model.eval_samples).color);
      for (const auto& t : targets)
        write_png(t.dir / frame_name(i), to_hwc(stylize(encoder, state.decoder, content, t.stats).image));
    }
  }
  for (const auto& t : targets) {
    write_camera_path(t.dir / "cameras.txt", cameras);
    std::ofstream(t.dir / "render.json") << nlohmann::json{{"method", method}, {"style", t.id}}.dump(2) << "\n";
    ctx.wrote(t.dir);
    ctx.out() << "rendered " << cameras.size() << " frames (" << method << ", " << t.id << ") to " << t.dir.string()
              << "\n";
  }
}

void cmd_evaluate(Context& ctx, const std::string& frames_dir) {
  const auto& c = ctx.config();
  const fs::path dir(frames_dir);
  if (!fs::exists(dir / "cameras.txt")) throw std::runtime_error("no cameras.txt in " + dir.string() + " (render frames with `stylenerf render`)");
  const auto cameras = read_camera_path(dir / "cameras.txt");
  ctx.read(dir);
  EvalSequence seq;
  std::string method;
  if (fs::exists(dir / "render.json")) {
    const auto meta = nlohmann::json::parse(std::ifstream(dir / "render.json"));
    seq.style_id = meta.value("style", "");
    method = meta.value("method", "");
  }
  for (size_t i = 0; i < cameras.size(); ++i) {
    const auto file = dir / frame_name(i);
    if (!fs::exists(file)) throw std::runtime_error("frame missing: " + file.string());
    seq.frames.push_back(read_png(file));
    seq.cameras.push_back(cameras[i].camera);
  }
  double far = 0.0;
  if (c.eval.ground_truth_depth) {
    SyntheticScene scene(c.scene);
    for (const auto& cam : seq.cameras) {
      const auto d = scene.render(cam).depth;
      seq.depths.push_back(d);
      far = std::max(far, d.max().item<double>());
    }
  } else {
    const auto radiance = ctx.radiance();
    far = radiance.config.far;
    // Every style rendered along one path shares these depth maps.
    std::ostringstream key;
    key << sha256_file(ctx.paths().checkpoint("nerf")) << "\n" << c.model.eval_samples << "\n"
        << std::ifstream(dir / "cameras.txt").rdbuf();
    const auto cache = ctx.paths().root / "eval" / "depth_cache" / (sha256_bytes(key.str()).substr(0, 16) + ".snrf");
    torch::Tensor stacked;
    if (fs::exists(cache)) stacked = TensorArchive::load(cache, "depth_maps").get("depth");
    if (stacked.defined() && stacked.size(0) == static_cast<int64_t>(seq.cameras.size())) {
      for (int64_t i = 0; i < stacked.size(0); ++i) seq.depths.push_back(stacked[i]);
    } else {
      for (const auto& cam : seq.cameras) seq.depths.push_back(render_depth_map(radiance, cam, c.model.eval_samples).depth);
      TensorArchive archive("depth_maps");
      archive.put("depth", torch::stack(seq.depths));
      fs::create_directories(cache.parent_path());
      archive.save(cache);
    }
  }
  EvalOptions options;
  options.gaps = c.eval.gaps;
  options.max_pairs = c.eval.max_pairs;
  options.depth_tolerance = ctx.depth_tolerance(far);
  const PerceptualMetric metric(PerceptualEncoder::shared());
  auto report = evaluate_sequence(metric, seq, options, method);
  report.config = c.to_json();
  const auto out_dir = ctx.paths().root / "eval" / dir.filename();
  fs::create_directories(out_dir);
  std::ofstream(out_dir / "report.txt") << report.to_text();
  std::ofstream(out_dir / "report.csv") << report.to_csv();
  ctx.wrote(out_dir);
  ctx.out() << report.to_text();
}

}  // namespace

void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 64 << 20);
#endif
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Consistent 3D style transfer with a stylized radiance field", "stylenerf"};
  app.require_subcommand(1);
  CommonOptions common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config, "JSON run configuration (defaults when omitted)");
    sub->add_option("--seed", common.seed, "override the configured seed");
    sub->add_option("--out", common.out, "output directory (overrides the configured one)");
  };
  auto* make_scene = app.add_subcommand("make-scene", "write the synthetic dataset and style images");
  auto* train_nerf = app.add_subcommand("train-nerf", "fit the radiance field");
  auto* train_vae = app.add_subcommand("train-vae", "fit the style VAE");
  auto* pretrain = app.add_subcommand("pretrain-decoder", "train the AdaIN decoder with the consistency loss");
  auto* mutual = app.add_subcommand("mutual-train", "mutual learning of the stylized field, codes and decoder");
  auto* render = app.add_subcommand("render", "render stylized frames along a camera path");
  auto* evaluate = app.add_subcommand("evaluate", "warped perceptual error of rendered frames");
  for (auto* sub : {make_scene, train_nerf, train_vae, pretrain, mutual, render, evaluate}) add_common(sub);

  bool resume = false;
  int64_t until = -1;
  mutual->add_flag("--resume", resume, "continue from the saved training state");
  mutual->add_option("--until", until, "stop after this many total steps");
  std::string method = "nerf", style, camera_path, frames_out;
  render->add_option("--method", method, "nerf (stylized field) or stylizer (per-frame 2D)");
  render->add_option("--style", style, "style image; defaults to every image of the style set");
  render->add_option("--path", camera_path, "camera path file; defaults to the densified training path");
  render->add_option("--frames", frames_out, "output directory for a single style");
  std::string frames_in;
  evaluate->add_option("--frames", frames_in, "directory written by `render`")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n" << "run `stylenerf --help` for usage\n";
    return kExitUsage;
  }

  const auto* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  try {
    Context ctx(common, out);
    if (name == "make-scene") cmd_make_scene(ctx);
    else if (name == "train-nerf") cmd_train_nerf(ctx);
    else if (name == "train-vae") cmd_train_vae(ctx);
    else if (name == "pretrain-decoder") cmd_pretrain_decoder(ctx);
    else if (name == "mutual-train") cmd_mutual_train(ctx, resume, until);
    else if (name == "render") cmd_render(ctx, method, style, camera_path, frames_out);
    else if (name == "evaluate") cmd_evaluate(ctx, frames_in);
    ctx.write_manifest(name);
    return kExitOk;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << name << ": " << e.what() << "\n";
    return kExitFailure;
  }
}

}  // namespace stylenerf
