#include "slrf/trainer.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "slrf/metrics.hpp"
#include "slrf/parallel.hpp"
#include "slrf/pipeline.hpp"

namespace slrf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// rng stream ids
constexpr uint64_t kStreamIter = 101;

template <class T>
void read_field(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const std::exception& e) {
    fail_usage(std::string("config is not valid JSON: ") + e.what());
  }
  TrainConfig c;
  static const std::vector<std::string> known = {
      "iterations", "rays_per_batch", "samples_per_ray", "frames_per_batch",
      "num_nodes", "kernel_sigma", "kernel_epsilon",
      "lambda_rec", "lambda_trans", "lambda_ebd", "lambda_kl",
      "z_dim", "e_dim",
      "field_hidden", "field_layers", "feature_dim", "cvae_hidden",
      "delta_n_bound",
      "learning_rate", "adam_beta1", "adam_beta2",
      "lr_decay_factor", "lr_decay_every",
      "seed", "threads", "jitter", "mask_fg_fraction", "bbox_dilate",
      "density_activation", "rec_loss_reduction", "learn_attention",
      "ablate_no_residuals", "ablate_no_embeddings",
      "ablate_deterministic_regressor", "ablate_free_frame_latents",
      "frame_code_dim",
      "checkpoint_every", "keep_checkpoints", "eval_views"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      fail_usage("unknown config key: \"" + it.key() + "\"");
  }
  read_field(j, "iterations", c.iterations);
  read_field(j, "rays_per_batch", c.rays_per_batch);
  read_field(j, "samples_per_ray", c.samples_per_ray);
  read_field(j, "frames_per_batch", c.frames_per_batch);
  read_field(j, "num_nodes", c.num_nodes);
  read_field(j, "kernel_sigma", c.kernel_sigma);
  read_field(j, "kernel_epsilon", c.kernel_epsilon);
  read_field(j, "lambda_rec", c.lambda_rec);
  read_field(j, "lambda_trans", c.lambda_trans);
  read_field(j, "lambda_ebd", c.lambda_ebd);
  read_field(j, "lambda_kl", c.lambda_kl);
  read_field(j, "z_dim", c.z_dim);
  read_field(j, "e_dim", c.e_dim);
  read_field(j, "field_hidden", c.field_hidden);
  read_field(j, "field_layers", c.field_layers);
  read_field(j, "feature_dim", c.feature_dim);
  read_field(j, "cvae_hidden", c.cvae_hidden);
  read_field(j, "delta_n_bound", c.delta_n_bound);
  read_field(j, "learning_rate", c.learning_rate);
  read_field(j, "adam_beta1", c.adam_beta1);
  read_field(j, "adam_beta2", c.adam_beta2);
  read_field(j, "lr_decay_factor", c.lr_decay_factor);
  read_field(j, "lr_decay_every", c.lr_decay_every);
  read_field(j, "seed", c.seed);
  read_field(j, "threads", c.threads);
  read_field(j, "jitter", c.jitter);
  read_field(j, "mask_fg_fraction", c.mask_fg_fraction);
  read_field(j, "bbox_dilate", c.bbox_dilate);
  read_field(j, "density_activation", c.density_activation);
  read_field(j, "rec_loss_reduction", c.rec_loss_reduction);
  read_field(j, "learn_attention", c.learn_attention);
  read_field(j, "ablate_no_residuals", c.ablate_no_residuals);
  read_field(j, "ablate_no_embeddings", c.ablate_no_embeddings);
  read_field(j, "ablate_deterministic_regressor", c.ablate_deterministic_regressor);
  read_field(j, "ablate_free_frame_latents", c.ablate_free_frame_latents);
  read_field(j, "frame_code_dim", c.frame_code_dim);
  read_field(j, "checkpoint_every", c.checkpoint_every);
  read_field(j, "keep_checkpoints", c.keep_checkpoints);
  read_field(j, "eval_views", c.eval_views);

  if (c.iterations < 0 || c.rays_per_batch < 1 || c.samples_per_ray < 1 ||
      c.frames_per_batch < 1)
    fail_usage("config: counts must be positive");
  if (c.density_activation != "softplus" && c.density_activation != "relu")
    fail_usage("config: density_activation must be softplus or relu");
  if (c.rec_loss_reduction != "mean" && c.rec_loss_reduction != "sum")
    fail_usage("config: rec_loss_reduction must be mean or sum");
  if (!(c.mask_fg_fraction >= 0.0 && c.mask_fg_fraction <= 1.0))
    fail_usage("config: mask_fg_fraction must lie in [0, 1]");
  return c;
}

std::string TrainConfig::to_json_text() const {
  json j{{"iterations", iterations},
         {"rays_per_batch", rays_per_batch},
         {"samples_per_ray", samples_per_ray},
         {"frames_per_batch", frames_per_batch},
         {"num_nodes", num_nodes},
         {"kernel_sigma", kernel_sigma},
         {"kernel_epsilon", kernel_epsilon},
         {"lambda_rec", lambda_rec},
         {"lambda_trans", lambda_trans},
         {"lambda_ebd", lambda_ebd},
         {"lambda_kl", lambda_kl},
         {"z_dim", z_dim},
         {"e_dim", e_dim},
         {"field_hidden", field_hidden},
         {"field_layers", field_layers},
         {"feature_dim", feature_dim},
         {"cvae_hidden", cvae_hidden},
         {"delta_n_bound", delta_n_bound},
         {"learning_rate", learning_rate},
         {"adam_beta1", adam_beta1},
         {"adam_beta2", adam_beta2},
         {"lr_decay_factor", lr_decay_factor},
         {"lr_decay_every", lr_decay_every},
         {"seed", seed},
         {"threads", threads},
         {"jitter", jitter},
         {"mask_fg_fraction", mask_fg_fraction},
         {"bbox_dilate", bbox_dilate},
         {"density_activation", density_activation},
         {"rec_loss_reduction", rec_loss_reduction},
         {"learn_attention", learn_attention},
         {"ablate_no_residuals", ablate_no_residuals},
         {"ablate_no_embeddings", ablate_no_embeddings},
         {"ablate_deterministic_regressor", ablate_deterministic_regressor},
         {"ablate_free_frame_latents", ablate_free_frame_latents},
         {"frame_code_dim", frame_code_dim},
         {"checkpoint_every", checkpoint_every},
         {"keep_checkpoints", keep_checkpoints},
         {"eval_views", eval_views}};
  return j.dump(1, '\t');
}

ModelConfig TrainConfig::model_config(int num_frames) const {
  ModelConfig m;
  m.num_nodes = num_nodes;
  m.sigma = kernel_sigma;
  m.epsilon = kernel_epsilon;
  m.z_dim = z_dim;
  m.e_dim = e_dim;
  m.field_hidden = field_hidden;
  m.field_layers = field_layers;
  m.feature_dim = feature_dim;
  m.cvae_hidden = cvae_hidden;
  m.delta_n_bound = delta_n_bound;
  m.density_relu = density_activation == "relu";
  m.learn_attention = learn_attention;
  m.ablate_no_residuals = ablate_no_residuals;
  m.ablate_no_embeddings = ablate_no_embeddings;
  m.ablate_deterministic_regressor = ablate_deterministic_regressor;
  m.ablate_free_frame_latents = ablate_free_frame_latents;
  m.frame_code_dim = frame_code_dim;
  m.num_frames = num_frames;
  m.render_samples = samples_per_ray;
  m.dtype = Dtype::F32;
  return m;
}

LossWeights TrainConfig::loss_weights() const {
  return {lambda_rec, lambda_trans, lambda_ebd, lambda_kl};
}

// ---------------------------------------------------------------------------

namespace {

struct PixelLists {
  // per (camera, frame): candidate pixels
  std::vector<std::vector<std::pair<int, int>>> fg, bg;
  int cams = 0, frames = 0;

  const std::vector<std::pair<int, int>>& fg_of(int c, int f) const {
    return fg[static_cast<size_t>(c) * frames + f];
  }
  const std::vector<std::pair<int, int>>& bg_of(int c, int f) const {
    return bg[static_cast<size_t>(c) * frames + f];
  }
};

PixelLists build_pixel_lists(const Dataset& ds, int dilate) {
  PixelLists pl;
  pl.cams = ds.camera_count();
  pl.frames = ds.frames();
  pl.fg.resize(static_cast<size_t>(pl.cams) * pl.frames);
  pl.bg.resize(static_cast<size_t>(pl.cams) * pl.frames);
  for (int c = 0; c < pl.cams; ++c)
    for (int f = 0; f < pl.frames; ++f) {
      const Image& m = ds.masks[c][f];
      Bbox box = mask_bbox(m, dilate);
      auto& fg = pl.fg[static_cast<size_t>(c) * pl.frames + f];
      auto& bg = pl.bg[static_cast<size_t>(c) * pl.frames + f];
      for (int y = box.y0; y < box.y1; ++y)
        for (int x = box.x0; x < box.x1; ++x) {
          if (m.at(x, y, 0) > 0.5f) fg.emplace_back(x, y);
          else bg.emplace_back(x, y);
        }
      if (fg.empty()) fg = bg;  // degenerate masks still train
      if (bg.empty()) bg = fg;
    }
  return pl;
}

// scene box for sampling: posed canonical nodes grown by the node influence
// radius, the residual bound and a little slack
void frame_box(const AvatarModel& model, const BatchGeometry& geom, int f,
               Vec3& lo, Vec3& hi) {
  int N = model.cfg.num_nodes;
  int F = geom.frames;
  lo = {1e9, 1e9, 1e9};
  hi = {-1e9, -1e9, -1e9};
  for (int n = 0; n < N; ++n) {
    int64_t r = static_cast<int64_t>(n) * F + f;
    double x = geom.c0.at(r * 3), y = geom.c0.at(r * 3 + 1), z = geom.c0.at(r * 3 + 2);
    lo.x = std::min(lo.x, x); hi.x = std::max(hi.x, x);
    lo.y = std::min(lo.y, y); hi.y = std::max(hi.y, y);
    lo.z = std::min(lo.z, z); hi.z = std::max(hi.z, z);
  }
  double margin = model.nodes.cutoff_radius() +
                  std::max(0.0, model.cfg.delta_n_bound) + 0.02;
  lo = lo - Vec3{margin, margin, margin};
  hi = hi + Vec3{margin, margin, margin};
}

struct CheckpointRing {
  std::vector<std::string> files;
  int keep = 3;
  void push(const std::string& path) {
    files.push_back(path);
    while (static_cast<int>(files.size()) > keep) {
      std::error_code ec;
      fs::remove(files.front(), ec);
      files.erase(files.begin());
    }
  }
};

void save_training_checkpoint(const AvatarModel& model, const AdamState& adam,
                              const ParamStore& params, int64_t iter,
                              const std::string& path) {
  Checkpoint ck;
  model.write_checkpoint(ck);
  for (const auto& e : params.entries()) {
    if (!e.m.defined()) continue;
    ck.add("adam.m." + e.name, e.m);
    ck.add("adam.v." + e.name, e.v);
  }
  std::vector<float> state = {static_cast<float>(adam.step_count()),
                              static_cast<float>(iter)};
  ck.add("trainer.state", Array::from_f32(std::move(state), {2}));
  ck.save(path);
}

}  // namespace

double eval_psnr_subset(const AvatarModel& model, const Dataset& ds,
                        int pair_count, int bbox_dilate) {
  // deterministic spread over (frame, camera)
  double total = 0.0;
  int done = 0;
  int T = ds.frames(), C = ds.camera_count();
  for (int k = 0; k < pair_count; ++k) {
    int f = static_cast<int>((static_cast<int64_t>(k) * T) / pair_count);
    int c = k % C;
    LatentBatch lat = model.infer_latents(
        std::span<const Pose>(&ds.poses[f], 1), LatentMode::Replay);
    ImageRender r = render_image(model, ds.poses[f], ds.cameras[c], lat, false,
                                 BackgroundKind::Black);
    Bbox box = mask_bbox(ds.masks[c][f], bbox_dilate);
    total += psnr(r.rgb, ds.images[c][f], box);
    ++done;
  }
  return done ? total / done : 0.0;
}

TrainResult train(const Dataset& ds, const TrainConfig& cfg,
                  const std::string& out_dir, const LogSink& log,
                  const std::string& resume_from) {
  if (cfg.threads != 0) set_thread_count(cfg.threads);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec || !fs::is_directory(out_dir))
    fail_io("cannot create output dir: " + out_dir);

  int T = ds.frames();
  int C = ds.camera_count();
  ModelConfig mc = cfg.model_config(T);
  AvatarModel model = AvatarModel::create(mc, ds.tpl, cfg.seed);

  AdamConfig ac;
  ac.lr = cfg.learning_rate;
  ac.beta1 = cfg.adam_beta1;
  ac.beta2 = cfg.adam_beta2;
  ac.decay_factor = cfg.lr_decay_factor;
  ac.decay_every = cfg.lr_decay_every;
  AdamState adam(ac);

  int64_t start_iter = 0;
  if (!resume_from.empty()) {
    Checkpoint ck = Checkpoint::load(resume_from);
    model.read_checkpoint(ck);
    for (auto& e : model.params.entries()) {
      if (ck.has("adam.m." + e.name)) {
        e.m = ck.get("adam.m." + e.name).astype(mc.dtype);
        e.v = ck.get("adam.v." + e.name).astype(mc.dtype);
      }
    }
    if (ck.has("trainer.state")) {
      const Array& st = ck.get("trainer.state");
      adam.set_step_count(static_cast<int64_t>(st.at(0)));
      start_iter = static_cast<int64_t>(st.at(1));
    }
  }

  {
    std::ofstream os(out_dir + "/config.json");
    os << cfg.to_json_text() << "\n";
  }
  std::ofstream log_file(out_dir + "/train_log.jsonl",
                         start_iter > 0 ? std::ios::app : std::ios::trunc);

  PixelLists pixels = build_pixel_lists(ds, cfg.bbox_dilate);
  LossWeights lw = cfg.loss_weights();

  TrainResult result;
  result.best_psnr = -1.0;
  CheckpointRing ring;
  ring.keep = cfg.keep_checkpoints;

  auto emit = [&](const std::string& line) {
    log_file << line << "\n";
    if (log) log(line);
  };

  auto checkpoint_now = [&](int64_t iter_done) {
    std::ostringstream name;
    name << out_dir << "/ckpt_" << iter_done << ".slrf";
    save_training_checkpoint(model, adam, model.params, iter_done, name.str());
    ring.push(name.str());
    result.last_checkpoint = name.str();

    double p = eval_psnr_subset(model, ds, std::min(cfg.eval_views, T * C),
                                cfg.bbox_dilate);
    if (p > result.best_psnr) {
      result.best_psnr = p;
      std::string best = out_dir + "/best.slrf";
      save_training_checkpoint(model, adam, model.params, iter_done, best);
      result.best_checkpoint = best;
    }
    json j{{"iter", iter_done}, {"psnr", p}, {"checkpoint", name.str()}};
    emit(j.dump());
  };

  if (cfg.iterations == 0 && start_iter == 0) checkpoint_now(0);

  int S = cfg.samples_per_ray;
  for (int64_t iter = start_iter; iter < cfg.iterations; ++iter) {
    auto t_start = std::chrono::steady_clock::now();
    Rng rng(mix_seed(cfg.seed, kStreamIter, static_cast<uint64_t>(iter)));

    // frame selection
    int F = std::min(cfg.frames_per_batch, T);
    std::vector<Pose> poses;
    std::vector<int> frame_ids(F);
    for (int k = 0; k < F; ++k) {
      frame_ids[k] = static_cast<int>(rng.next_below(static_cast<uint32_t>(T)));
      poses.push_back(ds.poses[frame_ids[k]]);
    }

    BatchGeometry geom = batch_geometry(model, poses);

    // ray selection: mask-guided pixels across random cameras
    RayBatch rays;
    rays.count = cfg.rays_per_batch;
    rays.origins.reserve(rays.count * 3);
    rays.dirs.reserve(rays.count * 3);
    std::vector<double> gt;
    gt.reserve(rays.count * 3);
    int rays_per_frame = cfg.rays_per_batch / F;
    std::vector<Vec3> box_lo(F), box_hi(F);
    for (int k = 0; k < F; ++k) frame_box(model, geom, k, box_lo[k], box_hi[k]);

    for (int64_t r = 0; r < rays.count; ++r) {
      int k = std::min<int>(static_cast<int>(r / rays_per_frame), F - 1);
      int f = frame_ids[k];
      int c = static_cast<int>(rng.next_below(static_cast<uint32_t>(C)));
      bool fg = rng.next_double() < cfg.mask_fg_fraction;
      const auto& list = fg ? pixels.fg_of(c, f) : pixels.bg_of(c, f);
      const auto& [px, py] =
          list[rng.next_below(static_cast<uint32_t>(list.size()))];

      const Camera& cam = ds.cameras[c];
      Vec3 o = cam.position();
      Vec3 d = cam.pixel_direction(px, py);
      rays.origins.insert(rays.origins.end(), {o.x, o.y, o.z});
      rays.dirs.insert(rays.dirs.end(), {d.x, d.y, d.z});
      rays.frame_of_ray.push_back(k);
      double tn, tf;
      if (ray_box_intersect(o, d, box_lo[k], box_hi[k], tn, tf)) {
        tn = std::max(tn, cam.near);
        tf = std::min(tf, cam.far);
        if (!(tf > tn)) tn = tf = 0.0;
      } else {
        tn = tf = 0.0;
      }
      rays.t0.push_back(tn);
      rays.t1.push_back(tf);
      const Image& img = ds.images[c][f];
      gt.insert(gt.end(), {img.at(px, py, 0), img.at(px, py, 1), img.at(px, py, 2)});
    }
    finalize_rays(rays, S, model.cfg.enc.m_view, mc.dtype,
                  cfg.jitter ? &rng : nullptr);
    rays.gt = Array::from_doubles(gt, {rays.count, 3}, mc.dtype);

    // reparameterization noise
    int64_t latent_rows = static_cast<int64_t>(cfg.num_nodes) * F;
    Array noise;
    if (!cfg.ablate_deterministic_regressor) {
      std::vector<double> nv(static_cast<size_t>(latent_rows) * cfg.z_dim);
      for (auto& v : nv) v = rng.next_normal();
      noise = Array::from_doubles(nv, {latent_rows, cfg.z_dim}, mc.dtype);
    }

    Tape tape;
    double loss_val, rec_val, trans_val, ebd_val, kl_val;
    Gradients grads;
    {
      Tape::Scope scope(tape);
      LatentBatch lat = model.infer_latents(poses, LatentMode::Train,
                                            noise.defined() ? &noise : nullptr);
      ForwardResult fwd = forward_rays(model, geom, lat, rays, false);

      LossParts parts;
      parts.rec = reconstruction_loss(fwd.color, rays.gt);
      if (cfg.rec_loss_reduction == "sum")
        parts.rec = affine(parts.rec, static_cast<double>(rays.count), 0.0);
      parts.trans = translation_reg(lat);
      parts.ebd = embedding_reg(lat);
      parts.kl = kl_loss(lat);
      Array loss = total_loss(parts, lw);

      loss_val = loss.item();
      rec_val = parts.rec.item();
      trans_val = parts.trans.item();
      ebd_val = parts.ebd.item();
      kl_val = parts.kl.item();
      if (!std::isfinite(loss_val)) {
        json diag{{"iter", iter + 1},
                  {"loss", loss_val},
                  {"rec", rec_val},
                  {"trans", trans_val},
                  {"ebd", ebd_val},
                  {"kl", kl_val}};
        fail_numeric("non-finite training loss; diagnostics: " + diag.dump());
      }
      grads = tape.backward(loss);
    }
    adam.step(model.params, grads);

    auto t_end = std::chrono::steady_clock::now();
    double wall_ms =
        std::chrono::duration<double, std::milli>(t_end - t_start).count();
    json line{{"iter", iter + 1},
              {"loss", loss_val},
              {"rec", rec_val},
              {"trans", trans_val},
              {"ebd", ebd_val},
              {"kl", kl_val},
              {"lr", adam.effective_lr()},
              {"wall_ms", wall_ms}};
    emit(line.dump());

    if ((iter + 1) % cfg.checkpoint_every == 0 || iter + 1 == cfg.iterations)
      checkpoint_now(iter + 1);
    result.final_loss = loss_val;
    result.iterations_run = iter + 1;
  }

  if (result.last_checkpoint.empty()) {
    // zero-iteration run still produces the initial checkpoint
    std::string name = out_dir + "/ckpt_" + std::to_string(start_iter) + ".slrf";
    save_training_checkpoint(model, adam, model.params, start_iter, name);
    result.last_checkpoint = name;
  }
  return result;
}

}  // namespace slrf
