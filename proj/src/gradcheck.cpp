#include "slrf/gradcheck.hpp"

#include <chrono>
#include <cmath>

#include "slrf/losses.hpp"
#include "slrf/pipeline.hpp"
#include "slrf/scene.hpp"

namespace slrf {

namespace {

struct TinyPipeline {
  AvatarModel model;
  std::vector<Pose> poses;
  RayBatch rays;
  Array noise;
  LossWeights weights;

  double loss_value() {
    LatentBatch lat = model.infer_latents(poses, LatentMode::Train, &noise);
    BatchGeometry geom = batch_geometry(model, poses);
    ForwardResult fwd = forward_rays(model, geom, lat, rays, false);
    LossParts parts;
    parts.rec = reconstruction_loss(fwd.color, rays.gt);
    parts.trans = translation_reg(lat);
    parts.ebd = embedding_reg(lat);
    parts.kl = kl_loss(lat);
    return total_loss(parts, weights).item();
  }

  Gradients gradients() {
    Tape tape;
    Tape::Scope scope(tape);
    LatentBatch lat = model.infer_latents(poses, LatentMode::Train, &noise);
    BatchGeometry geom = batch_geometry(model, poses);
    ForwardResult fwd = forward_rays(model, geom, lat, rays, false);
    LossParts parts;
    parts.rec = reconstruction_loss(fwd.color, rays.gt);
    parts.trans = translation_reg(lat);
    parts.ebd = embedding_reg(lat);
    parts.kl = kl_loss(lat);
    Array loss = total_loss(parts, weights);
    return tape.backward(loss);
  }
};

TinyPipeline build_tiny(const GradCheckOptions& opt) {
  TinyPipeline tp;
  SyntheticScene scene = generate_scene(opt.seed, std::max(opt.frames, 2),
                                        opt.joints, "dynamic");

  ModelConfig mc;
  mc.num_nodes = opt.nodes;
  mc.sigma = 0.09;  // wide kernels so the tiny ray set touches several nodes
  mc.epsilon = 0.001;
  mc.field_hidden = 16;
  mc.field_layers = 2;
  mc.feature_dim = 16;
  mc.cvae_hidden = 16;
  mc.e_dim = 8;
  mc.z_dim = 4;
  mc.num_frames = static_cast<int>(scene.poses.size());
  mc.ablate_free_frame_latents = opt.free_frame_latents;
  mc.frame_code_dim = 6;
  mc.dtype = Dtype::F64;
  tp.model = AvatarModel::create(mc, scene.tpl, opt.seed + 1);

  int F = std::min<int>(2, mc.num_frames);
  for (int f = 0; f < F; ++f) tp.poses.push_back(scene.poses[f]);

  // rays aimed at posed nodes so every loss term sees signal
  Rng rng(opt.seed, 33);
  BatchGeometry geom = batch_geometry(tp.model, tp.poses);
  int N = mc.num_nodes;
  tp.rays.count = opt.rays;
  for (int r = 0; r < opt.rays; ++r) {
    int k = r % F;
    int n = static_cast<int>(rng.next_below(static_cast<uint32_t>(N)));
    int64_t row = static_cast<int64_t>(n) * F + k;
    Vec3 target{geom.c0.at(row * 3), geom.c0.at(row * 3 + 1),
                geom.c0.at(row * 3 + 2)};
    double ang = rng.next_double() * 6.283185307179586;
    Vec3 eye = target + Vec3{1.6 * std::sin(ang), 0.3 * (rng.next_double() - 0.5),
                             1.6 * std::cos(ang)};
    Vec3 dir = (target - eye).normalized();
    tp.rays.origins.insert(tp.rays.origins.end(), {eye.x, eye.y, eye.z});
    tp.rays.dirs.insert(tp.rays.dirs.end(), {dir.x, dir.y, dir.z});
    tp.rays.frame_of_ray.push_back(k);
    double span = 2.2 * tp.model.nodes.cutoff_radius();
    tp.rays.t0.push_back(1.6 - span);
    tp.rays.t1.push_back(1.6 + span);
  }
  finalize_rays(tp.rays, opt.samples, mc.enc.m_view, Dtype::F64, nullptr);

  std::vector<double> gt(static_cast<size_t>(opt.rays) * 3);
  for (auto& v : gt) v = rng.next_double();
  tp.rays.gt = Array::from_f64(gt, {opt.rays, 3});

  int64_t rows = static_cast<int64_t>(N) * F;
  std::vector<double> nv(static_cast<size_t>(rows) * mc.z_dim);
  for (auto& v : nv) v = rng.next_normal();
  tp.noise = Array::from_f64(nv, {rows, mc.z_dim});

  tp.weights = LossWeights{};
  return tp;
}

}  // namespace

GradCheckResult run_gradcheck(const GradCheckOptions& opt) {
  auto t_begin = std::chrono::steady_clock::now();
  TinyPipeline tp = build_tiny(opt);
  Gradients grads = tp.gradients();

  GradCheckResult result;
  result.all_pass = true;
  Rng rng(opt.seed, 55);

  for (auto& entry : tp.model.params.entries()) {
    Array& p = entry.value;
    Array g = grads.get_or_zeros(p);
    if (!entry.name.empty() && entry.name == opt.corrupt_param) {
      auto gd = g.data<double>();
      for (auto& v : gd) v = v * 1.5 + 0.05;
    }
    int64_t n = p.numel();
    auto pd = p.data<double>();
    auto gd = g.cdata<double>();

    // random single-coordinate probes
    double num = 0.0, den = 0.0;
    int probes = std::min<int64_t>(opt.coords_per_leaf, n);
    for (int k = 0; k < probes; ++k) {
      int64_t i = rng.next_below(static_cast<uint32_t>(n));
      double saved = pd[i];
      pd[i] = saved + opt.h;
      double lp = tp.loss_value();
      pd[i] = saved - opt.h;
      double lm = tp.loss_value();
      pd[i] = saved;
      double fd = (lp - lm) / (2.0 * opt.h);
      num += (gd[i] - fd) * (gd[i] - fd);
      den += std::max(gd[i] * gd[i], fd * fd);
    }

    // one directional probe across the whole parameter
    {
      std::vector<double> dir(static_cast<size_t>(n));
      for (auto& v : dir) v = rng.next_double() < 0.5 ? -1.0 : 1.0;
      std::vector<double> saved(pd.begin(), pd.end());
      for (int64_t i = 0; i < n; ++i) pd[i] = saved[i] + opt.h * dir[i];
      double lp = tp.loss_value();
      for (int64_t i = 0; i < n; ++i) pd[i] = saved[i] - opt.h * dir[i];
      double lm = tp.loss_value();
      for (int64_t i = 0; i < n; ++i) pd[i] = saved[i];
      double fd = (lp - lm) / (2.0 * opt.h);
      double ad = 0.0;
      for (int64_t i = 0; i < n; ++i) ad += gd[i] * dir[i];
      num += (ad - fd) * (ad - fd);
      den += std::max(ad * ad, fd * fd);
    }

    GradCheckResult::Row row;
    row.name = entry.name;
    row.rel_err = std::sqrt(num / std::max(den, 1e-24));
    row.pass = row.rel_err < opt.tol;
    result.all_pass = result.all_pass && row.pass;
    result.rows.push_back(std::move(row));
  }

  result.seconds = std::chrono::duration<double>(
                       std::chrono::steady_clock::now() - t_begin)
                       .count();
  return result;
}

}  // namespace slrf
