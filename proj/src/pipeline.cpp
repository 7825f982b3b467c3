#include "slrf/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>

namespace slrf {

FrameGeometry pose_frame(const AvatarModel& model, const Pose& pose) {
  std::vector<Transform> joints = joint_transforms(model.tpl, pose);
  int N = model.cfg.num_nodes;
  FrameGeometry g;
  g.node_T.resize(N);
  g.node_Tinv.resize(N);
  g.valid.assign(N, 1);
  for (int n = 0; n < N; ++n) {
    g.node_T[n] = blend_transforms(joints, model.nodes.skin[n]);
    if (!g.node_T[n].invert(g.node_Tinv[n])) {
      g.valid[n] = 0;
      ++g.skipped;
    }
  }
  return g;
}

BatchGeometry batch_geometry(const AvatarModel& model,
                             std::span<const Pose> poses) {
  int N = model.cfg.num_nodes;
  int F = static_cast<int>(poses.size());
  BatchGeometry b;
  b.frames = F;
  int64_t NF = static_cast<int64_t>(N) * F;
  b.lin.resize(NF * 9);
  b.off.resize(NF * 3);
  b.inv_lin.resize(NF * 9);
  b.inv_off.resize(NF * 3);
  b.valid.assign(NF, 0);
  b.canonical.resize(static_cast<size_t>(N) * 3);
  for (int n = 0; n < N; ++n) {
    b.canonical[n * 3 + 0] = model.nodes.canonical[n].x;
    b.canonical[n * 3 + 1] = model.nodes.canonical[n].y;
    b.canonical[n * 3 + 2] = model.nodes.canonical[n].z;
  }

  std::vector<double> c0(NF * 3);
  for (int f = 0; f < F; ++f) {
    FrameGeometry fg = pose_frame(model, poses[f]);
    b.skipped += fg.skipped;
    for (int n = 0; n < N; ++n) {
      int64_t r = static_cast<int64_t>(n) * F + f;
      const Transform& T = fg.node_T[n];
      std::copy(T.a.begin(), T.a.end(), b.lin.begin() + r * 9);
      b.off[r * 3 + 0] = T.t.x;
      b.off[r * 3 + 1] = T.t.y;
      b.off[r * 3 + 2] = T.t.z;
      const Transform& Ti = fg.node_Tinv[n];
      std::copy(Ti.a.begin(), Ti.a.end(), b.inv_lin.begin() + r * 9);
      b.inv_off[r * 3 + 0] = Ti.t.x;
      b.inv_off[r * 3 + 1] = Ti.t.y;
      b.inv_off[r * 3 + 2] = Ti.t.z;
      b.valid[r] = fg.valid[n];
      Vec3 posed = T.apply(model.nodes.canonical[n]);
      c0[r * 3 + 0] = posed.x;
      c0[r * 3 + 1] = posed.y;
      c0[r * 3 + 2] = posed.z;
    }
  }
  Dtype dt = model.cfg.dtype;
  b.a_mats = Array::from_doubles(b.lin, {NF, 9}, dt);
  b.c0 = Array::from_doubles(c0, {NF, 3}, dt);
  return b;
}

Array posed_node_positions(const BatchGeometry& geom, const Array& delta_n) {
  return add(matvec3_rows(delta_n, geom.a_mats), geom.c0);
}

ForwardResult forward_rays(const AvatarModel& model, const BatchGeometry& geom,
                           const LatentBatch& latents, const RayBatch& rays,
                           bool dense_path) {
  const ModelConfig& cfg = model.cfg;
  Dtype dt = cfg.dtype;
  int64_t R = rays.count;
  int S = rays.samples;

  Array node_pos = posed_node_positions(geom, latents.delta_n);

  PackedQuery pq = cull_and_pack(rays, node_pos, geom.valid, geom.inv_lin,
                                 geom.inv_off, geom.canonical, cfg.sigma,
                                 cfg.epsilon, dense_path);

  ForwardResult out;
  out.stats.pairs = pq.pair_count;
  out.stats.active_samples = pq.active_samples;
  out.stats.total_samples = pq.total_samples;
  out.stats.max_count = pq.max_count;
  out.stats.packed_bytes = pq.packed_bytes();
  out.stats.dense_bytes = pq.dense_bytes();

  if (pq.pair_count == 0) {
    out.color = Array::zeros({R, 3}, dt);
    out.alpha = Array::zeros({R, 1}, dt);
    return out;
  }

  // per-pair latent lookups
  Array dn_pair = gather_rows(latents.delta_n, pq.plan_latent);
  Array e_pair = gather_rows(latents.embed, pq.plan_latent);
  Array n_pair = gather_rows(node_pos, pq.plan_latent);

  // local coordinates and blend weights
  Array local = sub(pq.local_base, dn_pair);
  Array gp = fourier_encode(local, cfg.enc.m_coord);
  Array feat_in = concat_cols({gp, e_pair});
  Array feat = field_features(model.fields, feat_in, pq.by_node);

  Array d = sub(pq.p_pair, n_pair);
  Array sq = sum_last(mul(d, d));
  Array gauss = exp(affine(sq, -1.0 / (2.0 * cfg.sigma * cfg.sigma), 0.0));
  Array w = max_scalar(affine(gauss, 1.0, -cfg.epsilon), 0.0);

  // fuse per active sample (pairs re-sorted sample-major, nodes ascending)
  Array feat_s = gather_rows(feat, pq.plan_perm);
  Array w_s = gather_rows(w, pq.plan_perm);
  Array fsum = segment_sum_rows(scale_rows(feat_s, w_s), pq.by_sample);
  Array wsum = segment_sum_rows(w_s, pq.by_sample);

  // samples whose every admitted pair sits exactly on the truncation
  // boundary have zero total weight; they follow the empty-sample
  // convention (density 0, color 0) instead of dividing by zero
  int64_t A = pq.active_samples;
  std::vector<double> mask(static_cast<size_t>(A)), guard(static_cast<size_t>(A));
  {
    auto read = [&](auto tag) {
      using T = decltype(tag);
      const T* pw = wsum.cdata<T>().data();
      for (int64_t i = 0; i < A; ++i) {
        bool on = pw[i] > T(0);
        mask[i] = on ? 1.0 : 0.0;
        guard[i] = on ? 0.0 : 1.0;
      }
    };
    if (dt == Dtype::F32) read(float{}); else read(double{});
  }
  Array empty_mask = Array::from_doubles(mask, {A, 1}, dt);
  Array wsafe = add(wsum, Array::from_doubles(guard, {A, 1}, dt));
  Array fused = div_rows(fsum, wsafe);

  // shared heads
  Array gview = gather_rows(rays.gamma_view, pq.plan_ray);
  ColorDensity cd = color_density(model.fields, fused, gview, cfg.density_relu);
  Array density = mul(cd.density, empty_mask);
  Array rgb = scale_rows(cd.rgb, empty_mask);

  // composite over the dense (R*S) grid
  Array density_dense = scatter_rows(density, pq.plan_slot, R * S);
  Array rgb_dense = scatter_rows(rgb, pq.plan_slot, R * S);
  Composited comp = composite_batch(density_dense, rgb_dense, rays.deltas, R, S);
  out.color = comp.rgb;
  out.alpha = comp.alpha;
  return out;
}

ImageRender render_image(const AvatarModel& model, const Pose& pose,
                         const Camera& cam, const LatentBatch& latents,
                         bool dense_path, BackgroundKind background,
                         int chunk_rays) {
  cam.validate();
  auto t_begin = std::chrono::steady_clock::now();
  const ModelConfig& cfg = model.cfg;

  std::vector<Pose> poses{pose};
  BatchGeometry geom = batch_geometry(model, poses);
  if (geom.skipped > 0)
    std::fprintf(stderr,
                 "[slrf] warning: %d node transforms were singular and were "
                 "skipped for this frame\n",
                 geom.skipped);

  // sampling box around the posed nodes
  Array node_pos_now = posed_node_positions(geom, latents.delta_n);
  Vec3 lo{1e9, 1e9, 1e9}, hi{-1e9, -1e9, -1e9};
  for (int64_t r = 0; r < node_pos_now.shape()[0]; ++r) {
    lo.x = std::min(lo.x, node_pos_now.at(r * 3));
    hi.x = std::max(hi.x, node_pos_now.at(r * 3));
    lo.y = std::min(lo.y, node_pos_now.at(r * 3 + 1));
    hi.y = std::max(hi.y, node_pos_now.at(r * 3 + 1));
    lo.z = std::min(lo.z, node_pos_now.at(r * 3 + 2));
    hi.z = std::max(hi.z, node_pos_now.at(r * 3 + 2));
  }
  double margin = model.nodes.cutoff_radius() + 0.01;
  lo = lo - Vec3{margin, margin, margin};
  hi = hi + Vec3{margin, margin, margin};

  ImageRender out;
  out.rgb = Image(cam.width, cam.height, 3);
  out.alpha = Image(cam.width, cam.height, 1);

  int S = cfg.render_samples;
  Vec3 origin = cam.position();
  int64_t total = static_cast<int64_t>(cam.width) * cam.height;
  int64_t done = 0;
  int64_t active_total = 0;
  while (done < total) {
    int64_t n = std::min<int64_t>(chunk_rays, total - done);
    RayBatch rays;
    rays.count = n;
    rays.origins.reserve(n * 3);
    rays.dirs.reserve(n * 3);
    for (int64_t i = 0; i < n; ++i) {
      int64_t pix = done + i;
      int px = static_cast<int>(pix % cam.width);
      int py = static_cast<int>(pix / cam.width);
      Vec3 d = cam.pixel_direction(px, py);
      rays.origins.insert(rays.origins.end(), {origin.x, origin.y, origin.z});
      rays.dirs.insert(rays.dirs.end(), {d.x, d.y, d.z});
      rays.frame_of_ray.push_back(0);
      double tn, tf;
      if (ray_box_intersect(origin, d, lo, hi, tn, tf)) {
        tn = std::max(tn, cam.near);
        tf = std::min(tf, cam.far);
        if (!(tf > tn)) tn = tf = 0.0;
      } else {
        tn = tf = 0.0;
      }
      rays.t0.push_back(tn);
      rays.t1.push_back(tf);
    }
    finalize_rays(rays, S, cfg.enc.m_view, cfg.dtype, nullptr);

    ForwardResult fwd = forward_rays(model, geom, latents, rays, dense_path);
    out.stats.pairs += fwd.stats.pairs;
    out.stats.active_samples += fwd.stats.active_samples;
    out.stats.total_samples += fwd.stats.total_samples;
    out.stats.max_count = std::max(out.stats.max_count, fwd.stats.max_count);
    out.stats.packed_bytes += fwd.stats.packed_bytes;
    out.stats.dense_bytes += fwd.stats.dense_bytes;
    active_total += fwd.stats.active_samples;

    for (int64_t i = 0; i < n; ++i) {
      int64_t pix = done + i;
      int px = static_cast<int>(pix % cam.width);
      int py = static_cast<int>(pix / cam.width);
      double a = fwd.alpha.at(i);
      Vec3 bg = background_color(background, px, py);
      out.rgb.at(px, py, 0) = static_cast<float>(fwd.color.at(i * 3) + (1 - a) * bg.x);
      out.rgb.at(px, py, 1) = static_cast<float>(fwd.color.at(i * 3 + 1) + (1 - a) * bg.y);
      out.rgb.at(px, py, 2) = static_cast<float>(fwd.color.at(i * 3 + 2) + (1 - a) * bg.z);
      out.alpha.at(px, py, 0) = static_cast<float>(a);
    }
    done += n;
  }

  if (active_total == 0) {
    out.empty = true;
    std::fprintf(stderr,
                 "[slrf] warning: render produced no active samples (camera "
                 "outside scene bounds?); image is background only\n");
  }
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() -
                                              t_begin)
                    .count();
  return out;
}

}  // namespace slrf
