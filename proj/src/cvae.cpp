#include <atomic>
#include <cmath>

#include "slrf/model.hpp"

namespace slrf {

namespace {
std::atomic<uint64_t> g_encoder_evals{0};

std::shared_ptr<Segments> uniform_segments(int groups, int per_group) {
  auto segs = std::make_shared<Segments>();
  segs->offsets.resize(static_cast<size_t>(groups) + 1);
  for (int i = 0; i <= groups; ++i)
    segs->offsets[i] = static_cast<int64_t>(i) * per_group;
  return segs;
}

Array run_stack(const std::vector<StackedLinear>& layers, const Array& x,
                std::shared_ptr<const Segments> segs) {
  Array h = x;
  for (size_t l = 0; l < layers.size(); ++l) {
    h = group_linear(h, layers[l].w, layers[l].b, segs);
    if (l + 1 < layers.size()) h = relu(h);
  }
  return h;
}

}  // namespace

uint64_t encoder_eval_count() { return g_encoder_evals.load(); }
void reset_encoder_eval_count() { g_encoder_evals.store(0); }

LatentBatch AvatarModel::infer_latents(std::span<const Pose> poses,
                                       LatentMode mode, const Array* noise,
                                       const Array* z_override) const {
  int F = static_cast<int>(poses.size());
  if (F == 0) fail_usage("infer_latents: no poses");
  int N = cfg.num_nodes;
  int Z = cfg.z_dim;
  int64_t rows = static_cast<int64_t>(N) * F;
  Dtype dt = cfg.dtype;

  for (const Pose& p : poses) {
    p.validate(tpl.joint_count());
    if (mode != LatentMode::Novel) {
      if (cfg.ablate_free_frame_latents &&
          (p.frame_index < 0 || p.frame_index >= cfg.num_frames))
        fail_usage("latent inference: frame index outside the training range");
    }
  }

  LatentBatch out;
  out.frames = F;
  Array cond = pose_conditions(poses);
  auto segs = uniform_segments(N, F);

  Array decoded;
  if (cfg.ablate_deterministic_regressor) {
    decoded = run_stack(regressor, cond, segs);
  } else {
    Array z;
    if (mode == LatentMode::Novel) {
      if (z_override && z_override->defined()) {
        const Array& zo = *z_override;
        if (zo.cols() != Z)
          fail_usage("z override must have latent width " + std::to_string(Z));
        std::vector<double> zv(static_cast<size_t>(rows) * Z);
        for (int n = 0; n < N; ++n) {
          int64_t src = zo.rows() == 1 ? 0 : n % zo.rows();
          for (int f = 0; f < F; ++f)
            for (int d = 0; d < Z; ++d)
              zv[(static_cast<size_t>(n) * F + f) * Z + d] = zo.at(src * Z + d);
        }
        z = Array::from_doubles(zv, {rows, Z}, dt);
      } else {
        z = Array::zeros({rows, Z}, dt);
      }
    } else {
      // encoder path (train / replay)
      Array t_rows;
      if (cfg.ablate_free_frame_latents) {
        auto plan = std::make_shared<IndexPlan>();
        plan->src_rows = cfg.num_frames;
        plan->idx.resize(static_cast<size_t>(rows));
        for (int n = 0; n < N; ++n)
          for (int f = 0; f < F; ++f)
            plan->idx[static_cast<size_t>(n) * F + f] = poses[f].frame_index;
        t_rows = gather_rows(frame_codes, plan);
      } else {
        std::vector<double> tv(static_cast<size_t>(F));
        for (int f = 0; f < F; ++f) tv[f] = poses[f].time_norm;
        Array t_enc = fourier_encode(
            Array::from_doubles(tv, {F, 1}, dt), cfg.enc.m_time);  // (F, 25)
        auto plan = std::make_shared<IndexPlan>();
        plan->src_rows = F;
        plan->idx.resize(static_cast<size_t>(rows));
        for (int n = 0; n < N; ++n)
          for (int f = 0; f < F; ++f)
            plan->idx[static_cast<size_t>(n) * F + f] = f;
        t_rows = gather_rows(t_enc, plan);
      }
      g_encoder_evals.fetch_add(1, std::memory_order_relaxed);
      Array enc_out = run_stack(cvae.enc, concat_cols({t_rows, cond}), segs);
      out.mu = slice_cols(enc_out, 0, Z);
      out.logvar = clamp(slice_cols(enc_out, Z, 2 * Z), cfg.logvar_min,
                         cfg.logvar_max);
      if (mode == LatentMode::Replay) {
        z = out.mu;
      } else {
        if (!noise || !noise->defined())
          fail_usage("train-mode latent inference requires a noise array");
        if (noise->shape() != std::vector<int64_t>{rows, Z})
          fail_usage("noise shape must be (N*F, Z)");
        Array sigma = exp(affine(out.logvar, 0.5, 0.0));
        z = add(out.mu, mul(sigma, *noise));
      }
    }
    decoded = run_stack(cvae.dec, concat_cols({z, cond}), segs);
  }

  Array dn_raw = slice_cols(decoded, 0, 3);
  if (cfg.delta_n_bound > 0)
    out.delta_n = affine(tanh(dn_raw), cfg.delta_n_bound, 0.0);
  else
    out.delta_n = dn_raw;
  out.embed = slice_cols(decoded, 3, 3 + cfg.e_dim);

  if (cfg.ablate_no_residuals) out.delta_n = Array::zeros({rows, 3}, dt);
  if (cfg.ablate_no_embeddings) out.embed = Array::zeros({rows, cfg.e_dim}, dt);
  return out;
}

}  // namespace slrf
