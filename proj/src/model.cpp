#include "slrf/model.hpp"

#include <cmath>

namespace slrf {

namespace {

std::vector<StackedLinear> make_stack(ParamStore& store, const std::string& base,
                                      int nodes, int in_dim, int hidden,
                                      int out_dim, Dtype dt) {
  std::vector<StackedLinear> layers;
  int dims[4] = {in_dim, hidden, hidden, out_dim};
  for (int l = 0; l < 3; ++l) {
    StackedLinear sl;
    sl.w = store.create(base + "." + std::to_string(l) + ".weight",
                        {nodes, dims[l], dims[l + 1]}, dt);
    sl.b = store.create(base + "." + std::to_string(l) + ".bias",
                        {nodes, dims[l + 1]}, dt);
    layers.push_back(sl);
  }
  return layers;
}

}  // namespace

AvatarModel AvatarModel::create(const ModelConfig& cfg, BodyTemplate tpl,
                                uint64_t seed) {
  tpl.validate();
  AvatarModel m;
  m.cfg = cfg;
  m.tpl = std::move(tpl);
  m.nodes = sample_nodes(m.tpl, cfg.num_nodes, cfg.sigma, cfg.epsilon);
  m.attention = default_attention(m.tpl);

  Dtype dt = cfg.dtype;
  int N = cfg.num_nodes;
  int cond = 3 * m.tpl.joint_count();

  m.fields = make_field_params(m.params, N, cfg.field_in_dim(), cfg.field_hidden,
                               cfg.field_layers, cfg.feature_dim,
                               cfg.view_enc_dim(), dt);

  if (cfg.ablate_deterministic_regressor) {
    m.regressor = make_stack(m.params, "regressor", N, cond, cfg.cvae_hidden,
                             3 + cfg.e_dim, dt);
  } else {
    int t_dim = cfg.ablate_free_frame_latents ? cfg.frame_code_dim
                                              : cfg.time_enc_dim();
    m.cvae.enc = make_stack(m.params, "cvae.enc", N, t_dim + cond,
                            cfg.cvae_hidden, 2 * cfg.z_dim, dt);
    m.cvae.dec = make_stack(m.params, "cvae.dec", N, cfg.z_dim + cond,
                            cfg.cvae_hidden, 3 + cfg.e_dim, dt);
    if (cfg.ablate_free_frame_latents)
      m.frame_codes = m.params.create("frame_codes",
                                      {cfg.num_frames, cfg.frame_code_dim}, dt);
  }

  if (cfg.learn_attention) {
    int J = m.tpl.joint_count();
    m.attn_logits = m.params.create("attention.logits", {J, J}, dt);
  }

  uint64_t stream = 1;
  for (auto& e : m.params.entries()) {
    if (e.name.ends_with(".weight")) {
      Array dummy;
      init_linear(e.value, dummy, seed, stream);
    }
    ++stream;  // biases, frame codes stay zero
  }
  if (cfg.learn_attention) {
    // start at the fixed adjacency prior
    int J = m.tpl.joint_count();
    for (int i = 0; i < J * J; ++i) {
      double v = std::log(m.attention.w[i] + 1e-4);
      if (dt == Dtype::F32)
        m.attn_logits.data<float>()[i] = static_cast<float>(v);
      else
        m.attn_logits.data<double>()[i] = v;
    }
  }
  return m;
}

AttentionMap AvatarModel::current_attention() const {
  if (!cfg.learn_attention) return attention;
  int J = tpl.joint_count();
  AttentionMap out;
  out.joints = J;
  out.w.assign(static_cast<size_t>(J) * J, 0.0);
  for (int r = 0; r < J; ++r) {
    double mx = -1e300;
    for (int c = 0; c < J; ++c) mx = std::max(mx, attn_logits.at(r * J + c));
    double s = 0;
    for (int c = 0; c < J; ++c) {
      double e = std::exp(attn_logits.at(r * J + c) - mx);
      out.w[r * J + c] = e;
      s += e;
    }
    for (int c = 0; c < J; ++c) out.w[r * J + c] /= s;
  }
  return out;
}

Array AvatarModel::pose_conditions(std::span<const Pose> poses) const {
  int N = cfg.num_nodes;
  int F = static_cast<int>(poses.size());
  int J = tpl.joint_count();
  int C = 3 * J;

  if (!cfg.learn_attention) {
    std::vector<double> rows(static_cast<size_t>(N) * F * C);
    for (int n = 0; n < N; ++n)
      for (int f = 0; f < F; ++f) {
        std::vector<double> c = pose_condition(poses[f], nodes.skin[n], attention);
        std::copy(c.begin(), c.end(),
                  rows.begin() + (static_cast<size_t>(n) * F + f) * C);
      }
    return Array::from_doubles(rows, {static_cast<int64_t>(N) * F, C},
                               cfg.dtype);
  }

  // learnable map: W = row-softmax(logits); A = Ω Wᵀ broadcast to 3J
  Dtype dt = cfg.dtype;
  std::vector<double> mx(J, -1e300);
  for (int r = 0; r < J; ++r)
    for (int c = 0; c < J; ++c)
      mx[r] = std::max(mx[r], attn_logits.at(r * J + c));
  Array shift = Array::zeros({J, J}, dt);
  {
    std::vector<double> sv(static_cast<size_t>(J) * J);
    for (int r = 0; r < J; ++r)
      for (int c = 0; c < J; ++c) sv[r * J + c] = -mx[r];
    shift = Array::from_doubles(sv, {J, J}, dt);
  }
  Array ex = exp(add(attn_logits, shift));
  Array w_rows = div_rows(ex, sum_last(ex));

  std::vector<double> omega(static_cast<size_t>(N) * J);
  for (int n = 0; n < N; ++n)
    for (int j = 0; j < J; ++j) omega[n * J + j] = nodes.skin[n][j];
  Array omega_a = Array::from_doubles(omega, {N, J}, dt);
  Array att = matmul(omega_a, transpose2d(w_rows));  // (N, J)

  std::vector<double> rep(static_cast<size_t>(J) * C, 0.0);
  for (int j = 0; j < J; ++j)
    for (int c = 0; c < 3; ++c) rep[j * C + 3 * j + c] = 1.0;
  Array att3 = matmul(att, Array::from_doubles(rep, {J, C}, dt));  // (N, 3J)

  std::vector<Array> per_frame;
  per_frame.reserve(F);
  for (int f = 0; f < F; ++f) {
    std::vector<double> th = poses[f].theta;
    th[0] = th[1] = th[2] = 0.0;  // root orientation excluded
    per_frame.push_back(mul_rowvec(att3, Array::from_doubles(th, {C}, dt)));
  }
  Array stacked = concat_rows(per_frame);  // (F*N, C), frame-major

  auto plan = std::make_shared<IndexPlan>();
  plan->src_rows = static_cast<int64_t>(F) * N;
  plan->idx.resize(static_cast<size_t>(F) * N);
  for (int n = 0; n < N; ++n)
    for (int f = 0; f < F; ++f)
      plan->idx[static_cast<size_t>(n) * F + f] = static_cast<int64_t>(f) * N + n;
  return gather_rows(stacked, plan);  // node-major
}

void AvatarModel::write_checkpoint(Checkpoint& ck) const {
  for (const auto& e : params.entries()) ck.add(e.name, e.value);
  // node geometry travels with the weights so renders never depend on
  // re-running the sampler
  int N = cfg.num_nodes, J = tpl.joint_count();
  std::vector<float> pos(static_cast<size_t>(N) * 3);
  std::vector<float> skin(static_cast<size_t>(N) * J);
  for (int n = 0; n < N; ++n) {
    pos[n * 3 + 0] = static_cast<float>(nodes.canonical[n].x);
    pos[n * 3 + 1] = static_cast<float>(nodes.canonical[n].y);
    pos[n * 3 + 2] = static_cast<float>(nodes.canonical[n].z);
    for (int j = 0; j < J; ++j)
      skin[n * J + j] = static_cast<float>(nodes.skin[n][j]);
  }
  ck.add("nodes.canonical", Array::from_f32(std::move(pos), {N, 3}));
  ck.add("nodes.skin", Array::from_f32(std::move(skin), {N, J}));
}

void AvatarModel::read_checkpoint(const Checkpoint& ck) {
  for (auto& e : params.entries()) {
    const Array& src = ck.get(e.name);
    if (src.shape() != e.value.shape())
      fail_io("checkpoint shape mismatch for " + e.name + ": file " +
              src.shape_str() + " vs model " + e.value.shape_str());
    Array conv = src.astype(e.value.dtype());
    if (e.value.dtype() == Dtype::F32)
      std::copy(conv.cdata<float>().begin(), conv.cdata<float>().end(),
                e.value.data<float>().begin());
    else
      std::copy(conv.cdata<double>().begin(), conv.cdata<double>().end(),
                e.value.data<double>().begin());
  }
  const Array& pos = ck.get("nodes.canonical");
  const Array& skin = ck.get("nodes.skin");
  int N = cfg.num_nodes, J = tpl.joint_count();
  if (pos.shape() != std::vector<int64_t>{N, 3} ||
      skin.shape() != std::vector<int64_t>{N, J})
    fail_io("checkpoint node tables do not match the model configuration");
  for (int n = 0; n < N; ++n) {
    nodes.canonical[n] = {pos.at(n * 3), pos.at(n * 3 + 1), pos.at(n * 3 + 2)};
    for (int j = 0; j < J; ++j) nodes.skin[n][j] = skin.at(n * J + j);
  }
}

}  // namespace slrf
