#include "slrf/renderer.hpp"

#include <algorithm>
#include <cmath>

#include "slrf/parallel.hpp"

namespace slrf {

void generate_rays(const Camera& cam, std::span<const std::pair<int, int>> pixels,
                   std::vector<double>& origins, std::vector<double>& dirs) {
  cam.validate();
  Vec3 o = cam.position();
  for (const auto& [px, py] : pixels) {
    if (px < 0 || px >= cam.width || py < 0 || py >= cam.height)
      fail_usage("pixel outside image bounds");
    Vec3 d = cam.pixel_direction(px, py);
    origins.insert(origins.end(), {o.x, o.y, o.z});
    dirs.insert(dirs.end(), {d.x, d.y, d.z});
  }
}

std::vector<double> stratified_samples(double near, double far, int count,
                                       Rng* jitter) {
  if (count < 1) fail_usage("stratified_samples: need at least one sample");
  std::vector<double> out(static_cast<size_t>(count));
  double bin = (far - near) / count;
  for (int i = 0; i < count; ++i) {
    double u = jitter ? jitter->next_double() : 0.5;
    out[i] = near + (i + u) * bin;
  }
  return out;
}

bool ray_box_intersect(const Vec3& o, const Vec3& d, const Vec3& lo,
                       const Vec3& hi, double& tn, double& tf) {
  tn = -1e300;
  tf = 1e300;
  const double ov[3] = {o.x, o.y, o.z};
  const double dv[3] = {d.x, d.y, d.z};
  const double lov[3] = {lo.x, lo.y, lo.z};
  const double hiv[3] = {hi.x, hi.y, hi.z};
  for (int a = 0; a < 3; ++a) {
    if (std::abs(dv[a]) < 1e-12) {
      if (ov[a] < lov[a] || ov[a] > hiv[a]) return false;
      continue;
    }
    double inv = 1.0 / dv[a];
    double t0 = (lov[a] - ov[a]) * inv;
    double t1 = (hiv[a] - ov[a]) * inv;
    if (t0 > t1) std::swap(t0, t1);
    tn = std::max(tn, t0);
    tf = std::min(tf, t1);
    if (tn > tf) return false;
  }
  return true;
}

void finalize_rays(RayBatch& rays, int samples, int m_view, Dtype dt,
                   Rng* jitter) {
  rays.samples = samples;
  int64_t R = rays.count;
  int64_t S = samples;
  std::vector<double> depths(static_cast<size_t>(R) * S, 0.0);
  std::vector<double> deltas(static_cast<size_t>(R) * S, 0.0);
  std::vector<double> pos(static_cast<size_t>(R) * S * 3, 0.0);
  rays.t_far.assign(static_cast<size_t>(R), 0.0);

  for (int64_t r = 0; r < R; ++r) {
    double a = rays.t0[r], b = rays.t1[r];
    if (!(b > a)) continue;  // empty ray
    std::vector<double> d = stratified_samples(a, b, samples, jitter);
    rays.t_far[r] = b;
    const double* o = &rays.origins[r * 3];
    const double* dir = &rays.dirs[r * 3];
    for (int64_t s = 0; s < S; ++s) {
      double t = d[s];
      depths[r * S + s] = t;
      deltas[r * S + s] = (s + 1 < S ? d[s + 1] : b) - t;
      pos[(r * S + s) * 3 + 0] = o[0] + dir[0] * t;
      pos[(r * S + s) * 3 + 1] = o[1] + dir[1] * t;
      pos[(r * S + s) * 3 + 2] = o[2] + dir[2] * t;
    }
  }
  rays.depths = Array::from_doubles(depths, {R, S}, dt);
  rays.deltas = Array::from_doubles(deltas, {R * S, 1}, dt);
  rays.positions = Array::from_doubles(pos, {R * S, 3}, dt);
  rays.gamma_view =
      fourier_encode(Array::from_doubles(rays.dirs, {R, 3}, dt), m_view);
}

// ---------------------------------------------------------------------------

size_t PackedQuery::packed_bytes() const {
  // packed coordinate block plus scatter bookkeeping
  return static_cast<size_t>(pair_count) * (3 * sizeof(float) + 2 * sizeof(int64_t));
}

size_t PackedQuery::dense_bytes() const {
  return static_cast<size_t>(total_samples) * nodes * 3 * sizeof(float);
}

namespace {

template <class T>
void cull_kernel(const RayBatch& rays, const Array& node_pos,
                 std::span<const uint8_t> node_valid, int N, int F,
                 double sigma, double epsilon, bool dense,
                 std::vector<std::vector<int64_t>>& per_node_samples) {
  const T* np = node_pos.cdata<T>().data();
  const T* ps = rays.positions.cdata<T>().data();
  const T k = static_cast<T>(-1.0 / (2.0 * sigma * sigma));
  const T eps = static_cast<T>(epsilon);
  int64_t S = rays.samples;
  // generous prune radius in double before the exact float predicate
  double cutoff = sigma * std::sqrt(2.0 * std::log(1.0 / epsilon));
  double cut2 = cutoff * cutoff * 1.0001 + 1e-9;

  ThreadPool::instance().parallel_tasks(N, [&](int64_t n) {
    auto& list = per_node_samples[static_cast<size_t>(n)];
    for (int64_t r = 0; r < rays.count; ++r) {
      int f = rays.frame_of_ray[r];
      if (!node_valid[static_cast<size_t>(n) * F + f]) continue;
      const T* c = np + (n * F + f) * 3;
      for (int64_t s = 0; s < S; ++s) {
        int64_t slot = r * S + s;
        const T* p = ps + slot * 3;
        if (dense) {
          list.push_back(slot);
          continue;
        }
        double ddx = static_cast<double>(p[0]) - c[0];
        double ddy = static_cast<double>(p[1]) - c[1];
        double ddz = static_cast<double>(p[2]) - c[2];
        if (ddx * ddx + ddy * ddy + ddz * ddz > cut2) continue;
        // same expression as the blend-weight op; the tiny inclusive margin
        // absorbs fp-contraction differences, and any extra pair it admits
        // carries weight exactly 0 downstream
        T dx = p[0] - c[0], dy = p[1] - c[1], dz = p[2] - c[2];
        T sq = 0;
        sq += dx * dx;
        sq += dy * dy;
        sq += dz * dz;
        T w = std::exp(k * sq) - eps;
        if (w > T(-1e-9)) list.push_back(slot);
      }
    }
  });
}

}  // namespace

PackedQuery cull_and_pack(const RayBatch& rays, const Array& node_pos,
                          std::span<const uint8_t> node_valid,
                          std::span<const double> local_base_rot,
                          std::span<const double> local_base_off,
                          std::span<const double> canonical, double sigma,
                          double epsilon, bool dense) {
  int64_t NF = node_pos.shape()[0];
  int N = static_cast<int>(canonical.size() / 3);
  int F = static_cast<int>(NF / N);
  Dtype dt = node_pos.dtype();

  PackedQuery q;
  q.nodes = N;
  q.frames = F;
  q.total_samples = rays.total_samples();

  std::vector<std::vector<int64_t>> per_node(static_cast<size_t>(N));
  if (dt == Dtype::F32)
    cull_kernel<float>(rays, node_pos, node_valid, N, F, sigma, epsilon, dense,
                       per_node);
  else
    cull_kernel<double>(rays, node_pos, node_valid, N, F, sigma, epsilon, dense,
                        per_node);

  q.by_node = std::make_shared<Segments>();
  q.by_node->offsets.assign(static_cast<size_t>(N) + 1, 0);
  q.counts.assign(static_cast<size_t>(N), 0);
  for (int n = 0; n < N; ++n) {
    q.counts[n] = static_cast<int64_t>(per_node[n].size());
    q.max_count = std::max(q.max_count, q.counts[n]);
    q.by_node->offsets[n + 1] = q.by_node->offsets[n] + q.counts[n];
  }
  q.pair_count = q.by_node->offsets[N];

  // flat pair tables (node-major, sample index ascending inside each node)
  std::vector<int64_t> pair_slot(static_cast<size_t>(q.pair_count));
  q.plan_latent = std::make_shared<IndexPlan>();
  q.plan_latent->src_rows = NF;
  q.plan_latent->idx.resize(static_cast<size_t>(q.pair_count));
  int64_t S = rays.samples;
  for (int n = 0; n < N; ++n) {
    int64_t off = q.by_node->offsets[n];
    for (size_t j = 0; j < per_node[n].size(); ++j) {
      int64_t slot = per_node[n][j];
      pair_slot[off + j] = slot;
      int f = rays.frame_of_ray[slot / S];
      q.plan_latent->idx[off + j] = static_cast<int64_t>(n) * F + f;
    }
  }

  // active samples: slots that appear in at least one pair, ascending
  std::vector<int64_t> slot_to_active(static_cast<size_t>(q.total_samples), -1);
  {
    std::vector<uint8_t> hit(static_cast<size_t>(q.total_samples), 0);
    for (int64_t slot : pair_slot) hit[static_cast<size_t>(slot)] = 1;
    int64_t a = 0;
    q.plan_slot = std::make_shared<IndexPlan>();
    q.plan_slot->src_rows = q.total_samples;
    for (int64_t slot = 0; slot < q.total_samples; ++slot)
      if (hit[static_cast<size_t>(slot)]) {
        slot_to_active[static_cast<size_t>(slot)] = a++;
        q.plan_slot->idx.push_back(slot);
      }
    q.active_samples = a;
  }

  // pair permutation into (sample, node)-sorted order for fusion
  q.plan_perm = std::make_shared<IndexPlan>();
  q.plan_perm->src_rows = q.pair_count;
  q.plan_perm->idx.resize(static_cast<size_t>(q.pair_count));
  q.by_sample = std::make_shared<Segments>();
  q.by_sample->offsets.assign(static_cast<size_t>(q.active_samples) + 1, 0);
  {
    std::vector<int64_t> cnt(static_cast<size_t>(q.active_samples), 0);
    for (int64_t j = 0; j < q.pair_count; ++j)
      ++cnt[static_cast<size_t>(slot_to_active[pair_slot[j]])];
    for (int64_t a = 0; a < q.active_samples; ++a)
      q.by_sample->offsets[a + 1] = q.by_sample->offsets[a] + cnt[a];
    std::vector<int64_t> cursor(q.by_sample->offsets.begin(),
                                q.by_sample->offsets.end() - 1);
    // pairs scanned in node-major order land per sample sorted by node
    for (int64_t j = 0; j < q.pair_count; ++j) {
      int64_t a = slot_to_active[pair_slot[j]];
      q.plan_perm->idx[static_cast<size_t>(cursor[a]++)] = j;
    }
  }

  // active sample -> ray
  q.plan_ray = std::make_shared<IndexPlan>();
  q.plan_ray->src_rows = rays.count;
  q.plan_ray->idx.resize(static_cast<size_t>(q.active_samples));
  for (int64_t a = 0; a < q.active_samples; ++a)
    q.plan_ray->idx[a] = q.plan_slot->idx[a] / S;

  // constant per-pair geometry
  std::vector<double> ppair(static_cast<size_t>(q.pair_count) * 3);
  std::vector<double> lbase(static_cast<size_t>(q.pair_count) * 3);
  {
    std::vector<double> posd(rays.positions.numel());
    if (dt == Dtype::F32) {
      auto s = rays.positions.cdata<float>();
      for (size_t i = 0; i < posd.size(); ++i) posd[i] = s[i];
    } else {
      auto s = rays.positions.cdata<double>();
      for (size_t i = 0; i < posd.size(); ++i) posd[i] = s[i];
    }
    ThreadPool::instance().parallel_for(q.pair_count, 4096, [&](int64_t lo, int64_t hi) {
      for (int64_t j = lo; j < hi; ++j) {
        int64_t slot = pair_slot[j];
        int64_t nf = q.plan_latent->idx[j];
        int64_t n = nf / F;
        const double* p = &posd[slot * 3];
        ppair[j * 3 + 0] = p[0];
        ppair[j * 3 + 1] = p[1];
        ppair[j * 3 + 2] = p[2];
        const double* R = &local_base_rot[nf * 9];
        const double* t = &local_base_off[nf * 3];
        const double* nb = &canonical[n * 3];
        for (int a = 0; a < 3; ++a)
          lbase[j * 3 + a] = R[a * 3 + 0] * p[0] + R[a * 3 + 1] * p[1] +
                             R[a * 3 + 2] * p[2] + t[a] - nb[a];
      }
    });
  }
  q.p_pair = Array::from_doubles(ppair, {q.pair_count, 3}, dt);
  q.local_base = Array::from_doubles(lbase, {q.pair_count, 3}, dt);
  return q;
}

// ---------------------------------------------------------------------------

Composited composite_batch(const Array& density_dense, const Array& rgb_dense,
                           const Array& deltas, int64_t rays, int samples) {
  // T_k = exp(-sum_{j<k} sigma_j d_j), alpha_k = 1 - exp(-sigma_k d_k)
  Array a = mul(density_dense, deltas);                      // (R*S, 1)
  Array a2d = reshape(a, {rays, samples});
  Array transmit = exp(affine(exclusive_cumsum_last(a2d), -1.0, 0.0));
  Array alpha = affine(exp(affine(a2d, -1.0, 0.0)), -1.0, 1.0);
  Array weight = mul(transmit, alpha);                       // (R, S)
  Array wflat = reshape(weight, {rays * static_cast<int64_t>(samples), 1});

  auto per_ray = std::make_shared<Segments>();
  per_ray->offsets.resize(static_cast<size_t>(rays) + 1);
  for (int64_t r = 0; r <= rays; ++r) per_ray->offsets[r] = r * samples;

  Composited out;
  out.rgb = segment_sum_rows(scale_rows(rgb_dense, wflat), per_ray);
  out.alpha = segment_sum_rows(wflat, per_ray);
  return out;
}

CompositeResult composite_ray(std::span<const double> colors,
                              std::span<const double> densities,
                              std::span<const double> depths, double far) {
  size_t S = densities.size();
  if (colors.size() != 3 * S || depths.size() != S)
    fail_usage("composite_ray: inconsistent sample counts");
  for (size_t i = 1; i < S; ++i)
    if (!(depths[i] > depths[i - 1]))
      fail_usage("composite_ray: depths must be strictly increasing");

  CompositeResult res;
  res.weights.resize(S);
  double optical = 0.0;
  for (size_t k = 0; k < S; ++k) {
    double delta = (k + 1 < S ? depths[k + 1] : far) - depths[k];
    double a = densities[k] * delta;
    double transmit = std::exp(-optical);
    double alpha = 1.0 - std::exp(-a);
    double w = transmit * alpha;
    res.weights[k] = w;
    for (int c = 0; c < 3; ++c) res.rgb[c] += w * colors[k * 3 + c];
    res.alpha += w;
    optical += a;
  }
  return res;
}

Vec3 background_color(BackgroundKind kind, int x, int y) {
  switch (kind) {
    case BackgroundKind::Black: return {0, 0, 0};
    case BackgroundKind::White: return {1, 1, 1};
    case BackgroundKind::Checker: {
      bool on = ((x / 8) + (y / 8)) % 2 == 0;
      return on ? Vec3{0.75, 0.75, 0.75} : Vec3{0.25, 0.25, 0.25};
    }
  }
  return {0, 0, 0};
}

}  // namespace slrf
