#pragma once

#include <memory>
#include <span>
#include <vector>

#include "slrf/array.hpp"
#include "slrf/camera.hpp"
#include "slrf/common.hpp"

namespace slrf {

// A batch of rays, possibly spanning several frames. Sample depths are
// stratified over per-ray [t0, t1) ranges; rays that miss the scene get an
// empty range and composite to background.
struct RayBatch {
  int64_t count = 0;
  int samples = 0;
  std::vector<double> origins;    // 3 per ray
  std::vector<double> dirs;       // 3 per ray, unit length
  std::vector<int> frame_of_ray;  // index into the batch's pose list
  std::vector<double> t0, t1;     // sample range; t1 <= t0 marks an empty ray
  std::vector<double> t_far;      // far bound used for the last delta

  Array gt;          // (R, 3) training targets, optional
  Array depths;      // (R, S)
  Array deltas;      // (R*S, 1)
  Array positions;   // (R*S, 3)
  Array gamma_view;  // (R, view_enc)

  int64_t total_samples() const { return count * samples; }
};

// Pinhole rays through the centers of the listed pixels.
void generate_rays(const Camera& cam, std::span<const std::pair<int, int>> pixels,
                   std::vector<double>& origins, std::vector<double>& dirs);

// One depth per equal bin over [near, far): bin centers, or uniform within
// each bin when a jitter rng is supplied.
std::vector<double> stratified_samples(double near, double far, int count,
                                       Rng* jitter);

// Fills depths/deltas/positions/gamma_view. Empty rays keep depth 0 samples
// that cull to nothing.
void finalize_rays(RayBatch& rays, int samples, int m_view, Dtype dt,
                   Rng* jitter);

// Intersection of a ray with an axis-aligned box; false if it misses.
bool ray_box_intersect(const Vec3& o, const Vec3& d, const Vec3& lo,
                       const Vec3& hi, double& tn, double& tf);

// ----------------------------------------------------------------------------
// Sparse culling & packing.
//
// Keeps (sample, node) pairs whose truncated-Gaussian weight is positive and
// lays them out grouped per node (logical N x S' block, ragged storage plus
// scatter indices). The predicate evaluates the same floating-point
// expression as the blend-weight op so the kept set is exactly the support.
struct PackedQuery {
  int nodes = 0;
  int frames = 0;
  std::vector<int64_t> counts;           // S_i per node
  int64_t max_count = 0;                 // S'
  int64_t pair_count = 0;
  int64_t total_samples = 0;             // R*S
  int64_t active_samples = 0;

  std::shared_ptr<Segments> by_node;     // pair rows grouped per node
  std::shared_ptr<IndexPlan> plan_latent;  // pair -> latent row (n*F + f)
  std::shared_ptr<IndexPlan> plan_perm;    // node-order pair -> sample-order pair
  std::shared_ptr<Segments> by_sample;     // sample-order pairs grouped per active sample
  std::shared_ptr<IndexPlan> plan_ray;     // active sample -> ray
  std::shared_ptr<IndexPlan> plan_slot;    // active sample -> flat (ray*S + s)

  Array p_pair;       // (P, 3) sample position per pair
  Array local_base;   // (P, 3) T_i^{-1} p − n̄_i (residual subtracted on tape)

  size_t packed_bytes() const;
  size_t dense_bytes() const;
};

// node_pos: current posed node positions, row n*F + f; node_valid marks
// nodes with invertible blends. dense=true keeps every pair regardless of
// weight (the w=0 pairs contribute nothing downstream).
PackedQuery cull_and_pack(const RayBatch& rays, const Array& node_pos,
                          std::span<const uint8_t> node_valid,
                          std::span<const double> local_base_rot,  // (N*F, 9) T^{-1} linear
                          std::span<const double> local_base_off,  // (N*F, 3) T^{-1} t
                          std::span<const double> canonical,       // (N, 3)
                          double sigma, double epsilon, bool dense);

// ----------------------------------------------------------------------------
// Volume compositing.

// Batched quadrature over dense (R*S) grids. Returns per-ray rgb and
// accumulated alpha; participates in the tape.
struct Composited {
  Array rgb;    // (R, 3)
  Array alpha;  // (R, 1)
};
Composited composite_batch(const Array& density_dense, const Array& rgb_dense,
                           const Array& deltas, int64_t rays, int samples);

// Single-ray reference form of the same quadrature (f64).
struct CompositeResult {
  std::array<double, 3> rgb{0, 0, 0};
  double alpha = 0;
  std::vector<double> weights;  // T_k * alpha_k
};
CompositeResult composite_ray(std::span<const double> colors,  // 3 per sample
                              std::span<const double> densities,
                              std::span<const double> depths, double far);

enum class BackgroundKind { Black, White, Checker };

// background color for pixel (x, y)
Vec3 background_color(BackgroundKind kind, int x, int y);

}  // namespace slrf
