#pragma once

#include "slrf/image.hpp"
#include "slrf/model.hpp"
#include "slrf/renderer.hpp"

namespace slrf {

// Constant per-frame node geometry (no residuals applied).
struct FrameGeometry {
  std::vector<Transform> node_T;     // blended transforms per node
  std::vector<Transform> node_Tinv;  // exact inverses where they exist
  std::vector<uint8_t> valid;        // invertible blend
  int skipped = 0;                   // singular nodes (reported by caller)
};

FrameGeometry pose_frame(const AvatarModel& model, const Pose& pose);

// Flattened per-(node, frame) constants for a batch of frames,
// row = node * F + frame.
struct BatchGeometry {
  int frames = 0;
  std::vector<double> lin;        // (N*F, 9) linear block of T
  std::vector<double> off;        // (N*F, 3) translation of T
  std::vector<double> inv_lin;    // (N*F, 9) linear block of T^{-1}
  std::vector<double> inv_off;    // (N*F, 3)
  std::vector<uint8_t> valid;     // (N*F)
  std::vector<double> canonical;  // (N, 3)
  Array a_mats;  // (N*F, 9) dtype constants for the residual map
  Array c0;      // (N*F, 3) posed canonical positions T(n̄)
  int skipped = 0;
};

BatchGeometry batch_geometry(const AvatarModel& model,
                             std::span<const Pose> poses);

// Current posed node positions: c0 + A·Δn, tracked on the tape when the
// residuals are.
Array posed_node_positions(const BatchGeometry& geom, const Array& delta_n);

struct ForwardStats {
  int64_t pairs = 0;
  int64_t active_samples = 0;
  int64_t total_samples = 0;
  int64_t max_count = 0;       // S'
  size_t packed_bytes = 0;
  size_t dense_bytes = 0;
};

struct ForwardResult {
  Array color;  // (R, 3)
  Array alpha;  // (R, 1)
  ForwardStats stats;
};

// Full differentiable forward pass over a ray batch: cull, evaluate the
// per-node fields, fuse, run the heads, composite.
ForwardResult forward_rays(const AvatarModel& model, const BatchGeometry& geom,
                           const LatentBatch& latents, const RayBatch& rays,
                           bool dense_path);

struct ImageRender {
  Image rgb;
  Image alpha;
  ForwardStats stats;
  double seconds = 0.0;
  bool empty = false;  // no active pairs anywhere (warned)
};

// Chunked whole-image render (deterministic bin-center sampling).
ImageRender render_image(const AvatarModel& model, const Pose& pose,
                         const Camera& cam, const LatentBatch& latents,
                         bool dense_path, BackgroundKind background,
                         int chunk_rays = 16384);

}  // namespace slrf
