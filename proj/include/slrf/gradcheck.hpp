#pragma once

#include <string>
#include <vector>

namespace slrf {

// Finite-difference verification of the end-to-end loss gradient on a tiny
// double-precision pipeline (self-contained synthetic scene).
struct GradCheckOptions {
  uint64_t seed = 0;
  int nodes = 8;
  int joints = 4;
  int rays = 16;
  int samples = 4;
  int frames = 3;
  int res = 24;
  double h = 1e-4;
  double tol = 1e-3;
  int coords_per_leaf = 6;  // random single-coordinate probes per parameter
  bool free_frame_latents = false;
  std::string corrupt_param;  // test hook: damages that analytic gradient
};

struct GradCheckResult {
  struct Row {
    std::string name;
    double rel_err = 0.0;
    bool pass = false;
  };
  std::vector<Row> rows;
  bool all_pass = false;
  double seconds = 0.0;
};

GradCheckResult run_gradcheck(const GradCheckOptions& opt);

}  // namespace slrf
