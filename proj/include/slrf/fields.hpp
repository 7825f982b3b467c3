#pragma once

#include <memory>
#include <vector>

#include "slrf/adam.hpp"
#include "slrf/array.hpp"

namespace slrf {

// Sinusoidal encoding octave counts: coordinates, view directions, time.
struct EncodingSpec {
  int m_coord = 6;
  int m_view = 4;
  int m_time = 12;

  static int encoded_size(int dims, int m) { return dims * (1 + 2 * m); }
};

struct StackedLinear {
  Array w;  // (N, Cin, Cout)
  Array b;  // (N, Cout)
};

struct DenseLinear {
  Array w;  // (Cin, Cout)
  Array b;  // (Cout)
};

// Per-node field MLPs plus the shared color/density heads.
struct FieldParams {
  std::vector<StackedLinear> field;    // layers of the per-node feature MLPs
  std::vector<DenseLinear> color;      // G: concat(f, γ(v)) -> rgb
  std::vector<DenseLinear> density;    // H: f -> scalar
};

FieldParams make_field_params(ParamStore& store, int nodes, int in_dim,
                              int hidden, int layers, int feature_dim,
                              int view_enc_dim, Dtype dt);

// Per-node feature MLP over packed rows (grouped by node).
Array field_features(const FieldParams& p, const Array& x,
                     std::shared_ptr<const Segments> by_node);

// Shared heads. rgb is sigmoid-bounded; density uses softplus (raw relu
// behind the flag).
struct ColorDensity {
  Array rgb;      // (S, 3)
  Array density;  // (S, 1)
};
ColorDensity color_density(const FieldParams& p, const Array& fused,
                           const Array& gamma_view, bool density_relu);

// Truncated-Gaussian blend weight (scalar form).
double blend_weight(double dist, double sigma, double epsilon);

// uniform random init, bound 1/sqrt(fan_in)
void init_linear(Array& w, Array& b, uint64_t seed, uint64_t stream);

}  // namespace slrf
