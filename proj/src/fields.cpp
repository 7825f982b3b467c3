#include "slrf/fields.hpp"

#include <cmath>

#include "slrf/common.hpp"

namespace slrf {

void init_linear(Array& w, Array& b, uint64_t seed, uint64_t stream) {
  int64_t fan_in = w.ndim() == 3 ? w.shape()[1] : w.shape()[0];
  double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Rng rng(seed, stream);
  auto fill = [&](Array& a) {
    if (a.dtype() == Dtype::F32) {
      auto s = a.data<float>();
      for (auto& v : s)
        v = static_cast<float>((rng.next_double() * 2.0 - 1.0) * bound);
    } else {
      auto s = a.data<double>();
      for (auto& v : s) v = (rng.next_double() * 2.0 - 1.0) * bound;
    }
  };
  fill(w);
  (void)b;  // biases start at zero
}

FieldParams make_field_params(ParamStore& store, int nodes, int in_dim,
                              int hidden, int layers, int feature_dim,
                              int view_enc_dim, Dtype dt) {
  if (layers < 1) fail_usage("field MLP needs at least one layer");
  FieldParams p;
  int cin = in_dim;
  for (int l = 0; l < layers; ++l) {
    int cout = (l == layers - 1) ? feature_dim : hidden;
    std::string base = "fields.mlp." + std::to_string(l);
    StackedLinear sl;
    sl.w = store.create(base + ".weight", {nodes, cin, cout}, dt);
    sl.b = store.create(base + ".bias", {nodes, cout}, dt);
    p.field.push_back(sl);
    cin = cout;
  }

  auto dense = [&](const std::string& name, int ci, int co) {
    DenseLinear dl;
    dl.w = store.create(name + ".weight", {ci, co}, dt);
    dl.b = store.create(name + ".bias", {co}, dt);
    return dl;
  };
  p.color.push_back(dense("heads.color.0", feature_dim + view_enc_dim, hidden));
  p.color.push_back(dense("heads.color.1", hidden, hidden));
  p.color.push_back(dense("heads.color.2", hidden, 3));
  p.density.push_back(dense("heads.density.0", feature_dim, hidden));
  p.density.push_back(dense("heads.density.1", hidden, 1));
  return p;
}

Array field_features(const FieldParams& p, const Array& x,
                     std::shared_ptr<const Segments> by_node) {
  Array h = x;
  for (const StackedLinear& layer : p.field)
    h = relu(group_linear(h, layer.w, layer.b, by_node));
  return h;
}

ColorDensity color_density(const FieldParams& p, const Array& fused,
                           const Array& gamma_view, bool density_relu) {
  ColorDensity out;
  {
    Array h = concat_cols({fused, gamma_view});
    h = relu(add_bias(matmul(h, p.color[0].w), p.color[0].b));
    h = relu(add_bias(matmul(h, p.color[1].w), p.color[1].b));
    out.rgb = sigmoid(add_bias(matmul(h, p.color[2].w), p.color[2].b));
  }
  {
    Array h = relu(add_bias(matmul(fused, p.density[0].w), p.density[0].b));
    Array pre = add_bias(matmul(h, p.density[1].w), p.density[1].b);
    out.density = density_relu ? relu(pre) : softplus(pre);
  }
  return out;
}

double blend_weight(double dist, double sigma, double epsilon) {
  double w = std::exp(-(dist * dist) / (2.0 * sigma * sigma)) - epsilon;
  return w > 0.0 ? w : 0.0;
}

}  // namespace slrf
