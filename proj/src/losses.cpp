#include "slrf/losses.hpp"

namespace slrf {

Array reconstruction_loss(const Array& rendered, const Array& truth) {
  if (rendered.shape() != truth.shape())
    fail_usage("reconstruction_loss: ray counts differ");
  Array diff = sub(rendered, truth);
  return affine(sum_all(mul(diff, diff)), 1.0 / rendered.shape()[0], 0.0);
}

Array translation_reg(const LatentBatch& latents) {
  return affine(sum_all(mul(latents.delta_n, latents.delta_n)),
                1.0 / latents.frames, 0.0);
}

Array embedding_reg(const LatentBatch& latents) {
  return affine(sum_all(mul(latents.embed, latents.embed)),
                1.0 / latents.frames, 0.0);
}

Array kl_loss(const LatentBatch& latents) {
  if (!latents.mu.defined())
    return Array::zeros({}, latents.delta_n.dtype());
  // ½ Σ (μ² + e^{lv} − lv − 1)
  Array term = add(add(mul(latents.mu, latents.mu), exp(latents.logvar)),
                   affine(latents.logvar, -1.0, -1.0));
  return affine(sum_all(term), 0.5 / latents.frames, 0.0);
}

Array total_loss(const LossParts& parts, const LossWeights& w) {
  Array acc = affine(parts.rec, w.rec, 0.0);
  acc = add(acc, affine(parts.trans, w.trans, 0.0));
  acc = add(acc, affine(parts.ebd, w.ebd, 0.0));
  acc = add(acc, affine(parts.kl, w.kl, 0.0));
  return acc;
}

}  // namespace slrf
