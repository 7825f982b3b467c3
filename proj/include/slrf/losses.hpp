#pragma once

#include "slrf/model.hpp"

namespace slrf {

struct LossWeights {
  double rec = 1.0;
  double trans = 0.02;
  double ebd = 0.1;
  double kl = 1e-5;
};

// Mean over rays of the squared color error (summed over channels).
Array reconstruction_loss(const Array& rendered, const Array& truth);

// Σ_i ‖Δn_i‖², averaged over the frames in the batch.
Array translation_reg(const LatentBatch& latents);

// Σ_i ‖e_i‖², averaged over the frames in the batch.
Array embedding_reg(const LatentBatch& latents);

// Σ_i KL(N(μ_i, σ_i²) ‖ N(0, I)), averaged over frames; zero when the
// encoder did not run.
Array kl_loss(const LatentBatch& latents);

struct LossParts {
  Array rec, trans, ebd, kl;
};

Array total_loss(const LossParts& parts, const LossWeights& w);

}  // namespace slrf
