#pragma once

#include <optional>
#include <span>
#include <string>

#include "slrf/body.hpp"
#include "slrf/checkpoint.hpp"
#include "slrf/fields.hpp"

namespace slrf {

struct ModelConfig {
  int num_nodes = 128;
  double sigma = 0.05;
  double epsilon = 0.001;
  int z_dim = 8;
  int e_dim = 32;
  int field_hidden = 64;
  int field_layers = 3;
  int feature_dim = 64;
  int cvae_hidden = 64;
  EncodingSpec enc;
  double delta_n_bound = 0.25;      // <= 0 disables the tanh bound
  double logvar_min = -10.0;
  double logvar_max = 4.0;
  bool density_relu = false;
  bool learn_attention = false;
  bool ablate_no_residuals = false;
  bool ablate_no_embeddings = false;
  bool ablate_deterministic_regressor = false;
  bool ablate_free_frame_latents = false;
  int frame_code_dim = 16;
  int num_frames = 1;               // training sequence length T
  int render_samples = 64;          // depths per ray for whole-image renders
  Dtype dtype = Dtype::F32;

  int coord_enc_dim() const { return EncodingSpec::encoded_size(3, enc.m_coord); }
  int view_enc_dim() const { return EncodingSpec::encoded_size(3, enc.m_view); }
  int time_enc_dim() const { return EncodingSpec::encoded_size(1, enc.m_time); }
  int field_in_dim() const { return coord_enc_dim() + e_dim; }
};

struct CvaeParams {
  std::vector<StackedLinear> enc;  // -> (mu, logvar)
  std::vector<StackedLinear> dec;  // (z, cond) -> (delta_n, e)
};

enum class LatentMode { Train, Replay, Novel };

// Batched per-node latents for F posed frames; rows are node-major
// (row = node * F + frame).
struct LatentBatch {
  int frames = 0;
  Array delta_n;  // (N*F, 3)
  Array embed;    // (N*F, E)
  Array mu;       // (N*F, Z) when the encoder ran
  Array logvar;   // (N*F, Z)
};

class AvatarModel {
 public:
  ModelConfig cfg;
  BodyTemplate tpl;
  NodeSet nodes;
  AttentionMap attention;
  ParamStore params;
  FieldParams fields;
  CvaeParams cvae;
  std::vector<StackedLinear> regressor;  // deterministic-regressor ablation
  Array frame_codes;                     // free-frame-latent ablation: (T, code)
  Array attn_logits;                     // learnable attention variant

  static AvatarModel create(const ModelConfig& cfg, BodyTemplate tpl,
                            uint64_t seed);

  int joints() const { return tpl.joint_count(); }
  int theta_dim() const { return 3 * joints(); }

  // Row-stochastic attention map values (fixed or derived from logits).
  AttentionMap current_attention() const;

  // Per-node pose conditions for F poses as an (N*F, 3J) array; tracked on
  // the tape only in the learnable-attention variant.
  Array pose_conditions(std::span<const Pose> poses) const;

  // cVAE / regressor inference. `noise` is required in Train mode
  // ((N*F, Z), standard normal); `z_override` optionally replaces the zero
  // latent in Novel mode ((N, Z) or (1, Z), broadcast over frames).
  LatentBatch infer_latents(std::span<const Pose> poses, LatentMode mode,
                            const Array* noise = nullptr,
                            const Array* z_override = nullptr) const;

  void write_checkpoint(Checkpoint& ck) const;
  void read_checkpoint(const Checkpoint& ck);
};

// Encoder invocation counter (Novel mode must keep it at zero).
uint64_t encoder_eval_count();
void reset_encoder_eval_count();

}  // namespace slrf
