#pragma once

#include <functional>
#include <string>

#include "slrf/dataset_io.hpp"
#include "slrf/losses.hpp"
#include "slrf/model.hpp"

namespace slrf {

// Full run configuration. JSON parsing is strict: unknown keys are errors.
struct TrainConfig {
  int64_t iterations = 20000;
  int rays_per_batch = 2048;
  int samples_per_ray = 64;
  int frames_per_batch = 4;

  int num_nodes = 128;
  double kernel_sigma = 0.05;
  double kernel_epsilon = 0.001;
  double lambda_rec = 1.0;
  double lambda_trans = 0.02;
  double lambda_ebd = 0.1;
  double lambda_kl = 1e-5;
  int z_dim = 8;
  int e_dim = 32;

  int field_hidden = 64;
  int field_layers = 3;
  int feature_dim = 64;
  int cvae_hidden = 64;
  double delta_n_bound = 0.25;

  double learning_rate = 5e-4;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double lr_decay_factor = 0.5;
  int64_t lr_decay_every = 20000;

  uint64_t seed = 1;
  int threads = 0;
  bool jitter = true;
  double mask_fg_fraction = 0.8;
  int bbox_dilate = 10;
  std::string density_activation = "softplus";  // or "relu"
  std::string rec_loss_reduction = "mean";      // or "sum"
  bool learn_attention = false;

  bool ablate_no_residuals = false;
  bool ablate_no_embeddings = false;
  bool ablate_deterministic_regressor = false;
  bool ablate_free_frame_latents = false;
  int frame_code_dim = 16;

  int64_t checkpoint_every = 1000;
  int keep_checkpoints = 3;
  int eval_views = 4;  // (frame, camera) pairs scored at each checkpoint

  static TrainConfig from_json_text(const std::string& text);
  std::string to_json_text() const;

  ModelConfig model_config(int num_frames) const;
  LossWeights loss_weights() const;
};

using LogSink = std::function<void(const std::string& jsonl_line)>;

struct TrainResult {
  std::string last_checkpoint;
  std::string best_checkpoint;
  double best_psnr = 0.0;
  int64_t iterations_run = 0;
  double final_loss = 0.0;
};

// End-to-end training. Writes config.json, train_log.jsonl and checkpoints
// under out_dir. resume_from may name a checkpoint produced by an identical
// configuration.
TrainResult train(const Dataset& ds, const TrainConfig& cfg,
                  const std::string& out_dir, const LogSink& log = {},
                  const std::string& resume_from = {});

// Replay-mode PSNR over selected (frame, camera) pairs (sparse path).
double eval_psnr_subset(const AvatarModel& model, const Dataset& ds,
                        int pair_count, int bbox_dilate);

}  // namespace slrf
