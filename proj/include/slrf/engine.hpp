#pragma once

#include <memory>
#include <string>

#include "slrf/dataset_io.hpp"
#include "slrf/pipeline.hpp"
#include "slrf/trainer.hpp"

namespace slrf {

struct RenderOptions {
  int camera = 0;
  int frame = 0;
  std::string mode = "replay";  // replay | novel
  bool has_z = false;
  std::vector<double> z;        // flat, width z_dim (or N rows of it)
  std::string path = "sparse";  // sparse | dense
  std::string background = "black";
  int width = 0, height = 0;    // 0 = dataset resolution
  bool write_alpha = false;
};

struct EvalOptions {
  std::string split = "train";  // train | all (identical for this dataset)
  bool with_ssim = true;
  bool with_psnr = true;
};

struct BenchOptions {
  int frame = 0;
  int camera = 0;
  int width = 128, height = 128;
  int repeat = 1;
  std::string path = "both";  // dense | sparse | both
};

// Loaded checkpoint plus its dataset: the rendering/eval entry point behind
// the C API. The training config is read from config.json next to the
// checkpoint file.
class Engine {
 public:
  Engine(const std::string& checkpoint_path, const std::string& data_dir);

  Image render(const RenderOptions& opt, Image* alpha_out = nullptr);
  std::string eval_json(const EvalOptions& opt);    // metrics table
  std::string bench_json(const BenchOptions& opt);  // timing + memory report

  const Dataset& dataset() const { return ds_; }
  const AvatarModel& model() const { return *model_; }
  AvatarModel& model() { return *model_; }
  const TrainConfig& config() const { return cfg_; }

 private:
  Dataset ds_;
  TrainConfig cfg_;
  std::unique_ptr<AvatarModel> model_;

  LatentBatch latents_for(const RenderOptions& opt, const Pose& pose);
};

BackgroundKind parse_background(const std::string& name);

}  // namespace slrf
