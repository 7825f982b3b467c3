#pragma once

#include <string>
#include <vector>

#include "slrf/body.hpp"
#include "slrf/camera.hpp"
#include "slrf/image.hpp"
#include "slrf/scene.hpp"

namespace slrf {

// On-disk layout:
//   meta.json, cameras.json, poses.json, template.json
//   images/cam{c}/frame{t}.png   8-bit RGB, composited over black
//   masks/cam{c}/frame{t}.png    8-bit grayscale
struct Dataset {
  BodyTemplate tpl;
  std::vector<Pose> poses;
  std::vector<Camera> cameras;
  std::vector<std::vector<Image>> images;  // [camera][frame]
  std::vector<std::vector<Image>> masks;
  int width = 0, height = 0;
  double near = 0, far = 0;
  uint64_t seed = 0;
  std::string difficulty;

  int frames() const { return static_cast<int>(poses.size()); }
  int camera_count() const { return static_cast<int>(cameras.size()); }
};

// Renders ground truth with the analytic oracle and writes the full layout.
void write_dataset(const SyntheticScene& scene, const std::vector<Camera>& cams,
                   const std::string& dir, int oracle_samples = 192);

Dataset read_dataset(const std::string& dir);

std::string image_path(const std::string& dir, int cam, int frame);
std::string mask_path(const std::string& dir, int cam, int frame);

}  // namespace slrf
