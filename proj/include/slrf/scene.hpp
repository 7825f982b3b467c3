#pragma once

#include <span>
#include <string>
#include <vector>

#include "slrf/body.hpp"
#include "slrf/camera.hpp"
#include "slrf/image.hpp"

namespace slrf {

// Procedurally animated articulated figure with an analytic density/color
// field. The skirt blob sways relative to the skeleton (a sinusoid of time
// and arm pose) and the torso/skirt brightness pulses over time, so fitting
// it exercises both node residuals and detail embeddings.
struct SyntheticScene {
  BodyTemplate tpl;
  std::vector<Pose> poses;
  uint64_t seed = 0;
  std::string difficulty = "dynamic";

  struct Capsule {
    int joint;
    Vec3 a, b;
    double radius;
    Vec3 color;
  };
  std::vector<Capsule> capsules;  // canonical, posed rigidly per joint

  bool has_skirt = true;
  Vec3 skirt_axes{0.21, 0.16, 0.21};
  Vec3 skirt_center_rest{0.0, 0.74, 0.0};
  Vec3 skirt_color{0.10, 0.62, 0.55};
  double sway_amp_x = 0.055, sway_amp_z = 0.035, sway_phase = 0.0;
  double sway_pose_gain = 0.06;  // arm-angle contribution
  double detail_amp = 0.22, detail_cycles = 2.0, detail_phase = 0.0;

  double density_max = 120.0;
  double shell_softness = 0.008;

  // posed analytic primitives for one frame
  struct Posed {
    std::vector<Capsule> caps;  // endpoints in world space
    Vec3 skirt_center;
    bool has_skirt;
    double time_norm;
  };
  Posed pose_primitives(int frame) const;

  double density_at(const Posed& fp, const Vec3& p) const;
  Vec3 color_at(const Posed& fp, const Vec3& p) const;
  void bounds(const Posed& fp, Vec3& lo, Vec3& hi) const;

  double brightness(double time_norm) const;
  Vec3 skirt_sway(const Pose& pose) const;  // offset from rest (pre root motion)
};

SyntheticScene generate_scene(uint64_t seed, int frames, int joints,
                              const std::string& difficulty);

// Ring of cameras around the subject.
std::vector<Camera> make_camera_ring(int count, int width, int height,
                                     double radius, double target_height,
                                     double focal);

// Independent quadrature (running-product transmittance form).
void oracle_composite(std::span<const double> colors,
                      std::span<const double> densities,
                      std::span<const double> depths, double far,
                      double out_rgb[3], double& out_alpha);

// Renders the analytic scene: RGBA image, colors composited over black,
// alpha in the fourth channel.
Image oracle_render(const SyntheticScene& scene, const Camera& cam, int frame,
                    int samples);

}  // namespace slrf
