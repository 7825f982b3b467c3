#pragma once

#include "slrf/common.hpp"
#include "slrf/geometry.hpp"

namespace slrf {

// Pinhole camera. world_from_camera maps camera space (x right, y down,
// z forward) into world space.
struct Camera {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;
  double near = 0.1, far = 10.0;
  Transform world_from_camera;

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) fail_usage("camera focal lengths must be positive");
    if (!(near < far)) fail_usage("camera near plane must precede far plane");
    if (width <= 0 || height <= 0) fail_usage("camera resolution must be positive");
  }

  Vec3 position() const { return world_from_camera.t; }
  Vec3 forward() const { return world_from_camera.apply_linear({0, 0, 1}); }

  // unit world-space direction through the center of pixel (px, py)
  Vec3 pixel_direction(double px, double py) const {
    Vec3 d{(px + 0.5 - cx) / fx, (py + 0.5 - cy) / fy, 1.0};
    return world_from_camera.apply_linear(d).normalized();
  }

  Camera scaled(int new_width, int new_height) const {
    Camera c = *this;
    double sx = static_cast<double>(new_width) / width;
    double sy = static_cast<double>(new_height) / height;
    c.fx *= sx; c.cx *= sx; c.fy *= sy; c.cy *= sy;
    c.width = new_width;
    c.height = new_height;
    return c;
  }
};

// Camera at `eye` looking toward `target`, world +y treated as up.
Camera make_lookat_camera(const Vec3& eye, const Vec3& target, double focal,
                          int width, int height, double near, double far);

}  // namespace slrf
