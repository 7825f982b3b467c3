#include "slrf/camera.hpp"

namespace slrf {

Camera make_lookat_camera(const Vec3& eye, const Vec3& target, double focal,
                          int width, int height, double near, double far) {
  Vec3 fwd = (target - eye).normalized();
  Vec3 world_up{0, 1, 0};
  Vec3 right = fwd.cross(world_up).normalized();
  if (right.norm() < 1e-9) right = Vec3{1, 0, 0};
  Vec3 down = fwd.cross(right).normalized();  // camera y points down in world

  Camera cam;
  cam.fx = cam.fy = focal;
  cam.cx = width * 0.5;
  cam.cy = height * 0.5;
  cam.width = width;
  cam.height = height;
  cam.near = near;
  cam.far = far;
  cam.world_from_camera.a = {right.x, down.x, fwd.x,
                             right.y, down.y, fwd.y,
                             right.z, down.z, fwd.z};
  cam.world_from_camera.t = eye;
  cam.validate();
  return cam;
}

}  // namespace slrf
