#pragma once

#include <array>
#include <cmath>

namespace slrf {

struct Vec3 {
  double x = 0, y = 0, z = 0;

  Vec3() = default;
  Vec3(double x_, double y_, double z_) : x(x_), y(y_), z(z_) {}

  Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
  Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
  Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
  Vec3& operator+=(const Vec3& o) { x += o.x; y += o.y; z += o.z; return *this; }

  double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
  Vec3 cross(const Vec3& o) const {
    return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
  }
  double norm() const { return std::sqrt(dot(*this)); }
  Vec3 normalized() const {
    double n = norm();
    return n > 0 ? Vec3{x / n, y / n, z / n} : Vec3{};
  }
};

// 3x4 affine transform (rotation-ish block + translation), the working form
// of every SE(3) element and of their linear blends.
struct Transform {
  // row-major 3x3 linear part
  std::array<double, 9> a{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 t;

  static Transform identity() { return {}; }
  static Transform translation(const Vec3& d) {
    Transform m;
    m.t = d;
    return m;
  }

  Vec3 apply(const Vec3& p) const {
    return {a[0] * p.x + a[1] * p.y + a[2] * p.z + t.x,
            a[3] * p.x + a[4] * p.y + a[5] * p.z + t.y,
            a[6] * p.x + a[7] * p.y + a[8] * p.z + t.z};
  }

  Vec3 apply_linear(const Vec3& p) const {
    return {a[0] * p.x + a[1] * p.y + a[2] * p.z,
            a[3] * p.x + a[4] * p.y + a[5] * p.z,
            a[6] * p.x + a[7] * p.y + a[8] * p.z};
  }

  Transform compose(const Transform& o) const {  // this ∘ o
    Transform r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        r.a[i * 3 + j] = 0;
        for (int k = 0; k < 3; ++k) r.a[i * 3 + j] += a[i * 3 + k] * o.a[k * 3 + j];
      }
    r.t = apply(o.t);
    return r;
  }

  double det() const {
    return a[0] * (a[4] * a[8] - a[5] * a[7]) -
           a[1] * (a[3] * a[8] - a[5] * a[6]) +
           a[2] * (a[3] * a[7] - a[4] * a[6]);
  }

  // exact inverse of the (generally non-orthonormal) linear blend
  bool invert(Transform& out) const {
    double d = det();
    if (std::abs(d) < 1e-12) return false;
    double inv = 1.0 / d;
    out.a[0] = (a[4] * a[8] - a[5] * a[7]) * inv;
    out.a[1] = (a[2] * a[7] - a[1] * a[8]) * inv;
    out.a[2] = (a[1] * a[5] - a[2] * a[4]) * inv;
    out.a[3] = (a[5] * a[6] - a[3] * a[8]) * inv;
    out.a[4] = (a[0] * a[8] - a[2] * a[6]) * inv;
    out.a[5] = (a[2] * a[3] - a[0] * a[5]) * inv;
    out.a[6] = (a[3] * a[7] - a[4] * a[6]) * inv;
    out.a[7] = (a[1] * a[6] - a[0] * a[7]) * inv;
    out.a[8] = (a[0] * a[4] - a[1] * a[3]) * inv;
    Vec3 it = out.apply_linear(t);
    out.t = {-it.x, -it.y, -it.z};
    return true;
  }
};

// Rodrigues rotation from an axis-angle vector.
inline Transform rotation_from_axis_angle(const Vec3& aa) {
  double angle = aa.norm();
  Transform m;
  if (angle < 1e-12) return m;
  Vec3 u = aa * (1.0 / angle);
  double c = std::cos(angle), s = std::sin(angle), ic = 1.0 - c;
  m.a = {c + u.x * u.x * ic,       u.x * u.y * ic - u.z * s, u.x * u.z * ic + u.y * s,
         u.y * u.x * ic + u.z * s, c + u.y * u.y * ic,       u.y * u.z * ic - u.x * s,
         u.z * u.x * ic - u.y * s, u.z * u.y * ic + u.x * s, c + u.z * u.z * ic};
  return m;
}

inline double point_segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  Vec3 ab = b - a;
  double len2 = ab.dot(ab);
  double t = len2 > 0 ? (p - a).dot(ab) / len2 : 0.0;
  t = t < 0 ? 0 : (t > 1 ? 1 : t);
  return (p - (a + ab * t)).norm();
}

}  // namespace slrf
