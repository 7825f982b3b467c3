#include "slrf/scene.hpp"

#include <cmath>

#include "slrf/common.hpp"
#include "slrf/parallel.hpp"
#include "slrf/renderer.hpp"

namespace slrf {

namespace {
constexpr double kTau = 6.283185307179586476925286766559;
}

SyntheticScene generate_scene(uint64_t seed, int frames, int joints,
                              const std::string& difficulty) {
  if (frames < 1) fail_usage("generate_scene: need at least one frame");
  if (difficulty != "dynamic" && difficulty != "static")
    fail_usage("generate_scene: difficulty must be 'dynamic' or 'static'");

  SyntheticScene sc;
  sc.seed = seed;
  sc.difficulty = difficulty;
  sc.tpl = make_capsule_template(joints);

  Rng rng(seed, 7);
  auto jitter = [&](double v, double amp) {
    return v + (rng.next_double() * 2.0 - 1.0) * amp;
  };
  auto jcolor = [&](double r, double g, double b) {
    return Vec3{jitter(r, 0.05), jitter(g, 0.05), jitter(b, 0.05)};
  };

  Vec3 torso_c = jcolor(0.75, 0.22, 0.20);
  Vec3 head_c = jcolor(0.85, 0.66, 0.50);
  Vec3 arm_c = jcolor(0.20, 0.36, 0.80);
  Vec3 leg_c = jcolor(0.25, 0.28, 0.40);
  sc.skirt_color = jcolor(0.10, 0.62, 0.55);
  sc.sway_phase = rng.next_double() * kTau;
  sc.detail_phase = rng.next_double() * kTau;

  sc.capsules = {
      {0, {0.0, 0.95, 0.0}, {0.0, 1.42, 0.0}, 0.13, torso_c},
      {1, {0.0, 1.42, 0.0}, {0.0, 1.70, 0.0}, 0.095, head_c},
      {2, {-0.21, 1.36, 0.0}, {-0.34, 0.84, 0.0}, 0.048, arm_c},
      {3, {0.21, 1.36, 0.0}, {0.34, 0.84, 0.0}, 0.048, arm_c},
  };
  if (joints == 6) {
    sc.capsules.push_back({4, {-0.10, 0.92, 0.0}, {-0.11, 0.10, 0.0}, 0.062, leg_c});
    sc.capsules.push_back({5, {0.10, 0.92, 0.0}, {0.11, 0.10, 0.0}, 0.062, leg_c});
    sc.has_skirt = true;
  } else {
    sc.has_skirt = false;  // 4-joint figure has no hip region to dress
  }

  bool dynamic = difficulty == "dynamic";
  int J = sc.tpl.joint_count();
  sc.poses.reserve(frames);
  double arm_phase = rng.next_double() * kTau;
  for (int t = 0; t < frames; ++t) {
    double tn = static_cast<double>(t) / frames;
    Pose p;
    p.frame_index = t;
    p.time_norm = tn;
    p.theta.assign(3 * J, 0.0);
    if (dynamic) {
      double arm = 0.45 * std::sin(kTau * tn + arm_phase);
      p.theta[3 * 1 + 0] = 0.10 * std::sin(2.0 * kTau * tn + 0.4);  // head nod
      p.theta[3 * 2 + 2] = arm;                                     // arms swing
      p.theta[3 * 3 + 2] = -arm;
      if (J == 6) {
        double leg = 0.18 * std::sin(kTau * tn + arm_phase + kTau / 4);
        p.theta[3 * 4 + 0] = leg;
        p.theta[3 * 5 + 0] = -leg;
      }
      p.root_translation = {0.02 * std::sin(kTau * tn),
                            0.03 * std::sin(2.0 * kTau * tn), 0.0};
    }
    sc.poses.push_back(std::move(p));
  }
  return sc;
}

double SyntheticScene::brightness(double time_norm) const {
  return 1.0 + detail_amp * std::sin(kTau * detail_cycles * time_norm + detail_phase);
}

Vec3 SyntheticScene::skirt_sway(const Pose& pose) const {
  double tn = pose.time_norm;
  double arm = pose.theta.size() > 8 ? pose.theta[3 * 2 + 2] : 0.0;
  return {sway_amp_x * std::sin(kTau * tn + sway_phase) + sway_pose_gain * std::sin(arm),
          0.0,
          sway_amp_z * std::sin(2.0 * kTau * tn + sway_phase)};
}

SyntheticScene::Posed SyntheticScene::pose_primitives(int frame) const {
  if (frame < 0 || frame >= static_cast<int>(poses.size()))
    fail_usage("pose_primitives: frame out of range");
  const Pose& pose = poses[frame];
  std::vector<Transform> joints = joint_transforms(tpl, pose);
  Posed fp;
  fp.time_norm = pose.time_norm;
  fp.has_skirt = has_skirt;
  fp.caps = capsules;
  for (auto& c : fp.caps) {
    c.a = joints[c.joint].apply(c.a);
    c.b = joints[c.joint].apply(c.b);
  }
  fp.skirt_center = skirt_center_rest + pose.root_translation;
  if (difficulty == "dynamic") fp.skirt_center += skirt_sway(pose);
  return fp;
}

namespace {

double capsule_sdf(const SyntheticScene::Capsule& c, const Vec3& p) {
  return point_segment_distance(p, c.a, c.b) - c.radius;
}

double skirt_sdf(const Vec3& p, const Vec3& center, const Vec3& axes) {
  Vec3 q{(p.x - center.x) / axes.x, (p.y - center.y) / axes.y,
         (p.z - center.z) / axes.z};
  double f = q.norm();
  double scale = std::min(axes.x, std::min(axes.y, axes.z));
  return (f - 1.0) * scale;
}

}  // namespace

double SyntheticScene::density_at(const Posed& fp, const Vec3& p) const {
  double sdf = 1e9;
  for (const auto& c : fp.caps) sdf = std::min(sdf, capsule_sdf(c, p));
  if (fp.has_skirt)
    sdf = std::min(sdf, skirt_sdf(p, fp.skirt_center, skirt_axes));
  return density_max / (1.0 + std::exp(sdf / shell_softness));
}

Vec3 SyntheticScene::color_at(const Posed& fp, const Vec3& p) const {
  // nearest primitive's base color
  double best = 1e9;
  Vec3 base{0, 0, 0};
  bool pulsing = false;
  for (size_t i = 0; i < fp.caps.size(); ++i) {
    double d = capsule_sdf(fp.caps[i], p);
    if (d < best) {
      best = d;
      base = fp.caps[i].color;
      pulsing = fp.caps[i].joint == 0;  // torso brightness pulses
    }
  }
  if (fp.has_skirt) {
    double d = skirt_sdf(p, fp.skirt_center, skirt_axes);
    if (d < best) {
      best = d;
      base = skirt_color;
      pulsing = true;
    }
  }

  // lambert-ish shading from the sdf gradient
  const double h = 1e-3;
  auto sdf_all = [&](const Vec3& q) {
    double s = 1e9;
    for (const auto& c : fp.caps) s = std::min(s, capsule_sdf(c, q));
    if (fp.has_skirt) s = std::min(s, skirt_sdf(q, fp.skirt_center, skirt_axes));
    return s;
  };
  Vec3 n{sdf_all({p.x + h, p.y, p.z}) - sdf_all({p.x - h, p.y, p.z}),
         sdf_all({p.x, p.y + h, p.z}) - sdf_all({p.x, p.y - h, p.z}),
         sdf_all({p.x, p.y, p.z + h}) - sdf_all({p.x, p.y, p.z - h})};
  n = n.normalized();
  Vec3 light = Vec3{0.45, 1.0, 0.35}.normalized();
  double lambert = std::max(0.0, n.dot(light));
  double shade = 0.55 + 0.45 * lambert;

  double bright = pulsing ? brightness(fp.time_norm) : 1.0;
  auto clamp01 = [](double v) { return v < 0 ? 0 : (v > 1 ? 1 : v); };
  return {clamp01(base.x * shade * bright), clamp01(base.y * shade * bright),
          clamp01(base.z * shade * bright)};
}

void SyntheticScene::bounds(const Posed& fp, Vec3& lo, Vec3& hi) const {
  lo = {1e9, 1e9, 1e9};
  hi = {-1e9, -1e9, -1e9};
  auto grow = [&](const Vec3& p, double r) {
    lo.x = std::min(lo.x, p.x - r); hi.x = std::max(hi.x, p.x + r);
    lo.y = std::min(lo.y, p.y - r); hi.y = std::max(hi.y, p.y + r);
    lo.z = std::min(lo.z, p.z - r); hi.z = std::max(hi.z, p.z + r);
  };
  for (const auto& c : fp.caps) {
    grow(c.a, c.radius);
    grow(c.b, c.radius);
  }
  if (fp.has_skirt) {
    double r = std::max(skirt_axes.x, std::max(skirt_axes.y, skirt_axes.z));
    grow(fp.skirt_center, r);
  }
  // sigmoid shell bleeds slightly past the surface
  double margin = 8.0 * shell_softness;
  lo = lo - Vec3{margin, margin, margin};
  hi = hi + Vec3{margin, margin, margin};
}

std::vector<Camera> make_camera_ring(int count, int width, int height,
                                     double radius, double target_height,
                                     double focal) {
  std::vector<Camera> cams;
  cams.reserve(count);
  Vec3 target{0.0, target_height, 0.0};
  for (int c = 0; c < count; ++c) {
    double ang = kTau * c / count;
    Vec3 eye{radius * std::sin(ang), target_height + 0.15,
             radius * std::cos(ang)};
    cams.push_back(make_lookat_camera(eye, target, focal, width, height,
                                      radius - 1.3, radius + 1.3));
  }
  return cams;
}

void oracle_composite(std::span<const double> colors,
                      std::span<const double> densities,
                      std::span<const double> depths, double far,
                      double out_rgb[3], double& out_alpha) {
  // independent of the engine compositor: running transmittance product
  size_t S = densities.size();
  double transmit = 1.0;
  out_rgb[0] = out_rgb[1] = out_rgb[2] = 0.0;
  out_alpha = 0.0;
  for (size_t k = 0; k < S; ++k) {
    double delta = (k + 1 < S ? depths[k + 1] : far) - depths[k];
    double alpha = 1.0 - std::exp(-densities[k] * delta);
    double w = transmit * alpha;
    out_rgb[0] += w * colors[k * 3 + 0];
    out_rgb[1] += w * colors[k * 3 + 1];
    out_rgb[2] += w * colors[k * 3 + 2];
    out_alpha += w;
    transmit *= 1.0 - alpha;
  }
}

Image oracle_render(const SyntheticScene& scene, const Camera& cam, int frame,
                    int samples) {
  cam.validate();
  SyntheticScene::Posed fp = scene.pose_primitives(frame);
  Vec3 lo, hi;
  scene.bounds(fp, lo, hi);

  Image img(cam.width, cam.height, 4);
  Vec3 origin = cam.position();

  ThreadPool::instance().parallel_for(cam.height, 1, [&](int64_t y0, int64_t y1) {
    std::vector<double> cols(static_cast<size_t>(samples) * 3);
    std::vector<double> dens(static_cast<size_t>(samples));
    std::vector<double> deps(static_cast<size_t>(samples));
    for (int64_t y = y0; y < y1; ++y) {
      for (int x = 0; x < cam.width; ++x) {
        Vec3 dir = cam.pixel_direction(x, static_cast<int>(y));
        double tn, tf;
        if (!ray_box_intersect(origin, dir, lo, hi, tn, tf)) continue;
        tn = std::max(tn, cam.near);
        tf = std::min(tf, cam.far);
        if (!(tf > tn)) continue;
        double bin = (tf - tn) / samples;
        for (int s = 0; s < samples; ++s) {
          double t = tn + (s + 0.5) * bin;
          deps[s] = t;
          Vec3 p = origin + dir * t;
          double d = scene.density_at(fp, p);
          dens[s] = d;
          if (d > 1e-4) {
            Vec3 c = scene.color_at(fp, p);
            cols[s * 3 + 0] = c.x;
            cols[s * 3 + 1] = c.y;
            cols[s * 3 + 2] = c.z;
          } else {
            cols[s * 3 + 0] = cols[s * 3 + 1] = cols[s * 3 + 2] = 0.0;
          }
        }
        double rgb[3], alpha;
        oracle_composite(cols, dens, deps, tf, rgb, alpha);
        img.at(x, static_cast<int>(y), 0) = static_cast<float>(rgb[0]);
        img.at(x, static_cast<int>(y), 1) = static_cast<float>(rgb[1]);
        img.at(x, static_cast<int>(y), 2) = static_cast<float>(rgb[2]);
        img.at(x, static_cast<int>(y), 3) = static_cast<float>(alpha);
      }
    }
  });
  return img;
}

}  // namespace slrf
