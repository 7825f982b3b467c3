#include "slrf/body.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "slrf/common.hpp"

namespace slrf {

void BodyTemplate::validate() const {
  int J = joint_count();
  if (J < 2) fail_usage("body template needs at least 2 joints");
  if (static_cast<int>(joint_parent.size()) != J)
    fail_usage("joint parent table size mismatch");
  if (joint_parent[0] != -1) fail_usage("joint 0 must be the root");
  for (int j = 1; j < J; ++j)
    if (joint_parent[j] < 0 || joint_parent[j] >= j)
      fail_usage("joint parents must form a tree ordered root-first");
  if (skin_weights.size() != vertices.size())
    fail_usage("skin weight count must match vertex count");
  for (const auto& w : skin_weights) {
    if (static_cast<int>(w.size()) != J)
      fail_usage("skin weight vector length must equal joint count");
    double s = 0;
    for (double v : w) {
      if (v < 0) fail_usage("skin weights must be nonnegative");
      s += v;
    }
    if (std::abs(s - 1.0) > 1e-6)
      fail_usage("skin weights must sum to 1 (got " + std::to_string(s) + ")");
  }
}

void Pose::validate(int joints) const {
  if (static_cast<int>(theta.size()) != 3 * joints)
    fail_usage("pose theta length must be 3J");
  for (double v : theta)
    if (!std::isfinite(v)) fail_numeric("non-finite pose angle");
  if (!(time_norm >= 0.0 && time_norm <= 1.0))
    fail_usage("pose time_norm must lie in [0, 1]");
}

double NodeSet::cutoff_radius() const {
  return sigma * std::sqrt(2.0 * std::log(1.0 / epsilon));
}

std::vector<Transform> joint_transforms(const BodyTemplate& tpl, const Pose& pose) {
  pose.validate(tpl.joint_count());
  int J = tpl.joint_count();
  std::vector<Transform> world(J);
  for (int j = 0; j < J; ++j) {
    Vec3 aa{pose.theta[3 * j], pose.theta[3 * j + 1], pose.theta[3 * j + 2]};
    Transform rot = rotation_from_axis_angle(aa);
    // rotate about the joint rest position: x -> R (x - r) + r
    Transform local = rot;
    local.t = tpl.joint_rest[j] - rot.apply_linear(tpl.joint_rest[j]);
    if (j == 0) {
      world[0] = Transform::translation(pose.root_translation).compose(local);
    } else {
      world[j] = world[tpl.joint_parent[j]].compose(local);
    }
  }
  return world;
}

Transform blend_transforms(const std::vector<Transform>& joints,
                           const std::vector<double>& weights) {
  if (joints.size() != weights.size())
    fail_usage("blend_transforms: weight count mismatch");
  double sum = 0;
  Transform out;
  out.a.fill(0);
  out.t = {};
  for (size_t j = 0; j < joints.size(); ++j) {
    double w = weights[j];
    sum += w;
    if (w == 0) continue;
    for (int k = 0; k < 9; ++k) out.a[k] += w * joints[j].a[k];
    out.t += joints[j].t * w;
  }
  if (std::abs(sum - 1.0) > 1e-6)
    fail_usage("blend_transforms: weights must sum to 1");
  return out;
}

Vec3 skin_node(const Transform& node_transform, const Vec3& canonical,
               const Vec3& delta) {
  return node_transform.apply(canonical + delta);
}

NodeSet sample_nodes(const BodyTemplate& tpl, int count, double sigma,
                     double epsilon) {
  int V = tpl.vertex_count();
  if (count < 1 || count > V)
    fail_usage("sample_nodes: node count must lie in [1, vertex count]");
  if (!(sigma > 0)) fail_usage("sample_nodes: sigma must be positive");
  if (!(epsilon > 0 && epsilon < 1))
    fail_usage("sample_nodes: epsilon must lie in (0, 1)");

  std::vector<int> chosen;
  chosen.reserve(count);
  std::vector<double> min_d2(V, std::numeric_limits<double>::infinity());
  int cur = 0;  // deterministic seed vertex
  for (int k = 0; k < count; ++k) {
    chosen.push_back(cur);
    const Vec3& c = tpl.vertices[cur];
    int best = -1;
    double best_d2 = -1;
    for (int v = 0; v < V; ++v) {
      Vec3 d = tpl.vertices[v] - c;
      double d2 = d.dot(d);
      if (d2 < min_d2[v]) min_d2[v] = d2;
      if (min_d2[v] > best_d2) {  // ties resolve to the lowest index
        best_d2 = min_d2[v];
        best = v;
      }
    }
    cur = best;
  }

  NodeSet ns;
  ns.sigma = sigma;
  ns.epsilon = epsilon;
  ns.canonical.reserve(count);
  ns.skin.reserve(count);
  for (int idx : chosen) {
    ns.canonical.push_back(tpl.vertices[idx]);
    ns.skin.push_back(tpl.skin_weights[idx]);
  }
  return ns;
}

std::vector<double> pose_condition(const Pose& pose,
                                   const std::vector<double>& skin,
                                   const AttentionMap& attention) {
  int J = attention.joints;
  if (static_cast<int>(skin.size()) != J)
    fail_usage("pose_condition: skin vector length mismatch");
  std::vector<double> theta = pose.theta;
  theta[0] = theta[1] = theta[2] = 0.0;  // root orientation excluded
  std::vector<double> out(3 * J, 0.0);
  for (int j = 0; j < J; ++j) {
    double a = 0;
    for (int k = 0; k < J; ++k) a += attention.at(j, k) * skin[k];
    for (int c = 0; c < 3; ++c) out[3 * j + c] = a * theta[3 * j + c];
  }
  return out;
}

AttentionMap default_attention(const BodyTemplate& tpl) {
  int J = tpl.joint_count();
  AttentionMap map;
  map.joints = J;
  map.w.assign(static_cast<size_t>(J) * J, 0.0);
  for (int j = 0; j < J; ++j) {
    map.w[j * J + j] = 1.0;
    if (tpl.joint_parent[j] >= 0) map.w[j * J + tpl.joint_parent[j]] = 1.0;
    for (int k = 0; k < J; ++k)
      if (tpl.joint_parent[k] == j) map.w[j * J + k] = 1.0;
    double s = 0;
    for (int k = 0; k < J; ++k) s += map.w[j * J + k];
    for (int k = 0; k < J; ++k) map.w[j * J + k] /= s;
  }
  return map;
}

// ---------------------------------------------------------------------------
// procedural capsule humanoid

namespace {

struct Bone {
  int joint;
  Vec3 a, b;   // capsule segment endpoints
  double radius;
  int rings;   // sampling density along the axis
};

void sample_capsule(const Bone& bone, int around, std::vector<Vec3>& verts,
                    std::vector<std::array<int, 3>>& faces,
                    std::vector<int>& vert_bone, int bone_id) {
  Vec3 axis = (bone.b - bone.a).normalized();
  // build an orthonormal frame around the axis
  Vec3 up = std::abs(axis.y) < 0.9 ? Vec3{0, 1, 0} : Vec3{1, 0, 0};
  Vec3 u = axis.cross(up).normalized();
  Vec3 v = axis.cross(u).normalized();

  int base = static_cast<int>(verts.size());
  int rows = bone.rings;
  for (int r = 0; r <= rows; ++r) {
    double t = static_cast<double>(r) / rows;
    Vec3 center = bone.a + (bone.b - bone.a) * t;
    for (int s = 0; s < around; ++s) {
      double ang = 2.0 * M_PI * s / around;
      Vec3 p = center + (u * std::cos(ang) + v * std::sin(ang)) * bone.radius;
      verts.push_back(p);
      vert_bone.push_back(bone_id);
    }
  }
  // end caps (single apex points)
  int cap_a = static_cast<int>(verts.size());
  verts.push_back(bone.a - axis * bone.radius);
  vert_bone.push_back(bone_id);
  int cap_b = static_cast<int>(verts.size());
  verts.push_back(bone.b + axis * bone.radius);
  vert_bone.push_back(bone_id);

  auto ring_vert = [&](int r, int s) { return base + r * around + (s % around); };
  for (int r = 0; r < rows; ++r)
    for (int s = 0; s < around; ++s) {
      faces.push_back({ring_vert(r, s), ring_vert(r + 1, s), ring_vert(r, s + 1)});
      faces.push_back({ring_vert(r, s + 1), ring_vert(r + 1, s), ring_vert(r + 1, s + 1)});
    }
  for (int s = 0; s < around; ++s) {
    faces.push_back({cap_a, ring_vert(0, s), ring_vert(0, s + 1)});
    faces.push_back({cap_b, ring_vert(rows, s + 1), ring_vert(rows, s)});
  }
}

}  // namespace

BodyTemplate make_capsule_template(int joints) {
  if (joints != 4 && joints != 6)
    fail_usage("capsule template supports 4 or 6 joints");

  BodyTemplate tpl;
  // joint 0: pelvis/torso root; 1: neck/head; 2,3: shoulders; 4,5: hips
  Vec3 pelvis{0.0, 0.95, 0.0};
  Vec3 neck{0.0, 1.42, 0.0};
  tpl.joint_rest = {pelvis, neck, {-0.21, 1.36, 0.0}, {0.21, 1.36, 0.0}};
  tpl.joint_parent = {-1, 0, 0, 0};
  std::vector<Bone> bones = {
      {0, pelvis, neck, 0.13, 6},                                // torso
      {1, neck, {0.0, 1.70, 0.0}, 0.095, 3},                     // head
      {2, {-0.21, 1.36, 0.0}, {-0.34, 0.84, 0.0}, 0.048, 6},     // left arm
      {3, {0.21, 1.36, 0.0}, {0.34, 0.84, 0.0}, 0.048, 6},       // right arm
  };
  if (joints == 6) {
    tpl.joint_rest.push_back({-0.10, 0.92, 0.0});
    tpl.joint_rest.push_back({0.10, 0.92, 0.0});
    tpl.joint_parent.push_back(0);
    tpl.joint_parent.push_back(0);
    bones.push_back({4, {-0.10, 0.92, 0.0}, {-0.11, 0.10, 0.0}, 0.062, 8});
    bones.push_back({5, {0.10, 0.92, 0.0}, {0.11, 0.10, 0.0}, 0.062, 8});
  }

  std::vector<int> vert_bone;
  for (size_t b = 0; b < bones.size(); ++b)
    sample_capsule(bones[b], 12, tpl.vertices, tpl.faces, vert_bone,
                   static_cast<int>(b));

  // soft nearest-bone skinning
  int J = static_cast<int>(tpl.joint_rest.size());
  const double tau = 0.06;
  tpl.skin_weights.reserve(tpl.vertices.size());
  for (const Vec3& p : tpl.vertices) {
    std::vector<double> w(J, 0.0);
    for (const Bone& bone : bones) {
      double d = point_segment_distance(p, bone.a, bone.b) - bone.radius;
      if (d < 0) d = 0;
      w[bone.joint] += std::exp(-(d * d) / (2.0 * tau * tau));
    }
    double s = 0;
    for (double v : w) s += v;
    for (double& v : w) v /= s;
    tpl.skin_weights.push_back(std::move(w));
  }

  tpl.validate();
  return tpl;
}

}  // namespace slrf
