#pragma once

#include <string>
#include <vector>

#include "slrf/geometry.hpp"

namespace slrf {

struct BodyTemplate {
  std::vector<Vec3> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<Vec3> joint_rest;          // J rest positions
  std::vector<int> joint_parent;         // parent index, -1 for the root (joint 0)
  std::vector<std::vector<double>> skin_weights;  // per-vertex, length J, sums to 1

  int joint_count() const { return static_cast<int>(joint_rest.size()); }
  int vertex_count() const { return static_cast<int>(vertices.size()); }
  void validate() const;  // weight sums, tree structure, J >= 2
};

struct Pose {
  std::vector<double> theta;  // 3J axis-angle, joint-major
  Vec3 root_translation;
  int frame_index = 0;
  double time_norm = 0.0;  // t/T in [0, 1]
  void validate(int joints) const;
};

struct NodeSet {
  std::vector<Vec3> canonical;                 // n̄_i
  std::vector<std::vector<double>> skin;       // ω_i, length J each
  double sigma = 0.05;
  double epsilon = 0.001;

  int count() const { return static_cast<int>(canonical.size()); }
  double cutoff_radius() const;  // σ√(2 ln(1/ε))
};

struct AttentionMap {
  int joints = 0;
  std::vector<double> w;  // J*J row-major, rows sum to 1

  double at(int r, int c) const { return w[r * joints + c]; }
};

// Forward kinematics: world transform per joint, root carries the pose's
// root translation.
std::vector<Transform> joint_transforms(const BodyTemplate& tpl, const Pose& pose);

// Linear blend of the joint transforms with node skin weights (4x4 blend,
// no re-orthonormalization).
Transform blend_transforms(const std::vector<Transform>& joints,
                           const std::vector<double>& weights);

// Posed node position for one node: T_i (n̄_i + Δn_i).
Vec3 skin_node(const Transform& node_transform, const Vec3& canonical,
               const Vec3& delta);

// Greedy farthest point sampling over template vertices (seed = vertex 0);
// skin vectors are copied from the source vertices.
NodeSet sample_nodes(const BodyTemplate& tpl, int count, double sigma,
                     double epsilon);

// Pose condition vector θ_i = (W·ω_i) ∘ θ with the root orientation zeroed.
std::vector<double> pose_condition(const Pose& pose,
                                   const std::vector<double>& skin,
                                   const AttentionMap& attention);

// Fixed attention map: one-hop kinematic-tree adjacency smoothing,
// row-normalized.
AttentionMap default_attention(const BodyTemplate& tpl);

// Procedural capsule humanoid. joints = 4 (torso, head, two arms) or
// 6 (adds legs). Deterministic.
BodyTemplate make_capsule_template(int joints = 6);

}  // namespace slrf
