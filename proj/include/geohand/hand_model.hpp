#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "geohand/tensor.hpp"

// Parametric hand: a procedurally generated "tube hand" mesh (palm slab plus
// five 3-segment digit chains) deformed by 10 linear shape directions and
// posed by 16 rotations via linear blend skinning. 21 joints are regressed
// from the posed vertices; 5 of them are fingertips.

namespace geohand {

constexpr int kJoints = 21;
constexpr int kNodes = 16;   // articulated: 1 root + 5 digits x 3 segments
constexpr int kEdges = 20;
constexpr int kBetas = 10;

// every consumer (data generator, model, evaluator) must build the same
// template, so its seed is a fixed project constant rather than a config key
constexpr uint64_t kTemplateSeed = 90210;
constexpr int kThetaDim = kNodes * 6;   // 96 in the 6-value rotation encoding
constexpr int kParamDim = kThetaDim + kBetas + 3;  // 109 with the camera

struct HandTemplate {
  int vertex_count = 0;
  std::vector<double> rest;        // V*3 rest vertices
  std::vector<double> skin;        // V*16 weights, rows sum to 1
  std::vector<double> shape_dirs;  // 10*V*3 linear displacement fields
  std::vector<double> joint_reg;   // 21*V
  std::vector<double> node_reg;    // 16*V articulation pivots
  std::array<int, kNodes> parent{};
  std::array<std::array<int, 2>, kEdges> edges{};
  std::array<int, 5> fingertips{};
  std::vector<std::array<int, 3>> faces;

  // constants packaged for the tape ops
  Tensor rest_t;        // (V,3)
  Tensor skin_t;        // (V,16)
  Tensor shape_flat_t;  // (10, 3V)
  Tensor joint_reg_t;   // (21,V)
  Tensor node_reg_t;    // (16,V)

  // builds the tube hand; vertex_count must decompose as 2ab + 20r
  static HandTemplate tube(int vertex_count, uint64_t seed);

  void validate() const;  // throws when any structural invariant is broken
};

struct HandParamsBatch {
  Tensor rot;    // (B,16,3,3)
  Tensor betas;  // (B,10)
  Tensor cam;    // (B,3): scale, tx, ty
};

struct HandOutputBatch {
  Tensor joints;  // (B,21,3)
  Tensor verts;   // (B,V,3)
};

// Gram-Schmidt map from the 6-value rotation encoding; input (...,6),
// output (...,3,3) with the two encoded vectors as the first two columns.
Tensor rot6d_to_matrix(const Tensor& r6);

// identity rotation in the 6-value encoding
std::array<double, 6> identity_rot6d();

// LBS forward pass; throws when any rotation fails the orthogonality check
HandOutputBatch forward_kinematics(const HandTemplate& tmpl, const HandParamsBatch& params);

// weak perspective: U = s * (x,y) + (tx,ty); points (B,K,3), cam (B,3)
Tensor project(const Tensor& points, const Tensor& cam);

// Euclidean length of each template edge under the given joints (B,21,3) -> (B,20)
Tensor bone_lengths(const Tensor& joints, const HandTemplate& tmpl);

// flattened rotation views used by the parameter losses
Tensor flatten_root_rot(const Tensor& rot);   // (B,16,3,3) -> (B,9)
Tensor flatten_finger_rot(const Tensor& rot); // (B,16,3,3) -> (B,135)

// axis-angle to rotation matrix (plain math, used by the data generator)
std::array<double, 9> rodrigues(double ax, double ay, double az);

}  // namespace geohand
