#pragma once

#include <array>

#include "geohand/hand_model.hpp"
#include "geohand/tensor.hpp"

// The eight-term training objective: masked 2D joints, root-relative weighted
// 3D joints, bone lengths, root-aligned vertices, smooth-L1 parameter terms
// with per-sample truncation, and the un-squared shape norm penalty.

namespace geohand {

struct LossWeights {
  double l2d = 1.0;
  double l3d = 5.0;
  double bone = 1.0;
  double vert = 0.1;
  double global_rot = 0.1;
  double pose = 0.1;
  double betas = 0.01;
  double shape = 0.05;
};

// binary validity flags; constants, never on the tape
struct SupervisionMasks {
  Tensor m_uv;   // (B,21)
  Tensor m_xyz;  // (B)
  static SupervisionMasks all_valid(int batch);
};

// one decode step's supervised quantities
struct HandPrediction {
  Tensor u;       // (B,21,2) projected joints
  Tensor joints;  // (B,21,3)
  Tensor verts;   // (B,V,3)
  Tensor g;       // (B,9)   flattened global rotation
  Tensor p;       // (B,135) flattened finger rotations
  Tensor betas;   // (B,10)
};

struct HandTargets {
  Tensor u;       // (B,21,2)
  Tensor joints;  // (B,21,3)
  Tensor verts;   // (B,V,3)
  Tensor g;       // (B,9)
  Tensor p;       // (B,135)
  Tensor betas;   // (B,10)
};

struct LossBreakdown {
  Tensor total;  // scalar, on the tape
  double l2d = 0, l3d = 0, bone = 0, vert = 0, global_rot = 0, pose = 0, betas = 0, shape = 0;
};

constexpr double kSmoothL1Delta = 0.05;
constexpr double kFingertipWeight = 2.5;
constexpr double kParamTruncation = 1.0;

Tensor loss_2d(const Tensor& u_pred, const Tensor& u_gt, const Tensor& m_uv);
Tensor loss_3d_joint(const Tensor& j_pred, const Tensor& j_gt, const Tensor& m_xyz,
                     const std::array<int, 5>& fingertips);
Tensor loss_bone(const Tensor& j_pred, const Tensor& j_gt, const HandTemplate& tmpl,
                 const Tensor& m_xyz);
// roots are (B,1,3) slices of the respective joint sets
Tensor loss_vert(const Tensor& v_pred, const Tensor& v_gt, const Tensor& root_pred,
                 const Tensor& root_gt);
// returns (L_global, L_pose, L_betas), each truncated at 1.0 per sample
std::array<Tensor, 3> loss_params(const Tensor& g_pred, const Tensor& g_gt,
                                  const Tensor& p_pred, const Tensor& p_gt,
                                  const Tensor& b_pred, const Tensor& b_gt,
                                  double delta = kSmoothL1Delta);
Tensor loss_shape_reg(const Tensor& b_pred);

LossBreakdown total_loss(const HandPrediction& pred, const HandTargets& gt,
                         const SupervisionMasks& masks, const HandTemplate& tmpl,
                         const LossWeights& w, double delta = kSmoothL1Delta);

}  // namespace geohand
