#include "geohand/losses.hpp"

#include <algorithm>
#include <cmath>

#include "geohand/ops.hpp"

namespace geohand {

namespace {

void check_binary_mask(const Tensor& m, const char* who) {
  for (int64_t i = 0; i < m.numel(); ++i) {
    double v = m.data()[i];
    if (v != 0.0 && v != 1.0)
      fail(std::string(who) + ": mask entries must be 0 or 1, found " + std::to_string(v));
  }
}

// per-sample factor m_b / max(count * m_b, 1) as a constant tensor
Tensor mask_scale(const Tensor& m_xyz, int count) {
  int B = m_xyz.extent(0);
  Tensor s = Tensor::zeros({B});
  for (int b = 0; b < B; ++b) {
    double m = m_xyz.data()[b];
    s.data()[b] = m / std::max(count * m, 1.0);
  }
  return s;
}

Tensor root_relative(const Tensor& joints) {
  int B = joints.extent(0), K = joints.extent(1);
  Tensor root = ops::broadcast_to(ops::slice(joints, 1, 0, 1), {B, K, 3});
  return ops::sub(joints, root);
}

}  // namespace

SupervisionMasks SupervisionMasks::all_valid(int batch) {
  return {Tensor::full({batch, kJoints}, 1.0), Tensor::full({batch}, 1.0)};
}

Tensor loss_2d(const Tensor& u_pred, const Tensor& u_gt, const Tensor& m_uv) {
  if (u_pred.shape() != u_gt.shape() || u_pred.dim() != 3 || u_pred.extent(1) != kJoints ||
      u_pred.extent(2) != 2)
    fail("loss_2d: expected matching (B,21,2) inputs, got " + shape_str(u_pred.shape()) +
         " and " + shape_str(u_gt.shape()));
  int B = u_pred.extent(0);
  if (m_uv.shape() != std::vector<int>{B, kJoints})
    fail("loss_2d: mask must be (B,21), got " + shape_str(m_uv.shape()));
  check_binary_mask(m_uv, "loss_2d");

  Tensor per_joint = ops::reduce_sum(ops::abs(ops::sub(u_pred, u_gt)), 2);  // (B,21)
  Tensor masked = ops::mul(per_joint, m_uv);
  Tensor per_sample = ops::reduce_sum(masked, 1);  // (B)

  Tensor inv_den = Tensor::zeros({B});
  for (int b = 0; b < B; ++b) {
    double cnt = 0.0;
    for (int j = 0; j < kJoints; ++j) cnt += m_uv.data()[b * kJoints + j];
    inv_den.data()[b] = 1.0 / std::max(cnt, 1.0);
  }
  return ops::mean_all(ops::mul(per_sample, inv_den));
}

Tensor loss_3d_joint(const Tensor& j_pred, const Tensor& j_gt, const Tensor& m_xyz,
                     const std::array<int, 5>& fingertips) {
  if (j_pred.shape() != j_gt.shape() || j_pred.dim() != 3 || j_pred.extent(1) != kJoints ||
      j_pred.extent(2) != 3)
    fail("loss_3d_joint: expected matching (B,21,3) inputs");
  int B = j_pred.extent(0);
  if (m_xyz.shape() != std::vector<int>{B})
    fail("loss_3d_joint: mask must be (B), got " + shape_str(m_xyz.shape()));
  check_binary_mask(m_xyz, "loss_3d_joint");

  Tensor diff = ops::sub(root_relative(j_pred), root_relative(j_gt));
  Tensor per_joint = ops::reduce_sum(ops::abs(diff), 2);  // (B,21)

  Tensor weights = Tensor::full({1, kJoints}, 1.0);
  for (int tip : fingertips) weights.data()[tip] = kFingertipWeight;
  Tensor weighted = ops::mul(per_joint, ops::broadcast_to(weights, {B, kJoints}));

  Tensor per_sample = ops::reduce_sum(weighted, 1);  // (B)
  return ops::mean_all(ops::mul(per_sample, mask_scale(m_xyz, kJoints)));
}

Tensor loss_bone(const Tensor& j_pred, const Tensor& j_gt, const HandTemplate& tmpl,
                 const Tensor& m_xyz) {
  int B = j_pred.extent(0);
  if (m_xyz.shape() != std::vector<int>{B})
    fail("loss_bone: mask must be (B), got " + shape_str(m_xyz.shape()));
  check_binary_mask(m_xyz, "loss_bone");
  Tensor d_pred = bone_lengths(j_pred, tmpl);
  Tensor d_gt = bone_lengths(j_gt, tmpl);
  Tensor per_sample = ops::reduce_sum(ops::abs(ops::sub(d_pred, d_gt)), 1);  // (B)
  return ops::mean_all(ops::mul(per_sample, mask_scale(m_xyz, kEdges)));
}

Tensor loss_vert(const Tensor& v_pred, const Tensor& v_gt, const Tensor& root_pred,
                 const Tensor& root_gt) {
  if (v_pred.shape() != v_gt.shape() || v_pred.dim() != 3 || v_pred.extent(2) != 3)
    fail("loss_vert: expected matching (B,V,3) inputs");
  int B = v_pred.extent(0), V = v_pred.extent(1);
  if (root_pred.shape() != std::vector<int>{B, 1, 3} ||
      root_gt.shape() != std::vector<int>{B, 1, 3})
    fail("loss_vert: roots must be (B,1,3)");
  Tensor rel_pred = ops::sub(v_pred, ops::broadcast_to(root_pred, {B, V, 3}));
  Tensor rel_gt = ops::sub(v_gt, ops::broadcast_to(root_gt, {B, V, 3}));
  return ops::mean_all(ops::abs(ops::sub(rel_pred, rel_gt)));
}

namespace {

Tensor truncated_smooth_l1(const Tensor& pred, const Tensor& gt, int dims, double delta,
                           const char* who) {
  if (pred.shape() != gt.shape() || pred.dim() != 2 || pred.extent(1) != dims)
    fail(std::string(who) + ": expected matching (B," + std::to_string(dims) + ") inputs, got " +
         shape_str(pred.shape()) + " and " + shape_str(gt.shape()));
  Tensor rho = ops::smooth_l1(ops::sub(pred, gt), delta);
  Tensor per_sample = ops::scale(ops::reduce_sum(rho, 1), 1.0 / dims);  // (B)
  return ops::mean_all(ops::clamp_max(per_sample, kParamTruncation));
}

}  // namespace

std::array<Tensor, 3> loss_params(const Tensor& g_pred, const Tensor& g_gt,
                                  const Tensor& p_pred, const Tensor& p_gt,
                                  const Tensor& b_pred, const Tensor& b_gt, double delta) {
  return {truncated_smooth_l1(g_pred, g_gt, 9, delta, "loss_global"),
          truncated_smooth_l1(p_pred, p_gt, (kNodes - 1) * 9, delta, "loss_pose"),
          truncated_smooth_l1(b_pred, b_gt, kBetas, delta, "loss_betas")};
}

Tensor loss_shape_reg(const Tensor& b_pred) {
  if (b_pred.dim() != 2) fail("loss_shape_reg: expected (B,10) input");
  return ops::mean_all(ops::l2norm_lastdim(b_pred));
}

LossBreakdown total_loss(const HandPrediction& pred, const HandTargets& gt,
                         const SupervisionMasks& masks, const HandTemplate& tmpl,
                         const LossWeights& w, double delta) {
  HandTemplate const& t = tmpl;
  Tensor l2d = loss_2d(pred.u, gt.u, masks.m_uv);
  Tensor l3d = loss_3d_joint(pred.joints, gt.joints, masks.m_xyz, t.fingertips);
  Tensor lbone = loss_bone(pred.joints, gt.joints, t, masks.m_xyz);
  Tensor lvert = loss_vert(pred.verts, gt.verts, ops::slice(pred.joints, 1, 0, 1),
                           ops::slice(gt.joints, 1, 0, 1));
  auto lp = loss_params(pred.g, gt.g, pred.p, gt.p, pred.betas, gt.betas, delta);
  Tensor lshape = loss_shape_reg(pred.betas);

  Tensor total = ops::scale(l2d, w.l2d);
  total = ops::add(total, ops::scale(l3d, w.l3d));
  total = ops::add(total, ops::scale(lbone, w.bone));
  total = ops::add(total, ops::scale(lvert, w.vert));
  total = ops::add(total, ops::scale(lp[0], w.global_rot));
  total = ops::add(total, ops::scale(lp[1], w.pose));
  total = ops::add(total, ops::scale(lp[2], w.betas));
  total = ops::add(total, ops::scale(lshape, w.shape));

  LossBreakdown out;
  out.total = total;
  out.l2d = l2d.value();
  out.l3d = l3d.value();
  out.bone = lbone.value();
  out.vert = lvert.value();
  out.global_rot = lp[0].value();
  out.pose = lp[1].value();
  out.betas = lp[2].value();
  out.shape = lshape.value();
  return out;
}

}  // namespace geohand
