#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <vector>

#include "doctest.h"
#include "geohand/gradcheck.hpp"
#include "geohand/losses.hpp"
#include "geohand/ops.hpp"
#include "geohand/rng.hpp"

using namespace geohand;

namespace {

Tensor random_tensor(std::vector<int> shape, uint64_t seed, double stddev = 1.0) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& x : t.impl->data) x = rng.normal(0.0, stddev);
  return t;
}

// residuals bounded away from every non-differentiable knee: |r| in [lo, hi]
Tensor offset_from(const Tensor& base, uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  Tensor t = Tensor::zeros(base.shape());
  for (int64_t i = 0; i < t.numel(); ++i) {
    double mag = lo + (hi - lo) * rng.uniform();
    t.impl->data[i] = base.data()[i] + (rng.uniform() < 0.5 ? -mag : mag);
  }
  return t;
}

}  // namespace

TEST_CASE("perfect predictions cost nothing") {
  HandTemplate tmpl = HandTemplate::tube(120, 7);
  Tensor joints = random_tensor({2, kJoints, 3}, 3, 0.1);
  Tensor verts = random_tensor({2, 120, 3}, 5, 0.1);
  Tensor u = random_tensor({2, kJoints, 2}, 7, 0.3);
  Tensor g = random_tensor({2, 9}, 9, 0.5);
  Tensor p = random_tensor({2, 135}, 11, 0.5);
  Tensor betas = random_tensor({2, kBetas}, 13, 0.5);

  SupervisionMasks masks = SupervisionMasks::all_valid(2);
  HandPrediction pred{u, joints, verts, g, p, betas};
  HandTargets gt{u, joints, verts, g, p, betas};
  LossBreakdown lb = total_loss(pred, gt, masks, tmpl, LossWeights{});

  CHECK(lb.l2d == 0.0);
  CHECK(lb.l3d == 0.0);
  CHECK(lb.bone == 0.0);
  CHECK(lb.vert == 0.0);
  CHECK(lb.global_rot == 0.0);
  CHECK(lb.pose == 0.0);
  CHECK(lb.betas == 0.0);
  // the shape prior never vanishes for non-zero coefficients
  CHECK(lb.shape > 0.0);
  double expect_total = LossWeights{}.shape * lb.shape;
  CHECK(std::fabs(lb.total.value() - expect_total) < 1e-15);
}

TEST_CASE("masked 2d joint loss by hand") {
  Tensor u_gt = random_tensor({1, kJoints, 2}, 17, 0.2);
  Tensor u_pred = random_tensor({1, kJoints, 2}, 19, 0.2);  // garbage at masked joints
  // copy the single valid joint, then offset it by (0.3, -0.4)
  u_pred.impl->data[3 * 2 + 0] = u_gt.data()[3 * 2 + 0] + 0.3;
  u_pred.impl->data[3 * 2 + 1] = u_gt.data()[3 * 2 + 1] - 0.4;
  Tensor mask = Tensor::zeros({1, kJoints});
  mask.data()[3] = 1.0;

  double got = loss_2d(u_pred, u_gt, mask).value();
  CHECK(std::fabs(got - 0.7) < 1e-9);

  // an all-zero mask silences the term entirely
  CHECK(loss_2d(u_pred, u_gt, Tensor::zeros({1, kJoints})).value() == 0.0);
  CHECK_THROWS_WITH_AS(loss_2d(u_pred, u_gt, Tensor::full({1, kJoints}, 0.5)),
                       doctest::Contains("0 or 1"), std::runtime_error);
}

TEST_CASE("weighted 3d joint loss by hand") {
  HandTemplate tmpl = HandTemplate::tube(120, 7);
  Tensor j_gt = Tensor::zeros({1, kJoints, 3});
  Tensor j_pred = Tensor::zeros({1, kJoints, 3});
  j_pred.data()[4 * 3 + 0] = 0.01;  // fingertip joint 4, x only
  Tensor m = Tensor::full({1}, 1.0);

  double got = loss_3d_joint(j_pred, j_gt, m, tmpl.fingertips).value();
  CHECK(std::fabs(got - 2.5 * 0.01 / 21.0) < 1e-9);

  CHECK(loss_3d_joint(j_pred, j_gt, Tensor::zeros({1}), tmpl.fingertips).value() == 0.0);
}

TEST_CASE("3d joint loss ignores global translation") {
  HandTemplate tmpl = HandTemplate::tube(120, 7);
  Tensor j_gt = random_tensor({2, kJoints, 3}, 23, 0.1);
  Tensor j_pred = Tensor::zeros({2, kJoints, 3});
  for (int b = 0; b < 2; ++b)
    for (int j = 0; j < kJoints; ++j)
      for (int c = 0; c < 3; ++c) {
        double t = (b == 0 ? 0.5 : -0.25) * (c + 1);
        j_pred.data()[(static_cast<size_t>(b) * kJoints + j) * 3 + c] =
            j_gt.data()[(static_cast<size_t>(b) * kJoints + j) * 3 + c] + t;
      }
  double got =
      loss_3d_joint(j_pred, j_gt, Tensor::full({2}, 1.0), tmpl.fingertips).value();
  CHECK(std::fabs(got) < 1e-12);
}

TEST_CASE("bone loss by hand and under isometry") {
  HandTemplate tmpl = HandTemplate::tube(120, 7);
  Tensor j_gt = Tensor::zeros({1, kJoints, 3});
  Tensor j_pred = Tensor::zeros({1, kJoints, 3});
  // joint 4 is a fingertip and sits on exactly one edge
  j_gt.data()[4 * 3 + 0] = 0.1;      // bone (3,4) has length 0.1
  j_pred.data()[4 * 3 + 0] = 0.102;  // 2 mm longer
  Tensor m = Tensor::full({1}, 1.0);
  double got = loss_bone(j_pred, j_gt, tmpl, m).value();
  CHECK(std::fabs(got - 1e-4) < 1e-9);

  // a rigid rotation of the prediction changes nothing
  Tensor j2 = random_tensor({1, kJoints, 3}, 29, 0.1);
  auto R = rodrigues(0.3, -0.5, 0.8);
  Tensor j2rot = Tensor::zeros({1, kJoints, 3});
  for (int j = 0; j < kJoints; ++j)
    for (int r = 0; r < 3; ++r) {
      double acc = 0.0;
      for (int c = 0; c < 3; ++c) acc += R[r * 3 + c] * j2.data()[j * 3 + c];
      j2rot.data()[j * 3 + r] = acc;
    }
  CHECK(std::fabs(loss_bone(j2rot, j2, tmpl, m).value()) < 1e-12);
}

TEST_CASE("vertex loss by hand and under translation") {
  Tensor v_gt = Tensor::zeros({1, 120, 3});
  Tensor v_pred = Tensor::zeros({1, 120, 3});
  v_pred.data()[5 * 3 + 0] = 0.003;
  Tensor root = Tensor::zeros({1, 1, 3});
  double got = loss_vert(v_pred, v_gt, root, root).value();
  CHECK(std::fabs(got - 0.003 / 360.0) < 1e-9);

  // shifting prediction and predicted root together cancels
  Tensor v_shift = Tensor::zeros({1, 120, 3});
  Tensor root_shift = Tensor::zeros({1, 1, 3});
  for (int i = 0; i < 120; ++i)
    for (int c = 0; c < 3; ++c)
      v_shift.data()[i * 3 + c] = v_pred.data()[i * 3 + c] + 0.7 * (c + 1);
  for (int c = 0; c < 3; ++c) root_shift.data()[c] = 0.7 * (c + 1);
  double shifted = loss_vert(v_shift, v_gt, root_shift, root).value();
  CHECK(std::fabs(shifted - got) < 1e-12);
}

TEST_CASE("smooth l1 knee values") {
  Tensor r = Tensor::from({5}, {0.0, 0.05, 1.0, -1.0, 0.02});
  Tensor y = ops::smooth_l1(r, 0.05);
  CHECK(y.data()[0] == 0.0);
  CHECK(std::fabs(y.data()[1] - 0.025) < 1e-15);           // linear branch at the knee
  CHECK(std::fabs(0.5 * 0.05 * 0.05 / 0.05 - 0.025) < 1e-15);  // quadratic limit agrees
  CHECK(std::fabs(y.data()[2] - 0.975) < 1e-15);
  CHECK(std::fabs(y.data()[3] - 0.975) < 1e-15);
  CHECK(std::fabs(y.data()[4] - 0.5 * 0.02 * 0.02 / 0.05) < 1e-15);
}

TEST_CASE("parameter losses truncate per sample") {
  Rng rng(31);
  Tensor g_gt = Tensor::zeros({1, 9});
  for (auto& x : g_gt.impl->data) x = rng.uniform() < 0.5 ? -1.0 : 1.0;
  Tensor g_pred = ops::scale(g_gt, -1.0).set_requires_grad(true);
  Tensor p_eq = random_tensor({1, 135}, 37, 0.3);
  Tensor b_eq = random_tensor({1, kBetas}, 41, 0.3);

  Graph g;
  GraphScope scope(g);
  auto terms = loss_params(g_pred, g_gt, p_eq, p_eq, b_eq, b_eq);
  CHECK(terms[0].value() == 1.0);  // mean rho(2) = 1.975, truncated
  CHECK(terms[1].value() == 0.0);
  CHECK(terms[2].value() == 0.0);

  // truncation kills the gradient of that sample's term
  g.backward(terms[0]);
  for (int64_t i = 0; i < g_pred.numel(); ++i) CHECK(g_pred.grad()[i] == 0.0);
}

TEST_CASE("shape prior is the un-squared norm") {
  Tensor b1 = Tensor::zeros({1, kBetas});
  CHECK(loss_shape_reg(b1).value() == 0.0);
  Tensor b2 = Tensor::zeros({1, kBetas});
  b2.data()[0] = 3.0;
  b2.data()[1] = 4.0;
  CHECK(std::fabs(loss_shape_reg(b2).value() - 5.0) < 1e-12);
  Tensor b3 = Tensor::zeros({2, kBetas});
  b3.data()[0] = 1.0;
  b3.data()[kBetas] = 2.0;
  CHECK(std::fabs(loss_shape_reg(b3).value() - 1.5) < 1e-12);
}

TEST_CASE("default weights sum to the documented total") {
  LossWeights w;
  double sum = w.l2d + w.l3d + w.bone + w.vert + w.global_rot + w.pose + w.betas + w.shape;
  CHECK(std::fabs(sum - 7.36) < 1e-9);
}

TEST_CASE("total is the weighted sum of the breakdown") {
  HandTemplate tmpl = HandTemplate::tube(120, 7);
  Tensor joints = random_tensor({2, kJoints, 3}, 43, 0.1);
  Tensor verts = random_tensor({2, 120, 3}, 47, 0.1);
  Tensor u = random_tensor({2, kJoints, 2}, 53, 0.3);
  HandPrediction pred{u, joints, verts, random_tensor({2, 9}, 59, 0.4),
                      random_tensor({2, 135}, 61, 0.4), random_tensor({2, kBetas}, 67, 0.4)};
  HandTargets gt{random_tensor({2, kJoints, 2}, 71, 0.3), random_tensor({2, kJoints, 3}, 73, 0.1),
                 random_tensor({2, 120, 3}, 79, 0.1), random_tensor({2, 9}, 83, 0.4),
                 random_tensor({2, 135}, 89, 0.4), random_tensor({2, kBetas}, 97, 0.4)};
  SupervisionMasks masks = SupervisionMasks::all_valid(2);

  LossWeights w;
  LossBreakdown lb = total_loss(pred, gt, masks, tmpl, w);
  double manual = w.l2d * lb.l2d + w.l3d * lb.l3d + w.bone * lb.bone + w.vert * lb.vert +
                  w.global_rot * lb.global_rot + w.pose * lb.pose + w.betas * lb.betas +
                  w.shape * lb.shape;
  CHECK(std::fabs(lb.total.value() - manual) < 1e-12);
  CHECK(lb.total.value() > 0.0);

  LossWeights zero{0, 0, 0, 0, 0, 0, 0, 0};
  CHECK(total_loss(pred, gt, masks, tmpl, zero).total.value() == 0.0);
}

TEST_CASE("zero 3d masks silence the geometric terms") {
  HandTemplate tmpl = HandTemplate::tube(120, 7);
  Tensor j_pred = random_tensor({2, kJoints, 3}, 101, 0.2);
  Tensor j_gt = random_tensor({2, kJoints, 3}, 103, 0.2);
  Tensor zeros = Tensor::zeros({2});
  CHECK(loss_3d_joint(j_pred, j_gt, zeros, tmpl.fingertips).value() == 0.0);
  CHECK(loss_bone(j_pred, j_gt, tmpl, zeros).value() == 0.0);
}

TEST_CASE("vertex loss gradients are exact") {
  Tensor v_gt = random_tensor({2, 10, 3}, 107, 0.2);
  Tensor v_pred = offset_from(v_gt, 109, 0.1, 0.4);
  Tensor root_pred = random_tensor({2, 1, 3}, 113, 0.1);
  Tensor root_gt = random_tensor({2, 1, 3}, 127, 0.1);
  auto builder = [&](const std::vector<Tensor>& in) {
    return loss_vert(in[0], v_gt, in[1], root_gt);
  };
  auto res = grad_check(builder, {v_pred, root_pred}, 1e-5);
  CHECK(res.finite);
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("gradients of the full objective check out") {
  HandTemplate tmpl = HandTemplate::tube(120, 7);
  int B = 2;
  Tensor j_gt = random_tensor({B, kJoints, 3}, 131, 0.05);
  Tensor v_gt = random_tensor({B, 120, 3}, 137, 0.05);
  Tensor u_gt = random_tensor({B, kJoints, 2}, 139, 0.2);
  Tensor g_gt = random_tensor({B, 9}, 149, 0.3);
  Tensor p_gt = random_tensor({B, 135}, 151, 0.3);
  Tensor b_gt = random_tensor({B, kBetas}, 157, 0.3);

  // residual magnitudes in [0.15, 0.45]: away from the L1 knee at zero, the
  // smooth-L1 knee at 0.05 and the truncation knee at mean 1.0
  HandPrediction pred{offset_from(u_gt, 163, 0.15, 0.45), offset_from(j_gt, 167, 0.15, 0.45),
                      offset_from(v_gt, 173, 0.15, 0.45), offset_from(g_gt, 179, 0.15, 0.45),
                      offset_from(p_gt, 181, 0.15, 0.45), offset_from(b_gt, 191, 0.15, 0.45)};
  HandTargets gt{u_gt, j_gt, v_gt, g_gt, p_gt, b_gt};
  SupervisionMasks masks = SupervisionMasks::all_valid(B);

  auto builder = [&](const std::vector<Tensor>& in) {
    HandPrediction pr{in[0], in[1], in[2], in[3], in[4], in[5]};
    return total_loss(pr, gt, masks, tmpl, LossWeights{}).total;
  };
  auto res = grad_check(builder, {pred.u, pred.joints, pred.verts, pred.g, pred.p, pred.betas},
                        1e-5);
  CHECK(res.finite);
  CHECK(res.max_rel_err < 1e-4);
}
