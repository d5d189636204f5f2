#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "geohand/gradcheck.hpp"
#include "geohand/hand_model.hpp"
#include "geohand/ops.hpp"
#include "geohand/rng.hpp"
#include "geohand/tensor.hpp"

using namespace geohand;

namespace {

Tensor identity_rot_batch(int b) {
  Tensor rot = Tensor::zeros({b, kNodes, 3, 3});
  for (int s = 0; s < b; ++s)
    for (int k = 0; k < kNodes; ++k)
      for (int i = 0; i < 3; ++i)
        rot.impl->data[((static_cast<size_t>(s) * kNodes + k) * 3 + i) * 3 + i] = 1.0;
  return rot;
}

Tensor random_rot_batch(int b, Rng& rng, double scale) {
  Tensor rot = Tensor::zeros({b, kNodes, 3, 3});
  for (int s = 0; s < b; ++s)
    for (int k = 0; k < kNodes; ++k) {
      auto R = rodrigues(rng.uniform(-scale, scale), rng.uniform(-scale, scale),
                         rng.uniform(-scale, scale));
      for (int i = 0; i < 9; ++i)
        rot.impl->data[(static_cast<size_t>(s) * kNodes + k) * 9 + i] = R[i];
    }
  return rot;
}

std::vector<double> bone_lengths_plain(const HandTemplate& tmpl, const double* joints) {
  std::vector<double> out;
  for (const auto& e : tmpl.edges) {
    double d2 = 0.0;
    for (int c = 0; c < 3; ++c) {
      double d = joints[e[0] * 3 + c] - joints[e[1] * 3 + c];
      d2 += d * d;
    }
    out.push_back(std::sqrt(d2));
  }
  return out;
}

}  // namespace

TEST_CASE("tube template is structurally valid at both sizes") {
  for (int v : {120, 778}) {
    HandTemplate t = HandTemplate::tube(v, 7);
    CHECK(t.vertex_count == v);
    CHECK(t.rest.size() == static_cast<size_t>(v) * 3);
    CHECK(t.skin.size() == static_cast<size_t>(v) * kNodes);
    CHECK(t.faces.size() > 0);
    t.validate();  // throws on any broken invariant
    CHECK(t.fingertips == std::array<int, 5>{4, 8, 12, 16, 20});
    // joint regressor rows are averages
    for (int j = 0; j < kJoints; ++j) {
      double s = 0.0;
      for (int vi = 0; vi < v; ++vi) s += t.joint_reg[static_cast<size_t>(j) * v + vi];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    // articulated pivots reuse the knuckle joint rows
    for (int d = 0; d < 5; ++d)
      for (int seg = 0; seg < 3; ++seg) {
        const double* node = &t.node_reg[(1 + 3 * d + seg) * static_cast<size_t>(v)];
        const double* joint = &t.joint_reg[(1 + 4 * d + seg) * static_cast<size_t>(v)];
        CHECK(std::memcmp(node, joint, sizeof(double) * v) == 0);
      }
  }
}

TEST_CASE("tube template generation is deterministic in the seed") {
  HandTemplate a = HandTemplate::tube(120, 7);
  HandTemplate b = HandTemplate::tube(120, 7);
  CHECK(std::memcmp(a.rest.data(), b.rest.data(), sizeof(double) * a.rest.size()) == 0);
  CHECK(std::memcmp(a.shape_dirs.data(), b.shape_dirs.data(),
                    sizeof(double) * a.shape_dirs.size()) == 0);
  HandTemplate c = HandTemplate::tube(120, 8);
  CHECK(std::memcmp(a.shape_dirs.data(), c.shape_dirs.data(),
                    sizeof(double) * a.shape_dirs.size()) != 0);
}

TEST_CASE("vertex counts without a tube decomposition are rejected") {
  CHECK_THROWS_WITH_AS(HandTemplate::tube(61, 1),
                       doctest::Contains("does not decompose"), std::runtime_error);
}

TEST_CASE("rest pose reproduces the template") {
  HandTemplate t = HandTemplate::tube(120, 7);
  HandParamsBatch p;
  p.rot = identity_rot_batch(2);
  p.betas = Tensor::zeros({2, kBetas});
  p.cam = Tensor::zeros({2, 3});
  HandOutputBatch out = forward_kinematics(t, p);
  REQUIRE(out.verts.shape() == std::vector<int>{2, 120, 3});
  REQUIRE(out.joints.shape() == std::vector<int>{2, kJoints, 3});
  for (int b = 0; b < 2; ++b)
    for (int v = 0; v < 120; ++v)
      for (int c = 0; c < 3; ++c)
        CHECK(std::fabs(out.verts.data()[(static_cast<size_t>(b) * 120 + v) * 3 + c] -
                        t.rest[3 * v + c]) < 1e-12);

  // joints equal regressor times rest vertices
  for (int b = 0; b < 2; ++b)
    for (int j = 0; j < kJoints; ++j)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int v = 0; v < 120; ++v)
          acc += t.joint_reg[static_cast<size_t>(j) * 120 + v] * t.rest[3 * v + c];
        CHECK(std::fabs(out.joints.data()[(static_cast<size_t>(b) * kJoints + j) * 3 + c] -
                        acc) < 1e-12);
      }
}

TEST_CASE("regressed joints always equal regressor times posed vertices") {
  HandTemplate t = HandTemplate::tube(120, 7);
  Rng rng(11);
  HandParamsBatch p;
  p.rot = random_rot_batch(3, rng, 0.6);
  p.betas = Tensor::zeros({3, kBetas});
  for (auto& x : p.betas.impl->data) x = rng.normal(0.0, 0.5);
  p.cam = Tensor::zeros({3, 3});
  HandOutputBatch out = forward_kinematics(t, p);

  Tensor again = ops::matmul(t.joint_reg_t, out.verts);
  CHECK(std::memcmp(out.joints.data(), again.data(),
                    sizeof(double) * out.joints.numel()) == 0);

  for (int b = 0; b < 3; ++b)
    for (int j = 0; j < kJoints; ++j)
      for (int c = 0; c < 3; ++c) {
        double acc = 0.0;
        for (int v = 0; v < 120; ++v)
          acc += t.joint_reg[static_cast<size_t>(j) * 120 + v] *
                 out.verts.data()[(static_cast<size_t>(b) * 120 + v) * 3 + c];
        CHECK(std::fabs(out.joints.data()[(static_cast<size_t>(b) * kJoints + j) * 3 + c] -
                        acc) < 1e-12);
      }
}

TEST_CASE("bone lengths are invariant under pose") {
  HandTemplate t = HandTemplate::tube(120, 7);
  Rng rng(13);
  for (int trial = 0; trial < 4; ++trial) {
    Tensor betas = Tensor::zeros({2, kBetas});
    if (trial >= 2)  // also at a non-zero fixed shape
      for (auto& x : betas.impl->data) x = rng.normal(0.0, 0.5);

    HandParamsBatch rest_p{identity_rot_batch(2), betas, Tensor::zeros({2, 3})};
    HandParamsBatch posed_p{random_rot_batch(2, rng, 0.8), betas, Tensor::zeros({2, 3})};
    HandOutputBatch rest_o = forward_kinematics(t, rest_p);
    HandOutputBatch posed_o = forward_kinematics(t, posed_p);

    Tensor lr = bone_lengths(rest_o.joints, t);
    Tensor lp = bone_lengths(posed_o.joints, t);
    REQUIRE(lr.shape() == std::vector<int>{2, kEdges});
    for (int64_t i = 0; i < lr.numel(); ++i) {
      CHECK(lr.data()[i] > 1e-3);  // no degenerate bones
      CHECK(std::fabs(lr.data()[i] - lp.data()[i]) < 1e-9);
    }
  }
}

TEST_CASE("bone lengths match a plain per-edge recomputation") {
  HandTemplate t = HandTemplate::tube(120, 7);
  Rng rng(17);
  HandParamsBatch p{random_rot_batch(1, rng, 0.5), Tensor::zeros({1, kBetas}),
                    Tensor::zeros({1, 3})};
  HandOutputBatch out = forward_kinematics(t, p);
  Tensor lens = bone_lengths(out.joints, t);
  auto plain = bone_lengths_plain(t, out.joints.data());
  for (int e = 0; e < kEdges; ++e)
    CHECK(std::fabs(lens.data()[e] - plain[e]) < 1e-12);
}

TEST_CASE("shaped vertices are linear in the shape coefficients") {
  HandTemplate t = HandTemplate::tube(120, 7);
  Rng rng(19);
  Tensor b1 = Tensor::zeros({1, kBetas});
  for (auto& x : b1.impl->data) x = rng.normal(0.0, 0.4);
  Tensor b2 = ops::scale(b1, 2.0);

  auto run = [&](const Tensor& betas) {
    HandParamsBatch p{identity_rot_batch(1), betas, Tensor::zeros({1, 3})};
    return forward_kinematics(t, p).verts;
  };
  Tensor v0 = run(Tensor::zeros({1, kBetas}));
  Tensor v1 = run(b1);
  Tensor v2 = run(b2);
  for (int64_t i = 0; i < v0.numel(); ++i) {
    double lhs = v2.data()[i] - v0.data()[i];
    double rhs = 2.0 * (v1.data()[i] - v0.data()[i]);
    CHECK(std::fabs(lhs - rhs) < 1e-9);
  }
}

TEST_CASE("weak perspective projection by hand") {
  Tensor pts = Tensor::from({1, 2, 3}, {0.25, 0.5, 9.0, -0.125, 0.0625, -3.0});
  Tensor cam = Tensor::from({1, 3}, {2.0, 0.1, -0.2});
  Tensor u = project(pts, cam);
  REQUIRE(u.shape() == std::vector<int>{1, 2, 2});
  CHECK(u.data()[0] == 2.0 * 0.25 + 0.1);
  CHECK(u.data()[1] == 2.0 * 0.5 - 0.2);
  CHECK(u.data()[2] == 2.0 * -0.125 + 0.1);
  CHECK(u.data()[3] == 2.0 * 0.0625 - 0.2);
}

TEST_CASE("six value rotation encoding yields proper rotations") {
  Rng rng(23);
  Tensor r6 = Tensor::zeros({3, kNodes, 6});
  for (auto& x : r6.impl->data) x = rng.normal(0.0, 1.0);
  Tensor R = rot6d_to_matrix(r6);
  REQUIRE(R.shape() == std::vector<int>{3, kNodes, 3, 3});
  for (int m = 0; m < 3 * kNodes; ++m) {
    const double* p = R.data() + static_cast<size_t>(m) * 9;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double dot = 0.0;
        for (int l = 0; l < 3; ++l) dot += p[l * 3 + i] * p[l * 3 + j];
        CHECK(std::fabs(dot - (i == j ? 1.0 : 0.0)) < 1e-9);
      }
    double det = p[0] * (p[4] * p[8] - p[5] * p[7]) - p[1] * (p[3] * p[8] - p[5] * p[6]) +
                 p[2] * (p[3] * p[7] - p[4] * p[6]);
    CHECK(std::fabs(det - 1.0) < 1e-9);
  }
}

TEST_CASE("identity six value encoding maps to the identity matrix") {
  auto id = identity_rot6d();
  Tensor r6 = Tensor::from({1, 6}, std::vector<double>(id.begin(), id.end()));
  Tensor R = rot6d_to_matrix(r6);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      CHECK(std::fabs(R.data()[i * 3 + j] - (i == j ? 1.0 : 0.0)) < 1e-9);
}

TEST_CASE("forward kinematics rejects non-orthogonal rotations") {
  HandTemplate t = HandTemplate::tube(120, 7);
  HandParamsBatch p;
  p.rot = identity_rot_batch(1);
  p.rot.impl->data[9 * 5 + 0] = 2.0;  // scale breaks column norms at node 5
  p.betas = Tensor::zeros({1, kBetas});
  p.cam = Tensor::zeros({1, 3});
  CHECK_THROWS_WITH_AS(forward_kinematics(t, p),
                       doctest::Contains("invalid rotation"), std::runtime_error);
}

TEST_CASE("gradients flow through the whole hand pipeline") {
  HandTemplate t = HandTemplate::tube(120, 7);
  Rng rng(29);

  Tensor theta = Tensor::zeros({1, kNodes, 6});
  auto id = identity_rot6d();
  for (int k = 0; k < kNodes; ++k)
    for (int i = 0; i < 6; ++i)
      theta.impl->data[static_cast<size_t>(k) * 6 + i] = id[i] + 0.15 * rng.normal();
  Tensor betas = Tensor::zeros({1, kBetas});
  for (auto& x : betas.impl->data) x = 0.2 * rng.normal();
  Tensor cam = Tensor::from({1, 3}, {5.0, 0.02, -0.03});

  auto builder = [&](const std::vector<Tensor>& in) {
    HandParamsBatch p{rot6d_to_matrix(in[0]), in[1], in[2]};
    HandOutputBatch out = forward_kinematics(t, p);
    Tensor u = project(out.joints, in[2]);
    Tensor lens = bone_lengths(out.joints, t);
    return ops::add(ops::add(ops::mean_all(u), ops::mean_all(out.verts)),
                    ops::scale(ops::mean_all(lens), 0.1));
  };
  auto res = grad_check(builder, {theta, betas, cam}, 1e-5);
  CHECK(res.finite);
  CHECK(res.max_rel_err < 1e-5);
}

TEST_CASE("hand joint positions sit at ring centroids") {
  HandTemplate t = HandTemplate::tube(120, 7);
  HandParamsBatch p{identity_rot_batch(1), Tensor::zeros({1, kBetas}), Tensor::zeros({1, 3})};
  HandOutputBatch out = forward_kinematics(t, p);
  // digit 0 (scale 0.80): knuckle at y=0, then cumulative scaled segments
  double x0 = -0.040;
  std::array<double, 4> ys = {0.0, 0.038 * 0.80, (0.038 + 0.030) * 0.80,
                              (0.038 + 0.030 + 0.024) * 0.80};
  for (int ring = 0; ring < 4; ++ring) {
    const double* j = out.joints.data() + static_cast<size_t>(1 + ring) * 3;
    CHECK(std::fabs(j[0] - x0) < 1e-12);
    CHECK(std::fabs(j[1] - ys[ring]) < 1e-12);
    CHECK(std::fabs(j[2]) < 1e-12);
  }
}
