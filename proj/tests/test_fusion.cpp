#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <vector>

#include "doctest.h"
#include "geohand/backbone_fusion.hpp"
#include "geohand/gradcheck.hpp"
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

// plain nested-loop recomputation of the fusion formula, no tape ops involved
std::vector<double> fuse_straight_line(const FusionGate& gate, const Tensor& rgb,
                                       const Tensor& geo) {
  int B = rgb.extent(0), N = rgb.extent(1), D = rgb.extent(2);
  auto ln = [&](const double* x, const Tensor& gamma, const Tensor& beta,
                std::vector<double>& out) {
    double mean = 0.0;
    for (int d = 0; d < D; ++d) mean += x[d];
    mean /= D;
    double var = 0.0;
    for (int d = 0; d < D; ++d) var += (x[d] - mean) * (x[d] - mean);
    var /= D;
    double inv = 1.0 / std::sqrt(var + 1e-5);
    for (int d = 0; d < D; ++d)
      out[d] = (x[d] - mean) * inv * gamma.data()[d] + beta.data()[d];
  };
  double sg = 1.0 / (1.0 + std::exp(-gate.g.data()[0]));
  std::vector<double> out(static_cast<size_t>(B) * N * D);
  std::vector<double> a(D), b(D), cat(2 * D), h(D), d2(D);
  for (int s = 0; s < B; ++s)
    for (int n = 0; n < N; ++n) {
      const double* xr = rgb.data() + (static_cast<size_t>(s) * N + n) * D;
      const double* xg = geo.data() + (static_cast<size_t>(s) * N + n) * D;
      ln(xr, gate.ln_rgb.gamma, gate.ln_rgb.beta, a);
      ln(xg, gate.ln_geo.gamma, gate.ln_geo.beta, b);
      for (int d = 0; d < D; ++d) {
        cat[d] = a[d];
        cat[D + d] = b[d];
      }
      for (int o = 0; o < D; ++o) {
        double acc = gate.fc1.b.data()[o];
        for (int i = 0; i < 2 * D; ++i) acc += cat[i] * gate.fc1.w.data()[i * D + o];
        h[o] = 0.5 * acc * (1.0 + std::erf(acc / std::sqrt(2.0)));
      }
      for (int o = 0; o < D; ++o) {
        double acc = gate.fc2.b.data()[o];
        for (int i = 0; i < D; ++i) acc += h[i] * gate.fc2.w.data()[i * D + o];
        d2[o] = acc;
      }
      for (int d = 0; d < D; ++d)
        out[(static_cast<size_t>(s) * N + n) * D + d] = xr[d] + sg * d2[d];
    }
  return out;
}

}  // namespace

TEST_CASE("patch embedding produces the expected grid") {
  Rng rng(3);
  PatchEmbed pe(64, 48, 16, 128, rng);
  CHECK(pe.grid_h == 4);
  CHECK(pe.grid_w == 3);
  CHECK(pe.token_count() == 12);
  Tensor img = random_tensor({2, 3, 64, 48}, 5, 0.5);
  Tensor tokens = pe(img);
  REQUIRE(tokens.shape() == std::vector<int>{2, 12, 128});

  CHECK_THROWS_WITH_AS(PatchEmbed(50, 48, 16, 128, rng), doctest::Contains("not divisible"),
                       std::runtime_error);
  Tensor wrong = random_tensor({1, 3, 32, 48}, 5, 0.5);
  CHECK_THROWS_WITH_AS(pe(wrong), doctest::Contains("does not match"), std::runtime_error);
}

TEST_CASE("zero image with zero positions embeds to the bias") {
  Rng rng(7);
  PatchEmbed pe(32, 32, 16, 8, rng);
  for (auto& x : pe.p_rgb.impl->data) x = 0.0;
  for (int64_t i = 0; i < pe.proj.b.numel(); ++i) pe.proj.b.impl->data[i] = 0.25 * (i + 1);
  Tensor tokens = pe(Tensor::zeros({1, 3, 32, 32}));
  for (int n = 0; n < 4; ++n)
    for (int d = 0; d < 8; ++d)
      CHECK(tokens.data()[static_cast<size_t>(n) * 8 + d] == 0.25 * (d + 1));
}

TEST_CASE("saturated gate leaves the rgb tokens untouched") {
  Rng rng(11);
  FusionGate gate(16, rng, -30.0);
  // non-trivial projection so the delta itself is not zero
  for (auto& x : gate.fc2.w.impl->data) x = 0.05;
  Tensor rgb = random_tensor({2, 6, 16}, 13);
  Tensor geo = random_tensor({2, 6, 16}, 17);
  Tensor fused = gate(rgb, geo);
  double worst = 0.0;
  for (int64_t i = 0; i < fused.numel(); ++i)
    worst = std::max(worst, std::fabs(fused.data()[i] - rgb.data()[i]));
  CHECK(worst < 1e-9);
  CHECK(gate.gate_value() > 0.0);
  CHECK(gate.gate_value() < 1e-12);
}

TEST_CASE("zero gate mixes exactly half the delta") {
  Rng rng(19);
  FusionGate gate(16, rng, 0.0);
  for (auto& x : gate.fc2.w.impl->data) x = 0.03;
  Tensor rgb = random_tensor({1, 4, 16}, 23);
  Tensor geo = random_tensor({1, 4, 16}, 29);
  Tensor fused = gate(rgb, geo);
  Tensor d = gate.delta(rgb, geo);
  for (int64_t i = 0; i < fused.numel(); ++i)
    CHECK(fused.data()[i] == rgb.data()[i] + 0.5 * d.data()[i]);
}

TEST_CASE("fusion matches a straight line recomputation") {
  Rng rng(31);
  FusionGate gate(12, rng, -1.3);
  Rng wiggle(32);
  ParamMap params;
  gate.collect(params, "gate");
  for (auto& p : params)
    for (auto& x : p.tensor.impl->data) x += 0.1 * wiggle.normal();

  Tensor rgb = random_tensor({2, 5, 12}, 37);
  Tensor geo = random_tensor({2, 5, 12}, 41);
  Tensor fused = gate(rgb, geo);
  auto expect = fuse_straight_line(gate, rgb, geo);
  double worst = 0.0;
  for (int64_t i = 0; i < fused.numel(); ++i)
    worst = std::max(worst, std::fabs(fused.data()[i] - expect[static_cast<size_t>(i)]));
  CHECK(worst < 1e-12);
}

TEST_CASE("fusion rejects mismatched token counts") {
  Rng rng(43);
  FusionGate gate(8, rng);
  Tensor rgb = random_tensor({1, 12, 8}, 47);
  Tensor geo = random_tensor({1, 6, 8}, 53);
  CHECK_THROWS_WITH_AS(gate(rgb, geo), doctest::Contains("grid lock"), std::runtime_error);
}

TEST_CASE("fusion is differentiable in everything including the gate") {
  Rng rng(59);
  FusionGate gate(8, rng, -0.4);
  for (auto& x : gate.fc2.w.impl->data) x = 0.08 * rng.normal();
  Tensor rgb = random_tensor({1, 3, 8}, 61);
  Tensor geo = random_tensor({1, 3, 8}, 67);
  auto builder = [&](const std::vector<Tensor>& in) {
    FusionGate g2 = gate;
    g2.g = in[2];
    return ops::mean_all(g2(in[0], in[1]));
  };
  auto res = grad_check(builder, {rgb, geo, gate.g}, 1e-5);
  CHECK(res.finite);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("empty trunk reduces to the grid reshape") {
  Rng rng(71);
  Trunk trunk(8, 0, 2, 2, 2, 3, rng);
  Tensor tokens = random_tensor({2, 6, 8}, 73);
  Tensor map = trunk.encode(tokens);
  REQUIRE(map.shape() == std::vector<int>{2, 8, 2, 3});
  for (int b = 0; b < 2; ++b)
    for (int d = 0; d < 8; ++d)
      for (int r = 0; r < 2; ++r)
        for (int c = 0; c < 3; ++c) {
          double want = tokens.data()[(static_cast<size_t>(b) * 6 + r * 3 + c) * 8 + d];
          double got = map.data()[((static_cast<size_t>(b) * 8 + d) * 2 + r) * 3 + c];
          CHECK(got == want);
        }

  // flatten(reshape) round trip is bitwise
  Tensor back = map_to_tokens(map);
  CHECK(std::memcmp(back.data(), tokens.data(), sizeof(double) * tokens.numel()) == 0);
}

TEST_CASE("trunk blocks are batch equivariant") {
  Rng rng(79);
  Trunk trunk(16, 2, 4, 2, 2, 2, rng);
  Tensor x = random_tensor({2, 4, 16}, 83);
  Tensor y = trunk.run(x, 0, 2);

  // swap the two batch entries
  Tensor xs = Tensor::zeros({2, 4, 16});
  std::memcpy(xs.impl->data.data(), x.data() + 4 * 16, sizeof(double) * 4 * 16);
  std::memcpy(xs.impl->data.data() + 4 * 16, x.data(), sizeof(double) * 4 * 16);
  Tensor ys = trunk.run(xs, 0, 2);
  CHECK(std::memcmp(ys.data(), y.data() + 4 * 16, sizeof(double) * 4 * 16) == 0);
  CHECK(std::memcmp(ys.data() + 4 * 16, y.data(), sizeof(double) * 4 * 16) == 0);
}

TEST_CASE("trunk block range is validated") {
  Rng rng(89);
  Trunk trunk(8, 2, 2, 2, 2, 2, rng);
  Tensor x = random_tensor({1, 4, 8}, 97);
  CHECK_THROWS_WITH_AS(trunk.run(x, 0, 3), doctest::Contains("out of bounds"),
                       std::runtime_error);
}

TEST_CASE("gradients survive a two block trunk") {
  Rng rng(101);
  Trunk trunk(8, 2, 2, 2, 2, 2, rng);
  Tensor x = random_tensor({1, 4, 8}, 103, 0.5);
  auto builder = [&](const std::vector<Tensor>& in) {
    return ops::mean_all(trunk.run(in[0], 0, 2));
  };
  auto res = grad_check(builder, {x}, 1e-5);
  CHECK(res.finite);
  CHECK(res.max_rel_err < 1e-4);
}
