#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>

#include "geohand/gradcheck.hpp"
#include "geohand/nn.hpp"
#include "geohand/ops.hpp"
#include "geohand/rng.hpp"
#include "geohand/tensor.hpp"

using namespace geohand;

namespace {

Tensor randt(std::vector<int> shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal(0.0, scale);
  return t;
}

}  // namespace

TEST_CASE("shape validation names the op and extents") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 4});
  CHECK_THROWS_WITH_AS(ops::add(a, b), doctest::Contains("add"), std::runtime_error);
  CHECK_THROWS_WITH_AS(ops::matmul(a, a), doctest::Contains("matmul"), std::runtime_error);
  CHECK_THROWS_WITH_AS(ops::slice(a, 1, 2, 5), doctest::Contains("slice"), std::runtime_error);
  CHECK_THROWS_WITH_AS(ops::concat({a, b}, 0), doctest::Contains("concat"), std::runtime_error);
}

TEST_CASE("matmul forward matches a hand-computed case") {
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor b = Tensor::from({2, 2}, {5, 6, 7, 8});
  Tensor c = ops::matmul(a, b);
  CHECK(c.at({0, 0}) == doctest::Approx(19));
  CHECK(c.at({0, 1}) == doctest::Approx(22));
  CHECK(c.at({1, 0}) == doctest::Approx(43));
  CHECK(c.at({1, 1}) == doctest::Approx(50));
}

TEST_CASE("matmul broadcasting over leading dims") {
  Rng rng(3);
  Tensor a = randt({2, 3, 4}, rng);
  Tensor b = randt({4, 5}, rng);
  Tensor c = ops::matmul(a, b);
  CHECK(c.shape() == std::vector<int>{2, 3, 5});
  // per-slice result must equal a plain 2D product
  Tensor a0 = ops::slice(a, 0, 1, 1);
  Tensor c0 = ops::matmul(ops::reshape(a0, {3, 4}), b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 5; ++j) CHECK(c.at({1, i, j}) == doctest::Approx(c0.at({i, j})));
}

TEST_CASE("sigmoid at 0 gives value 0.5 and gradient 0.25") {
  Tensor x = Tensor::scalar(0.0).set_requires_grad(true);
  Graph g;
  GraphScope scope(g);
  Tensor y = ops::sigmoid(x);
  CHECK(y.value() == doctest::Approx(0.5));
  g.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(0.25));
}

TEST_CASE("gelu is exactly zero at zero") {
  Tensor x = Tensor::scalar(0.0);
  CHECK(ops::gelu(x).value() == 0.0);
}

TEST_CASE("softmax rows sum to one") {
  Rng rng(11);
  Tensor x = randt({4, 7}, rng, 3.0);
  Tensor y = ops::softmax_lastdim(x);
  for (int r = 0; r < 4; ++r) {
    double s = 0.0;
    for (int j = 0; j < 7; ++j) s += y.at({r, j});
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("multiple uses of a tensor accumulate exactly one contribution each") {
  Tensor x = Tensor::scalar(3.0).set_requires_grad(true);
  Graph g;
  GraphScope scope(g);
  Tensor y = ops::add(ops::mul(x, x), x);  // x^2 + x -> dy/dx = 2x + 1
  g.backward(y);
  CHECK(x.grad()[0] == doctest::Approx(7.0));
}

TEST_CASE("non-scalar loss is rejected") {
  Tensor x = Tensor::zeros({2, 2}).set_requires_grad(true);
  Graph g;
  GraphScope scope(g);
  Tensor y = ops::scale(x, 2.0);
  CHECK_THROWS_WITH_AS(g.backward(y), doctest::Contains("scalar"), std::runtime_error);
}

TEST_CASE("leaf used by the graph but detached from the loss is an error") {
  Tensor x = Tensor::scalar(1.0).set_requires_grad(true);
  Tensor z = Tensor::scalar(2.0).set_requires_grad(true);
  Graph g;
  GraphScope scope(g);
  Tensor dead = ops::scale(z, 3.0);  // recorded, never reaches the loss
  (void)dead;
  Tensor loss = ops::mul(x, x);
  CHECK_THROWS_WITH_AS(g.backward(loss), doctest::Contains("unreachable"), std::runtime_error);
}

TEST_CASE("backward is deterministic bit for bit") {
  Rng rng(5);
  Tensor x = randt({3, 4}, rng);
  Tensor w = randt({4, 4}, rng);
  std::vector<double> g1, g2;
  for (int run = 0; run < 2; ++run) {
    Tensor xr = Tensor::from(x.shape(), x.impl->data).set_requires_grad(true);
    Tensor wr = Tensor::from(w.shape(), w.impl->data).set_requires_grad(true);
    Graph g;
    GraphScope scope(g);
    Tensor y = ops::sum_all(ops::gelu(ops::matmul(xr, wr)));
    g.backward(y);
    auto& out = run == 0 ? g1 : g2;
    out = xr.grad();
    out.insert(out.end(), wr.grad().begin(), wr.grad().end());
  }
  REQUIRE(g1.size() == g2.size());
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("concat backward splits the upstream gradient exactly") {
  Rng rng(7);
  Tensor a = randt({2, 3}, rng).set_requires_grad(true);
  Tensor b = randt({2, 2}, rng).set_requires_grad(true);
  Tensor wsum = randt({2, 5}, rng);
  Graph g;
  GraphScope scope(g);
  Tensor c = ops::concat({a, b}, 1);
  Tensor loss = ops::sum_all(ops::mul(c, wsum));
  g.backward(loss);
  for (int i = 0; i < 2; ++i) {
    for (int j = 0; j < 3; ++j)
      CHECK(a.grad()[i * 3 + j] == doctest::Approx(wsum.at({i, j})).epsilon(1e-15));
    for (int j = 0; j < 2; ++j)
      CHECK(b.grad()[i * 2 + j] == doctest::Approx(wsum.at({i, j + 3})).epsilon(1e-15));
  }
}

TEST_CASE("reshape round trip is bitwise") {
  Rng rng(9);
  Tensor x = randt({2, 3, 4}, rng);
  Tensor y = ops::reshape(ops::reshape(x, {6, 4}), {2, 3, 4});
  CHECK(std::memcmp(x.data(), y.data(), sizeof(double) * 24) == 0);
}

TEST_CASE("grad_check of a constant function is exactly zero") {
  auto builder = [](const std::vector<Tensor>&) { return Tensor::scalar(3.5); };
  Tensor x = Tensor::from({2}, {1.0, 2.0});
  auto res = grad_check(builder, {x});
  CHECK(res.max_rel_err == 0.0);
}

TEST_CASE("grad_check over every primitive across seeds") {
  for (uint64_t seed : {1ull, 2ull, 3ull, 4ull, 5ull}) {
    Rng rng(seed);
    CAPTURE(seed);

    auto check = [&](const char* name, auto builder, std::vector<Tensor> inputs,
                     double tol = 1e-5) {
      auto res = grad_check(builder, std::move(inputs));
      INFO(name << ": " << res.worst_input);
      CHECK(res.max_rel_err < tol);
    };

    check("add", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::mul(ops::add(in[0], in[1]), in[2]));
    }, {randt({2, 3}, rng), randt({2, 3}, rng), randt({2, 3}, rng)});

    check("sub_mul_div", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::div(ops::mul(in[0], in[1]), ops::sub(in[2], in[3])));
    }, {randt({3, 2}, rng), randt({3, 2}, rng), Tensor::full({3, 2}, 4.0), randt({3, 2}, rng, 0.3)});

    check("scale_addscalar", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::add_scalar(ops::scale(in[0], -1.7), 0.3));
    }, {randt({4}, rng)});

    check("add_rowbias", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::gelu(ops::add_rowbias(in[0], in[1])));
    }, {randt({3, 4}, rng), randt({4}, rng)});

    check("matmul_2d", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::matmul(in[0], in[1]));
    }, {randt({3, 4}, rng), randt({4, 2}, rng)});

    check("matmul_batched", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::gelu(ops::matmul(in[0], in[1])));
    }, {randt({2, 3, 4}, rng), randt({2, 4, 2}, rng)});

    check("matmul_broadcast_lhs", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::gelu(ops::matmul(in[0], in[1])));
    }, {randt({3, 4}, rng), randt({2, 4, 2}, rng)});

    check("conv2d_3x3", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::gelu(ops::conv2d(in[0], in[1], in[2], 1, 1)));
    }, {randt({1, 2, 5, 4}, rng), randt({3, 2, 3, 3}, rng), randt({3}, rng)});

    check("conv2d_1x1", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::conv2d(in[0], in[1], in[2], 1, 0));
    }, {randt({2, 3, 4, 3}, rng), randt({2, 3, 1, 1}, rng), randt({2}, rng)});

    check("conv2d_stride2", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::conv2d(in[0], in[1], in[2], 2, 1));
    }, {randt({1, 2, 6, 6}, rng), randt({2, 2, 3, 3}, rng), randt({2}, rng)});

    check("group_norm", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::mul(ops::group_norm(in[0], in[1], in[2], 2), in[3]));
    }, {randt({2, 4, 3, 2}, rng), randt({4}, rng), randt({4}, rng), randt({2, 4, 3, 2}, rng)});

    check("layer_norm", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::mul(ops::layer_norm(in[0], in[1], in[2]), in[3]));
    }, {randt({3, 5}, rng), randt({5}, rng), randt({5}, rng), randt({3, 5}, rng)});

    check("gelu", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::gelu(in[0]));
    }, {randt({3, 3}, rng)});

    check("sigmoid", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::sigmoid(in[0]));
    }, {randt({3, 3}, rng)});

    check("softmax", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::mul(ops::softmax_lastdim(in[0]), in[1]));
    }, {randt({3, 5}, rng), randt({3, 5}, rng)}, 1e-4);

    check("adaptive_avg_pool", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::gelu(ops::adaptive_avg_pool2d(in[0], 2, 2)));
    }, {randt({1, 2, 5, 6}, rng)});

    check("concat", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::gelu(ops::concat({in[0], in[1]}, 1)));
    }, {randt({2, 2}, rng), randt({2, 3}, rng)});

    check("reshape_permute", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::gelu(ops::permute(ops::reshape(in[0], {3, 2, 2}), {1, 0, 2})));
    }, {randt({2, 6}, rng)});

    check("slice", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::gelu(ops::slice(in[0], 1, 1, 2)));
    }, {randt({2, 4}, rng)});

    check("index_select", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::gelu(ops::index_select(in[0], 0, {2, 0, 2})));
    }, {randt({3, 2}, rng)});

    check("broadcast_to", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::mul(ops::broadcast_to(in[0], {3, 4}), in[1]));
    }, {randt({1, 4}, rng), randt({3, 4}, rng)});

    check("reduce_sum", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::gelu(ops::reduce_sum(in[0], 1)));
    }, {randt({2, 3, 2}, rng)});

    check("l2norm", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::l2norm_lastdim(in[0]));
    }, {randt({4, 3}, rng)});

    check("abs", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::abs(in[0]));
    }, {randt({3, 3}, rng)});  // knees at 0 have measure zero under the gaussian

    check("smooth_l1", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::smooth_l1(in[0], 0.05));
    }, {randt({3, 3}, rng)});

    check("clamp_max", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::clamp_max(in[0], 0.4));
    }, {randt({3, 3}, rng)});

    check("attention", [](const std::vector<Tensor>& in) {
      return ops::sum_all(ops::gelu(ops::scaled_dot_attention(in[0], in[1], in[2])));
    }, {randt({1, 2, 3, 4}, rng), randt({1, 2, 5, 4}, rng), randt({1, 2, 5, 4}, rng)}, 1e-4);
  }
}

TEST_CASE("matmul chain gradient against central differences") {
  Rng rng(42);
  auto builder = [](const std::vector<Tensor>& in) {
    return ops::sum_all(ops::matmul(ops::matmul(in[0], in[1]), in[2]));
  };
  auto res = grad_check(builder, {randt({3, 3}, rng), randt({3, 3}, rng), randt({3, 3}, rng)});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("corrupted backward rule is caught by grad_check") {
  // custom record whose backward deliberately doubles the true gradient
  auto builder = [](const std::vector<Tensor>& in) {
    const Tensor& x = in[0];
    Tensor y(x.shape());
    y.set_requires_grad(true);
    for (int64_t i = 0; i < x.numel(); ++i) y.data()[i] = 2.0 * x.data()[i];
    if (Graph* g = Graph::current()) {
      g->record("bad_scale", {x}, y, [xi = x.impl, yi = y.impl] {
        auto& gx = ensure_grad(xi);
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += 10.0 * yi->grad[i];  // should be 2.0
      });
    }
    return ops::sum_all(y);
  };
  Rng rng(13);
  Tensor x = randt({3}, rng);
  auto res = grad_check(builder, {x});
  CHECK(res.max_rel_err > 0.5);
}

TEST_CASE("layer wrappers collect uniquely named parameters") {
  Rng rng(21);
  MultiheadAttention attn(8, 2, rng);
  ParamMap m;
  attn.collect(m, "attn");
  CHECK(m.size() == 8);
  check_unique_names(m);
  Mlp mlp(8, 16, 8, rng);
  mlp.collect(m, "mlp");
  CHECK_NOTHROW(check_unique_names(m));
  add_param(m, "attn.wq.w", attn.wq.w);
  CHECK_THROWS_AS(check_unique_names(m), std::runtime_error);
}

TEST_CASE("attention module output is permutation invariant over keys") {
  Rng rng(31);
  MultiheadAttention attn(8, 2, rng);
  Tensor x = randt({1, 2, 8}, rng);
  Tensor ctx = randt({1, 5, 8}, rng);
  Tensor out1 = attn(x, ctx);
  std::vector<int> perm = {3, 0, 4, 1, 2};
  Tensor ctx_p = ops::index_select(ctx, 1, perm);
  Tensor out2 = attn(x, ctx_p);
  for (int64_t i = 0; i < out1.numel(); ++i)
    CHECK(out1.data()[i] == doctest::Approx(out2.data()[i]).epsilon(1e-12));
}
