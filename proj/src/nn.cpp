#include "geohand/nn.hpp"

#include <unordered_set>

namespace geohand {

void add_param(ParamMap& m, const std::string& name, const Tensor& t, bool trainable) {
  if (!t.defined()) fail("params: undefined tensor for '" + name + "'");
  m.push_back({name, t, trainable});
}

void check_unique_names(const ParamMap& m) {
  std::unordered_set<std::string> seen;
  for (const auto& e : m)
    if (!seen.insert(e.name).second) fail("params: duplicate parameter name '" + e.name + "'");
}

Tensor randn_tensor(std::vector<int> shape, Rng& rng, double stddev) {
  Tensor t(std::move(shape));
  double* p = t.data();
  int64_t n = t.numel();
  for (int64_t i = 0; i < n; ++i) p[i] = rng.normal(0.0, stddev);
  return t;
}

Linear::Linear(int in, int out, Rng& rng, double w_std, bool bias) {
  w = randn_tensor({in, out}, rng, w_std).set_requires_grad(true);
  if (bias) b = Tensor::zeros({out}).set_requires_grad(true);
}

void Linear::zero_init() {
  for (auto& v : w.impl->data) v = 0.0;
  if (b.defined())
    for (auto& v : b.impl->data) v = 0.0;
}

Tensor Linear::operator()(const Tensor& x) const {
  Tensor y = ops::matmul(x, w);
  if (b.defined()) y = ops::add_rowbias(y, b);
  return y;
}

void Linear::collect(ParamMap& m, const std::string& prefix) const {
  add_param(m, prefix + ".w", w);
  if (b.defined()) add_param(m, prefix + ".b", b);
}

LayerNorm::LayerNorm(int dim) {
  gamma = Tensor::full({dim}, 1.0).set_requires_grad(true);
  beta = Tensor::zeros({dim}).set_requires_grad(true);
}

void LayerNorm::collect(ParamMap& m, const std::string& prefix) const {
  add_param(m, prefix + ".gamma", gamma);
  add_param(m, prefix + ".beta", beta);
}

Conv2d::Conv2d(int in, int out, int k, int stride_, int pad_, Rng& rng, double w_std) {
  w = randn_tensor({out, in, k, k}, rng, w_std).set_requires_grad(true);
  b = Tensor::zeros({out}).set_requires_grad(true);
  stride = stride_;
  pad = pad_;
}

void Conv2d::zero_init() {
  for (auto& v : w.impl->data) v = 0.0;
  for (auto& v : b.impl->data) v = 0.0;
}

void Conv2d::collect(ParamMap& m, const std::string& prefix) const {
  add_param(m, prefix + ".w", w);
  add_param(m, prefix + ".b", b);
}

GroupNorm::GroupNorm(int channels) {
  gamma = Tensor::full({channels}, 1.0).set_requires_grad(true);
  beta = Tensor::zeros({channels}).set_requires_grad(true);
  groups = channels < 8 ? 1 : 8;
  if (channels % groups != 0)
    fail("group_norm: channels " + std::to_string(channels) + " not divisible by " +
         std::to_string(groups) + " groups");
}

void GroupNorm::collect(ParamMap& m, const std::string& prefix) const {
  add_param(m, prefix + ".gamma", gamma);
  add_param(m, prefix + ".beta", beta);
}

Mlp::Mlp(int in, int hidden, int out, Rng& rng)
    : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

void Mlp::collect(ParamMap& m, const std::string& prefix) const {
  fc1.collect(m, prefix + ".fc1");
  fc2.collect(m, prefix + ".fc2");
}

Tensor map_to_tokens(const Tensor& x) {
  if (x.dim() != 4) fail("map_to_tokens: expected (B,D,H,W), got " + shape_str(x.shape()));
  int B = x.extent(0), D = x.extent(1), H = x.extent(2), W = x.extent(3);
  return ops::permute(ops::reshape(x, {B, D, H * W}), {0, 2, 1});
}

Tensor tokens_to_map(const Tensor& x, int h, int w) {
  if (x.dim() != 3) fail("tokens_to_map: expected (B,N,D), got " + shape_str(x.shape()));
  int B = x.extent(0), N = x.extent(1), D = x.extent(2);
  if (N != h * w)
    fail("tokens_to_map: token count " + std::to_string(N) + " does not fill a " +
         std::to_string(h) + "x" + std::to_string(w) + " grid");
  return ops::reshape(ops::permute(x, {0, 2, 1}), {B, D, h, w});
}

MultiheadAttention::MultiheadAttention(int dim, int heads_, Rng& rng)
    : heads(heads_), wq(dim, dim, rng), wk(dim, dim, rng), wv(dim, dim, rng), wo(dim, dim, rng) {
  if (dim % heads_ != 0)
    fail("attention: dim " + std::to_string(dim) + " not divisible by " + std::to_string(heads_) +
         " heads");
}

Tensor MultiheadAttention::operator()(const Tensor& x, const Tensor& ctx) const {
  if (x.dim() != 3 || ctx.dim() != 3)
    fail("attention: expected (B,T,D) inputs, got " + shape_str(x.shape()) + " and " +
         shape_str(ctx.shape()));
  int B = x.extent(0), Tq = x.extent(1), D = x.extent(2);
  int Tk = ctx.extent(1);
  int dh = D / heads;
  auto split = [&](const Tensor& t, int T) {
    return ops::permute(ops::reshape(t, {B, T, heads, dh}), {0, 2, 1, 3});
  };
  Tensor q = split(wq(x), Tq);
  Tensor k = split(wk(ctx), Tk);
  Tensor v = split(wv(ctx), Tk);
  Tensor o = ops::scaled_dot_attention(q, k, v);           // (B,h,Tq,dh)
  o = ops::reshape(ops::permute(o, {0, 2, 1, 3}), {B, Tq, D});
  return wo(o);
}

void MultiheadAttention::collect(ParamMap& m, const std::string& prefix) const {
  wq.collect(m, prefix + ".wq");
  wk.collect(m, prefix + ".wk");
  wv.collect(m, prefix + ".wv");
  wo.collect(m, prefix + ".wo");
}

}  // namespace geohand
