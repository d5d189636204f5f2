#include "geohand/decoder_kqir.hpp"

#include "geohand/ops.hpp"

namespace geohand {

ParamSplit split_params(const Tensor& p) {
  if (p.dim() != 2 || p.extent(1) != kParamDim)
    fail("split_params: expected (B," + std::to_string(kParamDim) + "), got " +
         shape_str(p.shape()));
  int B = p.extent(0);
  ParamSplit s;
  s.theta6 = ops::reshape(ops::slice(p, 1, 0, kThetaDim), {B, kNodes, 6});
  s.betas = ops::slice(p, 1, kThetaDim, kBetas);
  s.cam = ops::slice(p, 1, kThetaDim + kBetas, 3);
  return s;
}

HandParamsBatch params_to_hand(const Tensor& p) {
  ParamSplit s = split_params(p);
  return {rot6d_to_matrix(s.theta6), s.betas, s.cam};
}

DecoderLayer::DecoderLayer(int dim, int heads, int mlp_ratio, Rng& rng)
    : ln1(dim), ln2(dim), attn(dim, heads, rng), mlp(dim, dim * mlp_ratio, dim, rng) {}

Tensor DecoderLayer::operator()(const Tensor& x, const Tensor& ctx) const {
  Tensor h = ops::add(x, attn(ln1(x), ctx));
  return ops::add(h, mlp(ln2(h)));
}

void DecoderLayer::collect(ParamMap& m, const std::string& prefix) const {
  ln1.collect(m, prefix + ".ln1");
  ln2.collect(m, prefix + ".ln2");
  attn.collect(m, prefix + ".attn");
  mlp.collect(m, prefix + ".mlp");
}

ManoDecoder::ManoDecoder(int dim, int layer_count, int heads, int mlp_ratio,
                         int ief_iterations, double cam_init, Rng& rng)
    : ief_head(dim + kParamDim, 256, kParamDim, rng),
      ief_iterations_(ief_iterations),
      cam_init_(cam_init) {
  if (ief_iterations < 0) fail("mano_decoder: negative feedback iteration count");
  param_token = randn_tensor({1, dim}, rng, 0.02).set_requires_grad(true);
  layers.reserve(layer_count);
  for (int i = 0; i < layer_count; ++i) layers.emplace_back(dim, heads, mlp_ratio, rng);
  ief_head.fc2.zero_init();  // first pass stays at the mean pose
}

Tensor ManoDecoder::features(const Tensor& tokens) const {
  if (tokens.dim() != 3) fail("mano_decoder: tokens must be (B,N,D)");
  int B = tokens.extent(0), D = tokens.extent(2);
  Tensor x = ops::broadcast_to(ops::reshape(param_token, {1, 1, D}), {B, 1, D});
  for (const auto& layer : layers) x = layer(x, tokens);
  return ops::reshape(x, {B, D});
}

Tensor ManoDecoder::mean_init(int batch) const {
  Tensor p = Tensor::zeros({batch, kParamDim});
  auto id = identity_rot6d();
  for (int b = 0; b < batch; ++b) {
    double* row = p.data() + static_cast<size_t>(b) * kParamDim;
    for (int k = 0; k < kNodes; ++k)
      for (int i = 0; i < 6; ++i) row[k * 6 + i] = id[i];
    row[kThetaDim + kBetas] = cam_init_;
  }
  return p;
}

Tensor ManoDecoder::ief_once(const Tensor& feat, const Tensor& p) const {
  return ops::add(p, ief_head(ops::concat({feat, p}, 1)));
}

Tensor ManoDecoder::decode(const Tensor& tokens) const {
  Tensor feat = features(tokens);
  Tensor p = mean_init(tokens.extent(0));
  for (int i = 0; i < ief_iterations_; ++i) p = ief_once(feat, p);
  return p;
}

void ManoDecoder::collect(ParamMap& m, const std::string& prefix) const {
  add_param(m, prefix + ".param_token", param_token);
  for (size_t i = 0; i < layers.size(); ++i)
    layers[i].collect(m, prefix + ".layer" + std::to_string(i));
  ief_head.collect(m, prefix + ".ief_head");
}

KqirWeights::KqirWeights(int dim, int d_q, int hidden, Rng& rng)
    : query_mlp(5, d_q, d_q, rng),
      wk(dim, d_q, rng, 0.02, false),
      wv(dim, d_q, rng, 0.02, false),
      refine_mlp(kJoints * d_q, hidden, kParamDim, rng) {
  refine_mlp.fc2.zero_init();  // refinement starts as the identity
}

void KqirWeights::collect(ParamMap& m, const std::string& prefix) const {
  query_mlp.collect(m, prefix + ".query_mlp");
  wk.collect(m, prefix + ".wk");
  wv.collect(m, prefix + ".wv");
  refine_mlp.collect(m, prefix + ".refine_mlp");
}

Kqir::Kqir(int dim, int d_q, int heads, int hidden, int steps, bool share, Rng& rng)
    : d_q_(d_q), heads_(heads), steps_(steps), share_(share) {
  if (steps < 0) fail("kqir: negative step count");
  if (d_q % heads != 0)
    fail("kqir: d_q " + std::to_string(d_q) + " not divisible by " + std::to_string(heads) +
         " heads");
  int sets = share ? 1 : std::max(steps, 1);
  for (int i = 0; i < sets; ++i) weights.emplace_back(dim, d_q, hidden, rng);
}

const KqirWeights& Kqir::at(int step) const {
  if (step < 0 || step >= steps_) fail("kqir: step index out of range");
  return weights[share_ ? 0 : step];
}

Tensor Kqir::build_queries(const Tensor& joints, const Tensor& uv, int step) const {
  if (joints.dim() != 3 || joints.extent(1) != kJoints || joints.extent(2) != 3)
    fail("kqir: joints must be (B,21,3), got " + shape_str(joints.shape()));
  if (uv.dim() != 3 || uv.extent(1) != kJoints || uv.extent(2) != 2)
    fail("kqir: projections must be (B,21,2), got " + shape_str(uv.shape()));
  return at(step).query_mlp(ops::concat({joints, uv}, 2));  // (B,21,5) -> (B,21,d_q)
}

Tensor Kqir::attend(const Tensor& queries, const Tensor& tokens, int step) const {
  const KqirWeights& w = at(step);
  int B = queries.extent(0), N = tokens.extent(1);
  int dh = d_q_ / heads_;
  auto split = [&](const Tensor& t, int T) {
    return ops::permute(ops::reshape(t, {B, T, heads_, dh}), {0, 2, 1, 3});
  };
  Tensor q = split(queries, kJoints);
  Tensor k = split(w.wk(tokens), N);
  Tensor v = split(w.wv(tokens), N);
  Tensor h = ops::scaled_dot_attention(q, k, v);  // (B,heads,21,dh)
  return ops::reshape(ops::permute(h, {0, 2, 1, 3}), {B, kJoints, d_q_});
}

Tensor Kqir::step(const Tensor& p, const Tensor& tokens, int step, const HandTemplate& tmpl) const {
  ParamSplit s = split_params(p);
  HandParamsBatch hand{rot6d_to_matrix(s.theta6), s.betas, s.cam};
  HandOutputBatch out = forward_kinematics(tmpl, hand);
  Tensor uv = project(out.joints, s.cam);
  Tensor queries = build_queries(out.joints, uv, step);
  Tensor h = attend(queries, tokens, step);
  int B = p.extent(0);
  Tensor delta = at(step).refine_mlp(ops::reshape(h, {B, kJoints * d_q_}));
  return ops::add(p, delta);
}

std::vector<Tensor> Kqir::refine(const Tensor& coarse, const Tensor& tokens,
                                 const HandTemplate& tmpl) const {
  std::vector<Tensor> out;
  Tensor p = coarse;
  for (int t = 0; t < steps_; ++t) {
    p = step(p, tokens, t, tmpl);
    out.push_back(p);
  }
  return out;
}

void Kqir::collect(ParamMap& m, const std::string& prefix) const {
  for (size_t i = 0; i < weights.size(); ++i)
    weights[i].collect(m, prefix + ".step" + std::to_string(i));
}

}  // namespace geohand
