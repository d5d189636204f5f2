#pragma once

#include <vector>

#include "geohand/hand_model.hpp"
#include "geohand/nn.hpp"
#include "geohand/tensor.hpp"

// Parameter decoding: a transformer decoder turns the backbone feature map
// into a coarse 109-value parameter vector through iterative error feedback,
// then the keypoint-queried refiner improves it with joint-anchored
// cross-attention steps, re-decoding the hand after every step.

namespace geohand {

// views into the packed (B, 109) parameter vector: 16 rotations in the
// 6-value encoding, 10 shape coefficients, 3 camera values
struct ParamSplit {
  Tensor theta6;  // (B,16,6)
  Tensor betas;   // (B,10)
  Tensor cam;     // (B,3)
};

ParamSplit split_params(const Tensor& p);
HandParamsBatch params_to_hand(const Tensor& p);

// pre-norm cross-attention layer: the token attends over the image tokens
struct DecoderLayer {
  LayerNorm ln1, ln2;
  MultiheadAttention attn;
  Mlp mlp;
  DecoderLayer() = default;
  DecoderLayer(int dim, int heads, int mlp_ratio, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& ctx) const;
  void collect(ParamMap& m, const std::string& prefix) const;
};

// coarse decoder: one learnable parameter token, cross-attention layers, and
// an iterative-error-feedback head whose final layer starts at zero so the
// first forward pass returns the mean pose
class ManoDecoder {
 public:
  ManoDecoder() = default;
  ManoDecoder(int dim, int layers, int heads, int mlp_ratio, int ief_iterations,
              double cam_init, Rng& rng);

  Tensor features(const Tensor& tokens) const;                 // (B,N,D) -> (B,D)
  Tensor mean_init(int batch) const;                           // constant (B,109)
  Tensor ief_once(const Tensor& feat, const Tensor& p) const;  // one feedback update
  Tensor decode(const Tensor& tokens) const;                   // (B,109) after IEF

  void collect(ParamMap& m, const std::string& prefix) const;
  int ief_iterations() const { return ief_iterations_; }

  Tensor param_token;  // (1,D)
  std::vector<DecoderLayer> layers;
  Mlp ief_head;  // (D+109) -> hidden -> 109

 private:
  int ief_iterations_ = 0;
  double cam_init_ = 5.0;
};

// weights of one refinement step
struct KqirWeights {
  Mlp query_mlp;   // 5 -> d_q -> d_q, one perceptron per joint
  Linear wk, wv;   // D -> d_q, bias-free projections
  Mlp refine_mlp;  // 21*d_q -> hidden -> 109, final layer starts at zero
  KqirWeights() = default;
  KqirWeights(int dim, int d_q, int hidden, Rng& rng);
  void collect(ParamMap& m, const std::string& prefix) const;
};

class Kqir {
 public:
  Kqir() = default;
  // share=true keeps one weight set for all T steps
  Kqir(int dim, int d_q, int heads, int hidden, int steps, bool share, Rng& rng);

  // queries from the previous estimate's joints and their projections
  Tensor build_queries(const Tensor& joints, const Tensor& uv, int step) const;  // (B,21,d_q)
  // multi-head cross-attention of queries over projected image tokens, no
  // output projection; returns the attended joint features H
  Tensor attend(const Tensor& queries, const Tensor& tokens, int step) const;    // (B,21,d_q)
  // one full refinement: re-decode the hand, query, attend, residual update
  Tensor step(const Tensor& p, const Tensor& tokens, int step, const HandTemplate& tmpl) const;
  // all T steps; returns the parameter vector after each step
  std::vector<Tensor> refine(const Tensor& coarse, const Tensor& tokens,
                             const HandTemplate& tmpl) const;

  void collect(ParamMap& m, const std::string& prefix) const;
  int steps() const { return steps_; }

  std::vector<KqirWeights> weights;

 private:
  const KqirWeights& at(int step) const;
  int d_q_ = 0, heads_ = 1, steps_ = 0;
  bool share_ = true;
};

}  // namespace geohand
