#pragma once

#include <string>
#include <vector>

#include "geohand/ops.hpp"
#include "geohand/rng.hpp"
#include "geohand/tensor.hpp"

// Layer building blocks. Modules own their parameter tensors and expose them
// through collect(): a flat, insertion-ordered name -> tensor table used by
// the optimizer and the checkpoint writer.

namespace geohand {

struct ParamEntry {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

using ParamMap = std::vector<ParamEntry>;

void add_param(ParamMap& m, const std::string& name, const Tensor& t, bool trainable = true);

// throws on duplicate names; called once after a model is assembled
void check_unique_names(const ParamMap& m);

Tensor randn_tensor(std::vector<int> shape, Rng& rng, double stddev);

struct Linear {
  Tensor w;  // (in, out)
  Tensor b;  // (out), undefined when bias-free
  Linear() = default;
  Linear(int in, int out, Rng& rng, double w_std = 0.02, bool bias = true);
  void zero_init();
  Tensor operator()(const Tensor& x) const;
  void collect(ParamMap& m, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gamma, beta;
  LayerNorm() = default;
  explicit LayerNorm(int dim);
  Tensor operator()(const Tensor& x) const { return ops::layer_norm(x, gamma, beta); }
  void collect(ParamMap& m, const std::string& prefix) const;
};

struct Conv2d {
  Tensor w;  // (out, in, k, k)
  Tensor b;  // (out)
  int stride = 1, pad = 0;
  Conv2d() = default;
  Conv2d(int in, int out, int k, int stride, int pad, Rng& rng, double w_std = 0.05);
  void zero_init();
  Tensor operator()(const Tensor& x) const { return ops::conv2d(x, w, b, stride, pad); }
  void collect(ParamMap& m, const std::string& prefix) const;
};

struct GroupNorm {
  Tensor gamma, beta;
  int groups = 1;
  GroupNorm() = default;
  explicit GroupNorm(int channels);  // 8 groups, or 1 when channels < 8
  Tensor operator()(const Tensor& x) const { return ops::group_norm(x, gamma, beta, groups); }
  void collect(ParamMap& m, const std::string& prefix) const;
};

struct Mlp {
  Linear fc1, fc2;
  Mlp() = default;
  Mlp(int in, int hidden, int out, Rng& rng);
  Tensor operator()(const Tensor& x) const { return fc2(ops::gelu(fc1(x))); }
  void collect(ParamMap& m, const std::string& prefix) const;
};

// row-major feature map <-> token sequence: token i of (B,N,D) is grid cell
// (i div W, i mod W) of (B,D,H,W)
Tensor map_to_tokens(const Tensor& x);                 // (B,D,H,W) -> (B,H*W,D)
Tensor tokens_to_map(const Tensor& x, int h, int w);   // (B,N,D) -> (B,D,h,w)

// standard multi-head attention; q comes from x, k/v from ctx
struct MultiheadAttention {
  int heads = 1;
  Linear wq, wk, wv, wo;
  MultiheadAttention() = default;
  MultiheadAttention(int dim, int heads, Rng& rng);
  Tensor operator()(const Tensor& x, const Tensor& ctx) const;
  void collect(ParamMap& m, const std::string& prefix) const;
};

}  // namespace geohand
