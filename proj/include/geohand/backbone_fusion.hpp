#pragma once

#include <string>
#include <vector>

#include "geohand/nn.hpp"
#include "geohand/tensor.hpp"

// RGB patch embedding, the gated cross-modal token fusion, and the pre-norm
// transformer trunk that turns fused tokens into a spatial feature map.

namespace geohand {

// non-overlapping patch embedding plus a learnable positional table
struct PatchEmbed {
  int patch = 16, grid_h = 0, grid_w = 0;
  Conv2d proj;   // kernel = stride = patch
  Tensor p_rgb;  // (N, D)

  PatchEmbed() = default;
  PatchEmbed(int image_h, int image_w, int patch, int dim, Rng& rng);

  Tensor operator()(const Tensor& image) const;  // (B,3,H,W) -> (B,N,D)
  void collect(ParamMap& m, const std::string& prefix) const;
  int token_count() const { return grid_h * grid_w; }
};

// x_fuse = x_rgb + sigmoid(g) * Proj([LN(x_rgb); LN(x_geo)]) with a scalar
// learnable gate g and a two-layer projection, final layer zero-initialized
// so fusion starts as the identity.
struct FusionGate {
  LayerNorm ln_rgb, ln_geo;
  Linear fc1, fc2;
  Tensor g;  // scalar, stored as shape (1)

  FusionGate() = default;
  FusionGate(int dim, Rng& rng, double g_init = -2.0);

  Tensor delta(const Tensor& rgb, const Tensor& geo) const;
  Tensor operator()(const Tensor& rgb, const Tensor& geo) const;
  double gate_value() const;  // sigmoid(g) as a plain double
  void collect(ParamMap& m, const std::string& prefix) const;
};

struct TrunkBlock {
  LayerNorm ln1, ln2;
  MultiheadAttention attn;
  Mlp mlp;

  TrunkBlock() = default;
  TrunkBlock(int dim, int heads, int mlp_ratio, Rng& rng);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamMap& m, const std::string& prefix) const;
};

// L pre-norm blocks with no trailing norm: an empty trunk is the identity and
// encode() is then a pure reshape of the tokens onto the grid.
struct Trunk {
  std::vector<TrunkBlock> blocks;
  int grid_h = 0, grid_w = 0;

  Trunk() = default;
  Trunk(int dim, int depth, int heads, int mlp_ratio, int grid_h, int grid_w, Rng& rng);

  // applies blocks [begin, end); the model splits the trunk around the fusion point
  Tensor run(const Tensor& tokens, int begin, int end) const;
  Tensor to_map(const Tensor& tokens) const;  // (B,N,D) -> (B,D,H_p,W_p)
  Tensor encode(const Tensor& tokens) const { return to_map(run(tokens, 0, depth())); }
  int depth() const { return static_cast<int>(blocks.size()); }
  void collect(ParamMap& m, const std::string& prefix) const;
};

}  // namespace geohand
