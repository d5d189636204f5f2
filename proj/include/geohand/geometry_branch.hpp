#pragma once

#include <cstdint>
#include <string>

#include "geohand/nn.hpp"
#include "geohand/tensor.hpp"

// Geometry prior branch: a frozen stand-in estimator producing a raw geometry
// map from the image, a trainable adapter that augments it with side channels,
// and a tokenizer that pools the augmented map onto the patch grid.

namespace geohand {

struct GeoFeatureMap {
  enum class Kind { raw, side, augmented };
  Tensor map;  // (B, C, H_g, W_g)
  Kind kind = Kind::raw;
};

// number of channels the synthetic ground-truth geometry map carries
// (depth replicated to 3, then the 3 normal components)
constexpr int kGtGeoChannels = 6;

// Frozen geometry estimator stand-in. Two modes: `oracle` copies the sample's
// ground-truth geometry map (padded to C_g channels with a fixed random
// projection of the pooled image), `frozen_random` is a seed-fixed random
// conv stack over the pooled image. Parameters are constants: they are
// reported as non-trainable and the forward pass never touches the tape.
class GeoStub {
 public:
  enum class Mode { oracle, frozen_random };

  GeoStub(Mode mode, int c_g, int geo_h, int geo_w, uint64_t seed);

  // image (B,3,H,W); gt_geo must be (B,6,H_g,W_g) and is required in oracle mode
  GeoFeatureMap extract(const Tensor& image, const Tensor* gt_geo = nullptr) const;

  void collect(ParamMap& m, const std::string& prefix) const;
  Mode mode() const { return mode_; }
  int channels() const { return c_g_; }

 private:
  Mode mode_;
  int c_g_, h_, w_;
  Tensor pad_proj_;  // (c_g-6, 3) oracle padding projection
  Conv2d conv1_, conv2_;
};

// Trainable adapter: depth blocks of [1x1 conv, GroupNorm, GELU, 3x3 conv,
// GroupNorm, GELU] at width C_s, then a zero-initialized 1x1 projection.
// Output is the channel concat [raw, side].
class GeoAdapter {
 public:
  GeoAdapter(int c_g, int c_s, int depth, Rng& rng);

  GeoFeatureMap forward(const GeoFeatureMap& raw) const;
  void collect(ParamMap& m, const std::string& prefix);

  int side_channels() const { return c_s_; }

 private:
  int c_g_, c_s_;
  std::vector<Conv2d> convs_;
  std::vector<GroupNorm> norms_;
  Conv2d final_;
};

// Pools the augmented map to the patch grid, projects to the token width with
// a 1x1 convolution, flattens row-major and adds a learnable grid embedding.
class GeoTokenizer {
 public:
  GeoTokenizer(int in_channels, int dim, int grid_h, int grid_w, Rng& rng);

  Tensor tokenize(const GeoFeatureMap& aug) const;  // (B, N, D)
  void collect(ParamMap& m, const std::string& prefix);

  Tensor p_geo;  // (N, D)

 private:
  int grid_h_, grid_w_;
  Conv2d proj_;
};

}  // namespace geohand
