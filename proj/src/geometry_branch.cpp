#include "geohand/geometry_branch.hpp"

#include "geohand/ops.hpp"

namespace geohand {

GeoStub::GeoStub(Mode mode, int c_g, int geo_h, int geo_w, uint64_t seed)
    : mode_(mode), c_g_(c_g), h_(geo_h), w_(geo_w) {
  if (c_g < 1) fail("geo_stub: C_g must be positive");
  Rng rng(seed);
  if (mode == Mode::oracle) {
    if (c_g < kGtGeoChannels)
      fail("geo_stub: oracle mode needs C_g >= " + std::to_string(kGtGeoChannels) + ", got " +
           std::to_string(c_g));
    int pad = c_g - kGtGeoChannels;
    if (pad > 0) pad_proj_ = randn_tensor({3, pad}, rng, 1.0);
  } else {
    conv1_ = Conv2d(3, c_g, 3, 1, 1, rng, 0.3);
    conv2_ = Conv2d(c_g, c_g, 3, 1, 1, rng, 0.1);
    // frozen: these are constants, not parameters
    conv1_.w.set_requires_grad(false);
    conv1_.b.set_requires_grad(false);
    conv2_.w.set_requires_grad(false);
    conv2_.b.set_requires_grad(false);
  }
}

GeoFeatureMap GeoStub::extract(const Tensor& image, const Tensor* gt_geo) const {
  if (image.dim() != 4 || image.extent(1) != 3)
    fail("geo_stub: image must be (B,3,H,W), got " + shape_str(image.shape()));
  NoGradScope frozen;
  Tensor pooled = ops::adaptive_avg_pool2d(image, h_, w_);  // (B,3,Hg,Wg)

  Tensor out;
  if (mode_ == Mode::oracle) {
    if (gt_geo == nullptr || !gt_geo->defined())
      fail("geo_stub: oracle mode requires a ground-truth geometry map");
    if (gt_geo->dim() != 4 || gt_geo->extent(1) != kGtGeoChannels ||
        gt_geo->extent(0) != image.extent(0))
      fail("geo_stub: ground-truth geometry map must be (B,6,H,W), got " +
           shape_str(gt_geo->shape()));
    Tensor base = ops::adaptive_avg_pool2d(*gt_geo, h_, w_);
    if (c_g_ == kGtGeoChannels) {
      out = base;
    } else {
      int B = image.extent(0);
      Tensor px = ops::permute(ops::reshape(pooled, {B, 3, h_ * w_}), {0, 2, 1});
      Tensor extra = ops::matmul(px, pad_proj_);  // (B,HW,pad)
      extra = ops::reshape(ops::permute(extra, {0, 2, 1}),
                           {B, c_g_ - kGtGeoChannels, h_, w_});
      out = ops::concat({base, extra}, 1);
    }
  } else {
    out = conv2_(ops::gelu(conv1_(pooled)));
  }
  return {out, GeoFeatureMap::Kind::raw};
}

void GeoStub::collect(ParamMap& m, const std::string& prefix) const {
  if (mode_ == Mode::oracle) {
    if (pad_proj_.defined()) add_param(m, prefix + ".pad_proj", pad_proj_, false);
  } else {
    add_param(m, prefix + ".conv1.w", conv1_.w, false);
    add_param(m, prefix + ".conv1.b", conv1_.b, false);
    add_param(m, prefix + ".conv2.w", conv2_.w, false);
    add_param(m, prefix + ".conv2.b", conv2_.b, false);
  }
}

GeoAdapter::GeoAdapter(int c_g, int c_s, int depth, Rng& rng) : c_g_(c_g), c_s_(c_s) {
  if (depth < 1) fail("geo_adapter: depth must be at least 1");
  int in = c_g;
  for (int i = 0; i < depth; ++i) {
    convs_.emplace_back(in, c_s, 1, 1, 0, rng);
    norms_.emplace_back(c_s);
    convs_.emplace_back(c_s, c_s, 3, 1, 1, rng);
    norms_.emplace_back(c_s);
    in = c_s;
  }
  final_ = Conv2d(c_s, c_s, 1, 1, 0, rng);
  final_.zero_init();  // side feature starts at zero, augmentation is a strict refinement
}

GeoFeatureMap GeoAdapter::forward(const GeoFeatureMap& raw) const {
  if (raw.kind != GeoFeatureMap::Kind::raw) fail("geo_adapter: input map must have kind raw");
  if (raw.map.dim() != 4 || raw.map.extent(1) != c_g_)
    fail("geo_adapter: raw map has " + std::to_string(raw.map.extent(1)) +
         " channels, configured C_g is " + std::to_string(c_g_));
  Tensor x = raw.map;
  for (size_t i = 0; i < convs_.size(); ++i) x = ops::gelu(norms_[i](convs_[i](x)));
  Tensor side = final_(x);
  return {ops::concat({raw.map, side}, 1), GeoFeatureMap::Kind::augmented};
}

void GeoAdapter::collect(ParamMap& m, const std::string& prefix) {
  for (size_t i = 0; i < convs_.size(); ++i) {
    convs_[i].collect(m, prefix + ".conv" + std::to_string(i));
    norms_[i].collect(m, prefix + ".gn" + std::to_string(i));
  }
  final_.collect(m, prefix + ".proj");
}

GeoTokenizer::GeoTokenizer(int in_channels, int dim, int grid_h, int grid_w, Rng& rng)
    : grid_h_(grid_h), grid_w_(grid_w), proj_(in_channels, dim, 1, 1, 0, rng) {
  p_geo = randn_tensor({grid_h * grid_w, dim}, rng, 0.02).set_requires_grad(true);
}

Tensor GeoTokenizer::tokenize(const GeoFeatureMap& aug) const {
  if (aug.kind != GeoFeatureMap::Kind::augmented)
    fail("geo_tokenize: input map must have kind augmented");
  int h = aug.map.extent(2), w = aug.map.extent(3);
  if (grid_h_ > h || grid_w_ > w)
    fail("geo_tokenize: grid " + std::to_string(grid_h_) + "x" + std::to_string(grid_w_) +
         " larger than feature map " + std::to_string(h) + "x" + std::to_string(w));
  Tensor pooled = ops::adaptive_avg_pool2d(aug.map, grid_h_, grid_w_);
  Tensor tokens = map_to_tokens(proj_(pooled));  // (B,N,D)
  int B = tokens.extent(0);
  Tensor pos = ops::broadcast_to(ops::reshape(p_geo, {1, grid_h_ * grid_w_, tokens.extent(2)}),
                                 {B, grid_h_ * grid_w_, tokens.extent(2)});
  return ops::add(tokens, pos);
}

void GeoTokenizer::collect(ParamMap& m, const std::string& prefix) {
  proj_.collect(m, prefix + ".proj");
  add_param(m, prefix + ".p_geo", p_geo);
}

}  // namespace geohand
