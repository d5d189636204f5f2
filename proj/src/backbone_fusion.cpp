#include "geohand/backbone_fusion.hpp"

#include "geohand/ops.hpp"

namespace geohand {

PatchEmbed::PatchEmbed(int image_h, int image_w, int patch_, int dim, Rng& rng)
    : patch(patch_) {
  if (image_h % patch_ != 0 || image_w % patch_ != 0)
    fail("patch_embed: image " + std::to_string(image_h) + "x" + std::to_string(image_w) +
         " not divisible by patch " + std::to_string(patch_));
  grid_h = image_h / patch_;
  grid_w = image_w / patch_;
  proj = Conv2d(3, dim, patch_, patch_, 0, rng, 0.02);
  p_rgb = randn_tensor({grid_h * grid_w, dim}, rng, 0.02).set_requires_grad(true);
}

Tensor PatchEmbed::operator()(const Tensor& image) const {
  if (image.dim() != 4 || image.extent(1) != 3)
    fail("patch_embed: image must be (B,3,H,W), got " + shape_str(image.shape()));
  if (image.extent(2) != grid_h * patch || image.extent(3) != grid_w * patch)
    fail("patch_embed: image " + std::to_string(image.extent(2)) + "x" +
         std::to_string(image.extent(3)) + " does not match the configured grid");
  Tensor tokens = map_to_tokens(proj(image));  // (B,N,D)
  int B = tokens.extent(0), N = tokens.extent(1), D = tokens.extent(2);
  return ops::add(tokens, ops::broadcast_to(ops::reshape(p_rgb, {1, N, D}), {B, N, D}));
}

void PatchEmbed::collect(ParamMap& m, const std::string& prefix) const {
  proj.collect(m, prefix + ".proj");
  add_param(m, prefix + ".p_rgb", p_rgb);
}

FusionGate::FusionGate(int dim, Rng& rng, double g_init)
    : ln_rgb(dim), ln_geo(dim), fc1(2 * dim, dim, rng), fc2(dim, dim, rng) {
  fc2.zero_init();  // fusion starts as the identity
  g = Tensor::from({1}, {g_init}).set_requires_grad(true);
}

Tensor FusionGate::delta(const Tensor& rgb, const Tensor& geo) const {
  if (rgb.shape() != geo.shape())
    fail("gated_fuse: token shapes differ, " + shape_str(rgb.shape()) + " vs " +
         shape_str(geo.shape()) + " (grid lock violated)");
  Tensor cat = ops::concat({ln_rgb(rgb), ln_geo(geo)}, 2);  // (B,N,2D)
  return fc2(ops::gelu(fc1(cat)));
}

Tensor FusionGate::operator()(const Tensor& rgb, const Tensor& geo) const {
  Tensor d = delta(rgb, geo);
  Tensor s = ops::broadcast_to(ops::reshape(ops::sigmoid(g), {1, 1, 1}), d.shape());
  return ops::add(rgb, ops::mul(d, s));
}

double FusionGate::gate_value() const {
  NoGradScope scope;
  return ops::sigmoid(g).value();
}

void FusionGate::collect(ParamMap& m, const std::string& prefix) const {
  ln_rgb.collect(m, prefix + ".ln_rgb");
  ln_geo.collect(m, prefix + ".ln_geo");
  fc1.collect(m, prefix + ".fc1");
  fc2.collect(m, prefix + ".fc2");
  add_param(m, prefix + ".g", g);
}

TrunkBlock::TrunkBlock(int dim, int heads, int mlp_ratio, Rng& rng)
    : ln1(dim), ln2(dim), attn(dim, heads, rng), mlp(dim, dim * mlp_ratio, dim, rng) {}

Tensor TrunkBlock::operator()(const Tensor& x) const {
  Tensor n1 = ln1(x);
  Tensor h = ops::add(x, attn(n1, n1));
  return ops::add(h, mlp(ln2(h)));
}

void TrunkBlock::collect(ParamMap& m, const std::string& prefix) const {
  ln1.collect(m, prefix + ".ln1");
  ln2.collect(m, prefix + ".ln2");
  attn.collect(m, prefix + ".attn");
  mlp.collect(m, prefix + ".mlp");
}

Trunk::Trunk(int dim, int depth, int heads, int mlp_ratio, int gh, int gw, Rng& rng)
    : grid_h(gh), grid_w(gw) {
  blocks.reserve(depth);
  for (int i = 0; i < depth; ++i) blocks.emplace_back(dim, heads, mlp_ratio, rng);
}

Tensor Trunk::run(const Tensor& tokens, int begin, int end) const {
  if (begin < 0 || end > depth() || begin > end)
    fail("trunk: block range [" + std::to_string(begin) + "," + std::to_string(end) +
         ") out of bounds for depth " + std::to_string(depth()));
  Tensor x = tokens;
  for (int i = begin; i < end; ++i) x = blocks[i](x);
  return x;
}

Tensor Trunk::to_map(const Tensor& tokens) const { return tokens_to_map(tokens, grid_h, grid_w); }

void Trunk::collect(ParamMap& m, const std::string& prefix) const {
  for (int i = 0; i < depth(); ++i) blocks[i].collect(m, prefix + ".block" + std::to_string(i));
}

}  // namespace geohand
