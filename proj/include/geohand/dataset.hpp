#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "geohand/config.hpp"

// Synthetic sample store. Every array is f64 little-endian on disk ("GHDS"
// format); a file written twice from the same (config, seed) is byte-identical.

namespace geohand {

struct Sample {
  std::vector<double> image;   // 3*H*W, channel-major
  std::vector<double> geo;     // 6*Hg*Wg: depth replicated to 3, then normals
  std::vector<double> uv;      // 21*2 projected joints (with configured noise)
  std::vector<double> m_uv;    // 21 binary flags
  std::vector<double> joints;  // 21*3
  double m_xyz = 1.0;
  std::vector<double> params;  // 109: 96 rotation values, 10 betas, 3 camera
};

struct Dataset {
  int image_h = 0, image_w = 0;
  int geo_h = 0, geo_w = 0;
  std::vector<Sample> samples;

  int size() const { return static_cast<int>(samples.size()); }
  void save(const std::string& path) const;
  static Dataset load(const std::string& path);
};

// depth value written where no vertex lands (hand depths stay well below it)
constexpr double kDepthSentinel = 1.0;

// samples hand parameters, runs the hand model for ground truth, rasterizes
// the geometry maps and the flat-shaded grayscale input image
Dataset synth_generate(const Config& cfg, uint64_t seed);

}  // namespace geohand
