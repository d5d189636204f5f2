#pragma once

#include <cstdint>
#include <string>

// Flat `key = value` configuration with dotted section keys. Parsing rejects
// unknown and duplicate keys; to_text() emits every key in a fixed canonical
// order so the checkpoint's config echo is byte-stable.

namespace geohand {

struct Config {
  uint64_t seed = 42;
  std::string out = "out";

  struct Model {
    int image_h = 64;
    int image_w = 48;
    int patch = 16;
    int dim = 128;
    int depth = 4;
    int heads = 4;
    int mlp_ratio = 4;
    int fusion_after_block = 0;
    double gate_init = -2.0;
    int geo_channels = 16;
    int side_channels = 32;
    int adapter_depth = 2;
    int geo_h = 16;
    int geo_w = 12;
    std::string geo_mode = "oracle";  // oracle | frozen_random
    bool use_adapter = true;
    bool gate_bypass = false;
    int decoder_layers = 2;
    int decoder_heads = 4;
    int ief_iterations = 3;
    double cam_init = 5.0;
    int kqir_steps = 2;
    int kqir_dq = 64;
    int kqir_heads = 4;
    int kqir_hidden = 256;
    bool kqir_share = true;
    int vertex_count = 120;
    double deep_supervision = 0.5;
  } model;

  struct Loss {
    double l2d = 1.0;
    double l3d = 5.0;
    double bone = 1.0;
    double vert = 0.1;
    double global_rot = 0.1;
    double pose = 0.1;
    double betas = 0.01;
    double shape = 0.05;
    double smooth_l1_delta = 0.05;
  } loss;

  struct Optim {
    double lr = 1e-3;
    double weight_decay = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    int batch = 8;
    int epochs = 1000;
  } optim;

  struct Data {
    int samples = 16;
    double pose_noise = 0.25;
    double beta_noise = 0.2;
    double cam_scale_lo = 4.5;
    double cam_scale_hi = 5.5;
    double uv_noise = 0.0;
    double mask_corruption = 0.0;
    double image_noise = 0.0;
  } data;

  static Config parse_text(const std::string& text);
  static Config load(const std::string& path);
  std::string to_text() const;
  void save(const std::string& path) const;
  void validate() const;  // throws on out-of-range values
};

}  // namespace geohand
