#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "geohand/backbone_fusion.hpp"
#include "geohand/config.hpp"
#include "geohand/decoder_kqir.hpp"
#include "geohand/geometry_branch.hpp"
#include "geohand/hand_model.hpp"
#include "geohand/optimizer.hpp"

// Full pipeline assembly plus the "GHCK" checkpoint format. Module weights
// are drawn from one generator in a fixed order, so (config, seed) pins every
// initial parameter byte.

namespace geohand {

struct ModelForward {
  // parameter estimates per supervision stage: the coarse decode followed by
  // one entry per refinement step; the last entry is the final prediction
  std::vector<Tensor> step_params;
  double gate = 0.0;  // sigmoid(g) at forward time
};

class GeoHandModel {
 public:
  explicit GeoHandModel(const Config& cfg);

  // image (B,3,H,W); gt_geo (B,6,Hg,Wg), required by the oracle stub
  ModelForward forward(const Tensor& image, const Tensor* gt_geo = nullptr) const;

  ParamMap params();  // insertion-ordered, unique names; frozen entries flagged
  const Config& config() const { return cfg_; }
  const HandTemplate& tmpl() const { return tmpl_; }

  PatchEmbed embed;
  std::optional<GeoStub> stub;
  std::optional<GeoAdapter> adapter;  // absent under the no_adapter ablation
  std::optional<GeoTokenizer> tokenizer;
  FusionGate gate;
  Trunk trunk;
  ManoDecoder decoder;
  Kqir kqir;

 private:
  Config cfg_;
  HandTemplate tmpl_;
};

struct CheckpointData {
  Config config;  // parsed echo of the training config
  uint64_t step = 0;
  double sigma_g = 0.0;
  std::vector<std::string> names;
  std::vector<std::vector<int>> shapes;
  std::vector<std::vector<float>> values;
  bool has_moments = false;
  uint64_t adam_t = 0;
  std::vector<std::vector<float>> m, v;  // aligned with names
};

// writes the trainable parameters as 32-bit little-endian values; pass the
// optimizer to persist its moments
void save_checkpoint(const std::string& path, GeoHandModel& model, uint64_t step,
                     const AdamW* opt = nullptr);
CheckpointData load_checkpoint(const std::string& path);
// copies values into the model by name; throws on any name/shape mismatch
void apply_checkpoint(const CheckpointData& ck, GeoHandModel& model, AdamW* opt = nullptr);
// convenience: build the model from the echoed config, then apply
GeoHandModel model_from_checkpoint(const CheckpointData& ck);

}  // namespace geohand
