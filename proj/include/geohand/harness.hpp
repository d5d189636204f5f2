#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "geohand/dataset.hpp"
#include "geohand/gradcheck.hpp"
#include "geohand/losses.hpp"
#include "geohand/model.hpp"

// Operational surface: batching, the training loop, metric evaluation, mesh
// and skeleton export, and the registered gradient-check suite.

namespace geohand {

constexpr const char* kLogHeader =
    "step,total,l2d,l3d,lbone,lvert,lglobal,lpose,lbetas,lshape,sigma_g";

// constants assembled off the tape for one mini-batch
struct BatchTensors {
  Tensor image;  // (B,3,H,W)
  Tensor geo;    // (B,6,Hg,Wg)
  HandTargets targets;
  SupervisionMasks masks;
};
BatchTensors make_batch(const Dataset& ds, const std::vector<int>& idx, const HandTemplate& tmpl);

// runs the hand model on one packed parameter estimate
HandPrediction predict_from_params(const Tensor& p, const HandTemplate& tmpl);

struct TrainResult {
  uint64_t steps = 0;
  double initial_total = 0.0;
  double final_total = 0.0;
};

// writes one CSV line per optimizer step to `log`; aborts on non-finite loss
TrainResult train_model(GeoHandModel& model, const Dataset& ds, std::ostream& log,
                        AdamW* opt_out = nullptr);

struct EvalResult {
  double mpjpe = 0, pa_mpjpe = 0, mpvpe = 0, pa_mpvpe = 0, f5 = 0, f15 = 0;
  std::string to_csv() const;  // `metric,value` rows
};

// stage -1 scores the final estimate, 0 the coarse decode, k the k-th refinement
EvalResult evaluate_model(const GeoHandModel& model, const Dataset& ds, int stage = -1);
// feeds the stored ground truth through the hand model against itself
EvalResult evaluate_gt_self(const HandTemplate& tmpl, const Dataset& ds);

void export_mesh_obj(const std::string& path, const std::vector<double>& verts,
                     const std::vector<std::array<int, 3>>& faces);
std::vector<double> read_obj_vertices(const std::string& path);
void export_skeleton_svg(const std::string& path, const std::vector<double>& uv_pixels,
                         int image_w, int image_h,
                         const std::array<std::array<int, 2>, kEdges>& edges);
// runs the model on one sample and writes mesh_<i>.obj + skeleton_<i>.svg
void export_sample(const GeoHandModel& model, const Dataset& ds, int index,
                   const std::string& out_dir);

struct CheckReport {
  std::string name;
  double threshold = 0.0;
  GradCheckResult result;
  bool ok = false;
};
// one registered subgraph check per module; inject_fault adds a check whose
// backward rule is deliberately wrong, to prove failures are caught and named
std::vector<CheckReport> run_gradcheck_suite(uint64_t seed, bool inject_fault = false);

// FNV-1a over the raw bytes of every non-trainable parameter
uint64_t hash_frozen_params(const ParamMap& map);

}  // namespace geohand
