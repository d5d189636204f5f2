#pragma once

#include <array>
#include <vector>

// Evaluation metrics. Inputs are flat (K,3) point arrays in meters; every
// reported number is in millimeters. Pure double math, nothing touches the
// autodiff tape.

namespace geohand {

struct SimilarityTransform {
  double scale = 1.0;
  std::array<double, 9> rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};  // row-major
  std::array<double, 3> translation{0, 0, 0};
};

// mean Euclidean distance after moving both roots to the origin
double mpjpe_mm(const std::vector<double>& pred, const std::vector<double>& gt, int root_index);

// vertex variant: the aligning roots (usually the root joint) are passed in
double mpvpe_mm(const std::vector<double>& pred, const std::vector<double>& gt,
                const std::array<double, 3>& pred_root, const std::array<double, 3>& gt_root);

// least-squares similarity fit pred -> gt (closed form with reflection
// correction); throws on rank-deficient point sets. aligned (optional)
// receives s*R*pred + t.
SimilarityTransform procrustes_align(const std::vector<double>& pred,
                                     const std::vector<double>& gt,
                                     std::vector<double>* aligned = nullptr);

// mean Euclidean distance after the optimal similarity alignment
double pa_error_mm(const std::vector<double>& pred, const std::vector<double>& gt);

// harmonic mean of nearest-neighbor precision and recall at the threshold;
// procrustes_aligned=true first aligns pred to gt (requires equal counts)
double f_score(const std::vector<double>& pred, const std::vector<double>& gt,
               double threshold_mm, bool procrustes_aligned = true);

}  // namespace geohand
