#include "geohand/metrics.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace geohand {

namespace {

constexpr double kMetersToMm = 1000.0;

int point_count(const std::vector<double>& pts, const char* op) {
  if (pts.empty() || pts.size() % 3 != 0) {
    throw std::runtime_error(std::string(op) + ": point array size " +
                             std::to_string(pts.size()) + " is not a positive multiple of 3");
  }
  return static_cast<int>(pts.size() / 3);
}

void check_same_count(int kp, int kg, const char* op) {
  if (kp != kg) {
    throw std::runtime_error(std::string(op) + ": point counts differ (" + std::to_string(kp) +
                             " vs " + std::to_string(kg) + ")");
  }
}

Eigen::Matrix3Xd as_matrix(const std::vector<double>& pts, int k) {
  Eigen::Matrix3Xd m(3, k);
  for (int i = 0; i < k; ++i) {
    m(0, i) = pts[3 * i + 0];
    m(1, i) = pts[3 * i + 1];
    m(2, i) = pts[3 * i + 2];
  }
  return m;
}

double mean_distance(const Eigen::Matrix3Xd& a, const Eigen::Matrix3Xd& b) {
  double acc = 0.0;
  for (int i = 0; i < a.cols(); ++i) acc += (a.col(i) - b.col(i)).norm();
  return acc / static_cast<double>(a.cols());
}

}  // namespace

double mpjpe_mm(const std::vector<double>& pred, const std::vector<double>& gt, int root_index) {
  const int k = point_count(pred, "mpjpe");
  check_same_count(k, point_count(gt, "mpjpe"), "mpjpe");
  if (root_index < 0 || root_index >= k) {
    throw std::runtime_error("mpjpe: root index " + std::to_string(root_index) +
                             " out of range for " + std::to_string(k) + " points");
  }
  Eigen::Matrix3Xd p = as_matrix(pred, k);
  Eigen::Matrix3Xd g = as_matrix(gt, k);
  p.colwise() -= Eigen::Vector3d(p.col(root_index));
  g.colwise() -= Eigen::Vector3d(g.col(root_index));
  return mean_distance(p, g) * kMetersToMm;
}

double mpvpe_mm(const std::vector<double>& pred, const std::vector<double>& gt,
                const std::array<double, 3>& pred_root, const std::array<double, 3>& gt_root) {
  const int k = point_count(pred, "mpvpe");
  check_same_count(k, point_count(gt, "mpvpe"), "mpvpe");
  Eigen::Matrix3Xd p = as_matrix(pred, k);
  Eigen::Matrix3Xd g = as_matrix(gt, k);
  p.colwise() -= Eigen::Vector3d(pred_root[0], pred_root[1], pred_root[2]);
  g.colwise() -= Eigen::Vector3d(gt_root[0], gt_root[1], gt_root[2]);
  return mean_distance(p, g) * kMetersToMm;
}

SimilarityTransform procrustes_align(const std::vector<double>& pred,
                                     const std::vector<double>& gt,
                                     std::vector<double>* aligned) {
  const int k = point_count(pred, "procrustes_align");
  check_same_count(k, point_count(gt, "procrustes_align"), "procrustes_align");
  if (k < 3) {
    throw std::runtime_error("procrustes_align: need at least 3 points, got " + std::to_string(k));
  }

  Eigen::Matrix3Xd x = as_matrix(pred, k);
  Eigen::Matrix3Xd y = as_matrix(gt, k);
  const Eigen::Vector3d mx = x.rowwise().mean();
  const Eigen::Vector3d my = y.rowwise().mean();
  Eigen::Matrix3Xd xc = x.colwise() - mx;
  Eigen::Matrix3Xd yc = y.colwise() - my;

  const double var_x = xc.squaredNorm() / static_cast<double>(k);
  if (var_x < 1e-24) {
    throw std::runtime_error("procrustes_align: degenerate point set (all predictions coincide)");
  }

  // covariance mapping centered pred toward centered gt
  Eigen::Matrix3d sigma = (yc * xc.transpose()) / static_cast<double>(k);
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(sigma, Eigen::ComputeFullU | Eigen::ComputeFullV);
  const Eigen::Vector3d d = svd.singularValues();
  if (d(1) <= 1e-9 * d(0) || d(0) <= 0.0) {
    throw std::runtime_error("procrustes_align: degenerate point set (rank-deficient covariance)");
  }

  Eigen::Vector3d signs(1, 1, 1);
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0.0) signs(2) = -1;
  Eigen::Matrix3d r = svd.matrixU() * signs.asDiagonal() * svd.matrixV().transpose();
  const double s = d.dot(signs) / var_x;
  if (!(s > 0.0)) {
    throw std::runtime_error("procrustes_align: non-positive optimal scale");
  }
  const Eigen::Vector3d t = my - s * (r * mx);

  SimilarityTransform out;
  out.scale = s;
  for (int i = 0; i < 3; ++i) {
    out.translation[i] = t(i);
    for (int j = 0; j < 3; ++j) out.rotation[3 * i + j] = r(i, j);
  }
  if (aligned != nullptr) {
    aligned->resize(pred.size());
    Eigen::Matrix3Xd ax = (s * (r * x)).colwise() + t;
    for (int i = 0; i < k; ++i) {
      (*aligned)[3 * i + 0] = ax(0, i);
      (*aligned)[3 * i + 1] = ax(1, i);
      (*aligned)[3 * i + 2] = ax(2, i);
    }
  }
  return out;
}

double pa_error_mm(const std::vector<double>& pred, const std::vector<double>& gt) {
  std::vector<double> aligned;
  procrustes_align(pred, gt, &aligned);
  const int k = static_cast<int>(gt.size() / 3);
  return mean_distance(as_matrix(aligned, k), as_matrix(gt, k)) * kMetersToMm;
}

double f_score(const std::vector<double>& pred, const std::vector<double>& gt,
               double threshold_mm, bool procrustes_aligned) {
  const int kp = point_count(pred, "f_score");
  const int kg = point_count(gt, "f_score");
  if (threshold_mm <= 0.0) {
    throw std::runtime_error("f_score: threshold must be positive");
  }
  std::vector<double> p = pred;
  if (procrustes_aligned) {
    check_same_count(kp, kg, "f_score");
    procrustes_align(pred, gt, &p);
  }
  const double thr = threshold_mm / kMetersToMm;
  Eigen::Matrix3Xd pm = as_matrix(p, kp);
  Eigen::Matrix3Xd gm = as_matrix(gt, kg);

  auto hits_within = [&](const Eigen::Matrix3Xd& from, const Eigen::Matrix3Xd& to) {
    int hits = 0;
    for (int i = 0; i < from.cols(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (int j = 0; j < to.cols(); ++j) {
        best = std::min(best, (from.col(i) - to.col(j)).norm());
      }
      if (best <= thr) ++hits;
    }
    return static_cast<double>(hits);
  };

  const double precision = hits_within(pm, gm) / static_cast<double>(kp);
  const double recall = hits_within(gm, pm) / static_cast<double>(kg);
  if (precision + recall <= 0.0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace geohand
