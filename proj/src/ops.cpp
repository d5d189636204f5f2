#include "geohand/ops.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>

namespace geohand::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// C (m,n) = op(A) @ op(B), optionally accumulating into C
void gemm(const double* a, const double* b, double* c, int64_t m, int64_t k, int64_t n, bool ta,
          bool tb, bool acc) {
  ConstMap A(a, ta ? k : m, ta ? m : k);
  ConstMap B(b, tb ? n : k, tb ? k : n);
  MutMap C(c, m, n);
  if (!ta && !tb) {
    if (acc) C.noalias() += A * B; else C.noalias() = A * B;
  } else if (ta && !tb) {
    if (acc) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
  } else if (!ta && tb) {
    if (acc) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
  } else {
    if (acc) C.noalias() += A.transpose() * B.transpose(); else C.noalias() = A.transpose() * B.transpose();
  }
}

std::vector<int64_t> strides_of(const std::vector<int>& shape) {
  std::vector<int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i)
    s[i] = s[i + 1] * shape[i + 1];
  return s;
}

// returns the active tape when any input participates in it
Graph* tape_for(std::initializer_list<const Tensor*> ins) {
  Graph* g = Graph::current();
  if (!g) return nullptr;
  for (const Tensor* t : ins)
    if (t->requires_grad()) return g;
  return nullptr;
}

Tensor make_out(std::vector<int> shape, bool on_tape) {
  Tensor t(std::move(shape));
  t.set_requires_grad(on_tape);
  return t;
}

void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    fail(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
         shape_str(b.shape()));
}

template <class Fwd, class Bwd>
Tensor elementwise_unary(const char* name, const Tensor& x, Fwd f, Bwd dfdx) {
  Graph* g = tape_for({&x});
  Tensor y = make_out(x.shape(), g != nullptr);
  const double* xp = x.data();
  double* yp = y.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = f(xp[i]);
  if (g) {
    g->record(name, {x}, y, [xi = x.impl, yi = y.impl, dfdx] {
      auto& gx = ensure_grad(xi);
      const auto& gy = yi->grad;
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i] * dfdx(xi->data[i], yi->data[i]);
    });
  }
  return y;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape("add", a, b);
  Graph* g = tape_for({&a, &b});
  Tensor y = make_out(a.shape(), g != nullptr);
  const double* ap = a.data();
  const double* bp = b.data();
  double* yp = y.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] + bp[i];
  if (g) {
    g->record("add", {a, b}, y, [ai = a.impl, bi = b.impl, yi = y.impl] {
      const auto& gy = yi->grad;
      auto& ga = ensure_grad(ai);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
      auto& gb = ensure_grad(bi);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i];
    });
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape("sub", a, b);
  Graph* g = tape_for({&a, &b});
  Tensor y = make_out(a.shape(), g != nullptr);
  const double* ap = a.data();
  const double* bp = b.data();
  double* yp = y.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] - bp[i];
  if (g) {
    g->record("sub", {a, b}, y, [ai = a.impl, bi = b.impl, yi = y.impl] {
      const auto& gy = yi->grad;
      auto& ga = ensure_grad(ai);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i];
      auto& gb = ensure_grad(bi);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] -= gy[i];
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape("mul", a, b);
  Graph* g = tape_for({&a, &b});
  Tensor y = make_out(a.shape(), g != nullptr);
  const double* ap = a.data();
  const double* bp = b.data();
  double* yp = y.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] * bp[i];
  if (g) {
    g->record("mul", {a, b}, y, [ai = a.impl, bi = b.impl, yi = y.impl] {
      const auto& gy = yi->grad;
      auto& ga = ensure_grad(ai);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] * bi->data[i];
      auto& gb = ensure_grad(bi);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += gy[i] * ai->data[i];
    });
  }
  return y;
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape("div", a, b);
  Graph* g = tape_for({&a, &b});
  Tensor y = make_out(a.shape(), g != nullptr);
  const double* ap = a.data();
  const double* bp = b.data();
  double* yp = y.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) yp[i] = ap[i] / bp[i];
  if (g) {
    g->record("div", {a, b}, y, [ai = a.impl, bi = b.impl, yi = y.impl] {
      const auto& gy = yi->grad;
      auto& ga = ensure_grad(ai);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += gy[i] / bi->data[i];
      auto& gb = ensure_grad(bi);
      for (size_t i = 0; i < gb.size(); ++i)
        gb[i] -= gy[i] * ai->data[i] / (bi->data[i] * bi->data[i]);
    });
  }
  return y;
}

Tensor scale(const Tensor& x, double s) {
  return elementwise_unary("scale", x, [s](double v) { return v * s; },
                           [s](double, double) { return s; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return elementwise_unary("add_scalar", x, [c](double v) { return v + c; },
                           [](double, double) { return 1.0; });
}

Tensor add_rowbias(const Tensor& x, const Tensor& b) {
  if (x.dim() < 1 || b.dim() != 1 || x.shape().back() != b.extent(0))
    fail("add_rowbias: bias " + shape_str(b.shape()) + " does not match last axis of " +
         shape_str(x.shape()));
  Graph* g = tape_for({&x, &b});
  Tensor y = make_out(x.shape(), g != nullptr);
  int64_t d = b.extent(0);
  int64_t rows = x.numel() / d;
  const double* xp = x.data();
  const double* bp = b.data();
  double* yp = y.data();
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j) yp[r * d + j] = xp[r * d + j] + bp[j];
  if (g) {
    g->record("add_rowbias", {x, b}, y, [xi = x.impl, bi = b.impl, yi = y.impl, rows, d] {
      const auto& gy = yi->grad;
      auto& gx = ensure_grad(xi);
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
      auto& gb = ensure_grad(bi);
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t j = 0; j < d; ++j) gb[j] += gy[r * d + j];
    });
  }
  return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2)
    fail("matmul: operands must be at least 2D, got " + shape_str(sa) + " and " + shape_str(sb));
  int64_t m = sa[sa.size() - 2], ka = sa.back();
  int64_t kb = sb[sb.size() - 2], n = sb.back();
  if (ka != kb)
    fail("matmul: inner extents " + std::to_string(ka) + " vs " + std::to_string(kb) + " for " +
         shape_str(sa) + " @ " + shape_str(sb));
  std::vector<int> la(sa.begin(), sa.end() - 2), lb(sb.begin(), sb.end() - 2);
  if (!la.empty() && !lb.empty() && la != lb)
    fail("matmul: leading extents differ, " + shape_str(sa) + " @ " + shape_str(sb));
  const std::vector<int>& lead = la.empty() ? lb : la;
  int64_t L = numel_of(lead);
  bool a_batched = !la.empty();
  bool b_batched = !lb.empty();

  std::vector<int> out_shape(lead);
  out_shape.push_back(static_cast<int>(m));
  out_shape.push_back(static_cast<int>(n));

  Graph* g = tape_for({&a, &b});
  Tensor y = make_out(out_shape, g != nullptr);

  const double* ap = a.data();
  const double* bp = b.data();
  double* yp = y.data();
  int64_t k = ka;

  if (!b_batched) {
    // collapse the batch into the row dimension, single product
    gemm(ap, bp, yp, L * m, k, n, false, false, false);
  } else if (!a_batched) {
    for (int64_t l = 0; l < L; ++l)
      gemm(ap, bp + l * k * n, yp + l * m * n, m, k, n, false, false, false);
  } else {
    for (int64_t l = 0; l < L; ++l)
      gemm(ap + l * m * k, bp + l * k * n, yp + l * m * n, m, k, n, false, false, false);
  }

  if (g) {
    g->record("matmul", {a, b}, y,
              [ai = a.impl, bi = b.impl, yi = y.impl, L, m, k, n, a_batched, b_batched] {
                const double* gy = yi->grad.data();
                const double* adata = ai->data.data();
                const double* bdata = bi->data.data();
                bool need_a = ai->requires_grad;
                bool need_b = bi->requires_grad;
                double* ga = need_a ? ensure_grad(ai).data() : nullptr;
                double* gb = need_b ? ensure_grad(bi).data() : nullptr;
                if (!b_batched) {
                  // dA (L*m,k) += dY (L*m,n) @ B^T; dB (k,n) += A^T @ dY
                  if (need_a) gemm(gy, bdata, ga, L * m, n, k, false, true, true);
                  if (need_b) gemm(adata, gy, gb, k, L * m, n, true, false, true);
                } else if (!a_batched) {
                  for (int64_t l = 0; l < L; ++l) {
                    if (need_a) gemm(gy + l * m * n, bdata + l * k * n, ga, m, n, k, false, true, true);
                    if (need_b) gemm(adata, gy + l * m * n, gb + l * k * n, k, m, n, true, false, true);
                  }
                } else {
                  for (int64_t l = 0; l < L; ++l) {
                    if (need_a)
                      gemm(gy + l * m * n, bdata + l * k * n, ga + l * m * k, m, n, k, false,
                           true, true);
                    if (need_b)
                      gemm(adata + l * m * k, gy + l * m * n, gb + l * k * n, k, m, n, true,
                           false, true);
                  }
                }
              });
  }
  return y;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  const auto& sx = x.shape();
  const auto& sw = w.shape();
  if (sx.size() != 4 || sw.size() != 4)
    fail("conv2d: expected 4D input and weight, got " + shape_str(sx) + " and " + shape_str(sw));
  int B = sx[0], Cin = sx[1], H = sx[2], W = sx[3];
  int Cout = sw[0], kh = sw[2], kw = sw[3];
  if (sw[1] != Cin)
    fail("conv2d: weight channels " + std::to_string(sw[1]) + " vs input channels " +
         std::to_string(Cin));
  if (b.dim() != 1 || b.extent(0) != Cout)
    fail("conv2d: bias shape " + shape_str(b.shape()) + " vs out channels " + std::to_string(Cout));
  if (stride < 1) fail("conv2d: stride must be positive");
  if (H + 2 * pad < kh || W + 2 * pad < kw)
    fail("conv2d: kernel larger than padded input");
  int OH = (H + 2 * pad - kh) / stride + 1;
  int OW = (W + 2 * pad - kw) / stride + 1;
  int ckk = Cin * kh * kw;
  int ohw = OH * OW;

  Graph* g = tape_for({&x, &w, &b});
  Tensor y = make_out({B, Cout, OH, OW}, g != nullptr);

  auto cols = std::make_shared<std::vector<double>>(static_cast<size_t>(B) * ckk * ohw);
  const double* xp = x.data();
  for (int bi = 0; bi < B; ++bi) {
    double* col = cols->data() + static_cast<size_t>(bi) * ckk * ohw;
    for (int ci = 0; ci < Cin; ++ci)
      for (int ky = 0; ky < kh; ++ky)
        for (int kx = 0; kx < kw; ++kx) {
          double* crow = col + (static_cast<size_t>(ci) * kh * kw + ky * kw + kx) * ohw;
          for (int oy = 0; oy < OH; ++oy) {
            int iy = oy * stride + ky - pad;
            for (int ox = 0; ox < OW; ++ox) {
              int ix = ox * stride + kx - pad;
              crow[oy * OW + ox] =
                  (iy >= 0 && iy < H && ix >= 0 && ix < W)
                      ? xp[((static_cast<size_t>(bi) * Cin + ci) * H + iy) * W + ix]
                      : 0.0;
            }
          }
        }
  }

  double* yp = y.data();
  const double* wp = w.data();
  const double* bp = b.data();
  for (int bi = 0; bi < B; ++bi) {
    gemm(wp, cols->data() + static_cast<size_t>(bi) * ckk * ohw,
         yp + static_cast<size_t>(bi) * Cout * ohw, Cout, ckk, ohw, false, false, false);
    for (int oc = 0; oc < Cout; ++oc) {
      double* orow = yp + (static_cast<size_t>(bi) * Cout + oc) * ohw;
      for (int i = 0; i < ohw; ++i) orow[i] += bp[oc];
    }
  }

  if (g) {
    g->record("conv2d", {x, w, b}, y,
              [xi = x.impl, wi = w.impl, bi2 = b.impl, yi = y.impl, cols, B, Cin, H, W, Cout, kh,
               kw, OH, OW, stride, pad, ckk, ohw] {
                const double* gy = yi->grad.data();
                auto& gw = ensure_grad(wi);
                auto& gb = ensure_grad(bi2);
                bool need_x = xi->requires_grad;
                double* gx = need_x ? ensure_grad(xi).data() : nullptr;
                std::vector<double> dcol(static_cast<size_t>(ckk) * ohw);
                for (int bb = 0; bb < B; ++bb) {
                  const double* gyb = gy + static_cast<size_t>(bb) * Cout * ohw;
                  const double* colb = cols->data() + static_cast<size_t>(bb) * ckk * ohw;
                  // dW += dY @ col^T
                  gemm(gyb, colb, gw.data(), Cout, ohw, ckk, false, true, true);
                  for (int oc = 0; oc < Cout; ++oc) {
                    const double* row = gyb + static_cast<size_t>(oc) * ohw;
                    double s = 0.0;
                    for (int i = 0; i < ohw; ++i) s += row[i];
                    gb[oc] += s;
                  }
                  if (!need_x) continue;
                  // dcol = W^T @ dY, scattered back to the input
                  gemm(wi->data.data(), gyb, dcol.data(), ckk, Cout, ohw, true, false, false);
                  for (int ci = 0; ci < Cin; ++ci)
                    for (int ky = 0; ky < kh; ++ky)
                      for (int kx = 0; kx < kw; ++kx) {
                        const double* crow =
                            dcol.data() + (static_cast<size_t>(ci) * kh * kw + ky * kw + kx) * ohw;
                        for (int oy = 0; oy < OH; ++oy) {
                          int iy = oy * stride + ky - pad;
                          if (iy < 0 || iy >= H) continue;
                          for (int ox = 0; ox < OW; ++ox) {
                            int ix = ox * stride + kx - pad;
                            if (ix < 0 || ix >= W) continue;
                            gx[((static_cast<size_t>(bb) * Cin + ci) * H + iy) * W + ix] +=
                                crow[oy * OW + ox];
                          }
                        }
                      }
                }
              });
  }
  return y;
}

Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps) {
  const auto& s = x.shape();
  if (s.size() != 4) fail("group_norm: expected 4D input, got " + shape_str(s));
  int B = s[0], C = s[1], H = s[2], W = s[3];
  if (groups < 1 || C % groups != 0)
    fail("group_norm: channels " + std::to_string(C) + " not divisible by groups " +
         std::to_string(groups));
  if (gamma.dim() != 1 || gamma.extent(0) != C || beta.dim() != 1 || beta.extent(0) != C)
    fail("group_norm: gamma/beta must have shape (" + std::to_string(C) + ")");
  int cg = C / groups;
  int64_t hw = static_cast<int64_t>(H) * W;
  int64_t M = cg * hw;

  Graph* g = tape_for({&x, &gamma, &beta});
  Tensor y = make_out(s, g != nullptr);

  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv = std::make_shared<std::vector<double>>(static_cast<size_t>(B) * groups);

  const double* xp = x.data();
  const double* gp = gamma.data();
  const double* bp = beta.data();
  double* yp = y.data();
  for (int bi = 0; bi < B; ++bi)
    for (int gi = 0; gi < groups; ++gi) {
      int64_t base = (static_cast<int64_t>(bi) * C + static_cast<int64_t>(gi) * cg) * hw;
      double mean = 0.0;
      for (int64_t i = 0; i < M; ++i) mean += xp[base + i];
      mean /= static_cast<double>(M);
      double var = 0.0;
      for (int64_t i = 0; i < M; ++i) {
        double d = xp[base + i] - mean;
        var += d * d;
      }
      var /= static_cast<double>(M);
      double iv = 1.0 / std::sqrt(var + eps);
      (*inv)[static_cast<size_t>(bi) * groups + gi] = iv;
      for (int c = 0; c < cg; ++c) {
        int ch = gi * cg + c;
        for (int64_t i = 0; i < hw; ++i) {
          int64_t off = base + c * hw + i;
          double xh = (xp[off] - mean) * iv;
          (*xhat)[off] = xh;
          yp[off] = gp[ch] * xh + bp[ch];
        }
      }
    }

  if (g) {
    g->record("group_norm", {x, gamma, beta}, y,
              [xi = x.impl, gi2 = gamma.impl, bi2 = beta.impl, yi = y.impl, xhat, inv, B, C, H, W,
               groups, cg, hw, M] {
                const double* gy = yi->grad.data();
                auto& gx = ensure_grad(xi);
                auto& gg = ensure_grad(gi2);
                auto& gb = ensure_grad(bi2);
                const double* gp = gi2->data.data();
                for (int bi = 0; bi < B; ++bi)
                  for (int gi = 0; gi < groups; ++gi) {
                    int64_t base =
                        (static_cast<int64_t>(bi) * C + static_cast<int64_t>(gi) * cg) * hw;
                    double m1 = 0.0, m2 = 0.0;
                    for (int c = 0; c < cg; ++c) {
                      int ch = gi * cg + c;
                      for (int64_t i = 0; i < hw; ++i) {
                        int64_t off = base + c * hw + i;
                        double t = gy[off] * gp[ch];
                        m1 += t;
                        m2 += t * (*xhat)[off];
                        gg[ch] += gy[off] * (*xhat)[off];
                        gb[ch] += gy[off];
                      }
                    }
                    m1 /= static_cast<double>(M);
                    m2 /= static_cast<double>(M);
                    double iv = (*inv)[static_cast<size_t>(bi) * groups + gi];
                    for (int c = 0; c < cg; ++c) {
                      int ch = gi * cg + c;
                      for (int64_t i = 0; i < hw; ++i) {
                        int64_t off = base + c * hw + i;
                        double t = gy[off] * gp[ch];
                        gx[off] += iv * (t - m1 - (*xhat)[off] * m2);
                      }
                    }
                  }
              });
  }
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const auto& s = x.shape();
  if (s.empty()) fail("layer_norm: scalar input");
  int64_t d = s.back();
  if (gamma.dim() != 1 || gamma.extent(0) != d || beta.dim() != 1 || beta.extent(0) != d)
    fail("layer_norm: gamma/beta must have shape (" + std::to_string(d) + ")");
  int64_t rows = x.numel() / d;

  Graph* g = tape_for({&x, &gamma, &beta});
  Tensor y = make_out(s, g != nullptr);

  auto xhat = std::make_shared<std::vector<double>>(x.numel());
  auto inv = std::make_shared<std::vector<double>>(rows);

  const double* xp = x.data();
  const double* gp = gamma.data();
  const double* bp = beta.data();
  double* yp = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = xp + r * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      double t = row[j] - mean;
      var += t * t;
    }
    var /= static_cast<double>(d);
    double iv = 1.0 / std::sqrt(var + eps);
    (*inv)[r] = iv;
    for (int64_t j = 0; j < d; ++j) {
      double xh = (row[j] - mean) * iv;
      (*xhat)[r * d + j] = xh;
      yp[r * d + j] = gp[j] * xh + bp[j];
    }
  }

  if (g) {
    g->record("layer_norm", {x, gamma, beta}, y,
              [xi = x.impl, gi = gamma.impl, bi = beta.impl, yi = y.impl, xhat, inv, rows, d] {
                const double* gy = yi->grad.data();
                auto& gx = ensure_grad(xi);
                auto& gg = ensure_grad(gi);
                auto& gb = ensure_grad(bi);
                const double* gp = gi->data.data();
                for (int64_t r = 0; r < rows; ++r) {
                  double m1 = 0.0, m2 = 0.0;
                  for (int64_t j = 0; j < d; ++j) {
                    int64_t off = r * d + j;
                    double t = gy[off] * gp[j];
                    m1 += t;
                    m2 += t * (*xhat)[off];
                    gg[j] += gy[off] * (*xhat)[off];
                    gb[j] += gy[off];
                  }
                  m1 /= static_cast<double>(d);
                  m2 /= static_cast<double>(d);
                  double iv = (*inv)[r];
                  for (int64_t j = 0; j < d; ++j) {
                    int64_t off = r * d + j;
                    double t = gy[off] * gp[j];
                    gx[off] += iv * (t - m1 - (*xhat)[off] * m2);
                  }
                }
              });
  }
  return y;
}

Tensor gelu(const Tensor& x) {
  static constexpr double inv_sqrt2 = 0.7071067811865475244;
  static constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return elementwise_unary(
      "gelu", x,
      [](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [](double v, double) {
        double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        return cdf + v * pdf;
      });
}

Tensor sigmoid(const Tensor& x) {
  return elementwise_unary(
      "sigmoid", x,
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double yv) { return yv * (1.0 - yv); });
}

Tensor softmax_lastdim(const Tensor& x) {
  const auto& s = x.shape();
  if (s.empty()) fail("softmax: scalar input");
  int64_t d = s.back();
  int64_t rows = x.numel() / d;
  Graph* g = tape_for({&x});
  Tensor y = make_out(s, g != nullptr);
  const double* xp = x.data();
  double* yp = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* row = xp + r * d;
    double mx = row[0];
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      double e = std::exp(row[j] - mx);
      yp[r * d + j] = e;
      sum += e;
    }
    for (int64_t j = 0; j < d; ++j) yp[r * d + j] /= sum;
  }
  if (g) {
    g->record("softmax", {x}, y, [xi = x.impl, yi = y.impl, rows, d] {
      const double* gy = yi->grad.data();
      const double* yv = yi->data.data();
      auto& gx = ensure_grad(xi);
      for (int64_t r = 0; r < rows; ++r) {
        double dot = 0.0;
        for (int64_t j = 0; j < d; ++j) dot += gy[r * d + j] * yv[r * d + j];
        for (int64_t j = 0; j < d; ++j)
          gx[r * d + j] += yv[r * d + j] * (gy[r * d + j] - dot);
      }
    });
  }
  return y;
}

Tensor adaptive_avg_pool2d(const Tensor& x, int out_h, int out_w) {
  const auto& s = x.shape();
  if (s.size() != 4) fail("adaptive_avg_pool2d: expected 4D input, got " + shape_str(s));
  int B = s[0], C = s[1], H = s[2], W = s[3];
  if (out_h < 1 || out_w < 1 || out_h > H || out_w > W)
    fail("adaptive_avg_pool2d: output grid " + std::to_string(out_h) + "x" +
         std::to_string(out_w) + " larger than input " + std::to_string(H) + "x" +
         std::to_string(W));
  Graph* g = tape_for({&x});
  Tensor y = make_out({B, C, out_h, out_w}, g != nullptr);
  const double* xp = x.data();
  double* yp = y.data();
  auto lo = [](int i, int n, int o) { return static_cast<int>(static_cast<int64_t>(i) * n / o); };
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* in = xp + (static_cast<size_t>(b) * C + c) * H * W;
      double* out = yp + (static_cast<size_t>(b) * C + c) * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        int y0 = lo(oy, H, out_h), y1 = lo(oy + 1, H, out_h);
        for (int ox = 0; ox < out_w; ++ox) {
          int x0 = lo(ox, W, out_w), x1 = lo(ox + 1, W, out_w);
          double sum = 0.0;
          for (int iy = y0; iy < y1; ++iy)
            for (int ix = x0; ix < x1; ++ix) sum += in[iy * W + ix];
          out[oy * out_w + ox] = sum / (static_cast<double>(y1 - y0) * (x1 - x0));
        }
      }
    }
  if (g) {
    g->record("adaptive_avg_pool2d", {x}, y, [xi = x.impl, yi = y.impl, B, C, H, W, out_h, out_w] {
      auto lo = [](int i, int n, int o) { return static_cast<int>(static_cast<int64_t>(i) * n / o); };
      const double* gy = yi->grad.data();
      auto& gx = ensure_grad(xi);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          double* in = gx.data() + (static_cast<size_t>(b) * C + c) * H * W;
          const double* out = gy + (static_cast<size_t>(b) * C + c) * out_h * out_w;
          for (int oy = 0; oy < out_h; ++oy) {
            int y0 = lo(oy, H, out_h), y1 = lo(oy + 1, H, out_h);
            for (int ox = 0; ox < out_w; ++ox) {
              int x0 = lo(ox, W, out_w), x1 = lo(ox + 1, W, out_w);
              double share = out[oy * out_w + ox] / (static_cast<double>(y1 - y0) * (x1 - x0));
              for (int iy = y0; iy < y1; ++iy)
                for (int ix = x0; ix < x1; ++ix) in[iy * W + ix] += share;
            }
          }
        }
    });
  }
  return y;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) fail("concat: empty input list");
  const auto& s0 = xs[0].shape();
  int rank = static_cast<int>(s0.size());
  if (axis < 0 || axis >= rank) fail("concat: axis " + std::to_string(axis) + " out of range");
  int total_axis = 0;
  for (const auto& t : xs) {
    const auto& s = t.shape();
    if (static_cast<int>(s.size()) != rank) fail("concat: rank mismatch");
    for (int i = 0; i < rank; ++i)
      if (i != axis && s[i] != s0[i])
        fail("concat: extent mismatch at axis " + std::to_string(i) + ": " + shape_str(s0) +
             " vs " + shape_str(s));
    total_axis += s[axis];
  }
  std::vector<int> out_shape = s0;
  out_shape[axis] = total_axis;

  bool any_rg = false;
  Graph* g = Graph::current();
  for (const auto& t : xs)
    if (t.requires_grad()) any_rg = true;
  if (!g) any_rg = false;

  Tensor y = make_out(out_shape, any_rg);

  int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[i];
  int64_t inner = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= s0[i];

  double* yp = y.data();
  int64_t axis_off = 0;
  for (const auto& t : xs) {
    int64_t ext = t.extent(axis);
    const double* xp = t.data();
    for (int64_t o = 0; o < outer; ++o)
      std::memcpy(yp + (o * total_axis + axis_off) * inner, xp + o * ext * inner,
                  static_cast<size_t>(ext * inner) * sizeof(double));
    axis_off += ext;
  }

  if (any_rg) {
    std::vector<std::shared_ptr<TensorImpl>> impls;
    std::vector<int64_t> exts;
    for (const auto& t : xs) {
      impls.push_back(t.impl);
      exts.push_back(t.extent(axis));
    }
    g->record("concat", xs, y, [impls, exts, yi = y.impl, outer, inner, total_axis] {
      const double* gy = yi->grad.data();
      int64_t axis_off = 0;
      for (size_t p = 0; p < impls.size(); ++p) {
        auto& gx = ensure_grad(impls[p]);
        int64_t ext = exts[p];
        for (int64_t o = 0; o < outer; ++o) {
          const double* src = gy + (o * total_axis + axis_off) * inner;
          double* dst = gx.data() + o * ext * inner;
          for (int64_t i = 0; i < ext * inner; ++i) dst[i] += src[i];
        }
        axis_off += ext;
      }
    });
  }
  return y;
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
  if (numel_of(shape) != x.numel())
    fail("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  Graph* g = tape_for({&x});
  Tensor y = make_out(std::move(shape), g != nullptr);
  std::memcpy(y.data(), x.data(), static_cast<size_t>(x.numel()) * sizeof(double));
  if (g) {
    g->record("reshape", {x}, y, [xi = x.impl, yi = y.impl] {
      auto& gx = ensure_grad(xi);
      const auto& gy = yi->grad;
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += gy[i];
    });
  }
  return y;
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const auto& s = x.shape();
  int rank = static_cast<int>(s.size());
  if (static_cast<int>(axes.size()) != rank) fail("permute: axes rank mismatch");
  std::vector<bool> seen(rank, false);
  std::vector<int> out_shape(rank);
  for (int i = 0; i < rank; ++i) {
    if (axes[i] < 0 || axes[i] >= rank || seen[axes[i]]) fail("permute: invalid axes");
    seen[axes[i]] = true;
    out_shape[i] = s[axes[i]];
  }
  Graph* g = tape_for({&x});
  Tensor y = make_out(out_shape, g != nullptr);

  auto in_strides = strides_of(s);
  auto copy_permuted = [rank](const double* src, double* dst, const std::vector<int>& oshape,
                              const std::vector<int64_t>& istr, const std::vector<int>& ax,
                              bool add) {
    int64_t n = numel_of(oshape);
    std::vector<int64_t> pstr(rank);
    for (int i = 0; i < rank; ++i) pstr[i] = istr[ax[i]];
    std::vector<int> idx(rank, 0);
    for (int64_t lin = 0; lin < n; ++lin) {
      int64_t off = 0;
      for (int i = 0; i < rank; ++i) off += idx[i] * pstr[i];
      if (add) dst[off] += src[lin];
      else dst[lin] = src[off];
      for (int i = rank - 1; i >= 0; --i) {
        if (++idx[i] < oshape[i]) break;
        idx[i] = 0;
      }
    }
  };
  copy_permuted(x.data(), y.data(), out_shape, in_strides, axes, false);

  if (g) {
    g->record("permute", {x}, y,
              [xi = x.impl, yi = y.impl, out_shape, in_strides, axes, copy_permuted] {
                auto& gx = ensure_grad(xi);
                copy_permuted(yi->grad.data(), gx.data(), out_shape, in_strides, axes, true);
              });
  }
  return y;
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  const auto& s = x.shape();
  int rank = static_cast<int>(s.size());
  if (axis < 0 || axis >= rank) fail("slice: axis " + std::to_string(axis) + " out of range");
  if (start < 0 || len < 0 || start + len > s[axis])
    fail("slice: range [" + std::to_string(start) + "," + std::to_string(start + len) +
         ") out of extent " + std::to_string(s[axis]));
  std::vector<int> out_shape = s;
  out_shape[axis] = len;
  Graph* g = tape_for({&x});
  Tensor y = make_out(out_shape, g != nullptr);

  int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  int64_t inner = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= s[i];
  int64_t ext = s[axis];

  const double* xp = x.data();
  double* yp = y.data();
  for (int64_t o = 0; o < outer; ++o)
    std::memcpy(yp + o * len * inner, xp + (o * ext + start) * inner,
                static_cast<size_t>(len * inner) * sizeof(double));

  if (g) {
    g->record("slice", {x}, y, [xi = x.impl, yi = y.impl, outer, inner, ext, start, len] {
      auto& gx = ensure_grad(xi);
      const double* gy = yi->grad.data();
      for (int64_t o = 0; o < outer; ++o) {
        double* dst = gx.data() + (o * ext + start) * inner;
        const double* src = gy + o * len * inner;
        for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    });
  }
  return y;
}

Tensor index_select(const Tensor& x, int axis, const std::vector<int>& indices) {
  const auto& s = x.shape();
  int rank = static_cast<int>(s.size());
  if (axis < 0 || axis >= rank) fail("index_select: axis out of range");
  for (int idx : indices)
    if (idx < 0 || idx >= s[axis])
      fail("index_select: index " + std::to_string(idx) + " out of extent " +
           std::to_string(s[axis]));
  std::vector<int> out_shape = s;
  out_shape[axis] = static_cast<int>(indices.size());
  Graph* g = tape_for({&x});
  Tensor y = make_out(out_shape, g != nullptr);

  int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  int64_t inner = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= s[i];
  int64_t ext = s[axis];
  int64_t m = static_cast<int64_t>(indices.size());

  const double* xp = x.data();
  double* yp = y.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t j = 0; j < m; ++j)
      std::memcpy(yp + (o * m + j) * inner, xp + (o * ext + indices[j]) * inner,
                  static_cast<size_t>(inner) * sizeof(double));

  if (g) {
    g->record("index_select", {x}, y, [xi = x.impl, yi = y.impl, indices, outer, inner, ext, m] {
      auto& gx = ensure_grad(xi);
      const double* gy = yi->grad.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t j = 0; j < m; ++j) {
          double* dst = gx.data() + (o * ext + indices[j]) * inner;
          const double* src = gy + (o * m + j) * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    });
  }
  return y;
}

Tensor broadcast_to(const Tensor& x, const std::vector<int>& shape) {
  const auto& s = x.shape();
  if (s.size() != shape.size())
    fail("broadcast_to: rank mismatch " + shape_str(s) + " vs " + shape_str(shape));
  int rank = static_cast<int>(s.size());
  for (int i = 0; i < rank; ++i)
    if (s[i] != shape[i] && s[i] != 1)
      fail("broadcast_to: cannot expand " + shape_str(s) + " to " + shape_str(shape));
  Graph* g = tape_for({&x});
  Tensor y = make_out(shape, g != nullptr);

  auto in_strides = strides_of(s);
  std::vector<int64_t> bstr(rank);
  for (int i = 0; i < rank; ++i) bstr[i] = (s[i] == 1 && shape[i] != 1) ? 0 : in_strides[i];

  const double* xp = x.data();
  double* yp = y.data();
  int64_t n = numel_of(shape);
  std::vector<int> idx(rank, 0);
  for (int64_t lin = 0; lin < n; ++lin) {
    int64_t off = 0;
    for (int i = 0; i < rank; ++i) off += idx[i] * bstr[i];
    yp[lin] = xp[off];
    for (int i = rank - 1; i >= 0; --i) {
      if (++idx[i] < shape[i]) break;
      idx[i] = 0;
    }
  }

  if (g) {
    g->record("broadcast_to", {x}, y, [xi = x.impl, yi = y.impl, shape, bstr, rank] {
      auto& gx = ensure_grad(xi);
      const double* gy = yi->grad.data();
      int64_t n = numel_of(shape);
      std::vector<int> idx(rank, 0);
      for (int64_t lin = 0; lin < n; ++lin) {
        int64_t off = 0;
        for (int i = 0; i < rank; ++i) off += idx[i] * bstr[i];
        gx[off] += gy[lin];
        for (int i = rank - 1; i >= 0; --i) {
          if (++idx[i] < shape[i]) break;
          idx[i] = 0;
        }
      }
    });
  }
  return y;
}

Tensor sum_all(const Tensor& x) {
  Graph* g = tape_for({&x});
  Tensor y = make_out({}, g != nullptr);
  const double* xp = x.data();
  double s = 0.0;
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) s += xp[i];
  y.data()[0] = s;
  if (g) {
    g->record("sum_all", {x}, y, [xi = x.impl, yi = y.impl] {
      auto& gx = ensure_grad(xi);
      double gy = yi->grad[0];
      for (auto& v : gx) v += gy;
    });
  }
  return y;
}

Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

Tensor reduce_sum(const Tensor& x, int axis) {
  const auto& s = x.shape();
  int rank = static_cast<int>(s.size());
  if (axis < 0 || axis >= rank) fail("reduce_sum: axis out of range for " + shape_str(s));
  std::vector<int> out_shape;
  for (int i = 0; i < rank; ++i)
    if (i != axis) out_shape.push_back(s[i]);
  Graph* g = tape_for({&x});
  Tensor y = make_out(out_shape, g != nullptr);

  int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  int64_t inner = 1;
  for (int i = axis + 1; i < rank; ++i) inner *= s[i];
  int64_t ext = s[axis];

  const double* xp = x.data();
  double* yp = y.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      double acc = 0.0;
      for (int64_t e = 0; e < ext; ++e) acc += xp[(o * ext + e) * inner + i];
      yp[o * inner + i] = acc;
    }

  if (g) {
    g->record("reduce_sum", {x}, y, [xi = x.impl, yi = y.impl, outer, inner, ext] {
      auto& gx = ensure_grad(xi);
      const double* gy = yi->grad.data();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t e = 0; e < ext; ++e)
          for (int64_t i = 0; i < inner; ++i)
            gx[(o * ext + e) * inner + i] += gy[o * inner + i];
    });
  }
  return y;
}

Tensor l2norm_lastdim(const Tensor& x) {
  const auto& s = x.shape();
  if (s.empty()) fail("l2norm: scalar input");
  int64_t d = s.back();
  int64_t rows = x.numel() / d;
  std::vector<int> out_shape(s.begin(), s.end() - 1);
  Graph* g = tape_for({&x});
  Tensor y = make_out(out_shape, g != nullptr);
  const double* xp = x.data();
  double* yp = y.data();
  for (int64_t r = 0; r < rows; ++r) {
    double acc = 0.0;
    for (int64_t j = 0; j < d; ++j) acc += xp[r * d + j] * xp[r * d + j];
    yp[r] = std::sqrt(acc);
  }
  if (g) {
    g->record("l2norm", {x}, y, [xi = x.impl, yi = y.impl, rows, d] {
      auto& gx = ensure_grad(xi);
      const double* gy = yi->grad.data();
      for (int64_t r = 0; r < rows; ++r) {
        double norm = yi->data[r];
        if (norm == 0.0) continue;  // subgradient 0 at the origin
        double s = gy[r] / norm;
        for (int64_t j = 0; j < d; ++j) gx[r * d + j] += s * xi->data[r * d + j];
      }
    });
  }
  return y;
}

Tensor abs(const Tensor& x) {
  return elementwise_unary(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor smooth_l1(const Tensor& x, double delta) {
  if (delta <= 0.0) fail("smooth_l1: delta must be positive");
  return elementwise_unary(
      "smooth_l1", x,
      [delta](double v) {
        double a = std::fabs(v);
        return a < delta ? 0.5 * v * v / delta : a - 0.5 * delta;
      },
      [delta](double v, double) {
        double a = std::fabs(v);
        if (a < delta) return v / delta;
        return v > 0.0 ? 1.0 : -1.0;
      });
}

Tensor clamp_max(const Tensor& x, double cap) {
  return elementwise_unary(
      "clamp_max", x, [cap](double v) { return v < cap ? v : cap; },
      [cap](double v, double) { return v < cap ? 1.0 : 0.0; });
}

Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
  if (q.dim() != 4 || k.dim() != 4 || v.dim() != 4)
    fail("scaled_dot_attention: expected (B,h,T,d) operands");
  int d = q.shape().back();
  if (k.shape().back() != d)
    fail("scaled_dot_attention: query dim " + std::to_string(d) + " vs key dim " +
         std::to_string(k.shape().back()));
  if (k.extent(2) != v.extent(2))
    fail("scaled_dot_attention: key count " + std::to_string(k.extent(2)) + " vs value count " +
         std::to_string(v.extent(2)));
  Tensor kt = permute(k, {0, 1, 3, 2});
  Tensor logits = scale(matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(d)));
  Tensor attn = softmax_lastdim(logits);
  return matmul(attn, v);
}

}  // namespace geohand::ops
