#pragma once

#include <vector>

#include "geohand/tensor.hpp"

// Differentiable primitives. Each op validates shapes, computes the forward
// value, and (when a Graph is active and some input is on the tape) records a
// backward closure. Shape errors name the op and the offending extents.

namespace geohand::ops {

// elementwise, same shape
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor scale(const Tensor& x, double s);
Tensor add_scalar(const Tensor& x, double c);

// bias over the last axis, broadcast across leading axes
Tensor add_rowbias(const Tensor& x, const Tensor& b);

// (L...,m,k) @ (L...,k,n); either operand may be plain 2D and broadcasts
Tensor matmul(const Tensor& a, const Tensor& b);

// x (B,Cin,H,W), w (Cout,Cin,kh,kw), b (Cout)
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

// x (B,C,H,W); gamma/beta (C); normalizes each of the B*groups slices
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                  double eps = 1e-5);

// normalizes the last axis; gamma/beta match it
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor gelu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax_lastdim(const Tensor& x);

// x (B,C,H,W) -> (B,C,out_h,out_w), averaging an even partition of the extent
Tensor adaptive_avg_pool2d(const Tensor& x, int out_h, int out_w);

Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor index_select(const Tensor& x, int axis, const std::vector<int>& indices);

// extents must match or be 1 in x; rank must match
Tensor broadcast_to(const Tensor& x, const std::vector<int>& shape);

Tensor sum_all(const Tensor& x);    // -> scalar
Tensor mean_all(const Tensor& x);   // -> scalar
Tensor reduce_sum(const Tensor& x, int axis);

// Euclidean norm over the last axis; gradient defined as 0 at the origin
Tensor l2norm_lastdim(const Tensor& x);

// |x| with subgradient 0 at x = 0
Tensor abs(const Tensor& x);

// 0.5 x^2/delta inside |x| < delta, |x| - 0.5 delta outside
Tensor smooth_l1(const Tensor& x, double delta);

// min(x, cap); gradient 0 where the cap is active
Tensor clamp_max(const Tensor& x, double cap);

// q,k,v (B,h,Tq,d)/(B,h,Tk,d); composition of permute/matmul/softmax
Tensor scaled_dot_attention(const Tensor& q, const Tensor& k, const Tensor& v);

}  // namespace geohand::ops
