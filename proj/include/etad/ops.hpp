#pragma once

#include "etad/tensor.hpp"

#include <string>
#include <vector>

namespace etad {

// Differentiable ops over Graph tensors. Every op computes values the same
// way in train and eval mode; train mode additionally records a tape node
// that retains exactly the buffers its backward rule reads.
//
// Forward FLOP conventions (backward cost of a node equals its forward
// cost, by ledger convention):
//   elementwise (add, mul, relu, sigmoid, tanh, log, smooth_l1)  numel
//   matmul (m,k)x(k,n)                                           2*m*k*n
//   conv1d (K,T,Cin)->(K,T,Cout), kernel 3                       2*K*T*3*Cin*Cout + K*T*Cout
//   mean_axis1 (K,T,C)->(K,C)                                    K*T*C + K*C
//   sum_axis0 / sum_all                                          numel
//   group_norm (N,C)                                             8*N*C
//   lerp_gather P positions, C channels                          3*P*C
//   concat / slice / reshape                                     0 (movement)

enum class OpKind {
  kAdd,
  kMul,
  kMatmul,
  kRelu,
  kSigmoid,
  kTanh,
  kLog,
  kSumAll,
  kSmoothL1,
};

// add: same shape, (m,n)+(n) row broadcast, or x+scalar{1}
Tensor add(const Tensor& a, const Tensor& b);
// mul: same shape, or x*scalar{1}
Tensor mul(const Tensor& a, const Tensor& b);
Tensor matmul(const Tensor& a, const Tensor& b);
// matmul whose forward computes every output row independently, so a row's
// bits never depend on how many other rows sit in the batch; the per-sample
// encoder path needs this for partition-invariant encoding
Tensor matmul_rowstable(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sum_all(const Tensor& x);            // -> shape {1}
Tensor sum_axis0(const Tensor& x);          // (m,n) -> (n)
Tensor mean_axis1(const Tensor& x);         // (K,T,C) -> (K,C)
Tensor concat_rows(const std::vector<Tensor>& parts);  // 2-D, axis 0
Tensor slice_rows(const Tensor& x, std::int64_t start, std::int64_t len);
Tensor reshape(const Tensor& x, Shape shape);
// out[p,:] = linear interpolation of rows of f (N,C) at positions[p],
// positions clamped to [0, N-1]. rows_per_group > 1 groups consecutive
// sampled rows into one output row of rows_per_group*C values (a fused
// reshape; the flat layout is unchanged).
Tensor lerp_gather(const Tensor& f, const std::vector<double>& positions,
                   std::int64_t rows_per_group = 1);
// Interpolated-RoI projection: for proposal p with `bins` consecutive
// positions, out(p,:) = bias + sum_b lerp(f at positions[p*bins+b]) * W_b,
// where w stacks the per-bin maps as (bins*C, H). Equals
// matmul(lerp_gather(f, positions, bins), w) + bias with the projection
// hoisted before the gather, which avoids materializing the gathered bins.
Tensor roi_project(const Tensor& f, const std::vector<double>& positions,
                   std::int64_t bins, const Tensor& w, const Tensor& bias);

// (N,C) group normalization over channel groups, statistics per group over
// all N rows; gamma/beta per channel
Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  int num_groups, double eps = 1e-5);
// elementwise smooth-L1 of (pred - target)
Tensor smooth_l1(const Tensor& pred, const Tensor& target);
// temporal conv, kernel 3, zero pad 1: x (K,T,Cin), w (Cout,Cin,3), b (Cout)
Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b);

// generic dispatch over the fixed-arity tensor ops; unknown/unsupported
// kinds are rejected
Tensor apply(OpKind kind, const std::vector<Tensor>& inputs);
OpKind op_kind_from_string(const std::string& name);

// conveniences built from the ops above
Tensor scale(const Tensor& x, double c);
Tensor sub(const Tensor& a, const Tensor& b);

}  // namespace etad
