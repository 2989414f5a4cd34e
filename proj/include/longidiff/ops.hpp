#pragma once

#include <functional>

#include "longidiff/tensor.hpp"

namespace longidiff {

/// 3-D cross-correlation over NCDHW tensors with cubic kernels.
/// x: [N,Cin,D,H,W], w: [Cout,Cin,k,k,k], b: [Cout] (may be undefined for
/// no bias). Zero padding `pad` on every spatial face, isotropic `stride`.
/// Output spatial extent: (in + 2*pad - k) / stride + 1, which must be >= 1.
Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int stride,
              int pad);

/// Transposed convolution used for decoder upsampling, kernel 2, stride 2,
/// no padding, no bias: exact doubling of each spatial extent.
/// x: [N,Cin,D,H,W], w: [Cin,Cout,2,2,2].
Tensor conv3d_transpose(const Tensor& x, const Tensor& w, int stride = 2);

/// Instance normalization without learnable affine: each (n, c) slice is
/// normalized by its own spatial mean and population variance.
Tensor instance_norm(const Tensor& x, double eps = 1e-5);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor leaky_relu(const Tensor& x, double negative_slope = 0.01);

/// Concatenate along the channel axis; all other dims must match.
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Softmax over the channel axis, computed max-shifted per voxel.
Tensor softmax_channels(const Tensor& x);

/// Sum of all elements -> scalar tensor (shape [1]).
Tensor sum_all(const Tensor& x);

/// Combined objective for binary segmentation logits [N,2,D,H,W] against an
/// integer target [N,1,D,H,W] with values in {0,1}:
///   cross-entropy averaged over all voxels
/// + (1 - global soft Dice of the foreground-probability channel),
/// equally weighted. Dice uses additive smoothing of 1 in both numerator
/// and denominator, so an empty-target/empty-prediction pair is a perfect
/// score rather than 0/0. Softmax and log-softmax are fused and max-shifted.
Tensor dice_ce_loss(const Tensor& logits, const Tensor& target);

/// Forward-only breakdown of the two dice_ce_loss terms.
struct DiceCeParts {
  double ce;
  double dice_loss;
};
DiceCeParts dice_ce_parts(const Tensor& logits, const Tensor& target);

/// Central-difference gradient verification of fn at `inputs`.
/// Runs backward() once, then perturbs every coordinate of every
/// requires-grad input by ±h and compares. Returns the max relative error
///   |analytic - numeric| / max(|analytic|, |numeric|, atol_floor).
/// Meaningful only in f64 mode.
struct GradCheckOptions {
  double h = 1e-3;
  double atol_floor = 1e-8;
};
double gradcheck(const std::function<Tensor(std::vector<Tensor>&)>& fn,
                 std::vector<Tensor> inputs, const GradCheckOptions& opt = {});

}  // namespace longidiff
