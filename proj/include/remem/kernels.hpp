#pragma once

// Data-parallel kernels behind the generator. The default entry points are
// OpenMP-parallel over an outer channel axis with a fixed serial reduction
// order inside each channel, so results are bit-identical for any thread
// count. `reference::` holds straightforward serial versions used by tests
// and the benchmark.

#include <Eigen/Dense>

#include "remem/tensor.hpp"

namespace remem {

enum class Nonlinearity { identity, relu, leaky_relu, tanh };

inline constexpr float kLeakySlope = 0.2f;

const char* to_string(Nonlinearity n);
Nonlinearity nonlinearity_from_string(const std::string& s);

namespace kernels {

/// Same-padded cross-correlation: out = conv(in, weight) + bias.
/// in: C x H x W, weight: O x C x KH x KW (odd kernels), bias: O.
Tensor conv2d(const Tensor& in, const Tensor& weight, const Tensor& bias);

/// Gradient of conv2d with respect to its input.
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight);

/// Gradients with respect to weight and bias, written into grad_w / grad_b
/// (overwritten, shapes set here).
void conv2d_grad_params(const Tensor& in, const Tensor& grad_out, const std::vector<int>& weight_shape,
                        Tensor& grad_w, Tensor& grad_b);

Tensor upsample_nearest(const Tensor& in, int factor);
Tensor upsample_nearest_grad(const Tensor& grad_out, int factor);

void activate_inplace(Tensor& t, Nonlinearity act);
/// grad_pre = grad_out * act'(pre), in place on grad.
void activate_grad_inplace(Tensor& grad, const Tensor& pre, Nonlinearity act);

/// Accumulates sum over locations of k k^T for a C x H x W key map into
/// `acc` (C x C, upper and lower triangle both written).
void accumulate_second_moment(const Tensor& keys, Eigen::MatrixXd& acc);

namespace reference {

Tensor conv2d(const Tensor& in, const Tensor& weight, const Tensor& bias);
Tensor conv2d_grad_input(const Tensor& grad_out, const Tensor& weight);
void conv2d_grad_params(const Tensor& in, const Tensor& grad_out, const std::vector<int>& weight_shape,
                        Tensor& grad_w, Tensor& grad_b);
void accumulate_second_moment(const Tensor& keys, Eigen::MatrixXd& acc);

}  // namespace reference
}  // namespace kernels
}  // namespace remem
