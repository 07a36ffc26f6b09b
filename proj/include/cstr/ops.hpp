#pragma once

// Differentiable primitives. Every op validates shapes up front and throws
// ShapeError naming the offending dims; all inputs must live in one Graph.

#include <string>
#include <vector>

#include "cstr/autodiff.hpp"

namespace cstr {

struct Conv2dOptions {
  int stride_h = 1;
  int stride_w = 1;
  int pad_top = 0;
  int pad_bottom = 0;
  int pad_left = 0;
  int pad_right = 0;

  // Symmetric padding that keeps H and W for odd kernels at stride 1.
  static Conv2dOptions same(int kernel, int stride = 1) {
    const int p = kernel / 2;
    return {stride, stride, p, p, p, p};
  }
};

// input N x C x H x W, weight O x C x Kh x Kw, bias O (may be an invalid Var).
Var conv2d(Var input, Var weight, Var bias, const Conv2dOptions& options);

// 2x2 window, stride 2, odd edges padded with -inf. Ties go to the first
// element in row-major window order.
Var max_pool2x2(Var input);

// N x C x H x W -> N x C x 1 x 1
Var global_avg_pool(Var input);

// x N x In, weight Out x In, bias Out (may be invalid).
Var linear(Var x, Var weight, Var bias);
Var matmul(Var a, Var b);
// Batched product over the leading dim: a B x M x K, b B x K x N (before transposes).
Var bmm(Var a, Var b, bool trans_a = false, bool trans_b = false);

Var relu(Var x);
Var sigmoid(Var x);

// Elementwise with broadcasting over dims of size 1 (equal ranks required).
Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
Var add_scalar(Var x, double value);

Var softmax(Var x, int axis);

struct BatchNormOptions {
  double momentum = 0.9;  // running <- momentum * running + (1 - momentum) * batch
  double eps = 1e-5;
};

// Training graphs normalize with batch statistics and stage updated running
// statistics under `running_mean_name` / `running_var_name`; eval graphs use
// the running statistics stored in the graph's parameters.
Var batch_norm2d(Var x, Var gamma, Var beta, const std::string& running_mean_name,
                 const std::string& running_var_name, const BatchNormOptions& options = {});

Var upsample_nearest2d(Var x, int factor);
Var concat(const std::vector<Var>& parts, int axis);

// Reductions to a single-element tensor of shape {1}.
Var sum(Var x);
Var mean(Var x);
// Reductions over one axis, keeping it with extent 1.
Var reduce_mean(Var x, int axis);
Var reduce_max(Var x, int axis);

Var reshape(Var x, Shape shape);
Var permute(Var x, const std::vector<int>& order);

// x N x C x P, weight P x V x C, bias P x V -> N x P x V.
// Position p uses its own projection on column p of x.
Var position_linear(Var x, Var weight, Var bias);

}  // namespace cstr
