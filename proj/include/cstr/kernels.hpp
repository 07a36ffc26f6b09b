#pragma once

// Raw numeric kernels behind the differentiable ops.
//
// `cstr::kernels` holds the production path: im2col + BLAS GEMM for
// convolutions and OpenMP loops over independent samples/channels. Every
// reduction is done per output element in a fixed order, so results do not
// depend on the worker count.
//
// `cstr::kernels::reference` holds direct serial loops that mirror the
// mathematical definitions. They are slow and only used by tests and the
// benchmark to check the production path.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace cstr::kernels {

struct ConvGeometry {
  std::int64_t batch = 1;
  std::int64_t in_channels = 1;
  std::int64_t in_h = 1;
  std::int64_t in_w = 1;
  std::int64_t out_channels = 1;
  std::int64_t kernel_h = 1;
  std::int64_t kernel_w = 1;
  std::int64_t stride_h = 1;
  std::int64_t stride_w = 1;
  std::int64_t pad_top = 0;
  std::int64_t pad_bottom = 0;
  std::int64_t pad_left = 0;
  std::int64_t pad_right = 0;

  std::int64_t out_h() const { return (in_h + pad_top + pad_bottom - kernel_h) / stride_h + 1; }
  std::int64_t out_w() const { return (in_w + pad_left + pad_right - kernel_w) / stride_w + 1; }
  std::int64_t col_rows() const { return in_channels * kernel_h * kernel_w; }
  std::int64_t out_plane() const { return out_h() * out_w(); }
};

// C = alpha * op(A) * op(B) + beta * C, row-major.
template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c, std::int64_t ldc);

// Some BLAS builds pick a CPU-specific kernel that returns wrong results on
// hosts lacking an instruction it assumes. The first gemm call per type
// compares BLAS against a naive product on a few shapes; on mismatch every
// later call uses the native blocked kernel instead.
template <typename T>
bool blas_trusted();
std::string gemm_backend();

// `cols` receives the im2col matrix [col_rows, batch * out_plane] when non-null;
// conv2d_backward needs it to form the weight gradient.
template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y, std::vector<T>* cols);

// Any of dx / dweight / dbias may be empty to skip that gradient. Outputs are overwritten.
template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> dy, std::span<const T> weight,
                     std::span<const T> cols, std::span<T> dx, std::span<T> dweight,
                     std::span<T> dbias);

// 2x2 window, stride 2; odd trailing rows/cols are padded with -inf.
// argmax stores the flat input index chosen for each output element.
template <typename T>
void maxpool2x2_forward(std::int64_t planes, std::int64_t h, std::int64_t w, std::span<const T> x,
                        std::span<T> y, std::span<std::int64_t> argmax);

template <typename T>
void maxpool2x2_backward(std::span<const T> dy, std::span<const std::int64_t> argmax,
                         std::span<T> dx);

// Per-channel batch statistics over N x H x W (biased variance).
template <typename T>
void channel_moments(std::int64_t n, std::int64_t c, std::int64_t plane, std::span<const T> x,
                     std::span<T> mean, std::span<T> var);

namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c, std::int64_t ldc);

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y);

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> dy,
                     std::span<const T> weight, std::span<T> dx, std::span<T> dweight,
                     std::span<T> dbias);

template <typename T>
void maxpool2x2_forward(std::int64_t planes, std::int64_t h, std::int64_t w, std::span<const T> x,
                        std::span<T> y, std::span<std::int64_t> argmax);

}  // namespace reference
}  // namespace cstr::kernels
