#include "cstr/kernels.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>
#include <limits>

namespace cstr::kernels {

namespace {

template <typename T>
void blas_gemm(bool ta, bool tb, int m, int n, int k, T alpha, const T* a, int lda, const T* b,
               int ldb, T beta, T* c, int ldc) {
  const auto opa = ta ? CblasTrans : CblasNoTrans;
  const auto opb = tb ? CblasTrans : CblasNoTrans;
  if constexpr (std::is_same_v<T, float>) {
    cblas_sgemm(CblasRowMajor, opa, opb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  } else {
    cblas_dgemm(CblasRowMajor, opa, opb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
  }
}

// Row-major C = alpha*op(A)*op(B) + beta*C; op(A) is packed so the inner loop is contiguous.
template <typename T>
void native_gemm(bool ta, bool tb, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
                 const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
                 std::int64_t ldc) {
  std::vector<T> bt;
  const T* bp = b;
  std::int64_t ldbp = ldb;
  if (tb) {
    bt.resize(static_cast<std::size_t>(k * n));
    for (std::int64_t j = 0; j < n; ++j)
      for (std::int64_t p = 0; p < k; ++p) bt[p * n + j] = b[j * ldb + p];
    bp = bt.data();
    ldbp = n;
  }
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < m; ++i) {
    T* ci = c + i * ldc;
    if (beta == T(0)) {
      std::fill(ci, ci + n, T(0));
    } else if (beta != T(1)) {
      for (std::int64_t j = 0; j < n; ++j) ci[j] *= beta;
    }
    for (std::int64_t p = 0; p < k; ++p) {
      const T av = alpha * (ta ? a[p * lda + i] : a[i * lda + p]);
      if (av == T(0)) continue;
      const T* bpp = bp + p * ldbp;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += av * bpp[j];
    }
  }
}

template <typename T>
bool blas_self_check() {
  struct Shape {
    int m, n, k;
  };
  const Shape shapes[] = {{3, 5, 7}, {64, 576, 64}, {33, 129, 65}, {96, 96, 288}};
  std::uint64_t state = 0x9e3779b97f4a7c15ULL;
  auto next = [&state] {
    state = state * 6364136223846793005ULL + 1442695040888963407ULL;
    return static_cast<T>(static_cast<double>(state >> 11) / 9007199254740992.0 - 0.5);
  };
  for (const Shape& s : shapes) {
    for (int mode = 0; mode < 4; ++mode) {
      const bool ta = mode & 1, tb = mode & 2;
      std::vector<T> a(static_cast<std::size_t>(s.m) * s.k), b(static_cast<std::size_t>(s.k) * s.n);
      for (auto& v : a) v = next();
      for (auto& v : b) v = next();
      std::vector<T> got(static_cast<std::size_t>(s.m) * s.n, T(0)), want(got.size(), T(0));
      const int lda = ta ? s.m : s.k, ldb = tb ? s.k : s.n;
      blas_gemm<T>(ta, tb, s.m, s.n, s.k, T(1), a.data(), lda, b.data(), ldb, T(0), got.data(), s.n);
      native_gemm<T>(ta, tb, s.m, s.n, s.k, T(1), a.data(), lda, b.data(), ldb, T(0), want.data(), s.n);
      // |entries| <= 0.5, so each product is within k/4; allow generous rounding slack.
      const double tol = 64.0 * s.k * std::numeric_limits<T>::epsilon();
      for (std::size_t i = 0; i < got.size(); ++i) {
        if (!(std::abs(static_cast<double>(got[i] - want[i])) <= tol)) return false;
      }
    }
  }
  return true;
}

}  // namespace

template <typename T>
bool blas_trusted() {
  static const bool trusted = blas_self_check<T>();
  return trusted;
}

std::string gemm_backend() {
  return std::string("f32:") + (blas_trusted<float>() ? "blas" : "native") +
         " f64:" + (blas_trusted<double>() ? "blas" : "native");
}

template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc) {
  if (m == 0 || n == 0) return;
  if (k == 0) {
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = 0; j < n; ++j) c[i * ldc + j] *= beta;
    return;
  }
  if (!blas_trusted<T>()) {
    native_gemm<T>(trans_a, trans_b, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
    return;
  }
  blas_gemm<T>(trans_a, trans_b, static_cast<int>(m), static_cast<int>(n), static_cast<int>(k),
               alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta, c,
               static_cast<int>(ldc));
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y, std::vector<T>* cols_out) {
  const std::int64_t ho = g.out_h(), wo = g.out_w(), plane = ho * wo;
  const std::int64_t np = g.batch * plane, rows = g.col_rows();
  std::vector<T> local;
  std::vector<T>& cols = cols_out ? *cols_out : local;
  cols.assign(static_cast<std::size_t>(rows * np), T(0));

#pragma omp parallel for schedule(static)
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t c = 0; c < g.in_channels; ++c) {
      const T* xc = x.data() + (n * g.in_channels + c) * g.in_h * g.in_w;
      for (std::int64_t kh = 0; kh < g.kernel_h; ++kh) {
        for (std::int64_t kw = 0; kw < g.kernel_w; ++kw) {
          const std::int64_t r = (c * g.kernel_h + kh) * g.kernel_w + kw;
          T* dst = cols.data() + r * np + n * plane;
          for (std::int64_t oh = 0; oh < ho; ++oh) {
            const std::int64_t ih = oh * g.stride_h - g.pad_top + kh;
            if (ih < 0 || ih >= g.in_h) continue;
            for (std::int64_t ow = 0; ow < wo; ++ow) {
              const std::int64_t iw = ow * g.stride_w - g.pad_left + kw;
              if (iw >= 0 && iw < g.in_w) dst[oh * wo + ow] = xc[ih * g.in_w + iw];
            }
          }
        }
      }
    }
  }

  std::vector<T> out(static_cast<std::size_t>(g.out_channels * np));
  gemm<T>(false, false, g.out_channels, np, rows, T(1), weight.data(), rows, cols.data(), np, T(0),
          out.data(), np);

#pragma omp parallel for schedule(static)
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t o = 0; o < g.out_channels; ++o) {
      const T b = bias.empty() ? T(0) : bias[static_cast<std::size_t>(o)];
      const T* src = out.data() + o * np + n * plane;
      T* dst = y.data() + (n * g.out_channels + o) * plane;
      for (std::int64_t p = 0; p < plane; ++p) dst[p] = src[p] + b;
    }
  }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> dy, std::span<const T> weight,
                     std::span<const T> cols, std::span<T> dx, std::span<T> dweight,
                     std::span<T> dbias) {
  const std::int64_t ho = g.out_h(), wo = g.out_w(), plane = ho * wo;
  const std::int64_t np = g.batch * plane, rows = g.col_rows();

  std::vector<T> dyt(static_cast<std::size_t>(g.out_channels * np));
#pragma omp parallel for schedule(static)
  for (std::int64_t o = 0; o < g.out_channels; ++o) {
    for (std::int64_t n = 0; n < g.batch; ++n) {
      const T* src = dy.data() + (n * g.out_channels + o) * plane;
      std::copy(src, src + plane, dyt.data() + o * np + n * plane);
    }
  }

  if (!dweight.empty()) {
    gemm<T>(false, true, g.out_channels, rows, np, T(1), dyt.data(), np, cols.data(), np, T(0),
            dweight.data(), rows);
  }
  if (!dbias.empty()) {
#pragma omp parallel for schedule(static)
    for (std::int64_t o = 0; o < g.out_channels; ++o) {
      T acc = 0;
      const T* row = dyt.data() + o * np;
      for (std::int64_t i = 0; i < np; ++i) acc += row[i];
      dbias[static_cast<std::size_t>(o)] = acc;
    }
  }
  if (dx.empty()) return;

  std::vector<T> dcols(static_cast<std::size_t>(rows * np));
  gemm<T>(true, false, rows, np, g.out_channels, T(1), weight.data(), rows, dyt.data(), np, T(0),
          dcols.data(), np);
  std::fill(dx.begin(), dx.end(), T(0));
#pragma omp parallel for schedule(static)
  for (std::int64_t n = 0; n < g.batch; ++n) {
    for (std::int64_t c = 0; c < g.in_channels; ++c) {
      T* xc = dx.data() + (n * g.in_channels + c) * g.in_h * g.in_w;
      for (std::int64_t kh = 0; kh < g.kernel_h; ++kh) {
        for (std::int64_t kw = 0; kw < g.kernel_w; ++kw) {
          const std::int64_t r = (c * g.kernel_h + kh) * g.kernel_w + kw;
          const T* src = dcols.data() + r * np + n * plane;
          for (std::int64_t oh = 0; oh < ho; ++oh) {
            const std::int64_t ih = oh * g.stride_h - g.pad_top + kh;
            if (ih < 0 || ih >= g.in_h) continue;
            for (std::int64_t ow = 0; ow < wo; ++ow) {
              const std::int64_t iw = ow * g.stride_w - g.pad_left + kw;
              if (iw >= 0 && iw < g.in_w) xc[ih * g.in_w + iw] += src[oh * wo + ow];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void maxpool2x2_forward(std::int64_t planes, std::int64_t h, std::int64_t w, std::span<const T> x,
                        std::span<T> y, std::span<std::int64_t> argmax) {
  const std::int64_t ho = (h + 1) / 2, wo = (w + 1) / 2;
#pragma omp parallel for schedule(static)
  for (std::int64_t p = 0; p < planes; ++p) {
    const std::int64_t base = p * h * w;
    for (std::int64_t oh = 0; oh < ho; ++oh) {
      for (std::int64_t ow = 0; ow < wo; ++ow) {
        T best = -std::numeric_limits<T>::infinity();
        std::int64_t best_idx = -1;
        for (std::int64_t dh = 0; dh < 2; ++dh) {
          const std::int64_t ih = 2 * oh + dh;
          if (ih >= h) continue;
          for (std::int64_t dw = 0; dw < 2; ++dw) {
            const std::int64_t iw = 2 * ow + dw;
            if (iw >= w) continue;
            const std::int64_t idx = base + ih * w + iw;
            if (best_idx < 0 || x[static_cast<std::size_t>(idx)] > best) {
              best = x[static_cast<std::size_t>(idx)];
              best_idx = idx;
            }
          }
        }
        const std::int64_t out = (p * ho + oh) * wo + ow;
        y[static_cast<std::size_t>(out)] = best;
        argmax[static_cast<std::size_t>(out)] = best_idx;
      }
    }
  }
}

template <typename T>
void maxpool2x2_backward(std::span<const T> dy, std::span<const std::int64_t> argmax,
                         std::span<T> dx) {
  std::fill(dx.begin(), dx.end(), T(0));
  // Windows never overlap, so each input receives at most one contribution.
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < static_cast<std::int64_t>(dy.size()); ++i) {
    dx[static_cast<std::size_t>(argmax[static_cast<std::size_t>(i)])] += dy[static_cast<std::size_t>(i)];
  }
}

template <typename T>
void channel_moments(std::int64_t n, std::int64_t c, std::int64_t plane, std::span<const T> x,
                     std::span<T> mean, std::span<T> var) {
  const double count = static_cast<double>(n * plane);
#pragma omp parallel for schedule(static)
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double s = 0;
    for (std::int64_t b = 0; b < n; ++b) {
      const T* src = x.data() + (b * c + ch) * plane;
      for (std::int64_t p = 0; p < plane; ++p) s += src[p];
    }
    const double m = s / count;
    double v = 0;
    for (std::int64_t b = 0; b < n; ++b) {
      const T* src = x.data() + (b * c + ch) * plane;
      for (std::int64_t p = 0; p < plane; ++p) {
        const double d = src[p] - m;
        v += d * d;
      }
    }
    mean[static_cast<std::size_t>(ch)] = static_cast<T>(m);
    var[static_cast<std::size_t>(ch)] = static_cast<T>(v / count);
  }
}

namespace reference {

template <typename T>
void gemm(bool trans_a, bool trans_b, std::int64_t m, std::int64_t n, std::int64_t k, T alpha,
          const T* a, std::int64_t lda, const T* b, std::int64_t ldb, T beta, T* c,
          std::int64_t ldc) {
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      T acc = 0;
      for (std::int64_t p = 0; p < k; ++p) {
        const T av = trans_a ? a[p * lda + i] : a[i * lda + p];
        const T bv = trans_b ? b[j * ldb + p] : b[p * ldb + j];
        acc += av * bv;
      }
      c[i * ldc + j] = alpha * acc + beta * c[i * ldc + j];
    }
  }
}

template <typename T>
void conv2d_forward(const ConvGeometry& g, std::span<const T> x, std::span<const T> weight,
                    std::span<const T> bias, std::span<T> y) {
  const std::int64_t ho = g.out_h(), wo = g.out_w();
  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t o = 0; o < g.out_channels; ++o)
      for (std::int64_t oh = 0; oh < ho; ++oh)
        for (std::int64_t ow = 0; ow < wo; ++ow) {
          T acc = bias.empty() ? T(0) : bias[static_cast<std::size_t>(o)];
          for (std::int64_t c = 0; c < g.in_channels; ++c)
            for (std::int64_t kh = 0; kh < g.kernel_h; ++kh)
              for (std::int64_t kw = 0; kw < g.kernel_w; ++kw) {
                const std::int64_t ih = oh * g.stride_h - g.pad_top + kh;
                const std::int64_t iw = ow * g.stride_w - g.pad_left + kw;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                acc += x[static_cast<std::size_t>(((n * g.in_channels + c) * g.in_h + ih) * g.in_w + iw)] *
                       weight[static_cast<std::size_t>(((o * g.in_channels + c) * g.kernel_h + kh) * g.kernel_w + kw)];
              }
          y[static_cast<std::size_t>(((n * g.out_channels + o) * ho + oh) * wo + ow)] = acc;
        }
}

template <typename T>
void conv2d_backward(const ConvGeometry& g, std::span<const T> x, std::span<const T> dy,
                     std::span<const T> weight, std::span<T> dx, std::span<T> dweight,
                     std::span<T> dbias) {
  const std::int64_t ho = g.out_h(), wo = g.out_w();
  std::fill(dx.begin(), dx.end(), T(0));
  std::fill(dweight.begin(), dweight.end(), T(0));
  std::fill(dbias.begin(), dbias.end(), T(0));
  for (std::int64_t n = 0; n < g.batch; ++n)
    for (std::int64_t o = 0; o < g.out_channels; ++o)
      for (std::int64_t oh = 0; oh < ho; ++oh)
        for (std::int64_t ow = 0; ow < wo; ++ow) {
          const T grad = dy[static_cast<std::size_t>(((n * g.out_channels + o) * ho + oh) * wo + ow)];
          if (!dbias.empty()) dbias[static_cast<std::size_t>(o)] += grad;
          for (std::int64_t c = 0; c < g.in_channels; ++c)
            for (std::int64_t kh = 0; kh < g.kernel_h; ++kh)
              for (std::int64_t kw = 0; kw < g.kernel_w; ++kw) {
                const std::int64_t ih = oh * g.stride_h - g.pad_top + kh;
                const std::int64_t iw = ow * g.stride_w - g.pad_left + kw;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                const auto xi = static_cast<std::size_t>(((n * g.in_channels + c) * g.in_h + ih) * g.in_w + iw);
                const auto wi = static_cast<std::size_t>(((o * g.in_channels + c) * g.kernel_h + kh) * g.kernel_w + kw);
                if (!dx.empty()) dx[xi] += grad * weight[wi];
                if (!dweight.empty()) dweight[wi] += grad * x[xi];
              }
        }
}

template <typename T>
void maxpool2x2_forward(std::int64_t planes, std::int64_t h, std::int64_t w, std::span<const T> x,
                        std::span<T> y, std::span<std::int64_t> argmax) {
  const std::int64_t ho = (h + 1) / 2, wo = (w + 1) / 2;
  for (std::int64_t p = 0; p < planes; ++p)
    for (std::int64_t oh = 0; oh < ho; ++oh)
      for (std::int64_t ow = 0; ow < wo; ++ow) {
        // Row-major scan with strict comparison: first maximum wins.
        std::int64_t best = -1;
        for (std::int64_t ih = 2 * oh; ih < std::min(h, 2 * oh + 2); ++ih)
          for (std::int64_t iw = 2 * ow; iw < std::min(w, 2 * ow + 2); ++iw) {
            const std::int64_t idx = (p * h + ih) * w + iw;
            if (best < 0 || x[static_cast<std::size_t>(idx)] > x[static_cast<std::size_t>(best)]) best = idx;
          }
        const auto out = static_cast<std::size_t>((p * ho + oh) * wo + ow);
        y[out] = x[static_cast<std::size_t>(best)];
        argmax[out] = best;
      }
}

}  // namespace reference

#define CSTR_INSTANTIATE_KERNELS(T)                                                              \
  template bool blas_trusted<T>();                                                               \
  template void gemm<T>(bool, bool, std::int64_t, std::int64_t, std::int64_t, T, const T*,       \
                        std::int64_t, const T*, std::int64_t, T, T*, std::int64_t);              \
  template void conv2d_forward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,   \
                                  std::span<const T>, std::span<T>, std::vector<T>*);            \
  template void conv2d_backward<T>(const ConvGeometry&, std::span<const T>, std::span<const T>,  \
                                   std::span<const T>, std::span<T>, std::span<T>,               \
                                   std::span<T>);                                                \
  template void maxpool2x2_forward<T>(std::int64_t, std::int64_t, std::int64_t,                  \
                                      std::span<const T>, std::span<T>,                          \
                                      std::span<std::int64_t>);                                  \
  template void maxpool2x2_backward<T>(std::span<const T>, std::span<const std::int64_t>,        \
                                       std::span<T>);                                            \
  template void channel_moments<T>(std::int64_t, std::int64_t, std::int64_t, std::span<const T>, \
                                   std::span<T>, std::span<T>);                                  \
  template void reference::gemm<T>(bool, bool, std::int64_t, std::int64_t, std::int64_t, T,      \
                                   const T*, std::int64_t, const T*, std::int64_t, T, T*,        \
                                   std::int64_t);                                                \
  template void reference::conv2d_forward<T>(const ConvGeometry&, std::span<const T>,            \
                                             std::span<const T>, std::span<const T>,             \
                                             std::span<T>);                                      \
  template void reference::conv2d_backward<T>(const ConvGeometry&, std::span<const T>,           \
                                              std::span<const T>, std::span<const T>,            \
                                              std::span<T>, std::span<T>, std::span<T>);         \
  template void reference::maxpool2x2_forward<T>(std::int64_t, std::int64_t, std::int64_t,       \
                                                 std::span<const T>, std::span<T>,               \
                                                 std::span<std::int64_t>);

CSTR_INSTANTIATE_KERNELS(float)
CSTR_INSTANTIATE_KERNELS(double)

#undef CSTR_INSTANTIATE_KERNELS

}  // namespace cstr::kernels
