#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <vector>

#include "cstr/kernels.hpp"
#include "cstr/params.hpp"

using namespace cstr;
namespace k = cstr::kernels;

namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, Rng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-1, 1));
  return v;
}

template <typename T>
double max_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename T>
void check_gemm(int m, int n, int kk, bool ta, bool tb, double beta, Rng& rng) {
  const auto a = random_vec<T>(std::size_t(m) * kk, rng);
  const auto b = random_vec<T>(std::size_t(kk) * n, rng);
  auto c1 = random_vec<T>(std::size_t(m) * n, rng);
  auto c2 = c1;
  const int lda = ta ? m : kk, ldb = tb ? kk : n;
  k::gemm<T>(ta, tb, m, n, kk, T(0.75), a.data(), lda, b.data(), ldb, T(beta), c1.data(), n);
  k::reference::gemm<T>(ta, tb, m, n, kk, T(0.75), a.data(), lda, b.data(), ldb, T(beta), c2.data(), n);
  const double tol = (std::is_same_v<T, float> ? 1e-4 : 1e-11) * kk;
  EXPECT_LE(max_diff(c1, c2), tol) << m << "x" << n << "x" << kk << " ta=" << ta << " tb=" << tb;
}

template <typename T>
void check_conv(const k::ConvGeometry& g, Rng& rng, bool bias) {
  const auto x = random_vec<T>(std::size_t(g.batch * g.in_channels * g.in_h * g.in_w), rng);
  const auto w = random_vec<T>(std::size_t(g.out_channels * g.col_rows()), rng);
  const auto b = bias ? random_vec<T>(std::size_t(g.out_channels), rng) : std::vector<T>{};
  const std::size_t ny = std::size_t(g.batch * g.out_channels * g.out_plane());
  std::vector<T> y1(ny), y2(ny), cols;
  k::conv2d_forward<T>(g, x, w, b, y1, &cols);
  k::reference::conv2d_forward<T>(g, x, w, b, y2);
  const double tol = std::is_same_v<T, float> ? 1e-3 : 1e-10;
  EXPECT_LE(max_diff(y1, y2), tol);

  const auto dy = random_vec<T>(ny, rng);
  std::vector<T> dx1(x.size()), dx2(x.size()), dw1(w.size()), dw2(w.size()), db1(g.out_channels), db2(g.out_channels);
  k::conv2d_backward<T>(g, dy, w, cols, dx1, dw1, db1);
  k::reference::conv2d_backward<T>(g, x, dy, w, dx2, dw2, db2);
  EXPECT_LE(max_diff(dx1, dx2), tol) << "dx";
  EXPECT_LE(max_diff(dw1, dw2), tol) << "dweight";
  EXPECT_LE(max_diff(db1, db2), tol) << "dbias";
}

k::ConvGeometry random_geometry(Rng& rng) {
  k::ConvGeometry g;
  g.batch = 1 + rng.below(3);
  g.in_channels = 1 + rng.below(5);
  g.out_channels = 1 + rng.below(5);
  g.kernel_h = 1 + rng.below(3);
  g.kernel_w = 1 + rng.below(3);
  g.stride_h = 1 + rng.below(2);
  g.stride_w = 1 + rng.below(2);
  g.pad_top = rng.below(2);
  g.pad_bottom = rng.below(2);
  g.pad_left = rng.below(2);
  g.pad_right = rng.below(2);
  g.in_h = g.kernel_h + rng.below(6);
  g.in_w = g.kernel_w + rng.below(6);
  return g;
}

}  // namespace

TEST(Kernels, GemmMatchesReferenceAllTransposes) {
  Rng rng(1);
  for (int trial = 0; trial < 12; ++trial) {
    const int m = 1 + rng.below(40), n = 1 + rng.below(40), kk = 1 + rng.below(40);
    for (int mode = 0; mode < 4; ++mode) {
      const double beta = trial % 3 == 0 ? 0.0 : 0.5;
      check_gemm<float>(m, n, kk, mode & 1, mode & 2, beta, rng);
      check_gemm<double>(m, n, kk, mode & 1, mode & 2, beta, rng);
    }
  }
}

// Shapes where an optimized BLAS kernel selected for the wrong CPU returned
// garbage; gemm must stay correct whichever backend it picked.
TEST(Kernels, GemmLargeShapesRegression) {
  Rng rng(2);
  for (int mode = 0; mode < 4; ++mode) {
    check_gemm<double>(64, 576, 64, mode & 1, mode & 2, 0.0, rng);
    check_gemm<float>(64, 576, 64, mode & 1, mode & 2, 0.0, rng);
    check_gemm<double>(96, 200, 288, mode & 1, mode & 2, 1.0, rng);
  }
  const std::string backend = k::gemm_backend();
  EXPECT_NE(backend.find("f32:"), std::string::npos);
  EXPECT_NE(backend.find("f64:"), std::string::npos);
}

TEST(Kernels, GemmZeroInnerDimensionScalesByBeta) {
  std::vector<double> c{1, 2, 3, 4};
  k::gemm<double>(false, false, 2, 2, 0, 1.0, nullptr, 1, nullptr, 2, 0.5, c.data(), 2);
  EXPECT_EQ(c, (std::vector<double>{0.5, 1, 1.5, 2}));
}

TEST(Kernels, ConvMatchesReferenceRandomGeometries) {
  Rng rng(3);
  for (int i = 0; i < 40; ++i) {
    const auto g = random_geometry(rng);
    check_conv<double>(g, rng, i % 2 == 0);
    check_conv<float>(g, rng, i % 2 == 1);
  }
}

TEST(Kernels, ConvWeightGradientLargeChannels) {
  Rng rng(4);
  for (int cin : {8, 32, 64}) {
    k::ConvGeometry g{1, cin, 4, 16, 64, 3, 3, 1, 1, 1, 1, 1, 1};
    check_conv<double>(g, rng, true);
    check_conv<float>(g, rng, false);
  }
}

TEST(Kernels, MaxPoolMatchesReferenceWithOddEdges) {
  Rng rng(5);
  for (int i = 0; i < 20; ++i) {
    const std::int64_t planes = 1 + rng.below(4), h = 1 + rng.below(7), w = 1 + rng.below(7);
    const auto x = random_vec<double>(std::size_t(planes * h * w), rng);
    const std::size_t ny = std::size_t(planes * ((h + 1) / 2) * ((w + 1) / 2));
    std::vector<double> y1(ny), y2(ny);
    std::vector<std::int64_t> a1(ny), a2(ny);
    k::maxpool2x2_forward<double>(planes, h, w, x, y1, a1);
    k::reference::maxpool2x2_forward<double>(planes, h, w, x, y2, a2);
    EXPECT_EQ(y1, y2);
    EXPECT_EQ(a1, a2);
    std::vector<double> dy = random_vec<double>(ny, rng), dx(x.size());
    k::maxpool2x2_backward<double>(dy, a1, dx);
    // Gradient mass is conserved and lands only on argmax positions.
    double s_dy = 0, s_dx = 0;
    for (double v : dy) s_dy += v;
    for (double v : dx) s_dx += v;
    EXPECT_NEAR(s_dx, s_dy, 1e-12);
  }
}

TEST(Kernels, MaxPoolTiesPickFirstRowMajor) {
  const std::vector<double> x{3, 3, 3, 3};
  std::vector<double> y(1);
  std::vector<std::int64_t> a(1);
  k::maxpool2x2_forward<double>(1, 2, 2, x, y, a);
  EXPECT_EQ(a[0], 0);
  const std::vector<double> x2{1, 5, 5, 2};
  k::maxpool2x2_forward<double>(1, 2, 2, x2, y, a);
  EXPECT_EQ(a[0], 1);
}

TEST(Kernels, ChannelMomentsMatchDirectSums) {
  Rng rng(6);
  const std::int64_t n = 3, c = 4, plane = 10;
  const auto x = random_vec<double>(std::size_t(n * c * plane), rng);
  std::vector<double> mean(c), var(c);
  k::channel_moments<double>(n, c, plane, x, mean, var);
  for (std::int64_t ch = 0; ch < c; ++ch) {
    double s = 0, s2 = 0;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t p = 0; p < plane; ++p) s += x[std::size_t((i * c + ch) * plane + p)];
    const double m = s / double(n * plane);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t p = 0; p < plane; ++p) {
        const double d = x[std::size_t((i * c + ch) * plane + p)] - m;
        s2 += d * d;
      }
    EXPECT_NEAR(mean[ch], m, 1e-14);
    EXPECT_NEAR(var[ch], s2 / double(n * plane), 1e-14);
  }
}
