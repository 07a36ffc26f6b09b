#include "cstr/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>

#include "cstr/kernels.hpp"

namespace cstr {

namespace {

template <typename T>
std::span<const T> cdata(const Var& v) {
  return v.value().template data<T>();
}

template <typename T>
std::span<const T> cdata(const Tensor& t) {
  return t.template data<T>();
}

std::string dims(const Var& v) { return to_string(v.shape()); }

void same_graph(std::initializer_list<Var> vs) {
  const Graph* g = nullptr;
  for (const auto& v : vs) {
    if (!v.valid()) continue;
    if (g && &v.graph() != g) throw std::logic_error("op mixes Vars from different graphs");
    g = &v.graph();
  }
}

int normalize_axis(int axis, int rank, const char* op) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) {
    throw ShapeError(std::string(op) + ": axis out of range for rank " + std::to_string(rank));
  }
  return axis;
}

struct AxisSplit {
  std::int64_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, int axis) {
  AxisSplit r;
  for (int i = 0; i < axis; ++i) r.outer *= s[static_cast<std::size_t>(i)];
  r.len = s[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

std::vector<std::int64_t> strides_of(const Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (int i = static_cast<int>(s.size()) - 2; i >= 0; --i) {
    st[static_cast<std::size_t>(i)] = st[static_cast<std::size_t>(i) + 1] * s[static_cast<std::size_t>(i) + 1];
  }
  return st;
}

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> sa, sb;
};

Broadcast make_broadcast(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(op) + ": rank mismatch " + to_string(a) + " vs " + to_string(b));
  }
  Broadcast bc;
  const auto sta = strides_of(a), stb = strides_of(b);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw ShapeError(std::string(op) + ": cannot broadcast " + to_string(a) + " with " +
                       to_string(b) + " at dim " + std::to_string(i));
    }
    bc.out.push_back(std::max(a[i], b[i]));
    bc.sa.push_back(a[i] == 1 ? 0 : sta[i]);
    bc.sb.push_back(b[i] == 1 ? 0 : stb[i]);
  }
  return bc;
}

// Calls f(out_index, a_index, b_index) for every output element in row-major order.
template <typename F>
void broadcast_for_each(const Broadcast& bc, F&& f) {
  const int r = static_cast<int>(bc.out.size());
  const std::int64_t total = numel(bc.out);
  const std::int64_t inner = bc.out.back();
  const std::int64_t ia_step = bc.sa.back(), ib_step = bc.sb.back();
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t io = 0; io < total; io += inner) {
    for (std::int64_t j = 0; j < inner; ++j) f(io + j, ia + j * ia_step, ib + j * ib_step);
    for (int d = r - 2; d >= 0; --d) {
      const auto du = static_cast<std::size_t>(d);
      ++idx[du];
      ia += bc.sa[du];
      ib += bc.sb[du];
      if (idx[du] < bc.out[du]) break;
      ia -= bc.sa[du] * bc.out[du];
      ib -= bc.sb[du] * bc.out[du];
      idx[du] = 0;
    }
  }
}

Tensor permute_tensor(const Tensor& x, const std::vector<int>& order) {
  const Shape& in = x.shape();
  Shape out(in.size());
  for (std::size_t i = 0; i < order.size(); ++i) out[i] = in[static_cast<std::size_t>(order[i])];
  const auto in_st = strides_of(in);
  std::vector<std::int64_t> st(order.size());
  for (std::size_t i = 0; i < order.size(); ++i) st[i] = in_st[static_cast<std::size_t>(order[i])];
  Tensor y(out, x.precision());
  dispatch(x.precision(), [&](auto tag) {
    using T = decltype(tag);
    auto src = x.data<T>();
    auto dst = y.mutable_data<T>();
    Broadcast walk{out, st, st};
    broadcast_for_each(walk, [&](std::int64_t io, std::int64_t ii, std::int64_t) {
      dst[static_cast<std::size_t>(io)] = src[static_cast<std::size_t>(ii)];
    });
  });
  return y;
}

}  // namespace

Var conv2d(Var x, Var w, Var b, const Conv2dOptions& opt) {
  same_graph({x, w, b});
  if (x.value().rank() != 4) throw ShapeError("conv2d: input must be NCHW, got " + dims(x));
  if (w.value().rank() != 4) throw ShapeError("conv2d: weight must be OIKhKw, got " + dims(w));
  kernels::ConvGeometry geo;
  geo.batch = x.dim(0);
  geo.in_channels = x.dim(1);
  geo.in_h = x.dim(2);
  geo.in_w = x.dim(3);
  geo.out_channels = w.dim(0);
  geo.kernel_h = w.dim(2);
  geo.kernel_w = w.dim(3);
  geo.stride_h = opt.stride_h;
  geo.stride_w = opt.stride_w;
  geo.pad_top = opt.pad_top;
  geo.pad_bottom = opt.pad_bottom;
  geo.pad_left = opt.pad_left;
  geo.pad_right = opt.pad_right;
  if (w.dim(1) != geo.in_channels) {
    throw ShapeError("conv2d: input channels " + std::to_string(geo.in_channels) +
                     " != weight in-channels " + std::to_string(w.dim(1)) + " (input " + dims(x) +
                     ", weight " + dims(w) + ")");
  }
  if (geo.stride_h < 1 || geo.stride_w < 1) throw ShapeError("conv2d: stride must be >= 1");
  if (geo.in_h + geo.pad_top + geo.pad_bottom < geo.kernel_h ||
      geo.in_w + geo.pad_left + geo.pad_right < geo.kernel_w) {
    throw ShapeError("conv2d: padded input " + dims(x) + " smaller than kernel " + dims(w));
  }
  if (b.valid() && b.shape() != Shape{geo.out_channels}) {
    throw ShapeError("conv2d: bias shape " + dims(b) + " != [" + std::to_string(geo.out_channels) + "]");
  }
  Graph& g = x.graph();
  const Shape out_shape{geo.batch, geo.out_channels, geo.out_h(), geo.out_w()};
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y(out_shape, g.precision());
    auto cols = std::make_shared<std::vector<T>>();
    const bool keep_cols = g.any_requires_grad({w});
    kernels::conv2d_forward<T>(geo, cdata<T>(x), cdata<T>(w),
                               b.valid() ? cdata<T>(b) : std::span<const T>{},
                               y.mutable_data<T>(), keep_cols ? cols.get() : nullptr);
    return g.record(std::move(y), {x, w, b}, [x, w, b, geo, cols](Graph& gr, const Tensor& dy) {
      Tensor dx, dw, db;
      std::span<T> sdx, sdw, sdb;
      if (x.requires_grad()) {
        dx = Tensor(x.shape(), gr.precision());
        sdx = dx.mutable_data<T>();
      }
      if (w.requires_grad()) {
        dw = Tensor(w.shape(), gr.precision());
        sdw = dw.mutable_data<T>();
      }
      if (b.valid() && b.requires_grad()) {
        db = Tensor(b.shape(), gr.precision());
        sdb = db.mutable_data<T>();
      }
      kernels::conv2d_backward<T>(geo, dy.data<T>(), cdata<T>(w), *cols, sdx, sdw, sdb);
      if (dx.defined()) gr.accumulate(x, dx);
      if (dw.defined()) gr.accumulate(w, dw);
      if (db.defined()) gr.accumulate(b, db);
    });
  });
}

Var max_pool2x2(Var x) {
  if (x.value().rank() != 4) throw ShapeError("max_pool2x2: input must be NCHW, got " + dims(x));
  Graph& g = x.graph();
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Shape out_shape{n, c, (h + 1) / 2, (w + 1) / 2};
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y(out_shape, g.precision());
    auto argmax = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(numel(out_shape)));
    kernels::maxpool2x2_forward<T>(n * c, h, w, cdata<T>(x), y.mutable_data<T>(), *argmax);
    return g.record(std::move(y), {x}, [x, argmax](Graph& gr, const Tensor& dy) {
      Tensor dx(x.shape(), gr.precision());
      kernels::maxpool2x2_backward<T>(dy.data<T>(), *argmax, dx.mutable_data<T>());
      gr.accumulate(x, dx);
    });
  });
}

Var global_avg_pool(Var x) {
  if (x.value().rank() != 4) throw ShapeError("global_avg_pool: input must be NCHW, got " + dims(x));
  Graph& g = x.graph();
  const std::int64_t planes = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y({x.dim(0), x.dim(1), 1, 1}, g.precision());
    auto src = cdata<T>(x);
    auto dst = y.mutable_data<T>();
    for (std::int64_t p = 0; p < planes; ++p) {
      T acc = 0;
      for (std::int64_t i = 0; i < area; ++i) acc += src[static_cast<std::size_t>(p * area + i)];
      dst[static_cast<std::size_t>(p)] = acc / static_cast<T>(area);
    }
    return g.record(std::move(y), {x}, [x, planes, area](Graph& gr, const Tensor& dy) {
      Tensor dx(x.shape(), gr.precision());
      auto d = dx.mutable_data<T>();
      auto s = dy.data<T>();
      for (std::int64_t p = 0; p < planes; ++p) {
        const T v = s[static_cast<std::size_t>(p)] / static_cast<T>(area);
        std::fill_n(d.begin() + p * area, area, v);
      }
      gr.accumulate(x, dx);
    });
  });
}

Var linear(Var x, Var w, Var b) {
  same_graph({x, w, b});
  if (x.value().rank() != 2 || w.value().rank() != 2 || x.dim(1) != w.dim(1)) {
    throw ShapeError("linear: input " + dims(x) + " incompatible with weight " + dims(w));
  }
  const std::int64_t n = x.dim(0), in = x.dim(1), out = w.dim(0);
  if (b.valid() && b.shape() != Shape{out}) {
    throw ShapeError("linear: bias " + dims(b) + " != [" + std::to_string(out) + "]");
  }
  Graph& g = x.graph();
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y({n, out}, g.precision());
    auto yd = y.mutable_data<T>();
    if (b.valid()) {
      auto bd = cdata<T>(b);
      for (std::int64_t i = 0; i < n; ++i) std::copy(bd.begin(), bd.end(), yd.begin() + i * out);
    }
    kernels::gemm<T>(false, true, n, out, in, T(1), cdata<T>(x).data(), in, cdata<T>(w).data(), in,
                     b.valid() ? T(1) : T(0), yd.data(), out);
    return g.record(std::move(y), {x, w, b}, [x, w, b, n, in, out](Graph& gr, const Tensor& dy) {
      auto dyd = dy.data<T>();
      if (x.requires_grad()) {
        Tensor dx(x.shape(), gr.precision());
        kernels::gemm<T>(false, false, n, in, out, T(1), dyd.data(), out, cdata<T>(w).data(), in, T(0),
                         dx.mutable_data<T>().data(), in);
        gr.accumulate(x, dx);
      }
      if (w.requires_grad()) {
        Tensor dw(w.shape(), gr.precision());
        kernels::gemm<T>(true, false, out, in, n, T(1), dyd.data(), out, cdata<T>(x).data(), in, T(0),
                         dw.mutable_data<T>().data(), in);
        gr.accumulate(w, dw);
      }
      if (b.valid() && b.requires_grad()) {
        Tensor db(b.shape(), gr.precision());
        auto d = db.mutable_data<T>();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t o = 0; o < out; ++o) d[static_cast<std::size_t>(o)] += dyd[static_cast<std::size_t>(i * out + o)];
        gr.accumulate(b, db);
      }
    });
  });
}

Var matmul(Var a, Var b) {
  if (a.value().rank() != 2 || b.value().rank() != 2) {
    throw ShapeError("matmul: expected 2-D operands, got " + dims(a) + " and " + dims(b));
  }
  return reshape(bmm(reshape(a, {1, a.dim(0), a.dim(1)}), reshape(b, {1, b.dim(0), b.dim(1)})),
                 {a.dim(0), b.dim(1)});
}

Var bmm(Var a, Var b, bool ta, bool tb) {
  same_graph({a, b});
  if (a.value().rank() != 3 || b.value().rank() != 3 || a.dim(0) != b.dim(0)) {
    throw ShapeError("bmm: expected B x M x K and B x K x N, got " + dims(a) + " and " + dims(b));
  }
  const std::int64_t batch = a.dim(0);
  const std::int64_t ra = a.dim(1), ca = a.dim(2), rb = b.dim(1), cb = b.dim(2);
  const std::int64_t m = ta ? ca : ra, k = ta ? ra : ca;
  const std::int64_t kb = tb ? cb : rb, n = tb ? rb : cb;
  if (k != kb) {
    throw ShapeError("bmm: inner dims differ (" + std::to_string(k) + " vs " + std::to_string(kb) +
                     ") for " + dims(a) + " and " + dims(b));
  }
  Graph& g = a.graph();
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y({batch, m, n}, g.precision());
    auto ad = cdata<T>(a);
    auto bd = cdata<T>(b);
    auto yd = y.mutable_data<T>();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < batch; ++i) {
      kernels::gemm<T>(ta, tb, m, n, k, T(1), ad.data() + i * ra * ca, ca, bd.data() + i * rb * cb, cb,
                       T(0), yd.data() + i * m * n, n);
    }
    return g.record(std::move(y), {a, b}, [=](Graph& gr, const Tensor& dy) {
      auto dyd = dy.data<T>();
      if (a.requires_grad()) {
        Tensor da(a.shape(), gr.precision());
        auto dad = da.mutable_data<T>();
        auto bdd = cdata<T>(b);
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < batch; ++i) {
          const T* dc = dyd.data() + i * m * n;
          const T* bb = bdd.data() + i * rb * cb;
          T* out = dad.data() + i * ra * ca;
          if (!ta) {
            kernels::gemm<T>(false, !tb, m, k, n, T(1), dc, n, bb, cb, T(0), out, k);
          } else {
            kernels::gemm<T>(tb, true, k, m, n, T(1), bb, cb, dc, n, T(0), out, m);
          }
        }
        gr.accumulate(a, da);
      }
      if (b.requires_grad()) {
        Tensor db(b.shape(), gr.precision());
        auto dbd = db.mutable_data<T>();
        auto add = cdata<T>(a);
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < batch; ++i) {
          const T* dc = dyd.data() + i * m * n;
          const T* aa = add.data() + i * ra * ca;
          T* out = dbd.data() + i * rb * cb;
          if (!tb) {
            kernels::gemm<T>(!ta, false, k, n, m, T(1), aa, ca, dc, n, T(0), out, n);
          } else {
            kernels::gemm<T>(true, ta, n, k, m, T(1), dc, n, aa, ca, T(0), out, k);
          }
        }
        gr.accumulate(b, db);
      }
    });
  });
}

Var relu(Var x) {
  Graph& g = x.graph();
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y(x.shape(), g.precision());
    auto s = cdata<T>(x);
    auto d = y.mutable_data<T>();
    const auto n = static_cast<std::int64_t>(s.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) d[static_cast<std::size_t>(i)] = std::max(s[static_cast<std::size_t>(i)], T(0));
    return g.record(std::move(y), {x}, [x](Graph& gr, const Tensor& dy) {
      Tensor dx(x.shape(), gr.precision());
      auto xs = cdata<T>(x);
      auto gs = dy.data<T>();
      auto d = dx.mutable_data<T>();
      const auto n = static_cast<std::int64_t>(xs.size());
#pragma omp parallel for schedule(static)
      for (std::int64_t i = 0; i < n; ++i) {
        const auto u = static_cast<std::size_t>(i);
        d[u] = xs[u] > T(0) ? gs[u] : T(0);
      }
      gr.accumulate(x, dx);
    });
  });
}

Var sigmoid(Var x) {
  Graph& g = x.graph();
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y(x.shape(), g.precision());
    auto s = cdata<T>(x);
    auto d = y.mutable_data<T>();
    for (std::size_t i = 0; i < s.size(); ++i) d[i] = T(1) / (T(1) + std::exp(-s[i]));
    auto saved = std::make_shared<Tensor>(y);
    return g.record(std::move(y), {x}, [x, saved](Graph& gr, const Tensor& dy) {
      Tensor dx(x.shape(), gr.precision());
      auto ys = saved->data<T>();
      auto gs = dy.data<T>();
      auto d = dx.mutable_data<T>();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = gs[i] * ys[i] * (T(1) - ys[i]);
      gr.accumulate(x, dx);
    });
  });
}

namespace {

enum class BinaryKind { add, mul };

Var binary(Var a, Var b, BinaryKind kind) {
  same_graph({a, b});
  const char* name = kind == BinaryKind::add ? "add" : "mul";
  const Broadcast bc = make_broadcast(a.shape(), b.shape(), name);
  Graph& g = a.graph();
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y(bc.out, g.precision());
    auto ad = cdata<T>(a);
    auto bd = cdata<T>(b);
    auto yd = y.mutable_data<T>();
    const bool same = a.shape() == b.shape();
    if (same) {
      const auto n = static_cast<std::int64_t>(yd.size());
#pragma omp parallel for schedule(static)
      for (std::int64_t i = 0; i < n; ++i) {
        const auto u = static_cast<std::size_t>(i);
        yd[u] = kind == BinaryKind::add ? ad[u] + bd[u] : ad[u] * bd[u];
      }
    } else {
      broadcast_for_each(bc, [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
        const T va = ad[static_cast<std::size_t>(ia)], vb = bd[static_cast<std::size_t>(ib)];
        yd[static_cast<std::size_t>(io)] = kind == BinaryKind::add ? va + vb : va * vb;
      });
    }
    return g.record(std::move(y), {a, b}, [a, b, bc, kind](Graph& gr, const Tensor& dy) {
      auto gd = dy.data<T>();
      auto ad = cdata<T>(a);
      auto bd = cdata<T>(b);
      Tensor da, db;
      std::span<T> dad, dbd;
      if (a.requires_grad()) {
        da = Tensor(a.shape(), gr.precision());
        dad = da.mutable_data<T>();
      }
      if (b.requires_grad()) {
        db = Tensor(b.shape(), gr.precision());
        dbd = db.mutable_data<T>();
      }
      broadcast_for_each(bc, [&](std::int64_t io, std::int64_t ia, std::int64_t ib) {
        const T gv = gd[static_cast<std::size_t>(io)];
        if (!dad.empty()) {
          dad[static_cast<std::size_t>(ia)] += kind == BinaryKind::add ? gv : gv * bd[static_cast<std::size_t>(ib)];
        }
        if (!dbd.empty()) {
          dbd[static_cast<std::size_t>(ib)] += kind == BinaryKind::add ? gv : gv * ad[static_cast<std::size_t>(ia)];
        }
      });
      if (da.defined()) gr.accumulate(a, da);
      if (db.defined()) gr.accumulate(b, db);
    });
  });
}

}  // namespace

Var add(Var a, Var b) { return binary(a, b, BinaryKind::add); }
Var mul(Var a, Var b) { return binary(a, b, BinaryKind::mul); }

Var scale(Var x, double factor) {
  Graph& g = x.graph();
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y(x.shape(), g.precision());
    auto s = cdata<T>(x);
    auto d = y.mutable_data<T>();
    const T f = static_cast<T>(factor);
    for (std::size_t i = 0; i < s.size(); ++i) d[i] = s[i] * f;
    return g.record(std::move(y), {x}, [x, f](Graph& gr, const Tensor& dy) {
      Tensor dx(x.shape(), gr.precision());
      auto gs = dy.data<T>();
      auto d = dx.mutable_data<T>();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = gs[i] * f;
      gr.accumulate(x, dx);
    });
  });
}

Var add_scalar(Var x, double value) {
  Graph& g = x.graph();
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y(x.shape(), g.precision());
    auto s = cdata<T>(x);
    auto d = y.mutable_data<T>();
    for (std::size_t i = 0; i < s.size(); ++i) d[i] = s[i] + static_cast<T>(value);
    return g.record(std::move(y), {x}, [x](Graph& gr, const Tensor& dy) { gr.accumulate(x, dy); });
  });
}

Var softmax(Var x, int axis) {
  axis = normalize_axis(axis, x.value().rank(), "softmax");
  const AxisSplit sp = split_at(x.shape(), axis);
  Graph& g = x.graph();
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y(x.shape(), g.precision());
    auto s = cdata<T>(x);
    auto d = y.mutable_data<T>();
#pragma omp parallel for schedule(static)
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.len * sp.inner + in;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t l = 0; l < sp.len; ++l) mx = std::max(mx, s[static_cast<std::size_t>(base + l * sp.inner)]);
        T z = 0;
        for (std::int64_t l = 0; l < sp.len; ++l) {
          const auto u = static_cast<std::size_t>(base + l * sp.inner);
          d[u] = std::exp(s[u] - mx);
          z += d[u];
        }
        for (std::int64_t l = 0; l < sp.len; ++l) d[static_cast<std::size_t>(base + l * sp.inner)] /= z;
      }
    }
    auto saved = std::make_shared<Tensor>(y);
    return g.record(std::move(y), {x}, [x, sp, saved](Graph& gr, const Tensor& dy) {
      Tensor dx(x.shape(), gr.precision());
      auto ys = saved->data<T>();
      auto gs = dy.data<T>();
      auto d = dx.mutable_data<T>();
#pragma omp parallel for schedule(static)
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t in = 0; in < sp.inner; ++in) {
          const std::int64_t base = o * sp.len * sp.inner + in;
          T dot = 0;
          for (std::int64_t l = 0; l < sp.len; ++l) {
            const auto u = static_cast<std::size_t>(base + l * sp.inner);
            dot += gs[u] * ys[u];
          }
          for (std::int64_t l = 0; l < sp.len; ++l) {
            const auto u = static_cast<std::size_t>(base + l * sp.inner);
            d[u] = ys[u] * (gs[u] - dot);
          }
        }
      }
      gr.accumulate(x, dx);
    });
  });
}

Var batch_norm2d(Var x, Var gamma, Var beta, const std::string& running_mean_name,
                 const std::string& running_var_name, const BatchNormOptions& opt) {
  same_graph({x, gamma, beta});
  if (x.value().rank() != 4) throw ShapeError("batch_norm2d: input must be NCHW, got " + dims(x));
  const std::int64_t n = x.dim(0), c = x.dim(1), plane = x.dim(2) * x.dim(3);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("batch_norm2d: affine params " + dims(gamma) + "/" + dims(beta) +
                     " for " + std::to_string(c) + " channels");
  }
  Graph& g = x.graph();
  const bool training = g.training();
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> mean(static_cast<std::size_t>(c)), var(static_cast<std::size_t>(c));
    if (training) {
      kernels::channel_moments<T>(n, c, plane, cdata<T>(x), mean, var);
      const double m = static_cast<double>(n * plane);
      const Tensor& rm = g.params().get(running_mean_name);
      const Tensor& rv = g.params().get(running_var_name);
      Tensor new_mean(rm.shape(), rm.precision()), new_var(rv.shape(), rv.precision());
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const double unbiased = m > 1 ? var[static_cast<std::size_t>(ch)] * m / (m - 1) : var[static_cast<std::size_t>(ch)];
        new_mean.set(ch, opt.momentum * rm.at(ch) + (1 - opt.momentum) * mean[static_cast<std::size_t>(ch)]);
        new_var.set(ch, opt.momentum * rv.at(ch) + (1 - opt.momentum) * unbiased);
      }
      g.stage_buffer(running_mean_name, std::move(new_mean));
      g.stage_buffer(running_var_name, std::move(new_var));
    } else {
      const auto rm = g.params().get(running_mean_name).to(g.precision());
      const auto rv = g.params().get(running_var_name).to(g.precision());
      auto rmd = rm.data<T>();
      auto rvd = rv.data<T>();
      std::copy(rmd.begin(), rmd.end(), mean.begin());
      std::copy(rvd.begin(), rvd.end(), var.begin());
    }
    auto invstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(c));
    for (std::int64_t ch = 0; ch < c; ++ch) {
      (*invstd)[static_cast<std::size_t>(ch)] = T(1) / std::sqrt(var[static_cast<std::size_t>(ch)] + static_cast<T>(opt.eps));
    }
    Tensor y(x.shape(), g.precision());
    auto xhat = std::make_shared<Tensor>(x.shape(), g.precision());
    {
      auto xs = cdata<T>(x);
      auto gs = cdata<T>(gamma);
      auto bs = cdata<T>(beta);
      auto yd = y.mutable_data<T>();
      auto hd = xhat->mutable_data<T>();
#pragma omp parallel for schedule(static)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        const auto cu = static_cast<std::size_t>(ch);
        for (std::int64_t b = 0; b < n; ++b) {
          const std::int64_t base = (b * c + ch) * plane;
          for (std::int64_t p = 0; p < plane; ++p) {
            const auto u = static_cast<std::size_t>(base + p);
            hd[u] = (xs[u] - mean[cu]) * (*invstd)[cu];
            yd[u] = gs[cu] * hd[u] + bs[cu];
          }
        }
      }
    }
    return g.record(std::move(y), {x, gamma, beta},
                    [x, gamma, beta, xhat, invstd, n, c, plane, training](Graph& gr, const Tensor& dy) {
      auto gd = dy.data<T>();
      auto hd = xhat->data<T>();
      auto gs = cdata<T>(gamma);
      std::vector<T> sum_dy(static_cast<std::size_t>(c), T(0)), sum_dy_xhat(static_cast<std::size_t>(c), T(0));
#pragma omp parallel for schedule(static)
      for (std::int64_t ch = 0; ch < c; ++ch) {
        T s1 = 0, s2 = 0;
        for (std::int64_t b = 0; b < n; ++b) {
          const std::int64_t base = (b * c + ch) * plane;
          for (std::int64_t p = 0; p < plane; ++p) {
            const auto u = static_cast<std::size_t>(base + p);
            s1 += gd[u];
            s2 += gd[u] * hd[u];
          }
        }
        sum_dy[static_cast<std::size_t>(ch)] = s1;
        sum_dy_xhat[static_cast<std::size_t>(ch)] = s2;
      }
      if (x.requires_grad()) {
        Tensor dx(x.shape(), gr.precision());
        auto d = dx.mutable_data<T>();
        const T m = static_cast<T>(n * plane);
#pragma omp parallel for schedule(static)
        for (std::int64_t ch = 0; ch < c; ++ch) {
          const auto cu = static_cast<std::size_t>(ch);
          const T k = gs[cu] * (*invstd)[cu];
          for (std::int64_t b = 0; b < n; ++b) {
            const std::int64_t base = (b * c + ch) * plane;
            for (std::int64_t p = 0; p < plane; ++p) {
              const auto u = static_cast<std::size_t>(base + p);
              d[u] = training ? k / m * (m * gd[u] - sum_dy[cu] - hd[u] * sum_dy_xhat[cu]) : k * gd[u];
            }
          }
        }
        gr.accumulate(x, dx);
      }
      if (gamma.requires_grad()) {
        Tensor dg = Tensor::from_values({c}, std::vector<double>(sum_dy_xhat.begin(), sum_dy_xhat.end()), gr.precision());
        gr.accumulate(gamma, dg);
      }
      if (beta.requires_grad()) {
        Tensor db = Tensor::from_values({c}, std::vector<double>(sum_dy.begin(), sum_dy.end()), gr.precision());
        gr.accumulate(beta, db);
      }
    });
  });
}

Var upsample_nearest2d(Var x, int factor) {
  if (x.value().rank() != 4) throw ShapeError("upsample_nearest2d: input must be NCHW, got " + dims(x));
  if (factor < 1) throw ShapeError("upsample_nearest2d: factor must be >= 1");
  Graph& g = x.graph();
  const std::int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t oh = h * factor, ow = w * factor;
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y({x.dim(0), x.dim(1), oh, ow}, g.precision());
    auto s = cdata<T>(x);
    auto d = y.mutable_data<T>();
    for (std::int64_t p = 0; p < planes; ++p)
      for (std::int64_t i = 0; i < oh; ++i)
        for (std::int64_t j = 0; j < ow; ++j)
          d[static_cast<std::size_t>((p * oh + i) * ow + j)] = s[static_cast<std::size_t>((p * h + i / factor) * w + j / factor)];
    return g.record(std::move(y), {x}, [=](Graph& gr, const Tensor& dy) {
      Tensor dx(x.shape(), gr.precision());
      auto gs = dy.data<T>();
      auto dd = dx.mutable_data<T>();
      for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t i = 0; i < oh; ++i)
          for (std::int64_t j = 0; j < ow; ++j)
            dd[static_cast<std::size_t>((p * h + i / factor) * w + j / factor)] += gs[static_cast<std::size_t>((p * oh + i) * ow + j)];
      gr.accumulate(x, dx);
    });
  });
}

Var concat(const std::vector<Var>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& first = parts.front().shape();
  axis = normalize_axis(axis, static_cast<int>(first.size()), "concat");
  Shape out = first;
  out[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) {
    if (&p.graph() != &parts.front().graph()) throw std::logic_error("concat mixes graphs");
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) {
      if (static_cast<int>(i) != axis && s[i] != first[i]) ok = false;
    }
    if (!ok) throw ShapeError("concat: " + to_string(s) + " incompatible with " + to_string(first));
    out[static_cast<std::size_t>(axis)] += s[static_cast<std::size_t>(axis)];
  }
  Graph& g = parts.front().graph();
  const AxisSplit sp = split_at(out, axis);
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y(out, g.precision());
    auto d = y.mutable_data<T>();
    std::int64_t offset = 0;
    for (const auto& p : parts) {
      const std::int64_t len = p.dim(axis);
      auto s = cdata<T>(p);
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        std::copy_n(s.begin() + o * len * sp.inner, len * sp.inner,
                    d.begin() + (o * sp.len + offset) * sp.inner);
      }
      offset += len;
    }
    return g.record(std::move(y), parts, [parts, axis, sp](Graph& gr, const Tensor& dy) {
      auto gs = dy.data<T>();
      std::int64_t offset = 0;
      for (const auto& p : parts) {
        const std::int64_t len = p.dim(axis);
        if (p.requires_grad()) {
          Tensor dp(p.shape(), gr.precision());
          auto d = dp.mutable_data<T>();
          for (std::int64_t o = 0; o < sp.outer; ++o) {
            std::copy_n(gs.begin() + (o * sp.len + offset) * sp.inner, len * sp.inner,
                        d.begin() + o * len * sp.inner);
          }
          gr.accumulate(p, dp);
        }
        offset += len;
      }
    });
  });
}

Var sum(Var x) {
  Graph& g = x.graph();
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    T acc = 0;
    for (T v : cdata<T>(x)) acc += v;
    Tensor y = Tensor::full({1}, static_cast<double>(acc), g.precision());
    return g.record(std::move(y), {x}, [x](Graph& gr, const Tensor& dy) {
      gr.accumulate(x, Tensor::full(x.shape(), dy.at(0), gr.precision()));
    });
  });
}

Var mean(Var x) { return scale(sum(x), 1.0 / static_cast<double>(x.value().numel())); }

namespace {

enum class ReduceKind { mean, max };

Var reduce_axis(Var x, int axis, ReduceKind kind) {
  axis = normalize_axis(axis, x.value().rank(), kind == ReduceKind::mean ? "reduce_mean" : "reduce_max");
  const AxisSplit sp = split_at(x.shape(), axis);
  Shape out = x.shape();
  out[static_cast<std::size_t>(axis)] = 1;
  Graph& g = x.graph();
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y(out, g.precision());
    auto s = cdata<T>(x);
    auto d = y.mutable_data<T>();
    auto argmax = std::make_shared<std::vector<std::int64_t>>();
    if (kind == ReduceKind::max) argmax->resize(static_cast<std::size_t>(sp.outer * sp.inner));
    for (std::int64_t o = 0; o < sp.outer; ++o) {
      for (std::int64_t in = 0; in < sp.inner; ++in) {
        const std::int64_t base = o * sp.len * sp.inner + in;
        const auto ou = static_cast<std::size_t>(o * sp.inner + in);
        if (kind == ReduceKind::mean) {
          T acc = 0;
          for (std::int64_t l = 0; l < sp.len; ++l) acc += s[static_cast<std::size_t>(base + l * sp.inner)];
          d[ou] = acc / static_cast<T>(sp.len);
        } else {
          std::int64_t best = base;
          for (std::int64_t l = 1; l < sp.len; ++l) {
            const std::int64_t idx = base + l * sp.inner;
            if (s[static_cast<std::size_t>(idx)] > s[static_cast<std::size_t>(best)]) best = idx;
          }
          d[ou] = s[static_cast<std::size_t>(best)];
          (*argmax)[ou] = best;
        }
      }
    }
    return g.record(std::move(y), {x}, [x, sp, kind, argmax](Graph& gr, const Tensor& dy) {
      Tensor dx(x.shape(), gr.precision());
      auto gs = dy.data<T>();
      auto dd = dx.mutable_data<T>();
      for (std::int64_t o = 0; o < sp.outer; ++o) {
        for (std::int64_t in = 0; in < sp.inner; ++in) {
          const auto ou = static_cast<std::size_t>(o * sp.inner + in);
          if (kind == ReduceKind::mean) {
            const T v = gs[ou] / static_cast<T>(sp.len);
            const std::int64_t base = o * sp.len * sp.inner + in;
            for (std::int64_t l = 0; l < sp.len; ++l) dd[static_cast<std::size_t>(base + l * sp.inner)] = v;
          } else {
            dd[static_cast<std::size_t>((*argmax)[ou])] += gs[ou];
          }
        }
      }
      gr.accumulate(x, dx);
    });
  });
}

}  // namespace

Var reduce_mean(Var x, int axis) { return reduce_axis(x, axis, ReduceKind::mean); }
Var reduce_max(Var x, int axis) { return reduce_axis(x, axis, ReduceKind::max); }

Var reshape(Var x, Shape shape) {
  Graph& g = x.graph();
  Tensor y = x.value().reshaped(std::move(shape));
  return g.record(std::move(y), {x}, [x](Graph& gr, const Tensor& dy) {
    gr.accumulate(x, dy.reshaped(x.shape()));
  });
}

Var permute(Var x, const std::vector<int>& order) {
  const int r = x.value().rank();
  std::vector<int> seen(static_cast<std::size_t>(r), 0);
  bool ok = static_cast<int>(order.size()) == r;
  for (int o : order) {
    if (!ok || o < 0 || o >= r || seen[static_cast<std::size_t>(o)]++) ok = false;
  }
  if (!ok) throw ShapeError("permute: order is not a permutation of rank " + std::to_string(r));
  std::vector<int> inverse(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) inverse[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = i;
  Graph& g = x.graph();
  return g.record(permute_tensor(x.value(), order), {x}, [x, inverse](Graph& gr, const Tensor& dy) {
    gr.accumulate(x, permute_tensor(dy, inverse));
  });
}

Var position_linear(Var x, Var w, Var b) {
  same_graph({x, w, b});
  if (x.value().rank() != 3 || w.value().rank() != 3) {
    throw ShapeError("position_linear: expected x N x C x P and weight P x V x C, got " + dims(x) +
                     " and " + dims(w));
  }
  const std::int64_t n = x.dim(0), c = x.dim(1), p = x.dim(2), v = w.dim(1);
  if (w.dim(0) != p || w.dim(2) != c) {
    throw ShapeError("position_linear: weight " + dims(w) + " does not match input " + dims(x));
  }
  if (b.valid() && b.shape() != Shape{p, v}) {
    throw ShapeError("position_linear: bias " + dims(b) + " != [" + std::to_string(p) + "x" + std::to_string(v) + "]");
  }
  Graph& g = x.graph();
  return dispatch(g.precision(), [&](auto tag) {
    using T = decltype(tag);
    Tensor y({n, p, v}, g.precision());
    auto xs = cdata<T>(x);
    auto ws = cdata<T>(w);
    auto yd = y.mutable_data<T>();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t q = 0; q < p; ++q)
        for (std::int64_t k = 0; k < v; ++k) {
          T acc = b.valid() ? cdata<T>(b)[static_cast<std::size_t>(q * v + k)] : T(0);
          const T* wr = ws.data() + (q * v + k) * c;
          for (std::int64_t ch = 0; ch < c; ++ch) acc += wr[ch] * xs[static_cast<std::size_t>((i * c + ch) * p + q)];
          yd[static_cast<std::size_t>((i * p + q) * v + k)] = acc;
        }
    return g.record(std::move(y), {x, w, b}, [x, w, b, n, c, p, v](Graph& gr, const Tensor& dy) {
      auto gs = dy.data<T>();
      auto xs = cdata<T>(x);
      auto ws = cdata<T>(w);
      if (x.requires_grad()) {
        Tensor dx(x.shape(), gr.precision());
        auto d = dx.mutable_data<T>();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t q = 0; q < p; ++q)
            for (std::int64_t k = 0; k < v; ++k) {
              const T gv = gs[static_cast<std::size_t>((i * p + q) * v + k)];
              const T* wr = ws.data() + (q * v + k) * c;
              for (std::int64_t ch = 0; ch < c; ++ch) d[static_cast<std::size_t>((i * c + ch) * p + q)] += gv * wr[ch];
            }
        gr.accumulate(x, dx);
      }
      if (w.requires_grad()) {
        Tensor dw(w.shape(), gr.precision());
        auto d = dw.mutable_data<T>();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t q = 0; q < p; ++q)
            for (std::int64_t k = 0; k < v; ++k) {
              const T gv = gs[static_cast<std::size_t>((i * p + q) * v + k)];
              T* wr = d.data() + (q * v + k) * c;
              for (std::int64_t ch = 0; ch < c; ++ch) wr[ch] += gv * xs[static_cast<std::size_t>((i * c + ch) * p + q)];
            }
        gr.accumulate(w, dw);
      }
      if (b.valid() && b.requires_grad()) {
        Tensor db(b.shape(), gr.precision());
        auto d = db.mutable_data<T>();
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t j = 0; j < p * v; ++j) d[static_cast<std::size_t>(j)] += gs[static_cast<std::size_t>(i * p * v + j)];
        gr.accumulate(b, db);
      }
    });
  });
}

}  // namespace cstr
