// Forward + reverse implementations of the differentiable op set.
//
// Every op validates shapes, computes its forward result, and (when given a
// tape) records one closure that pulls the output gradient and accumulates
// into the input gradients. A closure whose output never received a gradient
// is a no-op, so unused branches cost nothing in reverse.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "fedsim/tape.hpp"

namespace fedsim::ops {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using MapConst = Eigen::Map<const RowMat>;

void check_same_shape(Tensor a, Tensor b, const char* what) {
  require(a.shape() == b.shape(), ErrorCode::shape,
          std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

// True when the reverse pass has something to propagate from this output.
bool flowing(Tensor& t) { return t.has_grad(); }

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(Tape* tp, Tensor a, Tensor b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] + pb[i];
  if (tp)
    tp->record([a, b, out]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      double* ga = a.grad();
      double* gb = b.grad();
      for (int64_t i = 0; i < out.size(); ++i) {
        ga[i] += g[i];
        gb[i] += g[i];
      }
    });
  return out;
}

Tensor sub(Tape* tp, Tensor a, Tensor b) {
  check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] - pb[i];
  if (tp)
    tp->record([a, b, out]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      double* ga = a.grad();
      double* gb = b.grad();
      for (int64_t i = 0; i < out.size(); ++i) {
        ga[i] += g[i];
        gb[i] -= g[i];
      }
    });
  return out;
}

Tensor mul(Tape* tp, Tensor a, Tensor b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * pb[i];
  if (tp)
    tp->record([a, b, out]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      const double* pa = a.data();
      const double* pb = b.data();
      double* ga = a.grad();
      double* gb = b.grad();
      for (int64_t i = 0; i < out.size(); ++i) {
        ga[i] += g[i] * pb[i];
        gb[i] += g[i] * pa[i];
      }
    });
  return out;
}

Tensor scale(Tape* tp, Tensor a, double s) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * s;
  if (tp)
    tp->record([a, out, s]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      double* ga = a.grad();
      for (int64_t i = 0; i < out.size(); ++i) ga[i] += g[i] * s;
    });
  return out;
}

Tensor scale_vec(Tape* tp, Tensor a, const std::vector<double>& s) {
  require(int64_t(s.size()) == a.size(), ErrorCode::shape, "scale_vec: length mismatch");
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] * s[size_t(i)];
  if (tp)
    tp->record([a, out, s]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      double* ga = a.grad();
      for (int64_t i = 0; i < out.size(); ++i) ga[i] += g[i] * s[size_t(i)];
    });
  return out;
}

Tensor sum(Tape* tp, Tensor a) {
  double acc = 0.0;
  const double* pa = a.data();
  for (int64_t i = 0; i < a.size(); ++i) acc += pa[i];
  Tensor out = Tensor::scalar(acc);
  if (tp)
    tp->record([a, out]() mutable {
      if (!flowing(out)) return;
      double g = out.grad()[0];
      double* ga = a.grad();
      for (int64_t i = 0; i < a.size(); ++i) ga[i] += g;
    });
  return out;
}

Tensor sum_squares(Tape* tp, Tensor a) {
  double acc = 0.0;
  const double* pa = a.data();
  for (int64_t i = 0; i < a.size(); ++i) acc += pa[i] * pa[i];
  Tensor out = Tensor::scalar(acc);
  if (tp)
    tp->record([a, out]() mutable {
      if (!flowing(out)) return;
      double g = out.grad()[0];
      const double* pa = a.data();
      double* ga = a.grad();
      for (int64_t i = 0; i < a.size(); ++i) ga[i] += 2.0 * pa[i] * g;
    });
  return out;
}

Tensor mean(Tape* tp, Tensor a) {
  Tensor s = sum(tp, a);
  return scale(tp, s, 1.0 / double(a.size()));
}

// ---------------------------------------------------------------- activations

Tensor relu(Tape* tp, Tensor a) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] > 0.0 ? pa[i] : 0.0;
  if (tp)
    tp->record([a, out]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      const double* pa = a.data();
      double* ga = a.grad();
      for (int64_t i = 0; i < a.size(); ++i) ga[i] += pa[i] > 0.0 ? g[i] : 0.0;
    });
  return out;
}

Tensor leaky_relu(Tape* tp, Tensor a, double slope) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = pa[i] > 0.0 ? pa[i] : slope * pa[i];
  if (tp)
    tp->record([a, out, slope]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      const double* pa = a.data();
      double* ga = a.grad();
      for (int64_t i = 0; i < a.size(); ++i) ga[i] += pa[i] > 0.0 ? g[i] : slope * g[i];
    });
  return out;
}

Tensor tanh_act(Tape* tp, Tensor a) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = std::tanh(pa[i]);
  if (tp)
    tp->record([a, out]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      const double* po = out.data();
      double* ga = a.grad();
      for (int64_t i = 0; i < a.size(); ++i) ga[i] += (1.0 - po[i] * po[i]) * g[i];
    });
  return out;
}

Tensor sigmoid(Tape* tp, Tensor a) {
  Tensor out(a.shape());
  const double* pa = a.data();
  double* po = out.data();
  for (int64_t i = 0; i < a.size(); ++i) po[i] = 1.0 / (1.0 + std::exp(-pa[i]));
  if (tp)
    tp->record([a, out]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      const double* po = out.data();
      double* ga = a.grad();
      for (int64_t i = 0; i < a.size(); ++i) ga[i] += po[i] * (1.0 - po[i]) * g[i];
    });
  return out;
}

// --------------------------------------------------------------------- matmul

Tensor matmul(Tape* tp, Tensor a, Tensor b) {
  require(a.rank() == 2 && b.rank() == 2, ErrorCode::shape, "matmul: rank-2 operands required");
  require(a.dim(1) == b.dim(0), ErrorCode::shape,
          "matmul: inner dims differ " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  MapConst ma(a.data(), m, k);
  MapConst mb(b.data(), k, n);
  MapMat mo(out.data(), m, n);
  mo.noalias() = ma * mb;
  if (tp)
    tp->record([a, b, out, m, k, n]() mutable {
      if (!flowing(out)) return;
      MapConst g(out.grad(), m, n);
      MapConst ma(a.data(), m, k);
      MapConst mb(b.data(), k, n);
      MapMat ga(a.grad(), m, k);
      MapMat gb(b.grad(), k, n);
      ga.noalias() += g * mb.transpose();
      gb.noalias() += ma.transpose() * g;
    });
  return out;
}

// ------------------------------------------------------------------ batchnorm

Tensor batchnorm(Tape* tp, Tensor x, Tensor gamma, Tensor beta,
                 BatchNormBuffers& buffers, bool training, double eps) {
  require(x.rank() >= 2, ErrorCode::shape, "batchnorm: need channel + spatial dims");
  const int64_t c = x.dim(0);
  const int64_t n = x.size() / c;
  require(gamma.size() == c && beta.size() == c, ErrorCode::shape, "batchnorm: gamma/beta size");
  require(int64_t(buffers.running_mean.size()) == c, ErrorCode::shape, "batchnorm: buffers not initialized");

  Tensor out(x.shape());
  std::vector<double> mu(static_cast<size_t>(c)), ivar(static_cast<size_t>(c));
  const double* px = x.data();
  double* po = out.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();

  for (int64_t ch = 0; ch < c; ++ch) {
    const double* row = px + ch * n;
    double m, v;
    if (training) {
      m = 0.0;
      for (int64_t i = 0; i < n; ++i) m += row[i];
      m /= double(n);
      v = 0.0;
      for (int64_t i = 0; i < n; ++i) {
        double d = row[i] - m;
        v += d * d;
      }
      v /= double(n);
      buffers.running_mean[size_t(ch)] =
          (1.0 - buffers.momentum) * buffers.running_mean[size_t(ch)] + buffers.momentum * m;
      buffers.running_var[size_t(ch)] =
          (1.0 - buffers.momentum) * buffers.running_var[size_t(ch)] + buffers.momentum * v;
    } else {
      m = buffers.running_mean[size_t(ch)];
      v = buffers.running_var[size_t(ch)];
    }
    mu[size_t(ch)] = m;
    ivar[size_t(ch)] = 1.0 / std::sqrt(v + eps);
    double* orow = po + ch * n;
    const double iv = ivar[size_t(ch)], gg = pg[ch], bb = pb[ch];
    for (int64_t i = 0; i < n; ++i) orow[i] = gg * ((row[i] - m) * iv) + bb;
  }

  if (tp)
    tp->record([x, gamma, beta, out, mu, ivar, c, n, training]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      const double* px = x.data();
      const double* pg = gamma.data();
      double* gx = x.grad();
      double* ggam = gamma.grad();
      double* gbet = beta.grad();
      for (int64_t ch = 0; ch < c; ++ch) {
        const double* grow = g + ch * n;
        const double* row = px + ch * n;
        double* gxrow = gx + ch * n;
        const double m = mu[size_t(ch)], iv = ivar[size_t(ch)], gg = pg[ch];
        double sum_g = 0.0, sum_gxh = 0.0;
        for (int64_t i = 0; i < n; ++i) {
          double xh = (row[i] - m) * iv;
          sum_g += grow[i];
          sum_gxh += grow[i] * xh;
        }
        ggam[ch] += sum_gxh;
        gbet[ch] += sum_g;
        if (training) {
          // d/dx of gamma*(x-mu(x))*ivar(x) with batch statistics in the graph.
          const double inv_n = 1.0 / double(n);
          for (int64_t i = 0; i < n; ++i) {
            double xh = (row[i] - m) * iv;
            gxrow[i] += gg * iv * (grow[i] - inv_n * sum_g - xh * inv_n * sum_gxh);
          }
        } else {
          for (int64_t i = 0; i < n; ++i) gxrow[i] += gg * iv * grow[i];
        }
      }
    });
  return out;
}

// --------------------------------------------------------------- convolutions
//
// 3x3(x3) kernels, stride 1, zero padding 1: output extents equal input
// extents. Implemented as im2col + GEMM: the column matrix is rebuilt in the
// backward pass (a linear copy) rather than kept alive on the tape, and all
// three gradient products are GEMMs too, so the conv stack runs at matrix
// throughput instead of scalar loop speed.

namespace {

struct ConvDims {
  int64_t ci, co, d, h, w;  // d == 1 for the 2d case
};

ConvDims conv_check(Tensor x, Tensor w, Tensor bias, bool three_d) {
  const size_t xr = three_d ? 4 : 3;
  const size_t wr = three_d ? 5 : 4;
  require(x.rank() == xr, ErrorCode::shape, "conv: bad input rank");
  require(w.rank() == wr, ErrorCode::shape, "conv: bad weight rank");
  ConvDims cd;
  cd.ci = x.dim(0);
  cd.d = three_d ? x.dim(1) : 1;
  cd.h = x.dim(three_d ? 2 : 1);
  cd.w = x.dim(three_d ? 3 : 2);
  cd.co = w.dim(0);
  require(w.dim(1) == cd.ci, ErrorCode::shape, "conv: in-channel mismatch");
  for (size_t i = 2; i < wr; ++i) require(w.dim(i) == 3, ErrorCode::shape, "conv: kernel must be 3 wide");
  if (bias.size() > 0)
    require(bias.size() == cd.co, ErrorCode::shape, "conv: bias size mismatch");
  return cd;
}

// Tap offsets of kernel slot t; the 2d case runs with d == 1 and dz == 0.
inline void tap_offsets(int64_t t, bool three_d, int64_t& dz, int64_t& dy, int64_t& dx) {
  dz = three_d ? t / 9 - 1 : 0;
  dy = (t / 3) % 3 - 1;
  dx = t % 3 - 1;
}

// col is [ci*ktaps, volume] row-major: row (ci,t) holds the input shifted by
// tap t, zeros where the shift leaves the raster.
void im2col(const ConvDims& c, const double* x, bool three_d, double* col) {
  const int64_t plane = c.h * c.w;
  const int64_t volume = c.d * plane;
  const int64_t ktaps = three_d ? 27 : 9;
  for (int64_t ci = 0; ci < c.ci; ++ci) {
    const double* xb = x + ci * volume;
    for (int64_t t = 0; t < ktaps; ++t) {
      int64_t dz, dy, dx;
      tap_offsets(t, three_d, dz, dy, dx);
      double* row = col + (ci * ktaps + t) * volume;
      std::fill(row, row + volume, 0.0);
      const int64_t z0 = std::max<int64_t>(0, -dz), z1 = std::min(c.d, c.d - dz);
      const int64_t y0 = std::max<int64_t>(0, -dy), y1 = std::min(c.h, c.h - dy);
      const int64_t x0 = std::max<int64_t>(0, -dx), x1 = std::min(c.w, c.w - dx);
      for (int64_t z = z0; z < z1; ++z)
        for (int64_t y = y0; y < y1; ++y)
          std::copy_n(xb + (z + dz) * plane + (y + dy) * c.w + dx + x0, x1 - x0,
                      row + z * plane + y * c.w + x0);
    }
  }
}

// Transpose of im2col: scatter-add column-space gradients back onto the input.
void col2im_add(const ConvDims& c, const double* col, bool three_d, double* gx) {
  const int64_t plane = c.h * c.w;
  const int64_t volume = c.d * plane;
  const int64_t ktaps = three_d ? 27 : 9;
  for (int64_t ci = 0; ci < c.ci; ++ci) {
    double* gxb = gx + ci * volume;
    for (int64_t t = 0; t < ktaps; ++t) {
      int64_t dz, dy, dx;
      tap_offsets(t, three_d, dz, dy, dx);
      const double* row = col + (ci * ktaps + t) * volume;
      const int64_t z0 = std::max<int64_t>(0, -dz), z1 = std::min(c.d, c.d - dz);
      const int64_t y0 = std::max<int64_t>(0, -dy), y1 = std::min(c.h, c.h - dy);
      const int64_t x0 = std::max<int64_t>(0, -dx), x1 = std::min(c.w, c.w - dx);
      for (int64_t z = z0; z < z1; ++z)
        for (int64_t y = y0; y < y1; ++y) {
          double* grow = gxb + (z + dz) * plane + (y + dy) * c.w + dx;
          const double* srow = row + z * plane + y * c.w;
          for (int64_t xx = x0; xx < x1; ++xx) grow[xx] += srow[xx];
        }
    }
  }
}

using MatMap = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using ConstMatMap =
    Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

void conv_forward(const ConvDims& c, const double* x, const double* w, const double* bias,
                  double* out, bool three_d) {
  const int64_t volume = c.d * c.h * c.w;
  const int64_t ktaps = three_d ? 27 : 9;
  const int64_t k = c.ci * ktaps;
  std::vector<double> col(size_t(k) * volume);
  im2col(c, x, three_d, col.data());
  MatMap(out, c.co, volume).noalias() = ConstMatMap(w, c.co, k) * ConstMatMap(col.data(), k, volume);
  if (bias)
    for (int64_t co = 0; co < c.co; ++co) {
      double* ob = out + co * volume;
      for (int64_t i = 0; i < volume; ++i) ob[i] += bias[co];
    }
}

void conv_backward(const ConvDims& c, const double* x, const double* w, const double* gout,
                   double* gx, double* gw, double* gbias, bool three_d) {
  const int64_t volume = c.d * c.h * c.w;
  const int64_t ktaps = three_d ? 27 : 9;
  const int64_t k = c.ci * ktaps;
  if (gbias) {
    for (int64_t co = 0; co < c.co; ++co) {
      const double* gb = gout + co * volume;
      double acc = 0.0;
      for (int64_t i = 0; i < volume; ++i) acc += gb[i];
      gbias[co] += acc;
    }
  }
  std::vector<double> col(size_t(k) * volume);
  im2col(c, x, three_d, col.data());
  ConstMatMap gout_m(gout, c.co, volume);
  MatMap(gw, c.co, k).noalias() += gout_m * ConstMatMap(col.data(), k, volume).transpose();
  if (gx) {
    // Reuse the column buffer for the input-space gradient columns.
    MatMap(col.data(), k, volume).noalias() = ConstMatMap(w, c.co, k).transpose() * gout_m;
    col2im_add(c, col.data(), three_d, gx);
  }
}

Tensor conv_impl(Tape* tp, Tensor x, Tensor w, Tensor bias, bool three_d) {
  ConvDims cd = conv_check(x, w, bias, three_d);
  std::vector<int64_t> oshape = x.shape();
  oshape[0] = cd.co;
  Tensor out(oshape);
  conv_forward(cd, x.data(), w.data(), bias.size() ? bias.data() : nullptr, out.data(), three_d);
  if (tp)
    tp->record([x, w, bias, out, cd, three_d]() mutable {
      if (!flowing(out)) return;
      conv_backward(cd, x.data(), w.data(), out.grad(), x.grad(), w.grad(),
                    bias.size() ? bias.grad() : nullptr, three_d);
    });
  return out;
}

}  // namespace

Tensor conv3d(Tape* tp, Tensor x, Tensor w, Tensor bias) {
  return conv_impl(tp, x, w, bias, true);
}

Tensor conv2d(Tape* tp, Tensor x, Tensor w, Tensor bias) {
  return conv_impl(tp, x, w, bias, false);
}

// ----------------------------------------------------------------- resampling

Tensor upsample_nn3d(Tape* tp, Tensor x, int factor) {
  require(factor == 2 || factor == 4, ErrorCode::shape, "upsample_nn3d: factor must be 2 or 4");
  require(x.rank() == 4, ErrorCode::shape, "upsample_nn3d: expect [C,D,H,W]");
  const int64_t c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3), f = factor;
  Tensor out({c, d * f, h * f, w * f});
  const double* px = x.data();
  double* po = out.data();
  const int64_t oh = h * f, ow = w * f, od = d * f;
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t z = 0; z < od; ++z)
      for (int64_t y = 0; y < oh; ++y) {
        const double* irow = px + ((ch * d + z / f) * h + y / f) * w;
        double* orow = po + ((ch * od + z) * oh + y) * ow;
        for (int64_t xx = 0; xx < ow; ++xx) orow[xx] = irow[xx / f];
      }
  if (tp)
    tp->record([x, out, c, d, h, w, f]() mutable {
      if (!flowing(out)) return;
      // Adjoint of replication: sum each f^3 block back into its source voxel.
      const double* g = out.grad();
      double* gx = x.grad();
      const int64_t od = d * f, oh = h * f, ow = w * f;
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t z = 0; z < od; ++z)
          for (int64_t y = 0; y < oh; ++y) {
            const double* grow = g + ((ch * od + z) * oh + y) * ow;
            double* gxrow = gx + ((ch * d + z / f) * h + y / f) * w;
            for (int64_t xx = 0; xx < ow; ++xx) gxrow[xx / f] += grow[xx];
          }
    });
  return out;
}

namespace {

Tensor avgpool_impl(Tape* tp, Tensor x, int factor, bool three_d) {
  require(factor >= 2, ErrorCode::shape, "avgpool: factor must be >= 2");
  require(x.rank() == (three_d ? 4u : 3u), ErrorCode::shape, "avgpool: bad rank");
  const int64_t c = x.dim(0);
  const int64_t d = three_d ? x.dim(1) : 1;
  const int64_t h = x.dim(three_d ? 2 : 1);
  const int64_t w = x.dim(three_d ? 3 : 2);
  const int64_t f = factor;
  require(h % f == 0 && w % f == 0 && (!three_d || d % f == 0), ErrorCode::shape,
          "avgpool: extents not divisible by factor");
  const int64_t dd = three_d ? d / f : 1, hh = h / f, ww = w / f;
  const int64_t df = three_d ? f : 1;
  std::vector<int64_t> oshape = three_d ? std::vector<int64_t>{c, dd, hh, ww} : std::vector<int64_t>{c, hh, ww};
  Tensor out(oshape);
  const double inv = 1.0 / double(df * f * f);
  const double* px = x.data();
  double* po = out.data();
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t z = 0; z < dd; ++z)
      for (int64_t y = 0; y < hh; ++y)
        for (int64_t xx = 0; xx < ww; ++xx) {
          double acc = 0.0;
          for (int64_t bz = 0; bz < df; ++bz)
            for (int64_t by = 0; by < f; ++by)
              for (int64_t bx = 0; bx < f; ++bx)
                acc += px[((ch * d + z * df + bz) * h + y * f + by) * w + xx * f + bx];
          po[((ch * dd + z) * hh + y) * ww + xx] = acc * inv;
        }
  if (tp)
    tp->record([x, out, c, d, h, w, f, dd, hh, ww, df, inv]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      double* gx = x.grad();
      for (int64_t ch = 0; ch < c; ++ch)
        for (int64_t z = 0; z < dd; ++z)
          for (int64_t y = 0; y < hh; ++y)
            for (int64_t xx = 0; xx < ww; ++xx) {
              const double gv = g[((ch * dd + z) * hh + y) * ww + xx] * inv;
              for (int64_t bz = 0; bz < df; ++bz)
                for (int64_t by = 0; by < f; ++by)
                  for (int64_t bx = 0; bx < f; ++bx)
                    gx[((ch * d + z * df + bz) * h + y * f + by) * w + xx * f + bx] += gv;
            }
    });
  return out;
}

}  // namespace

Tensor avgpool3d(Tape* tp, Tensor x, int factor) { return avgpool_impl(tp, x, factor, true); }
Tensor avgpool2d(Tape* tp, Tensor x, int factor) { return avgpool_impl(tp, x, factor, false); }

Tensor nn_upsample_vol(Tape* tp, Tensor x, int factor) {
  require(factor >= 1, ErrorCode::shape, "nn_upsample_vol: factor must be >= 1");
  require(x.rank() == 3, ErrorCode::shape, "nn_upsample_vol: expect [D,H,W]");
  if (factor == 1) return scale(tp, x, 1.0);  // copy keeps tape semantics uniform
  const int64_t d = x.dim(0), h = x.dim(1), w = x.dim(2), f = factor;
  Tensor out({d * f, h * f, w * f});
  const double* px = x.data();
  double* po = out.data();
  const int64_t oh = h * f, ow = w * f, od = d * f;
  for (int64_t z = 0; z < od; ++z)
    for (int64_t y = 0; y < oh; ++y) {
      const double* irow = px + ((z / f) * h + y / f) * w;
      double* orow = po + (z * oh + y) * ow;
      for (int64_t xx = 0; xx < ow; ++xx) orow[xx] = irow[xx / f];
    }
  if (tp)
    tp->record([x, out, d, h, w, f]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      double* gx = x.grad();
      const int64_t od = d * f, oh = h * f, ow = w * f;
      for (int64_t z = 0; z < od; ++z)
        for (int64_t y = 0; y < oh; ++y) {
          const double* grow = g + (z * oh + y) * ow;
          double* gxrow = gx + ((z / f) * h + y / f) * w;
          for (int64_t xx = 0; xx < ow; ++xx) gxrow[xx / f] += grow[xx];
        }
    });
  return out;
}

Tensor trilinear_slice(Tape* tp, Tensor vol, int k, int n_out) {
  require(vol.rank() == 3, ErrorCode::shape, "trilinear_slice: expect [D,H,W]");
  require(k >= 0 && k < n_out, ErrorCode::shape, "trilinear_slice: slice index out of range");
  const int64_t d = vol.dim(0), h = vol.dim(1), w = vol.dim(2);
  const int64_t n = n_out;
  Tensor out({n, n});

  auto axis_coords = [](int64_t src, int64_t dst, int64_t o, int64_t& i0, int64_t& i1, double& w1) {
    double f = (double(o) + 0.5) * double(src) / double(dst) - 0.5;
    double fl = std::floor(f);
    i0 = std::clamp<int64_t>(int64_t(fl), 0, src - 1);
    i1 = std::min<int64_t>(i0 + 1, src - 1);
    w1 = std::clamp(f - fl, 0.0, 1.0);
    if (f < 0.0) w1 = 0.0;  // clamp below the first sample
  };

  int64_t z0, z1;
  double wz;
  axis_coords(d, n, k, z0, z1, wz);

  // Per-output-axis index/weight tables; y and x share them (cubic volume view).
  std::vector<int64_t> ia(static_cast<size_t>(n)), ib(static_cast<size_t>(n));
  std::vector<double> wb(static_cast<size_t>(n));
  for (int64_t o = 0; o < n; ++o) axis_coords(h, n, o, ia[size_t(o)], ib[size_t(o)], wb[size_t(o)]);
  std::vector<int64_t> ja(static_cast<size_t>(n)), jb(static_cast<size_t>(n));
  std::vector<double> wx(static_cast<size_t>(n));
  for (int64_t o = 0; o < n; ++o) axis_coords(w, n, o, ja[size_t(o)], jb[size_t(o)], wx[size_t(o)]);

  const double* pv = vol.data();
  double* po = out.data();
  auto at = [&](int64_t z, int64_t y, int64_t x) { return pv[(z * h + y) * w + x]; };
  for (int64_t y = 0; y < n; ++y)
    for (int64_t x = 0; x < n; ++x) {
      const int64_t y0 = ia[size_t(y)], y1 = ib[size_t(y)];
      const int64_t x0 = ja[size_t(x)], x1 = jb[size_t(x)];
      const double fy = wb[size_t(y)], fx = wx[size_t(x)];
      double c00 = at(z0, y0, x0) * (1 - fx) + at(z0, y0, x1) * fx;
      double c01 = at(z0, y1, x0) * (1 - fx) + at(z0, y1, x1) * fx;
      double c10 = at(z1, y0, x0) * (1 - fx) + at(z1, y0, x1) * fx;
      double c11 = at(z1, y1, x0) * (1 - fx) + at(z1, y1, x1) * fx;
      po[y * n + x] = (c00 * (1 - fy) + c01 * fy) * (1 - wz) + (c10 * (1 - fy) + c11 * fy) * wz;
    }

  if (tp)
    tp->record([vol, out, z0, z1, wz, ia, ib, wb, ja, jb, wx, h, w, n]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      double* gv = vol.grad();
      auto scatter = [&](int64_t z, int64_t y, int64_t x, double v) { gv[(z * h + y) * w + x] += v; };
      for (int64_t y = 0; y < n; ++y)
        for (int64_t x = 0; x < n; ++x) {
          const int64_t y0 = ia[size_t(y)], y1 = ib[size_t(y)];
          const int64_t x0 = ja[size_t(x)], x1 = jb[size_t(x)];
          const double fy = wb[size_t(y)], fx = wx[size_t(x)];
          const double gg = g[y * n + x];
          scatter(z0, y0, x0, gg * (1 - wz) * (1 - fy) * (1 - fx));
          scatter(z0, y0, x1, gg * (1 - wz) * (1 - fy) * fx);
          scatter(z0, y1, x0, gg * (1 - wz) * fy * (1 - fx));
          scatter(z0, y1, x1, gg * (1 - wz) * fy * fx);
          scatter(z1, y0, x0, gg * wz * (1 - fy) * (1 - fx));
          scatter(z1, y0, x1, gg * wz * (1 - fy) * fx);
          scatter(z1, y1, x0, gg * wz * fy * (1 - fx));
          scatter(z1, y1, x1, gg * wz * fy * fx);
        }
    });
  return out;
}

// ------------------------------------------------------------------ structure

Tensor reshape(Tape* tp, Tensor a, std::vector<int64_t> shape) {
  Tensor out(std::move(shape));
  require(out.size() == a.size(), ErrorCode::shape,
          "reshape: element count " + shape_str(a.shape()) + " -> " + shape_str(out.shape()));
  std::copy(a.data(), a.data() + a.size(), out.data());
  if (tp)
    tp->record([a, out]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      double* ga = a.grad();
      for (int64_t i = 0; i < a.size(); ++i) ga[i] += g[i];
    });
  return out;
}

Tensor concat_ch(Tape* tp, Tensor a, Tensor b) {
  require(a.rank() == b.rank() && a.rank() >= 2, ErrorCode::shape, "concat_ch: rank mismatch");
  for (size_t i = 1; i < a.rank(); ++i)
    require(a.dim(i) == b.dim(i), ErrorCode::shape, "concat_ch: trailing dims differ");
  std::vector<int64_t> oshape = a.shape();
  oshape[0] = a.dim(0) + b.dim(0);
  Tensor out(oshape);
  std::copy(a.data(), a.data() + a.size(), out.data());
  std::copy(b.data(), b.data() + b.size(), out.data() + a.size());
  if (tp)
    tp->record([a, b, out]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      double* ga = a.grad();
      double* gb = b.grad();
      for (int64_t i = 0; i < a.size(); ++i) ga[i] += g[i];
      for (int64_t i = 0; i < b.size(); ++i) gb[i] += g[a.size() + i];
    });
  return out;
}

Tensor stack_ch(Tape* tp, const std::vector<Tensor>& planes) {
  require(!planes.empty(), ErrorCode::shape, "stack_ch: empty input");
  for (const auto& p : planes)
    require(p.shape() == planes[0].shape() && p.rank() == 2, ErrorCode::shape, "stack_ch: planes must be equal [H,W]");
  const int64_t n = int64_t(planes.size());
  const int64_t per = planes[0].size();
  Tensor out({n, planes[0].dim(0), planes[0].dim(1)});
  for (int64_t i = 0; i < n; ++i)
    std::copy(planes[size_t(i)].data(), planes[size_t(i)].data() + per, out.data() + i * per);
  if (tp)
    tp->record([planes, out, per]() mutable {
      if (!flowing(out)) return;
      const double* g = out.grad();
      for (size_t i = 0; i < planes.size(); ++i) {
        Tensor p = planes[i];
        double* gp = p.grad();
        for (int64_t j = 0; j < per; ++j) gp[j] += g[int64_t(i) * per + j];
      }
    });
  return out;
}

// --------------------------------------------------------------- fused losses

Tensor soft_iou_loss(Tape* tp, Tensor a, Tensor y) {
  check_same_shape(a, y, "soft_iou_loss");
  const double* pa = a.data();
  const double* py = y.data();
  double inter = 0.0, uni = 0.0;
  for (int64_t i = 0; i < a.size(); ++i) {
    const double p = pa[i] * py[i];
    inter += p;
    uni += pa[i] + py[i] - p;
  }
  const double loss = uni == 0.0 ? 0.0 : 1.0 - inter / uni;
  Tensor out = Tensor::scalar(loss);
  if (tp)
    tp->record([a, y, out, inter, uni]() mutable {
      if (!flowing(out)) return;
      if (uni == 0.0) return;  // flat at the both-empty point
      const double g = out.grad()[0];
      const double* py = y.data();
      double* ga = a.grad();
      const double inv_u2 = 1.0 / (uni * uni);
      for (int64_t i = 0; i < a.size(); ++i) {
        // d(inter/uni)/da_i = (y_i*uni - inter*(1 - y_i)) / uni^2
        ga[i] += -g * (py[i] * uni - inter * (1.0 - py[i])) * inv_u2;
      }
    });
  return out;
}

Tensor bce_with_logits(Tape* tp, Tensor logits, Tensor targets) {
  check_same_shape(logits, targets, "bce_with_logits");
  const double* pl = logits.data();
  const double* pt = targets.data();
  double acc = 0.0;
  for (int64_t i = 0; i < logits.size(); ++i) {
    const double l = pl[i], t = pt[i];
    acc += std::max(l, 0.0) - l * t + std::log1p(std::exp(-std::abs(l)));
  }
  Tensor out = Tensor::scalar(acc);
  if (tp)
    tp->record([logits, targets, out]() mutable {
      if (!flowing(out)) return;
      const double g = out.grad()[0];
      const double* pl = logits.data();
      const double* pt = targets.data();
      double* gl = logits.grad();
      for (int64_t i = 0; i < logits.size(); ++i) {
        const double s = 1.0 / (1.0 + std::exp(-pl[i]));
        gl[i] += g * (s - pt[i]);
      }
    });
  return out;
}

}  // namespace fedsim::ops
