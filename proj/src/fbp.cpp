#include <algorithm>
#include <cmath>

#include "fedsim/ct.hpp"

// Frequency-domain ramp filtering and filtered backprojection built on the
// exact-adjoint projector. The backprojector spreads one filtered sample over
// s/|d| * interpolation weights instead of the unit weights of a classic
// voxel-driven backprojection, so the reconstruction scale folds the ray
// density per voxel into the usual pi/n_views view weight:
//   parallel: sum_rays w(ray, voxel) ~ s^2 / pitch        per view
//   cone:     sum_rays w(ray, voxel) ~ s^3 / pitch_iso^2  per view (near iso)
// giving volume = adjoint(q) * pi*pitch/(n_views*s^2) for parallel beams and
// volume = adjoint(q) * pi*pitch_iso^2/(n_views*s^3) for cone beams.

namespace fedsim::ct {

namespace {

bool flowing(Tensor& t) { return t.has_grad(); }

size_t next_pow2(size_t n) {
  size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

}  // namespace

void fft_pow2(std::vector<double>& re, std::vector<double>& im, bool inverse) {
  const size_t n = re.size();
  require(n > 0 && n == im.size() && (n & (n - 1)) == 0, ErrorCode::runtime,
          "fft: length must be a nonzero power of two");
  for (size_t i = 1, j = 0; i < n; ++i) {
    size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      std::swap(re[i], re[j]);
      std::swap(im[i], im[j]);
    }
  }
  for (size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * kPi / static_cast<double>(len);
    const double wr = std::cos(ang), wi = std::sin(ang);
    for (size_t blk = 0; blk < n; blk += len) {
      double cr = 1.0, ci = 0.0;
      for (size_t k = 0; k < len / 2; ++k) {
        const size_t i = blk + k, j = i + len / 2;
        const double tr = re[j] * cr - im[j] * ci;
        const double ti = re[j] * ci + im[j] * cr;
        re[j] = re[i] - tr;
        im[j] = im[i] - ti;
        re[i] += tr;
        im[i] += ti;
        const double ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
  if (inverse) {
    const double inv = 1.0 / static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) {
      re[i] *= inv;
      im[i] *= inv;
    }
  }
}

namespace {

// |f| (optionally Hann-tapered) over the padded spectrum; index m mirrors
// around Nyquist, f_m = m / (n_pad * pitch).
std::vector<double> ramp_spectrum(size_t n_pad, double pitch, Window window) {
  std::vector<double> filt(n_pad);
  for (size_t k = 0; k < n_pad; ++k) {
    const size_t m = std::min(k, n_pad - k);
    double f = static_cast<double>(m) / (static_cast<double>(n_pad) * pitch);
    if (window == Window::hann) f *= 0.5 * (1.0 + std::cos(2.0 * kPi * static_cast<double>(m) / static_cast<double>(n_pad)));
    filt[k] = f;
  }
  return filt;
}

// Filter every row of [n_rows, cols], accumulating into out. Rows are
// zero-padded to >= 2x their length so the circular convolution never wraps
// into the retained samples; zero-pad + filter + truncate is symmetric, which
// makes this kernel its own adjoint.
void ramp_rows(const double* in, double* out, int64_t n_rows, int64_t cols, double pitch, Window window) {
  require(cols > 0 && pitch > 0.0, ErrorCode::shape, "ramp_filter: bad row length or pitch");
  const size_t np = next_pow2(static_cast<size_t>(cols) * 2);
  const std::vector<double> filt = ramp_spectrum(np, pitch, window);
  std::vector<double> re(np), im(np);
  for (int64_t r = 0; r < n_rows; ++r) {
    std::fill(re.begin(), re.end(), 0.0);
    std::fill(im.begin(), im.end(), 0.0);
    std::copy(in + r * cols, in + (r + 1) * cols, re.begin());
    fft_pow2(re, im, false);
    for (size_t k = 0; k < np; ++k) {
      re[k] *= filt[k];
      im[k] *= filt[k];
    }
    fft_pow2(re, im, true);
    for (int64_t i = 0; i < cols; ++i) out[r * cols + i] += re[static_cast<size_t>(i)];
  }
}

}  // namespace

Tensor ramp_filter(Tape* tp, Tensor sino, double pitch, Window window) {
  require(sino.rank() == 3, ErrorCode::shape, "ramp_filter: expected [views, rows, cols]");
  const int64_t n_rows = sino.dim(0) * sino.dim(1);
  const int64_t cols = sino.dim(2);
  Tensor out(sino.shape());
  ramp_rows(sino.data(), out.data(), n_rows, cols, pitch, window);
  if (tp)
    tp->record([sino, out, n_rows, cols, pitch, window]() mutable {
      if (!flowing(out)) return;
      ramp_rows(out.grad(), sino.grad(), n_rows, cols, pitch, window);
    });
  return out;
}

Tensor fbp_reconstruct(Tape* tp, Tensor sino, const Geometry& g, Window window) {
  require(sino.shape() == g.sino_shape(), ErrorCode::shape,
          "fbp_reconstruct: sinogram is " + shape_str(sino.shape()) + ", geometry wants " +
              shape_str(g.sino_shape()));
  const double s = g.spacing;
  if (g.mode == Mode::parallel2d) {
    Tensor q = ramp_filter(tp, sino, g.det_pitch, window);
    Tensor b = back_project(tp, q, g);
    return ops::scale(tp, b, kPi * g.det_pitch / (static_cast<double>(g.n_views) * s * s));
  }
  // Cone beam: weight each ray by the cosine of its angle to the central ray
  // (computed on detector coordinates rescaled to the isocenter), ramp-filter
  // at the isocenter pitch, then apply the adjoint. Skipping the per-voxel
  // magnification weight of a full short-scan treatment is second-order over
  // an evenly sampled full circle.
  const double mag = g.source_to_iso / g.source_to_detector;
  const double pitch_iso = g.det_pitch * mag;
  std::vector<double> wts(static_cast<size_t>(g.n_views) * g.det_rows * g.det_cols);
  const double d2 = g.source_to_iso * g.source_to_iso;
  for (int r = 0; r < g.det_rows; ++r)
    for (int c = 0; c < g.det_cols; ++c) {
      const double u = (c - (g.det_cols - 1) * 0.5) * pitch_iso;
      const double v = (r - (g.det_rows - 1) * 0.5) * pitch_iso;
      const double w = g.source_to_iso / std::sqrt(d2 + u * u + v * v);
      for (int vw = 0; vw < g.n_views; ++vw)
        wts[(static_cast<size_t>(vw) * g.det_rows + r) * g.det_cols + c] = w;
    }
  Tensor pre = ops::scale_vec(tp, sino, wts);
  Tensor q = ramp_filter(tp, pre, pitch_iso, window);
  Tensor b = back_project(tp, q, g);
  return ops::scale(tp, b, kPi * pitch_iso * pitch_iso / (static_cast<double>(g.n_views) * s * s * s));
}

namespace {

double sample_poisson(double lam, Rng& rng) {
  if (lam <= 0.0) return 0.0;
  if (lam < 30.0) {
    const double limit = std::exp(-lam);
    double p = 1.0;
    int k = 0;
    do {
      ++k;
      p *= rng.uniform();
    } while (p > limit);
    return static_cast<double>(k - 1);
  }
  return std::max(0.0, std::floor(lam + std::sqrt(lam) * rng.normal() + 0.5));
}

}  // namespace

Tensor apply_poisson_noise(Tensor sino, double i0, Rng& rng) {
  require(i0 > 0.0, ErrorCode::config, "poisson noise: source intensity must be positive");
  Tensor out(sino.shape());
  const double* p = sino.data();
  double* o = out.data();
  for (int64_t i = 0; i < sino.size(); ++i) {
    const double counts = std::max(0.5, sample_poisson(i0 * std::exp(-p[i]), rng));
    o[i] = std::log(i0 / counts);
  }
  return out;
}

Tensor simulate_ct(Tape* tp, Tensor material, const RenderOptions& opt) {
  const Geometry& g = opt.geom;
  require(material.rank() == 3, ErrorCode::shape, "simulate_ct: material map must be [d,h,w]");
  const int64_t md = material.dim(0), mh = material.dim(1), mw = material.dim(2);
  require(mw > 0 && g.vol_w % mw == 0, ErrorCode::shape, "simulate_ct: render raster must be a multiple of the material grid");
  const int64_t factor = g.vol_w / mw;
  require(g.vol_d == md * factor && g.vol_h == mh * factor && g.vol_w == mw * factor, ErrorCode::shape,
          "simulate_ct: material " + shape_str(material.shape()) + " does not scale to raster " +
              shape_str(g.vol_shape()));

  Tensor vol = factor == 1 ? material : ops::nn_upsample_vol(tp, material, static_cast<int>(factor));
  Tensor sino = forward_project(tp, vol, g);
  if (opt.poisson_noise) {
    // Resample off the tape and fold the perturbation back in as an additive
    // constant, so the value carries noise while gradients flow noise-free.
    Rng rng(opt.noise_seed);
    Tensor noisy = apply_poisson_noise(sino, opt.i0, rng);
    Tensor delta(sino.shape());
    for (int64_t i = 0; i < sino.size(); ++i) delta.data()[i] = noisy.data()[i] - sino.data()[i];
    sino = ops::add(tp, sino, delta);
  }
  Tensor recon = fbp_reconstruct(tp, sino, g, opt.window);
  if (factor == 1) return recon;
  Tensor pooled = ops::avgpool3d(tp, ops::reshape(tp, recon, {1, g.vol_d, g.vol_h, g.vol_w}),
                                 static_cast<int>(factor));
  return ops::reshape(tp, pooled, {md, mh, mw});
}

Tensor shepp_logan(int64_t n) {
  require(n > 0, ErrorCode::shape, "shepp_logan: raster size must be positive");
  // (x0, y0, a, b, rotation deg, additive gray level) in [-1,1]^2 coordinates.
  static const double kEllipses[10][6] = {
      {0.0, 0.0, 0.69, 0.92, 0.0, 2.0},       {0.0, -0.0184, 0.6624, 0.874, 0.0, -0.98},
      {0.22, 0.0, 0.11, 0.31, -18.0, -0.02},  {-0.22, 0.0, 0.16, 0.41, 18.0, -0.02},
      {0.0, 0.35, 0.21, 0.25, 0.0, 0.01},     {0.0, 0.1, 0.046, 0.046, 0.0, 0.01},
      {0.0, -0.1, 0.046, 0.046, 0.0, 0.01},   {-0.08, -0.605, 0.046, 0.023, 0.0, 0.01},
      {0.0, -0.605, 0.023, 0.023, 0.0, 0.01}, {0.06, -0.605, 0.023, 0.046, 0.0, 0.01}};
  Tensor img({1, n, n});
  double* p = img.data();
  const double half = (static_cast<double>(n) - 1.0) * 0.5;
  for (int64_t iy = 0; iy < n; ++iy)
    for (int64_t ix = 0; ix < n; ++ix) {
      const double x = (static_cast<double>(ix) - half) * 2.0 / static_cast<double>(n);
      const double y = (static_cast<double>(iy) - half) * 2.0 / static_cast<double>(n);
      double val = 0.0;
      for (const auto& e : kEllipses) {
        const double phi = e[4] * kPi / 180.0;
        const double dx = x - e[0], dy = y - e[1];
        const double xr = dx * std::cos(phi) + dy * std::sin(phi);
        const double yr = -dx * std::sin(phi) + dy * std::cos(phi);
        if ((xr / e[2]) * (xr / e[2]) + (yr / e[3]) * (yr / e[3]) <= 1.0) val += e[5];
      }
      p[iy * n + ix] = val;
    }
  return img;
}

}  // namespace fedsim::ct
