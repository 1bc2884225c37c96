#include <cmath>

#include "fedsim/ct.hpp"

// Joseph-style projector. Each ray steps across the voxel planes of its
// dominant direction component and picks up a bilinearly interpolated sample
// per plane, weighted by the path length between plane crossings. Forward
// projection and backprojection both walk the rays through the same weight
// enumeration, so back_project is the exact adjoint of forward_project by
// construction (not just up to interpolation error).

namespace fedsim::ct {

namespace {

struct Ray {
  double o[3];  // a point on the ray (x,y,z), mm
  double d[3];  // unit direction
};

// Ray through detector bin (row,col) of a view. Parallel rays share one
// direction per view; cone rays fan out from the source point toward a flat
// detector centered on the source-isocenter axis.
Ray ray_for(const Geometry& g, int v, int row, int col) {
  Ray ray{};
  const double th = g.angles[static_cast<size_t>(v)];
  const double cs = std::cos(th), sn = std::sin(th);
  const double u = (col - (g.det_cols - 1) * 0.5) * g.det_pitch;
  if (g.mode == Mode::parallel2d) {
    ray.o[0] = u * cs;
    ray.o[1] = u * sn;
    ray.o[2] = 0.0;
    ray.d[0] = -sn;
    ray.d[1] = cs;
    ray.d[2] = 0.0;
    return ray;
  }
  const double w = (row - (g.det_rows - 1) * 0.5) * g.det_pitch;
  const double src[3] = {g.source_to_iso * cs, g.source_to_iso * sn, 0.0};
  const double toward = g.source_to_iso - g.source_to_detector;  // past the isocenter
  double p[3] = {toward * cs - u * sn, toward * sn + u * cs, w};
  double len = 0.0;
  for (int i = 0; i < 3; ++i) {
    ray.d[i] = p[i] - src[i];
    len += ray.d[i] * ray.d[i];
  }
  len = std::sqrt(len);
  for (int i = 0; i < 3; ++i) {
    ray.o[i] = src[i];
    ray.d[i] /= len;
  }
  return ray;
}

// Enumerate the (voxel, weight) pairs of one ray. Axis 0/1/2 is x/y/z with
// array strides 1/W/W*H; voxel centers sit at (i - (n-1)/2) * spacing.
// Samples falling outside the raster are dropped on both forward and adjoint
// passes alike (zero padding).
template <class Emit>
inline void trace(const Geometry& g, const Ray& ray, Emit&& emit) {
  const int64_t n[3] = {g.vol_w, g.vol_h, g.vol_d};
  const int64_t stride[3] = {1, g.vol_w, g.vol_w * g.vol_h};
  const double s = g.spacing;
  int k = 0;
  if (std::fabs(ray.d[1]) > std::fabs(ray.d[k])) k = 1;
  if (std::fabs(ray.d[2]) > std::fabs(ray.d[k])) k = 2;
  const int a = (k + 1) % 3, b = (k + 2) % 3;
  const double step = s / std::fabs(ray.d[k]);
  for (int64_t i = 0; i < n[k]; ++i) {
    const double wk = (i - (n[k] - 1) * 0.5) * s;
    const double t = (wk - ray.o[k]) / ray.d[k];
    const double fa = (ray.o[a] + t * ray.d[a]) / s + (n[a] - 1) * 0.5;
    const double fb = (ray.o[b] + t * ray.d[b]) / s + (n[b] - 1) * 0.5;
    const auto ia = static_cast<int64_t>(std::floor(fa));
    const auto ib = static_cast<int64_t>(std::floor(fb));
    const double ra = fa - static_cast<double>(ia);
    const double rb = fb - static_cast<double>(ib);
    const double wa[2] = {1.0 - ra, ra};
    const double wb[2] = {1.0 - rb, rb};
    const int64_t base = i * stride[k];
    for (int da = 0; da < 2; ++da) {
      const int64_t ja = ia + da;
      if (ja < 0 || ja >= n[a] || wa[da] == 0.0) continue;
      for (int db = 0; db < 2; ++db) {
        const int64_t jb = ib + db;
        if (jb < 0 || jb >= n[b] || wb[db] == 0.0) continue;
        emit(base + ja * stride[a] + jb * stride[b], step * wa[da] * wb[db]);
      }
    }
  }
}

void check_geometry(const Geometry& g) {
  require(g.n_views > 0 && static_cast<int>(g.angles.size()) == g.n_views, ErrorCode::config,
          "geometry: angle count must match n_views");
  require(g.det_rows > 0 && g.det_cols > 0 && g.det_pitch > 0.0, ErrorCode::config,
          "geometry: detector must have positive extents and pitch");
  require(g.vol_d > 0 && g.vol_h > 0 && g.vol_w > 0 && g.spacing > 0.0, ErrorCode::config,
          "geometry: volume must have positive extents and spacing");
  if (g.mode == Mode::parallel2d) {
    require(g.det_rows == 1 && g.vol_d == 1, ErrorCode::config,
            "geometry: parallel2d uses a single detector row and a single slice");
  } else {
    require(g.source_to_iso > 0.0 && g.source_to_detector > g.source_to_iso, ErrorCode::config,
            "geometry: cone beam needs 0 < source_to_iso < source_to_detector");
  }
}

}  // namespace

Geometry make_parallel2d(int n_views, int n_bins, double pitch, int64_t ny, int64_t nx, double spacing) {
  Geometry g;
  g.mode = Mode::parallel2d;
  g.n_views = n_views;
  g.angles.resize(static_cast<size_t>(n_views));
  for (int v = 0; v < n_views; ++v) g.angles[static_cast<size_t>(v)] = kPi * v / n_views;
  g.det_rows = 1;
  g.det_cols = n_bins;
  g.det_pitch = pitch;
  g.vol_d = 1;
  g.vol_h = ny;
  g.vol_w = nx;
  g.spacing = spacing;
  check_geometry(g);
  return g;
}

Geometry make_conebeam3d(int n_views, int det_rows, int det_cols, double pitch, double source_to_iso,
                         double source_to_detector, int64_t d, int64_t h, int64_t w, double spacing) {
  Geometry g;
  g.mode = Mode::conebeam3d;
  g.n_views = n_views;
  g.angles.resize(static_cast<size_t>(n_views));
  for (int v = 0; v < n_views; ++v) g.angles[static_cast<size_t>(v)] = 2.0 * kPi * v / n_views;
  g.det_rows = det_rows;
  g.det_cols = det_cols;
  g.det_pitch = pitch;
  g.source_to_iso = source_to_iso;
  g.source_to_detector = source_to_detector;
  g.vol_d = d;
  g.vol_h = h;
  g.vol_w = w;
  g.spacing = spacing;
  check_geometry(g);
  return g;
}

Geometry default_parallel(int64_t n, int n_views, double spacing) {
  // Detector half-width 0.75*n*s covers the raster corners (0.707*n*s), so
  // every view sees the full square and the data are complete.
  return make_parallel2d(n_views, static_cast<int>(3 * n / 2), spacing, n, n, spacing);
}

Geometry default_conebeam(int64_t n, int n_views, double spacing) {
  // Source orbit radius ~3.1x the half-diagonal keeps magnification mild and
  // the short-object condition comfortable; a 2n x 2n detector at twice the
  // orbit distance covers the whole raster with margin.
  const double dso = 3.125 * static_cast<double>(n) * spacing;
  const double dsd = 2.0 * dso;
  return make_conebeam3d(n_views, static_cast<int>(2 * n), static_cast<int>(2 * n), 2.5 * spacing, dso, dsd,
                         n, n, n, spacing);
}

namespace {

// Both raw kernels accumulate into their output so the same code serves the
// primal pass (zero-initialized buffers) and gradient accumulation.
void forward_raw(const double* vol, double* sino, const Geometry& g) {
  for (int v = 0; v < g.n_views; ++v)
    for (int r = 0; r < g.det_rows; ++r)
      for (int c = 0; c < g.det_cols; ++c) {
        const Ray ray = ray_for(g, v, r, c);
        double acc = 0.0;
        trace(g, ray, [&](int64_t idx, double w) { acc += w * vol[idx]; });
        sino[(static_cast<int64_t>(v) * g.det_rows + r) * g.det_cols + c] += acc;
      }
}

void adjoint_raw(const double* sino, double* vol, const Geometry& g) {
  for (int v = 0; v < g.n_views; ++v)
    for (int r = 0; r < g.det_rows; ++r)
      for (int c = 0; c < g.det_cols; ++c) {
        const Ray ray = ray_for(g, v, r, c);
        const double sv = sino[(static_cast<int64_t>(v) * g.det_rows + r) * g.det_cols + c];
        if (sv == 0.0) continue;
        trace(g, ray, [&](int64_t idx, double w) { vol[idx] += w * sv; });
      }
}

bool flowing(Tensor& t) { return t.has_grad(); }

}  // namespace

Tensor forward_project(Tape* tp, Tensor vol, const Geometry& g) {
  require(vol.shape() == g.vol_shape(), ErrorCode::shape,
          "forward_project: volume is " + shape_str(vol.shape()) + ", geometry wants " + shape_str(g.vol_shape()));
  Tensor out(g.sino_shape());
  forward_raw(vol.data(), out.data(), g);
  if (tp)
    tp->record([vol, out, g]() mutable {
      if (!flowing(out)) return;
      adjoint_raw(out.grad(), vol.grad(), g);
    });
  return out;
}

Tensor back_project(Tape* tp, Tensor sino, const Geometry& g) {
  require(sino.shape() == g.sino_shape(), ErrorCode::shape,
          "back_project: sinogram is " + shape_str(sino.shape()) + ", geometry wants " + shape_str(g.sino_shape()));
  Tensor out(g.vol_shape());
  adjoint_raw(sino.data(), out.data(), g);
  if (tp)
    tp->record([sino, out, g]() mutable {
      if (!flowing(out)) return;
      forward_raw(out.grad(), sino.grad(), g);
    });
  return out;
}

}  // namespace fedsim::ct
