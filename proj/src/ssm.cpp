#include <algorithm>
#include <cmath>

#include <Eigen/Dense>

#include "fedsim/container.hpp"
#include "fedsim/ct.hpp"
#include "fedsim/ssm.hpp"

namespace fedsim::ssm {

namespace {

// Deterministic sub-voxel offsets for the scanline rows. They push every row
// off the symmetry planes where mesh edges and vertices would otherwise sit
// exactly on a row and break crossing parity. Irrational multiples of the
// spacing so no synthesized pose can re-align a row with a vertex.
constexpr double kRowJitterA = 6.180339887498949e-5;  // ~ 1e-4 * golden ratio
constexpr double kRowJitterB = 7.320508075688772e-5;  // ~ 1e-4 * (1 + sqrt 3)

}  // namespace

std::vector<int> SurfaceTemplate::region_of_vertex() const {
  std::vector<int> out(static_cast<size_t>(total_verts()));
  const int64_t vpr = verts_per_region();
  for (int64_t v = 0; v < total_verts(); ++v) out[static_cast<size_t>(v)] = 1 + static_cast<int>(v / vpr);
  return out;
}

SurfaceTemplate make_template(int regions, int rings, int slices) {
  require(regions >= 1 && rings >= 2 && slices >= 3, ErrorCode::config,
          "surface template: need >= 1 region, >= 2 rings, >= 3 slices");
  SurfaceTemplate t;
  t.regions = regions;
  t.rings = rings;
  t.slices = slices;
  const int64_t vpr = t.verts_per_region();
  t.triangles.reserve(static_cast<size_t>(2 * rings * slices) * static_cast<size_t>(regions));
  for (int rg = 0; rg < regions; ++rg) {
    const int64_t base = rg * vpr;
    const int64_t south = base + vpr - 1;
    auto grid = [&](int r, int g) { return base + 1 + static_cast<int64_t>(r) * slices + (g % slices); };
    for (int g = 0; g < slices; ++g) t.triangles.push_back({base, grid(0, g), grid(0, g + 1)});
    for (int r = 0; r + 1 < rings; ++r)
      for (int g = 0; g < slices; ++g) {
        t.triangles.push_back({grid(r, g), grid(r, g + 1), grid(r + 1, g)});
        t.triangles.push_back({grid(r, g + 1), grid(r + 1, g + 1), grid(r + 1, g)});
      }
    for (int g = 0; g < slices; ++g) t.triangles.push_back({south, grid(rings - 1, g), grid(rings - 1, g + 1)});
  }
  return t;
}

std::array<double, 3> template_direction(const SurfaceTemplate& topo, int64_t v) {
  const int64_t vpr = topo.verts_per_region();
  require(v >= 0 && v < vpr, ErrorCode::shape, "template_direction: region-local index out of range");
  if (v == 0) return {0.0, 0.0, 1.0};
  if (v == vpr - 1) return {0.0, 0.0, -1.0};
  const int64_t r = (v - 1) / topo.slices;
  const int64_t g = (v - 1) % topo.slices;
  const double theta = ct::kPi * static_cast<double>(r + 1) / static_cast<double>(topo.rings + 1);
  const double phi = 2.0 * ct::kPi * static_cast<double>(g) / static_cast<double>(topo.slices);
  return {std::sin(theta) * std::cos(phi), std::sin(theta) * std::sin(phi), std::cos(theta)};
}

// ------------------------------------------------------------------ pca build

ShapeModel build_ssm(const std::vector<std::vector<double>>& shapes, const SurfaceTemplate& topo, int k) {
  const int m = static_cast<int>(shapes.size());
  require(k >= 1, ErrorCode::config, "build_ssm: need at least one mode");
  require(m >= k + 1, ErrorCode::config,
          "build_ssm: need at least " + std::to_string(k + 1) + " shapes for " + std::to_string(k) +
              " modes, got " + std::to_string(m));
  const int64_t n3 = 3 * topo.total_verts();
  for (const auto& s : shapes)
    require(static_cast<int64_t>(s.size()) == n3, ErrorCode::shape, "build_ssm: shape size mismatch");

  ShapeModel model;
  model.topo = topo;
  model.mean.assign(static_cast<size_t>(n3), 0.0);
  for (const auto& s : shapes)
    for (int64_t r = 0; r < n3; ++r) model.mean[static_cast<size_t>(r)] += s[static_cast<size_t>(r)];
  for (auto& v : model.mean) v /= static_cast<double>(m);

  Eigen::MatrixXd xc(n3, m);
  for (int i = 0; i < m; ++i)
    for (int64_t r = 0; r < n3; ++r)
      xc(r, i) = shapes[static_cast<size_t>(i)][static_cast<size_t>(r)] - model.mean[static_cast<size_t>(r)];

  // Gram trick: eigenpairs of the M x M matrix X^T X / (M-1) give the sample
  // covariance spectrum; left vectors are recovered as X u / sqrt((M-1) l).
  Eigen::MatrixXd gram = (xc.transpose() * xc) / static_cast<double>(m - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
  require(es.info() == Eigen::Success, ErrorCode::runtime, "build_ssm: eigendecomposition failed");

  const double lam_max = es.eigenvalues()(m - 1);
  model.eigvals.resize(static_cast<size_t>(k));
  model.basis.assign(static_cast<size_t>(n3) * static_cast<size_t>(k), 0.0);
  for (int j = 0; j < k; ++j) {
    const double lam = es.eigenvalues()(m - 1 - j);
    require(lam > std::max(lam_max, 0.0) * 1e-10 + 1e-18, ErrorCode::runtime,
            "build_ssm: degenerate training set, covariance rank below " + std::to_string(k));
    model.eigvals[static_cast<size_t>(j)] = lam;
    const Eigen::VectorXd col = xc * es.eigenvectors().col(m - 1 - j) / std::sqrt(lam * (m - 1));
    for (int64_t r = 0; r < n3; ++r) model.basis[static_cast<size_t>(r * k + j)] = col(r);
  }
  return model;
}

// ------------------------------------------------------------- mode synthesis

std::vector<double> clamp_modes(const ShapeModel& m, const std::vector<double>& b) {
  require(b.size() == m.eigvals.size(), ErrorCode::shape, "clamp_modes: weight count mismatch");
  std::vector<double> out(b);
  for (size_t j = 0; j < out.size(); ++j) {
    const double lim = 1.5 * std::sqrt(m.eigvals[j]);
    out[j] = std::clamp(out[j], -lim, lim);
  }
  return out;
}

std::vector<double> reconstruct_modes(const ShapeModel& m, const std::vector<double>& b) {
  require(b.size() == m.eigvals.size(), ErrorCode::shape, "reconstruct_modes: weight count mismatch");
  const int k = m.modes();
  std::vector<double> s(m.mean);
  for (size_t r = 0; r < s.size(); ++r) {
    double acc = 0.0;
    for (int j = 0; j < k; ++j) acc += m.basis[r * static_cast<size_t>(k) + static_cast<size_t>(j)] * b[static_cast<size_t>(j)];
    s[r] += acc;
  }
  return s;
}

std::vector<double> project_modes(const ShapeModel& m, const std::vector<double>& shape) {
  require(shape.size() == m.mean.size(), ErrorCode::shape, "project_modes: shape size mismatch");
  const int k = m.modes();
  std::vector<double> b(static_cast<size_t>(k), 0.0);
  for (size_t r = 0; r < shape.size(); ++r) {
    const double d = shape[r] - m.mean[r];
    for (int j = 0; j < k; ++j) b[static_cast<size_t>(j)] += m.basis[r * static_cast<size_t>(k) + static_cast<size_t>(j)] * d;
  }
  return b;
}

std::vector<double> ShapeParams::flat() const {
  std::vector<double> v(b);
  v.insert(v.end(), {rot[0], rot[1], rot[2], trans[0], trans[1], trans[2], log_scale});
  return v;
}

ShapeParams ShapeParams::from_flat(const std::vector<double>& v, int k) {
  require(static_cast<int>(v.size()) == k + 7, ErrorCode::shape, "ShapeParams: flat vector size mismatch");
  ShapeParams p(k);
  std::copy(v.begin(), v.begin() + k, p.b.begin());
  p.rot = {v[static_cast<size_t>(k)], v[static_cast<size_t>(k) + 1], v[static_cast<size_t>(k) + 2]};
  p.trans = {v[static_cast<size_t>(k) + 3], v[static_cast<size_t>(k) + 4], v[static_cast<size_t>(k) + 5]};
  p.log_scale = v[static_cast<size_t>(k) + 6];
  return p;
}

std::vector<double> synthesize(const ShapeModel& m, const ShapeParams& tau) {
  std::vector<double> s = reconstruct_modes(m, clamp_modes(m, tau.b));

  // Rodrigues rotation about the raster origin.
  double rot[3][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
  const double theta = std::sqrt(tau.rot[0] * tau.rot[0] + tau.rot[1] * tau.rot[1] + tau.rot[2] * tau.rot[2]);
  if (theta > 1e-12) {
    const double kx = tau.rot[0] / theta, ky = tau.rot[1] / theta, kz = tau.rot[2] / theta;
    const double c = std::cos(theta), sn = std::sin(theta), ic = 1.0 - c;
    rot[0][0] = c + kx * kx * ic;      rot[0][1] = kx * ky * ic - kz * sn; rot[0][2] = kx * kz * ic + ky * sn;
    rot[1][0] = ky * kx * ic + kz * sn; rot[1][1] = c + ky * ky * ic;      rot[1][2] = ky * kz * ic - kx * sn;
    rot[2][0] = kz * kx * ic - ky * sn; rot[2][1] = kz * ky * ic + kx * sn; rot[2][2] = c + kz * kz * ic;
  }
  const double scale = std::exp(tau.log_scale);
  const bool identity_pose = theta <= 1e-12 && tau.log_scale == 0.0 && tau.trans[0] == 0.0 &&
                             tau.trans[1] == 0.0 && tau.trans[2] == 0.0;
  if (identity_pose) return s;
  for (size_t v = 0; v + 2 < s.size(); v += 3) {
    const double x = s[v], y = s[v + 1], z = s[v + 2];
    for (int i = 0; i < 3; ++i)
      s[v + static_cast<size_t>(i)] =
          scale * (rot[i][0] * x + rot[i][1] * y + rot[i][2] * z) + tau.trans[static_cast<size_t>(i)];
  }
  return s;
}

// ---------------------------------------------------------------- voxelizers

namespace {

struct Tri {
  double p[3][3];  // three vertices, (x,y,z)
};

std::vector<Tri> gather_region(const std::vector<double>& pts, const SurfaceTemplate& topo, int region) {
  const int64_t vpr = topo.verts_per_region();
  const int64_t lo = static_cast<int64_t>(region - 1) * vpr, hi = lo + vpr;
  std::vector<Tri> tris;
  tris.reserve(topo.triangles.size() / static_cast<size_t>(topo.regions));
  for (const auto& t : topo.triangles) {
    if (t[0] < lo || t[0] >= hi) continue;
    Tri tr;
    for (int v = 0; v < 3; ++v)
      for (int c = 0; c < 3; ++c) tr.p[v][c] = pts[static_cast<size_t>(3 * t[static_cast<size_t>(v)] + c)];
    tris.push_back(tr);
  }
  return tris;
}

double row_coord(int64_t i, int64_t n, double spacing, double jitter) {
  return (static_cast<double>(i) - (static_cast<double>(n) - 1.0) * 0.5 + jitter) * spacing;
}

// Per-axis acceleration grid: rows along `axis` are identified by their two
// perpendicular voxel indices; each cell lists the triangles whose projected
// bounding box covers that row (padded by one index as a float-safety margin,
// the exact crossing test filters the rest).
struct RowBuckets {
  int64_t n = 0;
  std::vector<std::vector<int32_t>> cells;  // index i2 * n + i1

  const std::vector<int32_t>& at(int64_t i1, int64_t i2) const {
    return cells[static_cast<size_t>(i2 * n + i1)];
  }
};

RowBuckets bucket_rows(const std::vector<Tri>& tris, int axis, int64_t n, double spacing) {
  const int a = (axis + 1) % 3, b = (axis + 2) % 3;
  const double half = (static_cast<double>(n) - 1.0) * 0.5;
  RowBuckets bk;
  bk.n = n;
  bk.cells.assign(static_cast<size_t>(n * n), {});
  auto index_range = [&](const Tri& t, int c, double jitter, int64_t& lo, int64_t& hi) {
    const double cmin = std::min({t.p[0][c], t.p[1][c], t.p[2][c]});
    const double cmax = std::max({t.p[0][c], t.p[1][c], t.p[2][c]});
    lo = std::max<int64_t>(0, static_cast<int64_t>(std::ceil(cmin / spacing - jitter + half)) - 1);
    hi = std::min<int64_t>(n - 1, static_cast<int64_t>(std::floor(cmax / spacing - jitter + half)) + 1);
  };
  for (size_t ti = 0; ti < tris.size(); ++ti) {
    int64_t a_lo, a_hi, b_lo, b_hi;
    index_range(tris[ti], a, kRowJitterA, a_lo, a_hi);
    index_range(tris[ti], b, kRowJitterB, b_lo, b_hi);
    for (int64_t i2 = b_lo; i2 <= b_hi; ++i2)
      for (int64_t i1 = a_lo; i1 <= a_hi; ++i1)
        bk.cells[static_cast<size_t>(i2 * n + i1)].push_back(static_cast<int32_t>(ti));
  }
  return bk;
}

// Crossing coordinates along `axis` of the row at perpendicular indices
// (i1, i2). A triangle crosses when its projection contains the row point
// with nonzero parallel area; degenerate (edge-on) projections are skipped —
// the row jitter keeps rows away from the measure-zero configurations where
// that would matter.
void row_crossings(const std::vector<Tri>& tris, const RowBuckets& bk, int axis, int64_t i1, int64_t i2,
                   double spacing, std::vector<double>& xs) {
  xs.clear();
  const int a = (axis + 1) % 3, bx = (axis + 2) % 3;
  const double r0 = row_coord(i1, bk.n, spacing, kRowJitterA);
  const double r1 = row_coord(i2, bk.n, spacing, kRowJitterB);
  for (int32_t ti : bk.at(i1, i2)) {
    const Tri& t = tris[static_cast<size_t>(ti)];
    const double u0 = t.p[0][a] - r0, v0 = t.p[0][bx] - r1;
    const double u1 = t.p[1][a] - r0, v1 = t.p[1][bx] - r1;
    const double u2 = t.p[2][a] - r0, v2 = t.p[2][bx] - r1;
    const double w0 = u1 * v2 - u2 * v1;  // weight of vertex 0
    const double w1 = u2 * v0 - u0 * v2;
    const double w2 = u0 * v1 - u1 * v0;
    const double wsum = w0 + w1 + w2;
    if (wsum == 0.0) continue;
    const bool pos = w0 > 0.0 && w1 > 0.0 && w2 > 0.0;
    const bool neg = w0 < 0.0 && w1 < 0.0 && w2 < 0.0;
    if (!pos && !neg) continue;
    xs.push_back((w0 * t.p[0][axis] + w1 * t.p[1][axis] + w2 * t.p[2][axis]) / wsum);
  }
  std::sort(xs.begin(), xs.end());
}

// Fill voxel centers lying inside [a, b) along the axis with `value`
// (overwrite), on a row with the given stride.
void fill_span(double* row, int64_t n, int64_t stride, double spacing, double a, double b, double value) {
  const double half = (static_cast<double>(n) - 1.0) * 0.5;
  int64_t lo = static_cast<int64_t>(std::ceil(a / spacing + half - 1e-9));
  int64_t hi = static_cast<int64_t>(std::ceil(b / spacing + half - 1e-9)) - 1;
  lo = std::max<int64_t>(lo, 0);
  hi = std::min<int64_t>(hi, n - 1);
  for (int64_t i = lo; i <= hi; ++i) row[i * stride] = value;
}

// Parity fill of one region into `out` (overwrite with `value` inside).
// Rows run along x, keyed by (iy, iz).
void parity_fill(const std::vector<Tri>& tris, const RowBuckets& bk, int64_t n, double spacing,
                 double* out, double value) {
  std::vector<double> xs;
  for (int64_t iz = 0; iz < n; ++iz)
    for (int64_t iy = 0; iy < n; ++iy) {
      row_crossings(tris, bk, 0, iy, iz, spacing, xs);
      require(xs.size() % 2 == 0, ErrorCode::runtime, "voxelize: degenerate surface (odd crossing parity)");
      for (size_t j = 0; j + 1 < xs.size(); j += 2)
        fill_span(out + (iz * n + iy) * n, n, 1, spacing, xs[j], xs[j + 1], value);
    }
}

// One-dimensional distance-to-nearest-crossing sweep: for each of the n voxel
// centers along the row, the distance (voxel units) to the closest value in
// the sorted xs, clamped at `band`. min-folded into dist[i * stride].
void fold_axis_distance(const std::vector<double>& xs, int64_t n, int64_t stride, double spacing,
                        double band, double* dist) {
  if (xs.empty()) return;
  size_t j = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double x = row_coord(i, n, spacing, 0.0);
    while (j + 1 < xs.size() && std::fabs(xs[j + 1] - x) <= std::fabs(xs[j] - x)) ++j;
    const double d = std::min(band, std::fabs(xs[j] - x) / spacing);
    double& slot = dist[i * stride];
    if (d < slot) slot = d;
  }
}

}  // namespace

Tensor voxelize_labels(const std::vector<double>& points, const SurfaceTemplate& topo, int64_t n,
                       double spacing) {
  require(static_cast<int64_t>(points.size()) == 3 * topo.total_verts(), ErrorCode::shape,
          "voxelize: point count does not match the surface template");
  require(n >= 1 && spacing > 0.0, ErrorCode::config, "voxelize: bad raster");
  Tensor out({n, n, n});
  for (int region = 1; region <= topo.regions; ++region) {
    const std::vector<Tri> tris = gather_region(points, topo, region);
    parity_fill(tris, bucket_rows(tris, 0, n, spacing), n, spacing, out.data(),
                static_cast<double>(region));
  }
  return out;
}

Tensor voxelize_occupancy(const std::vector<double>& points, const SurfaceTemplate& topo,
                          const VoxelizeSpec& spec) {
  require(static_cast<int64_t>(points.size()) == 3 * topo.total_verts(), ErrorCode::shape,
          "voxelize: point count does not match the surface template");
  require(spec.n >= 1 && spec.spacing > 0.0, ErrorCode::config, "voxelize: bad raster");
  require(spec.region >= 0 && spec.region <= topo.regions, ErrorCode::config, "voxelize: region out of range");
  require(!spec.soft || (spec.temperature > 0.0 && spec.band > 0.0), ErrorCode::config,
          "voxelize: soft mode needs positive temperature and band");
  const int64_t n = spec.n;
  const int r_lo = spec.region == 0 ? 1 : spec.region;
  const int r_hi = spec.region == 0 ? topo.regions : spec.region;

  Tensor out({n, n, n});
  if (!spec.soft) {
    for (int region = r_lo; region <= r_hi; ++region) {
      const std::vector<Tri> tris = gather_region(points, topo, region);
      parity_fill(tris, bucket_rows(tris, 0, n, spec.spacing), n, spec.spacing, out.data(), 1.0);
    }
    return out;
  }

  // Signed distance per region: parity gives the sign; the magnitude is the
  // minimum over the three axes of the distance to the nearest surface
  // crossing along that axis (clamped at `band`) — an axis-aligned
  // approximation of the Euclidean distance that moves continuously with the
  // vertices, which is what the finite differences need. Union of regions =
  // max of signed distances; occupancy = sigmoid(sd / temperature).
  std::vector<double> phi(static_cast<size_t>(n * n * n), -spec.band);
  std::vector<double> sign(static_cast<size_t>(n * n * n));
  std::vector<double> dist(static_cast<size_t>(n * n * n));
  std::vector<double> xs;
  for (int region = r_lo; region <= r_hi; ++region) {
    const std::vector<Tri> tris = gather_region(points, topo, region);
    const RowBuckets bk0 = bucket_rows(tris, 0, n, spec.spacing);
    std::fill(sign.begin(), sign.end(), -1.0);
    parity_fill(tris, bk0, n, spec.spacing, sign.data(), 1.0);
    std::fill(dist.begin(), dist.end(), spec.band);
    for (int64_t iz = 0; iz < n; ++iz)  // x rows, keyed (iy, iz)
      for (int64_t iy = 0; iy < n; ++iy) {
        row_crossings(tris, bk0, 0, iy, iz, spec.spacing, xs);
        fold_axis_distance(xs, n, 1, spec.spacing, spec.band, dist.data() + (iz * n + iy) * n);
      }
    const RowBuckets bk1 = bucket_rows(tris, 1, n, spec.spacing);
    for (int64_t iz = 0; iz < n; ++iz)  // y rows, keyed (iz, ix)
      for (int64_t ix = 0; ix < n; ++ix) {
        row_crossings(tris, bk1, 1, iz, ix, spec.spacing, xs);
        fold_axis_distance(xs, n, n, spec.spacing, spec.band, dist.data() + iz * n * n + ix);
      }
    const RowBuckets bk2 = bucket_rows(tris, 2, n, spec.spacing);
    for (int64_t iy = 0; iy < n; ++iy)  // z rows, keyed (ix, iy)
      for (int64_t ix = 0; ix < n; ++ix) {
        row_crossings(tris, bk2, 2, ix, iy, spec.spacing, xs);
        fold_axis_distance(xs, n, n * n, spec.spacing, spec.band, dist.data() + iy * n + ix);
      }
    for (size_t i = 0; i < phi.size(); ++i) phi[i] = std::max(phi[i], sign[i] * dist[i]);
  }
  for (size_t i = 0; i < phi.size(); ++i) out.data()[static_cast<int64_t>(i)] = 1.0 / (1.0 + std::exp(-phi[i] / spec.temperature));
  return out;
}

// ------------------------------------------------------- fd through the chain

std::vector<double> fd_grad_through_ssm(const std::function<double(const Tensor&)>& loss,
                                        const ShapeModel& m, const ShapeParams& tau,
                                        const VoxelizeSpec& spec, double h) {
  require(static_cast<int>(tau.b.size()) == m.modes(), ErrorCode::shape, "fd_grad: mode count mismatch");
  require(h > 0.0, ErrorCode::config, "fd_grad: step multiplier must be positive");
  const int k = m.modes();
  auto eval = [&](const ShapeParams& p) { return loss(voxelize_occupancy(synthesize(m, p), m.topo, spec)); };
  std::vector<double> flat = tau.flat();
  std::vector<double> grad(flat.size());
  for (size_t j = 0; j < flat.size(); ++j) {
    double step;
    if (j < static_cast<size_t>(k))
      step = h * 0.01 * std::sqrt(m.eigvals[j]);
    else if (j < static_cast<size_t>(k) + 3)
      step = h * 0.01;  // radians
    else if (j < static_cast<size_t>(k) + 6)
      step = h * 0.5 * spec.spacing;  // half a voxel
    else
      step = h * 0.01;  // log-scale
    std::vector<double> bumped = flat;
    bumped[j] = flat[j] + step;
    const double up = eval(ShapeParams::from_flat(bumped, k));
    bumped[j] = flat[j] - step;
    const double dn = eval(ShapeParams::from_flat(bumped, k));
    grad[j] = (up - dn) / (2.0 * step);
  }
  return grad;
}

// ---------------------------------------------------------------- persistence

void save_model(const ShapeModel& m, const std::string& path) {
  Container c;
  c.put_vector("mean", m.mean);
  c.put("basis", Tensor::from({3 * m.vertex_count(), m.modes()}, m.basis));
  c.put_vector("eigvals", m.eigvals);
  const std::vector<int> regions = m.topo.region_of_vertex();
  c.put_vector("regions", std::vector<double>(regions.begin(), regions.end()));
  c.put_vector("topo", {static_cast<double>(m.topo.regions), static_cast<double>(m.topo.rings),
                        static_cast<double>(m.topo.slices)});
  c.save(path);
}

ShapeModel load_model(const std::string& path) {
  Container c = Container::load(path);
  const std::vector<double> topo = c.get_vector("topo");
  require(topo.size() == 3, ErrorCode::io, "shape model file: bad topo record");
  ShapeModel m;
  m.topo = make_template(static_cast<int>(topo[0]), static_cast<int>(topo[1]), static_cast<int>(topo[2]));
  m.mean = c.get_vector("mean");
  m.basis = c.get_vector("basis");
  m.eigvals = c.get_vector("eigvals");
  require(static_cast<int64_t>(m.mean.size()) == 3 * m.topo.total_verts(), ErrorCode::io,
          "shape model file: mean size does not match topology");
  require(m.basis.size() == m.mean.size() * m.eigvals.size(), ErrorCode::io,
          "shape model file: basis size does not match mean and mode count");
  require(c.get_vector("regions").size() == static_cast<size_t>(m.topo.total_verts()), ErrorCode::io,
          "shape model file: region labels do not match topology");
  return m;
}

}  // namespace fedsim::ssm
