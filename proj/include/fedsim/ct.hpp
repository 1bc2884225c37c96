#pragma once

// CT acquisition model: scan geometry, Joseph-style forward projector with
// its exact adjoint, ramp filtering, filtered backprojection, and the
// differentiable simulation chain (material map -> reconstructed volume).

#include "fedsim/tape.hpp"

namespace fedsim::ct {

inline constexpr double kPi = 3.14159265358979323846;

enum class Mode { parallel2d, conebeam3d };

struct Geometry {
  Mode mode = Mode::parallel2d;
  int n_views = 0;
  std::vector<double> angles;  // radians; [0,pi) parallel, [0,2pi) cone

  int det_rows = 1;            // 1 for parallel2d
  int det_cols = 0;
  double det_pitch = 1.0;      // at the detector (mm)

  double source_to_iso = 0.0;       // cone only (mm)
  double source_to_detector = 0.0;  // cone only (mm)

  // Volume raster: extents (z,y,x) and isotropic voxel spacing in mm,
  // centered on the rotation axis.
  int64_t vol_d = 1, vol_h = 0, vol_w = 0;
  double spacing = 1.0;

  std::vector<int64_t> vol_shape() const { return {vol_d, vol_h, vol_w}; }
  std::vector<int64_t> sino_shape() const { return {n_views, det_rows, det_cols}; }
};

// Evenly spaced views: [0,pi) for parallel, [0,2pi) for cone.
Geometry make_parallel2d(int n_views, int n_bins, double pitch, int64_t ny, int64_t nx, double spacing);
Geometry make_conebeam3d(int n_views, int det_rows, int det_cols, double pitch, double source_to_iso,
                         double source_to_detector, int64_t d, int64_t h, int64_t w, double spacing);

// Cone geometry with detector sized to cover the volume and source distance
// >= 3x the volume half-diagonal (keeps the adjoint-backprojection FDK error
// second-order on full-circle scans).
Geometry default_conebeam(int64_t n, int n_views, double spacing = 1.0);
Geometry default_parallel(int64_t n, int n_views, double spacing = 1.0);

// Line integrals along every detector ray; vol [D,H,W] -> sino [views,rows,cols].
Tensor forward_project(Tape* tp, Tensor vol, const Geometry& g);
// Exact adjoint of forward_project (same traversal, transposed weights).
Tensor back_project(Tape* tp, Tensor sino, const Geometry& g);

enum class Window { ramlak, hann };

// Frequency-domain ramp filter applied per view, per detector row. Rows are
// zero-padded to the next power of two >= 2x their length: |f| (optionally
// Hann-tapered) multiplies the spectrum. Self-adjoint. `pitch` is the sample
// spacing of the row in mm.
Tensor ramp_filter(Tape* tp, Tensor sino, double pitch, Window window = Window::ramlak);

// Filtered backprojection: ramp + adjoint + angular normalization for
// parallel beams; cosine pre-weighting (iso-scaled detector) + ramp + adjoint
// + normalization for cone beams.
Tensor fbp_reconstruct(Tape* tp, Tensor sino, const Geometry& g, Window window = Window::ramlak);

// Transmission noise on line integrals: I0*exp(-p) Poisson-resampled, then
// re-logged. Off the differentiable path by design.
Tensor apply_poisson_noise(Tensor sino, double i0, Rng& rng);

struct RenderOptions {
  Geometry geom;
  Window window = Window::ramlak;
  bool poisson_noise = false;
  double i0 = 1e5;
  uint64_t noise_seed = 0;
};

// material [m,m,m] -> nearest-neighbor upsample to the render raster ->
// project -> FBP -> average-pool back to material resolution. Linear and
// differentiable with respect to the material map end to end.
Tensor simulate_ct(Tape* tp, Tensor material, const RenderOptions& opt);

// Classic 10-ellipse head phantom on an n x n raster in [-1,1]^2.
Tensor shepp_logan(int64_t n);

// Iterative radix-2 FFT, in place; n must be a power of two.
void fft_pow2(std::vector<double>& re, std::vector<double>& im, bool inverse);

}  // namespace fedsim::ct
