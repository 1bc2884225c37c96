#pragma once

// Statistical shape model over corresponded multi-region surfaces: PCA basis
// built with the M x M Gram trick, mode+pose synthesis, scanline-parity
// voxelization (hard labels and a soft signed-distance variant), and
// finite-difference gradients through the whole shape->volume chain.

#include <array>
#include <functional>

#include "fedsim/tensor.hpp"

namespace fedsim::ssm {

// Shared spherical parameterization: every region is a closed surface sampled
// on the same (ring, slice) grid plus two poles, so vertex correspondence
// across shapes holds by construction. Vertices are laid out per region:
// north pole, ring-major grid, south pole; triangles index the global list.
struct SurfaceTemplate {
  int regions = 0;
  int rings = 0;
  int slices = 0;
  std::vector<std::array<int64_t, 3>> triangles;

  int64_t verts_per_region() const { return static_cast<int64_t>(rings) * slices + 2; }
  int64_t total_verts() const { return verts_per_region() * regions; }
  std::vector<int> region_of_vertex() const;
};

SurfaceTemplate make_template(int regions, int rings = 10, int slices = 24);

// Unit direction of a template grid point; vertex = center + radius * direction.
// v is the region-local vertex index.
std::array<double, 3> template_direction(const SurfaceTemplate& topo, int64_t v);

struct ShapeModel {
  std::vector<double> mean;     // 3V, per-vertex (x,y,z) triples
  std::vector<double> basis;    // 3V x k, column j at stride k (row-major [3V][k])
  std::vector<double> eigvals;  // k, descending, positive
  SurfaceTemplate topo;

  int64_t vertex_count() const { return static_cast<int64_t>(mean.size()) / 3; }
  int modes() const { return static_cast<int>(eigvals.size()); }
};

// tau: k mode weights + 7 rigid-pose parameters.
struct ShapeParams {
  std::vector<double> b;                    // mode weights
  std::array<double, 3> rot{0.0, 0.0, 0.0};    // axis-angle, radians
  std::array<double, 3> trans{0.0, 0.0, 0.0};  // mm
  double log_scale = 0.0;

  explicit ShapeParams(int k = 0) : b(static_cast<size_t>(k), 0.0) {}
  int dims() const { return static_cast<int>(b.size()) + 7; }
  std::vector<double> flat() const;
  static ShapeParams from_flat(const std::vector<double>& v, int k);
};

// PCA over corresponded point sets via the M x M Gram matrix; retains the top
// k modes. Errors: fewer than k+1 shapes, shape size mismatch, or a
// degenerate (rank < k) training set.
ShapeModel build_ssm(const std::vector<std::vector<double>>& shapes, const SurfaceTemplate& topo, int k = 14);

// Elementwise clamp of mode weights to +-1.5 sqrt(lambda_j).
std::vector<double> clamp_modes(const ShapeModel& m, const std::vector<double>& b);

// s = exp(sigma) * Rot(r) * (mean + basis * clamp(b)) + t, per vertex.
std::vector<double> synthesize(const ShapeModel& m, const ShapeParams& tau);

// Least-squares mode weights of a raw shape (no clamp, no pose): b = basis^T (s - mean).
std::vector<double> project_modes(const ShapeModel& m, const std::vector<double>& shape);
// mean + basis * b, unclamped — the reconstruction path for analysis.
std::vector<double> reconstruct_modes(const ShapeModel& m, const std::vector<double>& b);

// Hard multi-region labels on an n^3 raster (spacing mm, centered on the
// origin): scanline parity per region, regions written in id order so higher
// ids win where regions overlap. Values are region ids 0..R as doubles.
Tensor voxelize_labels(const std::vector<double>& points, const SurfaceTemplate& topo, int64_t n,
                       double spacing);

struct VoxelizeSpec {
  int64_t n = 32;
  double spacing = 1.0;
  bool soft = true;
  int region = 0;            // 0 = union of all regions; 1..R = that region only
  double temperature = 1.0;  // sigmoid width, voxel units
  double band = 6.0;         // signed-distance truncation, voxel units
};

// Occupancy in [0,1]: sigmoid of the truncated signed distance to the region
// surface (positive inside), or a 0/1 mask when spec.soft is false. The union
// of regions is the max of their signed distances.
Tensor voxelize_occupancy(const std::vector<double>& points, const SurfaceTemplate& topo,
                          const VoxelizeSpec& spec);

// Scale-aware central differences of loss(voxelize(synthesize(tau))) over all
// k+7 coordinates: steps h * {0.01*sqrt(lambda_j), 0.01 rad, 0.5*spacing mm,
// 0.01 log-scale} per coordinate class. 2*(k+7) chain evaluations.
std::vector<double> fd_grad_through_ssm(const std::function<double(const Tensor&)>& loss,
                                        const ShapeModel& m, const ShapeParams& tau,
                                        const VoxelizeSpec& spec, double h = 1.0);

// FSCT persistence (arrays: mean, basis, eigvals, regions, topo).
void save_model(const ShapeModel& m, const std::string& path);
ShapeModel load_model(const std::string& path);

}  // namespace fedsim::ssm
