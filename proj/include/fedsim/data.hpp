#pragma once

// Procedural "hospital" datasets: families of nested-shell phantoms built on
// the shared surface parameterization (so every sample is in vertex
// correspondence for shape modeling), voxelized labels, per-region
// attenuation, CT-rendered volumes, and a diffable tab-separated manifest
// with train/val/test splitting.

#include <array>
#include <string>

#include "fedsim/ssm.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim::data {

// A family is the generative distribution of one site: nested ellipsoidal
// shells with per-sample jitter on axes, shell fractions, centers, and a
// low-order directional wobble; attenuation drawn per region around the
// site's profile.
struct PhantomFamily {
  std::string name = "siteA";
  int regions = 4;
  int rings = 10;
  int slices = 24;
  std::array<double, 3> semi_axes{11.0, 10.0, 9.0};  // outer shell, mm
  std::vector<double> fractions{1.0, 0.72, 0.48, 0.28};  // radial fraction per region, descending
  double min_wall = 0.06;     // smallest allowed fraction gap between shells
  double shape_sigma = 0.04;  // relative jitter on axis factors and fractions
  double center_sigma = 0.4;  // mm, per-region center jitter
  double wobble = 0.05;       // directional wobble amplitude (relative)
  std::vector<double> mu_mean{0.020, 0.035, 0.012, 0.028};  // mm^-1 per region
  std::vector<double> mu_sigma{0.002, 0.003, 0.002, 0.003};
  double mu_offset = 0.0;  // site-wide additive shift
  double noise_i0 = 0.0;   // photons per ray for Poisson noise; 0 = noiseless
  int views = 24;          // cone-beam views for the "real" render
};

// The three default sites: different shape statistics and attenuation
// profiles standing in for demographic/protocol differences.
PhantomFamily family_preset(const std::string& name);

struct PhantomDraw {
  std::vector<double> points;  // 3V surface vertices
  std::vector<double> mu;      // regions+1 attenuations, mu[0] = 0 background
};

// One sample from the family distribution. Degenerate draws (broken nesting,
// sub-voxel shells, nonpositive axes) are resampled up to 100 times, then an
// error is raised. Deterministic given the rng state.
PhantomDraw draw_phantom(const PhantomFamily& fam, const ssm::SurfaceTemplate& topo, Rng& rng,
                         double spacing);

enum class Split { none, train, val, test };
std::string split_name(Split s);
Split split_from(const std::string& s);

struct Sample {
  int id = 0;
  std::string vol_path, lab_path, srf_path;  // relative to the manifest directory
  Split split = Split::none;
  bool labeled = false;
};

struct Manifest {
  std::string family;
  uint64_t seed = 0;
  int resolution = 0;
  int regions = 0;
  int rings = 0;
  int slices = 0;
  double spacing = 0.0;
  std::string dir;  // directory of the manifest file; not serialized
  std::vector<Sample> samples;

  std::string path_of(const std::string& rel) const { return dir.empty() ? rel : dir + "/" + rel; }
};

// Generate n samples into out_dir: surface points, label volume, attenuation
// profile, and the CT-rendered volume per sample, plus manifest.tsv. The
// field of view is a fixed 32 mm cube, so spacing = 32/resolution.
Manifest generate_family(const PhantomFamily& fam, int n, int resolution, uint64_t seed,
                         const std::string& out_dir);

void save_manifest(const Manifest& m, const std::string& path);
Manifest load_manifest(const std::string& path);

// Deterministic shuffled split; the labeled flag is set on `labeled` train
// samples plus every val/test sample. Sizes must fit the sample count.
void split_manifest(Manifest& m, int train, int val, int test, int labeled, uint64_t seed);

// Convenience: one named array out of an FSCT file.
Tensor load_array(const std::string& path, const std::string& name);

}  // namespace fedsim::data
