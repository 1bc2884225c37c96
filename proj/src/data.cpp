#include "fedsim/data.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "fedsim/container.hpp"
#include "fedsim/ct.hpp"

namespace fedsim::data {
namespace {

// Per-sample RNG stream: independent of how many samples precede it, so
// regenerating a family with a larger n leaves earlier samples bit-identical.
uint64_t sample_seed(uint64_t seed, int index, uint64_t salt) {
  uint64_t x = seed ^ (0x9e3779b97f4a7c15ull * (uint64_t(index) + 1)) ^ salt;
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  return x;
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> out;
  size_t start = 0;
  while (true) {
    size_t tab = line.find('\t', start);
    if (tab == std::string::npos) {
      out.push_back(line.substr(start));
      return out;
    }
    out.push_back(line.substr(start, tab - start));
    start = tab + 1;
  }
}

}  // namespace

PhantomFamily family_preset(const std::string& name) {
  // All sites share the template (regions/rings/slices) so their shapes live
  // in one correspondence; what differs is the geometry statistics and the
  // attenuation profile.
  PhantomFamily f;
  f.name = name;
  if (name == "siteA") {
    return f;
  }
  if (name == "siteB") {
    f.semi_axes = {12.5, 9.0, 8.5};
    f.fractions = {1.0, 0.68, 0.42, 0.24};
    f.shape_sigma = 0.05;
    f.wobble = 0.07;
    f.mu_mean = {0.018, 0.030, 0.010, 0.033};
    f.mu_offset = 0.002;
    return f;
  }
  if (name == "siteC") {
    f.semi_axes = {9.5, 9.2, 8.8};
    f.fractions = {1.0, 0.78, 0.55, 0.33};
    f.shape_sigma = 0.03;
    f.center_sigma = 0.25;
    f.wobble = 0.04;
    f.mu_mean = {0.024, 0.028, 0.015, 0.022};
    f.mu_sigma = {0.003, 0.002, 0.002, 0.002};
    f.mu_offset = -0.002;
    return f;
  }
  fail(ErrorCode::config, "unknown family preset: " + name);
}

PhantomDraw draw_phantom(const PhantomFamily& fam, const ssm::SurfaceTemplate& topo, Rng& rng,
                         double spacing) {
  require(topo.regions == fam.regions, ErrorCode::shape, "phantom: template region count mismatch");
  require(fam.regions >= 1, ErrorCode::config, "phantom: need at least one region");
  require(fam.fractions.size() == size_t(fam.regions), ErrorCode::config,
          "phantom: fractions size != regions");
  require(fam.mu_mean.size() == size_t(fam.regions) && fam.mu_sigma.size() == size_t(fam.regions),
          ErrorCode::config, "phantom: attenuation profile size != regions");
  for (double a : fam.semi_axes) require(a > 0.0, ErrorCode::config, "phantom: semi-axes must be positive");

  const int64_t vpr = topo.verts_per_region();
  const int R = fam.regions;

  for (int attempt = 0; attempt < 100; ++attempt) {
    // Axis factors are shared across shells (the whole organ stretches
    // together); shell fractions, centers, and wobble vary per region.
    std::array<double, 3> ax;
    for (int a = 0; a < 3; ++a) ax[a] = fam.semi_axes[a] * (1.0 + fam.shape_sigma * rng.normal());

    std::vector<double> frac(R);
    std::vector<std::array<double, 3>> center(R);
    std::vector<std::array<double, 3>> wob(R);
    for (int r = 0; r < R; ++r) {
      frac[r] = fam.fractions[r] * (1.0 + fam.shape_sigma * rng.normal());
      double cs = (r == 0) ? fam.center_sigma : 0.5 * fam.center_sigma;
      std::array<double, 3> base = (r == 0) ? std::array<double, 3>{0.0, 0.0, 0.0} : center[r - 1];
      for (int a = 0; a < 3; ++a) center[r][a] = base[a] + cs * rng.normal();
      for (int a = 0; a < 3; ++a) wob[r][a] = rng.uniform(-fam.wobble, fam.wobble);
    }

    bool ok = true;
    for (int a = 0; a < 3 && ok; ++a) ok = ax[a] > 0.0;
    for (int r = 0; r + 1 < R && ok; ++r) ok = frac[r] - frac[r + 1] >= fam.min_wall;
    if (ok) ok = frac[R - 1] > 0.0;
    if (!ok) continue;

    std::vector<double> points(size_t(topo.total_verts()) * 3);
    std::vector<double> rmin(R, 1e300), rmax(R, 0.0);
    for (int r = 0; r < R; ++r) {
      for (int64_t v = 0; v < vpr; ++v) {
        auto d = ssm::template_direction(topo, v);
        // Ellipsoid radius in direction d, scaled by the shell fraction and a
        // traceless-quadratic wobble (keeps variation non-rigid and smooth).
        double inv = std::sqrt(d[0] * d[0] / (ax[0] * ax[0]) + d[1] * d[1] / (ax[1] * ax[1]) +
                               d[2] * d[2] / (ax[2] * ax[2]));
        double q = wob[r][0] * d[0] * d[1] + wob[r][1] * d[1] * d[2] +
                   wob[r][2] * (d[2] * d[2] - 1.0 / 3.0);
        double radius = frac[r] * (1.0 + q) / inv;
        if (radius < rmin[r]) rmin[r] = radius;
        if (radius > rmax[r]) rmax[r] = radius;
        size_t at = (size_t(r) * vpr + v) * 3;
        for (int a = 0; a < 3; ++a) points[at + a] = center[r][a] + radius * d[a];
      }
    }

    // Nesting and resolvability: each shell must strictly contain the next
    // (sphere bound, conservative) and the innermost must span a few voxels.
    for (int r = 0; r + 1 < R && ok; ++r) {
      double off = 0.0;
      for (int a = 0; a < 3; ++a) {
        double d = center[r + 1][a] - center[r][a];
        off += d * d;
      }
      ok = rmax[r + 1] + std::sqrt(off) <= rmin[r] - 0.25 * spacing;
    }
    if (ok) ok = rmin[R - 1] >= spacing;
    if (!ok) continue;

    PhantomDraw out;
    out.points = std::move(points);
    out.mu.assign(size_t(R) + 1, 0.0);
    for (int r = 0; r < R; ++r)
      out.mu[size_t(r) + 1] = std::max(0.0, rng.normal(fam.mu_mean[r], fam.mu_sigma[r]) + fam.mu_offset);
    return out;
  }
  fail(ErrorCode::runtime, "phantom draw: still degenerate after 100 resamples");
}

std::string split_name(Split s) {
  switch (s) {
    case Split::none: return "none";
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  fail(ErrorCode::runtime, "bad split value");
}

Split split_from(const std::string& s) {
  if (s == "none") return Split::none;
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  fail(ErrorCode::io, "manifest: unknown split '" + s + "'");
}

Manifest generate_family(const PhantomFamily& fam, int n, int resolution, uint64_t seed,
                         const std::string& out_dir) {
  require(n >= 1, ErrorCode::config, "generate_family: n must be >= 1");
  require(resolution >= 8, ErrorCode::config, "generate_family: resolution must be >= 8");

  std::filesystem::create_directories(out_dir);
  const double spacing = 32.0 / resolution;  // fixed 32 mm field of view
  auto topo = ssm::make_template(fam.regions, fam.rings, fam.slices);

  Manifest m;
  m.family = fam.name;
  m.seed = seed;
  m.resolution = resolution;
  m.regions = fam.regions;
  m.rings = fam.rings;
  m.slices = fam.slices;
  m.spacing = spacing;
  m.dir = out_dir;

  ct::RenderOptions opt;
  opt.geom = ct::default_conebeam(resolution, fam.views, spacing);
  opt.poisson_noise = fam.noise_i0 > 0.0;
  opt.i0 = fam.noise_i0;

  for (int i = 0; i < n; ++i) {
    Rng rng(sample_seed(seed, i, 0));
    PhantomDraw draw = draw_phantom(fam, topo, rng, spacing);
    Tensor labels = ssm::voxelize_labels(draw.points, topo, resolution, spacing);

    Tensor mat(labels.shape());
    for (int64_t v = 0; v < labels.size(); ++v)
      mat.data()[v] = draw.mu[size_t(labels.data()[v])];

    opt.noise_seed = sample_seed(seed, i, 0x6e6f697365ull);
    Tensor vol = ct::simulate_ct(nullptr, mat, opt);

    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "%03d", i);
    std::string stem = fam.name + "_" + idbuf;

    Sample s;
    s.id = i;
    s.vol_path = stem + ".vol.fsct";
    s.lab_path = stem + ".lab.fsct";
    s.srf_path = stem + ".srf.fsct";

    Container cv;
    cv.put("vol", vol);
    cv.put_vector("mu", draw.mu);
    cv.save(m.path_of(s.vol_path));
    Container cl;
    cl.put("labels", labels);
    cl.save(m.path_of(s.lab_path));
    Container cs;
    cs.put_vector("points", draw.points);
    cs.save(m.path_of(s.srf_path));

    m.samples.push_back(s);
  }

  save_manifest(m, out_dir + "/manifest.tsv");
  return m;
}

void save_manifest(const Manifest& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  require(bool(out), ErrorCode::io, "cannot write manifest: " + path);
  out << "fedsim-manifest\t1\n";
  out << "family\t" << m.family << "\n";
  out << "seed\t" << m.seed << "\n";
  out << "resolution\t" << m.resolution << "\n";
  out << "regions\t" << m.regions << "\n";
  out << "rings\t" << m.rings << "\n";
  out << "slices\t" << m.slices << "\n";
  out << "spacing\t" << fmt_double(m.spacing) << "\n";
  for (const Sample& s : m.samples) {
    out << "sample\t" << s.id << "\t" << s.vol_path << "\t" << s.lab_path << "\t" << s.srf_path
        << "\t" << split_name(s.split) << "\t" << (s.labeled ? 1 : 0) << "\n";
  }
  require(bool(out), ErrorCode::io, "failed writing manifest: " + path);
}

Manifest load_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(bool(in), ErrorCode::io, "cannot open manifest: " + path);

  Manifest m;
  auto parent = std::filesystem::path(path).parent_path();
  m.dir = parent.empty() ? std::string(".") : parent.string();

  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto f = split_tabs(line);
    if (first) {
      require(f.size() == 2 && f[0] == "fedsim-manifest" && f[1] == "1", ErrorCode::io,
              "not a fedsim manifest: " + path);
      first = false;
      continue;
    }
    if (f[0] == "sample") {
      require(f.size() == 7, ErrorCode::io, "manifest: malformed sample line");
      Sample s;
      s.id = std::stoi(f[1]);
      s.vol_path = f[2];
      s.lab_path = f[3];
      s.srf_path = f[4];
      s.split = split_from(f[5]);
      require(f[6] == "0" || f[6] == "1", ErrorCode::io, "manifest: labeled flag must be 0 or 1");
      s.labeled = f[6] == "1";
      m.samples.push_back(s);
      continue;
    }
    require(f.size() == 2, ErrorCode::io, "manifest: malformed line: " + line);
    if (f[0] == "family") m.family = f[1];
    else if (f[0] == "seed") m.seed = std::stoull(f[1]);
    else if (f[0] == "resolution") m.resolution = std::stoi(f[1]);
    else if (f[0] == "regions") m.regions = std::stoi(f[1]);
    else if (f[0] == "rings") m.rings = std::stoi(f[1]);
    else if (f[0] == "slices") m.slices = std::stoi(f[1]);
    else if (f[0] == "spacing") m.spacing = std::strtod(f[1].c_str(), nullptr);
    else fail(ErrorCode::io, "manifest: unknown key '" + f[0] + "'");
  }
  require(!first, ErrorCode::io, "empty manifest: " + path);
  return m;
}

void split_manifest(Manifest& m, int train, int val, int test, int labeled, uint64_t seed) {
  const int n = int(m.samples.size());
  require(train >= 0 && val >= 0 && test >= 0 && labeled >= 0, ErrorCode::config,
          "split: sizes must be nonnegative");
  require(train + val + test <= n, ErrorCode::config, "split: sizes exceed sample count");
  require(labeled <= train, ErrorCode::config, "split: labeled subset exceeds train size");

  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[size_t(i)] = i;
  Rng rng(seed);
  for (int i = n - 1; i > 0; --i) {
    int j = int(rng.below(uint64_t(i) + 1));
    std::swap(order[size_t(i)], order[size_t(j)]);
  }

  for (Sample& s : m.samples) {
    s.split = Split::none;
    s.labeled = false;
  }
  for (int i = 0; i < train; ++i) {
    Sample& s = m.samples[size_t(order[size_t(i)])];
    s.split = Split::train;
    s.labeled = i < labeled;  // first `labeled` positions of the shuffle
  }
  for (int i = 0; i < val; ++i) {
    Sample& s = m.samples[size_t(order[size_t(train + i)])];
    s.split = Split::val;
    s.labeled = true;
  }
  for (int i = 0; i < test; ++i) {
    Sample& s = m.samples[size_t(order[size_t(train + val + i)])];
    s.split = Split::test;
    s.labeled = true;
  }
}

Tensor load_array(const std::string& path, const std::string& name) {
  return Container::load(path).get(name);
}

}  // namespace fedsim::data
