#include "fedsim/glo.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdio>
#include <ostream>

#include "fedsim/container.hpp"

namespace fedsim::glo {
namespace {

uint64_t splitmix(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

uint64_t mix_seed(uint64_t a, uint64_t b, uint64_t c = 0, uint64_t d = 0) {
  return splitmix(splitmix(splitmix(splitmix(a) ^ b) ^ c) ^ d);
}

// Binary occupancy of the current shape on the material raster; the
// attenuation map lives inside the anatomy, and this mask is treated as a
// constant with respect to the shape parameters (the shape's own gradient
// path is the soft IoU / label channel, by finite differences).
Tensor hard_union_mask(const TrainState& st, const ssm::ShapeParams& tau) {
  ssm::VoxelizeSpec ms;
  ms.n = st.cfg.material_res;
  ms.spacing = 32.0 / double(st.cfg.material_res);
  ms.soft = false;
  ms.region = 0;
  return ssm::voxelize_occupancy(ssm::synthesize(st.model, tau), st.model.topo, ms);
}

// Real volume brought down to the material raster (box average).
Tensor downsample_to_material(const GloConfig& cfg, const Tensor& vol) {
  const int factor = cfg.resolution / cfg.material_res;
  if (factor == 1) return vol;
  const int64_t n = cfg.resolution;
  Tensor r = ops::reshape(nullptr, vol, {1, n, n, n});
  r = ops::avgpool3d(nullptr, r, factor);
  const int64_t m = cfg.material_res;
  return ops::reshape(nullptr, r, {m, m, m});
}

void apply_adam_group(std::map<std::string, AdamState>& states, ParamStore& ps, double lr) {
  for (auto& [name, t] : ps.items()) {
    AdamState& a = states[name];
    adam_update(t, t.grad(), a, lr);
  }
}

void zero_step_grads(TrainState& st, int i) {
  st.shape_net.params.zero_grads();
  st.material_net.params.zero_grads();
  st.enhancer.params.zero_grads();
  st.latents[size_t(i)].zero_grad();
}

void sync_phase(TrainState& st, Phase p) {
  if (st.phase != p) {
    st.phase = p;
    st.epoch = 0;
  }
}

void check_dataset(const TrainState& st, const GloDataset& ds) {
  require(ds.samples.size() == st.latents.size(), ErrorCode::shape,
          "glo: dataset size != latent count");
  require(ds.labeled == st.labeled, ErrorCode::shape, "glo: labeled flags diverge from state");
}

// Shared enhancer update: slice the frozen generative chain at k, feed
// (coarse, label channel, k/h), regress onto the real slice.
double enhancer_step(TrainState& st, int i, const TrainSample& s, int slice_k, double lr,
                     std::map<std::string, AdamState>& states) {
  const GloConfig& cfg = st.cfg;
  require(slice_k >= 0 && slice_k < cfg.slice_res, ErrorCode::shape,
          "enhancer step: slice index out of range");
  Tensor z = st.latents[size_t(i)];
  auto scales = nets::shape_denorm_scales(st.model, 32.0);
  Tensor flat = nets::shape_params_tensor(nullptr, st.shape_net, z, scales);
  ssm::ShapeParams tau = nets::to_shape_params(flat, st.model.modes());

  Tensor m16 = nets::material_net_forward(nullptr, st.material_net, z);
  Tensor masked = ops::mul(nullptr, m16, hard_union_mask(st, tau));
  Tensor sim = ct::simulate_ct(nullptr, masked, cfg.render());

  Tensor coarse = ops::trilinear_slice(nullptr, sim, slice_k, cfg.slice_res);
  Tensor label = ops::trilinear_slice(nullptr, s.label, slice_k, cfg.slice_res);
  Tensor target = ops::trilinear_slice(nullptr, s.vol, slice_k, cfg.slice_res);

  Tape tape;
  st.enhancer.params.zero_grads();
  Tensor out = nets::enhance_slice(&tape, st.enhancer, coarse, label, slice_k, cfg.slice_res);
  Tensor diff = ops::sub(&tape, out, target);
  Tensor loss = ops::scale(&tape, ops::sum_squares(&tape, diff), 1.0 / double(out.size()));
  loss.ensure_grad();
  loss.grad()[0] = 1.0;
  tape.backward();

  apply_adam_group(states, st.enhancer.params, lr);
  return loss.data()[0];
}

}  // namespace

ssm::VoxelizeSpec GloConfig::soft_spec() const {
  ssm::VoxelizeSpec s;
  s.n = resolution;
  s.spacing = spacing();
  s.soft = true;
  s.region = 0;
  s.temperature = soft_temperature;
  s.band = soft_band;
  return s;
}

ct::RenderOptions GloConfig::render() const {
  ct::RenderOptions opt;
  opt.geom = ct::default_conebeam(resolution, views, spacing());
  return opt;
}

std::string phase_name(Phase p) {
  switch (p) {
    case Phase::pretrain_params: return "pretrain_params";
    case Phase::pretrain_enhancer: return "pretrain_enhancer";
    case Phase::semi_supervised: return "semi_supervised";
  }
  fail(ErrorCode::runtime, "bad phase value");
}

GloDataset load_glo_dataset(const data::Manifest& m, data::Split split) {
  GloDataset ds;
  for (const data::Sample& s : m.samples) {
    if (s.split != split) continue;
    Tensor vol = data::load_array(m.path_of(s.vol_path), "vol");
    Tensor lab = data::load_array(m.path_of(s.lab_path), "labels");
    require(vol.shape() == lab.shape(), ErrorCode::shape, "glo: volume/label raster mismatch");
    Tensor uni(lab.shape());
    for (int64_t v = 0; v < lab.size(); ++v) uni.data()[v] = lab.data()[v] > 0.0 ? 1.0 : 0.0;
    ds.samples.push_back({vol, uni});
    ds.labeled.push_back(s.labeled ? 1 : 0);
  }
  return ds;
}

TrainState make_train_state(const GloConfig& cfg, const ssm::ShapeModel& model,
                            const std::vector<uint8_t>& labeled) {
  require(cfg.resolution % cfg.material_res == 0, ErrorCode::config,
          "glo: resolution must be a multiple of the material resolution");
  require(cfg.slice_res >= 4, ErrorCode::config, "glo: slice resolution too small");
  require(model.modes() + 7 == 21, ErrorCode::config,
          "glo: shape head emits 21 outputs; the model must carry 14 modes");
  require(!labeled.empty(), ErrorCode::config, "glo: empty dataset");

  TrainState st;
  st.cfg = cfg;
  st.model = model;
  Rng nrng(mix_seed(cfg.seed, 0x6e657473));  // network init stream
  st.shape_net = nets::make_shape_net(nrng);
  st.material_net = nets::make_material_net(nrng);
  st.enhancer = nets::make_enhancer(nrng);

  Rng zrng(mix_seed(cfg.seed, 0x7a636f6465));  // code init stream
  st.latents.reserve(labeled.size());
  for (size_t i = 0; i < labeled.size(); ++i) {
    Tensor z({nets::kLatentDim});
    for (int64_t j = 0; j < z.size(); ++j) z.data()[j] = zrng.normal();
    st.latents.push_back(z);
  }
  st.labeled = labeled;
  st.latent_adam.resize(labeled.size());
  return st;
}

double iou_loss_value(const Tensor& soft, const Tensor& binary) {
  require(soft.shape() == binary.shape(), ErrorCode::shape, "iou: shape mismatch");
  const double* pa = soft.data();
  const double* py = binary.data();
  double inter = 0.0, uni = 0.0;
  for (int64_t i = 0; i < soft.size(); ++i) {
    const double p = pa[i] * py[i];
    inter += p;
    uni += pa[i] + py[i] - p;
  }
  return uni == 0.0 ? 0.0 : 1.0 - inter / uni;
}

Tensor material_loss(Tape* tp, Tensor a, Tensor b) {
  require(a.rank() == 3 && a.shape() == b.shape(), ErrorCode::shape,
          "material_loss: need equal [n,n,n] volumes");
  const int64_t n = a.dim(0);
  require(n % 4 == 0, ErrorCode::shape, "material_loss: extent must be divisible by 4");
  Tensor d = ops::sub(tp, a, b);
  // The base error term plus the scale pyramid; the pyramid's full scale
  // doubles the base term by definition.
  Tensor loss = ops::scale(tp, ops::sum_squares(tp, d), 2.0);
  Tensor lvl = ops::reshape(tp, d, {1, n, n, n});
  for (int s = 0; s < 2; ++s) {
    lvl = ops::avgpool3d(tp, lvl, 2);
    loss = ops::add(tp, loss, ops::sum_squares(tp, lvl));
  }
  return loss;
}

Tensor slice_recon_loss(Tape* tp, Tensor a, Tensor b) {
  require(a.rank() == 2 && a.shape() == b.shape(), ErrorCode::shape,
          "slice_recon_loss: need equal [h,h] slices");
  const int64_t h = a.dim(0);
  require(h % 4 == 0, ErrorCode::shape, "slice_recon_loss: extent must be divisible by 4");
  Tensor d = ops::sub(tp, a, b);
  Tensor loss = ops::scale(tp, ops::sum_squares(tp, d), 2.0);
  Tensor lvl = ops::reshape(tp, d, {1, h, h});
  for (int s = 0; s < 2; ++s) {
    lvl = ops::avgpool2d(tp, lvl, 2);
    loss = ops::add(tp, loss, ops::sum_squares(tp, lvl));
  }
  return loss;
}

void apply_latent_update(TrainState& st, int i, double lr) {
  Tensor& z = st.latents[size_t(i)];
  adam_update(z, z.grad(), st.latent_adam[size_t(i)], lr);
  if (st.cfg.reproject_latents) {
    double n2 = 0.0;
    for (int64_t j = 0; j < z.size(); ++j) n2 += z.data()[j] * z.data()[j];
    if (n2 > 1.0) {
      const double inv = 1.0 / std::sqrt(n2);
      for (int64_t j = 0; j < z.size(); ++j) z.data()[j] *= inv;
    }
  }
}

StepLosses accumulate_labeled_grads(TrainState& st, int i, const TrainSample& s) {
  const GloConfig& cfg = st.cfg;
  require(i >= 0 && size_t(i) < st.latents.size(), ErrorCode::shape, "glo: sample index");
  require(st.labeled[size_t(i)], ErrorCode::runtime, "glo: supervised step on unlabeled sample");
  require(s.label.shape_equals({cfg.resolution, cfg.resolution, cfg.resolution}),
          ErrorCode::shape, "glo: label raster != configured resolution");

  Tape tape;
  Tensor z = st.latents[size_t(i)];
  auto scales = nets::shape_denorm_scales(st.model, 32.0);
  Tensor flat_tau = nets::shape_params_tensor(&tape, st.shape_net, z, scales);
  ssm::ShapeParams tau = nets::to_shape_params(flat_tau, st.model.modes());

  // Shape branch: finite differences through voxelization give d(iou)/d(tau);
  // the tape then pulls that through the head into theta_S and the code.
  const ssm::VoxelizeSpec spec = cfg.soft_spec();
  auto iou_of = [&](const Tensor& occ) { return iou_loss_value(occ, s.label); };
  std::vector<double> gtau = ssm::fd_grad_through_ssm(iou_of, st.model, tau, spec, cfg.fd_h);
  const double liou =
      iou_of(ssm::voxelize_occupancy(ssm::synthesize(st.model, tau), st.model.topo, spec));

  // Material branch: attenuation masked by the current shape (mask constant),
  // rendered through the scanner and compared at material resolution.
  Tensor m16 = nets::material_net_forward(&tape, st.material_net, z);
  Tensor masked = ops::mul(&tape, m16, hard_union_mask(st, tau));
  Tensor sim = ct::simulate_ct(&tape, masked, cfg.render());
  Tensor target = downsample_to_material(cfg, s.vol);
  Tensor lmat = material_loss(&tape, sim, target);

  flat_tau.ensure_grad();
  for (size_t j = 0; j < gtau.size(); ++j) flat_tau.grad()[j] += gtau[j];
  lmat.ensure_grad();
  lmat.grad()[0] = 1.0;
  tape.backward();

  return {liou, lmat.data()[0], 0.0};
}

StepLosses pretrain_step(TrainState& st, int i, const TrainSample& s) {
  zero_step_grads(st, i);
  StepLosses losses = accumulate_labeled_grads(st, i, s);
  apply_adam_group(st.adam_labeled, st.shape_net.params, st.cfg.lr);
  apply_adam_group(st.adam_labeled, st.material_net.params, st.cfg.lr);
  apply_latent_update(st, i, st.cfg.lr);
  return losses;
}

double pretrain_enhancer_step(TrainState& st, int i, const TrainSample& s, int slice_k) {
  require(st.labeled[size_t(i)], ErrorCode::runtime, "glo: enhancer pretrain needs labels");
  return enhancer_step(st, i, s, slice_k, st.cfg.lr_enh_pre, st.adam_labeled);
}

Tensor LatentPrior::sample(Rng& rng) const {
  const int64_t k = int64_t(mean.size());
  std::vector<double> n(static_cast<size_t>(k), 0.0);
  for (double& v : n) v = rng.normal();
  Tensor z({k});
  for (int64_t r = 0; r < k; ++r) {
    double acc = mean[size_t(r)];
    for (int64_t c = 0; c <= r; ++c) acc += chol[size_t(r * k + c)] * n[size_t(c)];
    z.data()[r] = acc;
  }
  return z;
}

LatentPrior fit_latent_prior(const TrainState& st) {
  const int64_t k = nets::kLatentDim;
  std::vector<const Tensor*> zs;
  for (size_t i = 0; i < st.latents.size(); ++i)
    if (st.labeled[i]) zs.push_back(&st.latents[i]);
  require(zs.size() >= 2, ErrorCode::runtime, "latent prior: need at least 2 labeled codes");

  LatentPrior p;
  p.mean.assign(size_t(k), 0.0);
  for (const Tensor* z : zs)
    for (int64_t j = 0; j < k; ++j) p.mean[size_t(j)] += z->data()[j];
  for (double& v : p.mean) v /= double(zs.size());

  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(k, k);
  for (const Tensor* z : zs) {
    Eigen::VectorXd d(k);
    for (int64_t j = 0; j < k; ++j) d(j) = z->data()[j] - p.mean[size_t(j)];
    cov += d * d.transpose();
  }
  cov /= double(zs.size() - 1);
  cov += 1e-6 * Eigen::MatrixXd::Identity(k, k);

  Eigen::LLT<Eigen::MatrixXd> llt(cov);
  require(llt.info() == Eigen::Success, ErrorCode::runtime, "latent prior: factorization failed");
  Eigen::MatrixXd L = llt.matrixL();

  p.cov.assign(size_t(k * k), 0.0);
  p.chol.assign(size_t(k * k), 0.0);
  for (int64_t r = 0; r < k; ++r)
    for (int64_t c = 0; c < k; ++c) {
      p.cov[size_t(r * k + c)] = cov(r, c);
      p.chol[size_t(r * k + c)] = L(r, c);
    }
  return p;
}

void init_unlabeled_latents(TrainState& st, const LatentPrior& prior, uint64_t seed) {
  Rng rng(mix_seed(seed, 0x756e6c61));
  for (size_t i = 0; i < st.latents.size(); ++i) {
    if (st.labeled[i]) continue;
    st.latents[i] = prior.sample(rng);
    st.latent_adam[i] = AdamState{};  // fresh moments for the replaced code
  }
}

double lr_factor(const GloConfig& cfg, int epoch) {
  if (epoch < cfg.epochs_const) return 1.0;
  const int total = cfg.epochs_const + cfg.epochs_decay;
  if (epoch >= total) return 0.0;
  return double(total - epoch) / double(cfg.epochs_decay);
}

uint64_t semi_slice_seed(const TrainState& st, int i) {
  return mix_seed(st.cfg.seed, 0x736c6963 + uint64_t(int(st.phase)), uint64_t(st.epoch),
                  uint64_t(i));
}

StepLosses semi_labeled_step(TrainState& st, int i, const TrainSample& s, int slice_k) {
  const double f = lr_factor(st.cfg, st.epoch);
  zero_step_grads(st, i);
  StepLosses losses = accumulate_labeled_grads(st, i, s);
  apply_adam_group(st.adam_labeled, st.shape_net.params, st.cfg.lr * f);
  apply_adam_group(st.adam_labeled, st.material_net.params, st.cfg.lr * f);
  apply_latent_update(st, i, st.cfg.lr * f);
  if (!st.cfg.freeze_enhancer)
    losses.recon = enhancer_step(st, i, s, slice_k, st.cfg.lr_enh * f, st.adam_labeled);
  return losses;
}

double semi_unlabeled_step(TrainState& st, int i, const TrainSample& s, int slice_k) {
  const GloConfig& cfg = st.cfg;
  require(!st.labeled[size_t(i)], ErrorCode::runtime, "glo: unsupervised step on labeled sample");
  require(slice_k >= 0 && slice_k < cfg.slice_res, ErrorCode::shape,
          "glo: slice index out of range");
  const double f = lr_factor(cfg, st.epoch);
  zero_step_grads(st, i);

  Tape tape;
  Tensor z = st.latents[size_t(i)];
  auto scales = nets::shape_denorm_scales(st.model, 32.0);
  Tensor flat_tau = nets::shape_params_tensor(&tape, st.shape_net, z, scales);
  ssm::ShapeParams tau = nets::to_shape_params(flat_tau, st.model.modes());

  const ssm::VoxelizeSpec spec = cfg.soft_spec();
  Tensor occ = ssm::voxelize_occupancy(ssm::synthesize(st.model, tau), st.model.topo, spec);

  Tensor m16 = nets::material_net_forward(&tape, st.material_net, z);
  Tensor masked = ops::mul(&tape, m16, hard_union_mask(st, tau));
  Tensor sim = ct::simulate_ct(&tape, masked, cfg.render());
  Tensor coarse = ops::trilinear_slice(&tape, sim, slice_k, cfg.slice_res);
  Tensor label0 = ops::trilinear_slice(nullptr, occ, slice_k, cfg.slice_res);
  Tensor target = ops::trilinear_slice(nullptr, s.vol, slice_k, cfg.slice_res);

  Tensor out = nets::enhance_slice(&tape, st.enhancer, coarse, label0, slice_k, cfg.slice_res);
  Tensor loss = slice_recon_loss(&tape, out, target);

  // Shape gradients flow through the enhancer's label channel: re-evaluate the
  // slice loss under perturbed occupancy with the coarse channel frozen.
  Tensor coarse_const = coarse.clone();
  auto recon_of = [&](const Tensor& o) {
    Tensor lsl = ops::trilinear_slice(nullptr, o, slice_k, cfg.slice_res);
    Tensor e = nets::enhance_slice(nullptr, st.enhancer, coarse_const, lsl, slice_k, cfg.slice_res);
    return slice_recon_loss(nullptr, e, target).data()[0];
  };
  std::vector<double> gtau = ssm::fd_grad_through_ssm(recon_of, st.model, tau, spec, cfg.fd_h);

  flat_tau.ensure_grad();
  for (size_t j = 0; j < gtau.size(); ++j) flat_tau.grad()[j] += gtau[j];
  loss.ensure_grad();
  loss.grad()[0] = 1.0;
  tape.backward();

  apply_adam_group(st.adam_unlabeled, st.shape_net.params, cfg.lr_unlabeled * f);
  apply_adam_group(st.adam_unlabeled, st.material_net.params, cfg.lr_unlabeled * f);
  if (!cfg.freeze_enhancer)
    apply_adam_group(st.adam_unlabeled, st.enhancer.params, cfg.lr_enh_unlabeled * f);
  apply_latent_update(st, i, cfg.lr_unlabeled * f);
  return loss.data()[0];
}

EpochMetrics pretrain_epoch(TrainState& st, const GloDataset& ds) {
  sync_phase(st, Phase::pretrain_params);
  check_dataset(st, ds);
  EpochMetrics m;
  m.epoch = st.epoch;
  m.phase = st.phase;
  m.lr = st.cfg.lr;
  int n = 0;
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    if (!ds.labeled[i]) continue;
    StepLosses l = pretrain_step(st, int(i), ds.samples[i]);
    m.iou += l.iou;
    m.material += l.material;
    ++n;
  }
  require(n > 0, ErrorCode::runtime, "glo: pretrain epoch saw no labeled samples");
  m.iou /= n;
  m.material /= n;
  st.epoch += 1;
  return m;
}

EpochMetrics pretrain_enhancer_epoch(TrainState& st, const GloDataset& ds) {
  sync_phase(st, Phase::pretrain_enhancer);
  check_dataset(st, ds);
  EpochMetrics m;
  m.epoch = st.epoch;
  m.phase = st.phase;
  m.lr = st.cfg.lr_enh_pre;
  int n = 0;
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    if (!ds.labeled[i]) continue;
    Rng rng(semi_slice_seed(st, int(i)));
    int k = int(rng.below(uint64_t(st.cfg.slice_res)));
    m.recon += pretrain_enhancer_step(st, int(i), ds.samples[i], k);
    ++n;
  }
  require(n > 0, ErrorCode::runtime, "glo: enhancer epoch saw no labeled samples");
  m.recon /= n;
  st.epoch += 1;
  return m;
}

EpochMetrics semi_supervised_epoch(TrainState& st, const GloDataset& ds) {
  sync_phase(st, Phase::semi_supervised);
  check_dataset(st, ds);
  EpochMetrics m;
  m.epoch = st.epoch;
  m.phase = st.phase;
  m.lr = st.cfg.lr * lr_factor(st.cfg, st.epoch);
  int nl = 0, nu = 0;
  for (size_t i = 0; i < ds.samples.size(); ++i) {
    Rng rng(semi_slice_seed(st, int(i)));
    int k = int(rng.below(uint64_t(st.cfg.slice_res)));
    if (ds.labeled[i]) {
      StepLosses l = semi_labeled_step(st, int(i), ds.samples[i], k);
      m.iou += l.iou;
      m.material += l.material;
      ++nl;
    } else {
      m.recon += semi_unlabeled_step(st, int(i), ds.samples[i], k);
      ++nu;
    }
  }
  if (nl > 0) {
    m.iou /= nl;
    m.material /= nl;
  }
  if (nu > 0) m.recon /= nu;
  st.epoch += 1;
  return m;
}

void write_metrics_header(std::ostream& out) {
  out << "epoch,phase,lr,loss_iou,loss_material,loss_recon\n";
}

void append_metrics(std::ostream& out, const EpochMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%d,%s,%.17g,%.17g,%.17g,%.17g\n", m.epoch,
                phase_name(m.phase).c_str(), m.lr, m.iou, m.material, m.recon);
  out << buf;
}

Generated generate_sample(TrainState& st, const Tensor& z) {
  const GloConfig& cfg = st.cfg;
  auto scales = nets::shape_denorm_scales(st.model, 32.0);
  Tensor zc = z.clone();
  Tensor flat = nets::shape_params_tensor(nullptr, st.shape_net, zc, scales);
  ssm::ShapeParams tau = nets::to_shape_params(flat, st.model.modes());

  std::vector<double> points = ssm::synthesize(st.model, tau);
  Tensor labels =
      ssm::voxelize_labels(points, st.model.topo, cfg.slice_res, 32.0 / double(cfg.slice_res));
  Tensor uni(labels.shape());
  for (int64_t v = 0; v < labels.size(); ++v) uni.data()[v] = labels.data()[v] > 0.0 ? 1.0 : 0.0;

  Tensor m16 = nets::material_net_forward(nullptr, st.material_net, zc);
  Tensor masked = ops::mul(nullptr, m16, hard_union_mask(st, tau));
  Tensor sim = ct::simulate_ct(nullptr, masked, cfg.render());

  const int64_t h = cfg.slice_res;
  Tensor vol({h, h, h});
  for (int k = 0; k < h; ++k) {
    Tensor coarse = ops::trilinear_slice(nullptr, sim, k, int(h));
    Tensor lab = ops::trilinear_slice(nullptr, uni, k, int(h));
    Tensor out = nets::enhance_slice(nullptr, st.enhancer, coarse, lab, k, int(h));
    std::copy_n(out.data(), h * h, vol.data() + int64_t(k) * h * h);
  }
  return {vol, uni};
}

std::vector<Generated> sample_dataset(TrainState& st, const LatentPrior& prior, int n,
                                      uint64_t seed) {
  require(n >= 0, ErrorCode::config, "sample_dataset: negative count");
  std::vector<Generated> out;
  out.reserve(size_t(n));
  for (int j = 0; j < n; ++j) {
    Rng rng(mix_seed(seed, 0x67656e, uint64_t(j)));
    out.push_back(generate_sample(st, prior.sample(rng)));
  }
  return out;
}

void save_state(const TrainState& st, const std::string& path) {
  Container c;
  nets::put_params(c, st.shape_net.params);
  nets::put_params(c, st.material_net.params);
  nets::put_params(c, st.enhancer.params);
  const int64_t n = int64_t(st.latents.size());
  Tensor zs({n, nets::kLatentDim});
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(st.latents[size_t(i)].data(), nets::kLatentDim,
                zs.data() + i * nets::kLatentDim);
  c.put("state.latents", zs);
  std::vector<double> flags(st.labeled.begin(), st.labeled.end());
  c.put_vector("state.labeled", flags);
  c.put_scalar("state.epoch", double(st.epoch));
  c.put_scalar("state.phase", double(int(st.phase)));
  c.save(path);
}

void load_state_params(TrainState& st, const std::string& path) {
  Container c = Container::load(path);
  nets::get_params(c, st.shape_net.params);
  nets::get_params(c, st.material_net.params);
  nets::get_params(c, st.enhancer.params);
  const Tensor& zs = c.get("state.latents");
  require(zs.rank() == 2 && zs.dim(1) == nets::kLatentDim &&
              zs.dim(0) == int64_t(st.latents.size()),
          ErrorCode::io, "state: latent block mismatch");
  std::vector<double> flags = c.get_vector("state.labeled");
  require(flags.size() == st.labeled.size(), ErrorCode::io, "state: labeled flag mismatch");
  for (size_t i = 0; i < flags.size(); ++i)
    require((flags[i] != 0.0) == (st.labeled[i] != 0), ErrorCode::io,
            "state: labeled flags diverge");
  for (size_t i = 0; i < st.latents.size(); ++i) {
    Tensor z({nets::kLatentDim});
    std::copy_n(zs.data() + int64_t(i) * nets::kLatentDim, nets::kLatentDim, z.data());
    st.latents[i] = z;
    st.latent_adam[i] = AdamState{};
  }
  int phase = int(c.get_scalar("state.phase"));
  require(phase >= 0 && phase <= 2, ErrorCode::io, "state: bad phase");
  st.phase = Phase(phase);
  st.epoch = int(c.get_scalar("state.epoch"));
}

}  // namespace fedsim::glo
