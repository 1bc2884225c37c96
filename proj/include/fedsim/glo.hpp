#pragma once

// Latent-optimization training: every dataset sample owns a 32-d code that is
// optimized jointly with the generator networks. Supervised pretraining fits
// shape (soft-IoU through finite differences) and material (autodiff through
// the CT chain) on labeled samples; the enhancer pretrains against real
// slices; a Gaussian prior fitted to the labeled codes seeds the unlabeled
// ones; semi-supervised epochs alternate labeled and unlabeled steps under
// the two-optimizer schedule with linear decay over the final epochs.

#include <iosfwd>
#include <map>

#include "fedsim/ct.hpp"
#include "fedsim/data.hpp"
#include "fedsim/nets.hpp"
#include "fedsim/params.hpp"
#include "fedsim/ssm.hpp"

namespace fedsim::glo {

struct GloConfig {
  int resolution = 32;    // label/render raster; field of view is 32 mm
  int material_res = 16;  // fixed by the material net's output
  int slice_res = 32;     // enhancer slice size
  int views = 24;

  double lr = 1e-4;                 // labeled codes + both generator nets
  double lr_enh_pre = 1e-4;         // enhancer pretraining
  double lr_enh = 1e-5;             // enhancer on labeled semi-supervised steps
  double lr_unlabeled = 1e-3;       // unlabeled codes + both generator nets
  double lr_enh_unlabeled = 1e-4;   // enhancer on unlabeled steps

  int epochs_const = 30;  // flat learning rate
  int epochs_decay = 30;  // then linear decay to zero

  bool freeze_enhancer = false;
  bool reproject_latents = false;  // optional unit-ball projection of codes
  double fd_h = 1.0;
  double soft_temperature = 1.0;  // voxel units
  double soft_band = 6.0;
  uint64_t seed = 1;

  double spacing() const { return 32.0 / resolution; }
  ssm::VoxelizeSpec soft_spec() const;
  ct::RenderOptions render() const;
};

enum class Phase { pretrain_params, pretrain_enhancer, semi_supervised };
std::string phase_name(Phase p);

struct TrainSample {
  Tensor vol;    // real volume [n,n,n]
  Tensor label;  // binary union of regions [n,n,n]
};

struct GloDataset {
  std::vector<TrainSample> samples;  // chosen split, id order
  std::vector<uint8_t> labeled;
};
GloDataset load_glo_dataset(const data::Manifest& m, data::Split split = data::Split::train);

struct TrainState {
  GloConfig cfg;
  ssm::ShapeModel model;
  nets::ShapeNet shape_net;
  nets::MaterialNet material_net;
  nets::Enhancer enhancer;

  std::vector<Tensor> latents;   // one 32-d code per sample
  std::vector<uint8_t> labeled;  // fixed after construction
  std::vector<AdamState> latent_adam;
  // Separate optimizer moments for labeled and unlabeled passes, keyed by
  // parameter name (the three nets use disjoint prefixes).
  std::map<std::string, AdamState> adam_labeled, adam_unlabeled;

  int epoch = 0;  // counts epochs inside the current phase
  Phase phase = Phase::pretrain_params;
};

// Codes start from a unit normal draw; nets are freshly initialized from the
// config seed.
TrainState make_train_state(const GloConfig& cfg, const ssm::ShapeModel& model,
                            const std::vector<uint8_t>& labeled);

// -- losses -------------------------------------------------------------------

// Plain (off-tape) soft-IoU loss value, the objective fd projects through the
// voxelizer. Matches ops::soft_iou_loss: 1 - sum(a*y)/sum(a+y-a*y), 0 when
// both inputs are empty.
double iou_loss_value(const Tensor& soft, const Tensor& binary);

// Sum-squared error plus sum-squared error at scales {1, 1/2, 1/4} (the full
// scale appears in both terms by definition; a constant offset c contributes
// c^2*(2N + N/8 + N/64)). Volumes [n,n,n], n divisible by 4.
Tensor material_loss(Tape* tp, Tensor a, Tensor b);

// Same structure on [h,h] slices: c^2*(2N + N/4 + N/16).
Tensor slice_recon_loss(Tape* tp, Tensor a, Tensor b);

// -- training steps -------------------------------------------------------------

struct StepLosses {
  double iou = 0.0;
  double material = 0.0;
  double recon = 0.0;
};

// Gradients of (iou + material) loss for one labeled sample, accumulated into
// the shape/material nets' grad buffers and the sample's code grad. No
// parameter update. Callers zero the relevant grads first. Shared by the
// centralized trainer and the federated client so both sides compute
// bit-identical gradients.
StepLosses accumulate_labeled_grads(TrainState& st, int i, const TrainSample& s);

// Adam on sample i's code through its own moments, from the grad accumulated
// on the code tensor (unit-ball projection if configured). Shared by the
// centralized trainer and the federated client.
void apply_latent_update(TrainState& st, int i, double lr);

// One supervised step: accumulate_labeled_grads + Adam on shape net, material
// net, and the code, all at cfg.lr through the labeled moments.
StepLosses pretrain_step(TrainState& st, int i, const TrainSample& s);

// Enhancer-only step with frozen generators: input = (coarse slice k, ground
// truth label slice k, k/h), MSE against the real slice. Returns the loss.
double pretrain_enhancer_step(TrainState& st, int i, const TrainSample& s, int slice_k);

// -- latent prior ---------------------------------------------------------------

struct LatentPrior {
  std::vector<double> mean;  // 32
  std::vector<double> cov;   // 32x32 row-major, ridge included
  std::vector<double> chol;  // lower-triangular factor of cov
  Tensor sample(Rng& rng) const;
};

// Mean and covariance of the labeled codes plus a 1e-6 ridge; needs >= 2.
LatentPrior fit_latent_prior(const TrainState& st);
void init_unlabeled_latents(TrainState& st, const LatentPrior& prior, uint64_t seed);

// -- semi-supervised phase --------------------------------------------------------

// 1.0 for the first epochs_const epochs, then linear to 0 across epochs_decay.
double lr_factor(const GloConfig& cfg, int epoch);

// Deterministic per-(state, sample) stream for the epoch's slice draw.
uint64_t semi_slice_seed(const TrainState& st, int i);

// Labeled branch of a semi-supervised epoch: supervised losses at the
// scheduled rate plus an enhancer step on slice_k (unless frozen).
StepLosses semi_labeled_step(TrainState& st, int i, const TrainSample& s, int slice_k);

// Unlabeled branch: full generative chain to the enhanced slice, multi-scale
// reconstruction against the real slice; code/material/enhancer gradients by
// autodiff, shape gradients through the label channel by finite differences
// with the coarse slice held fixed. Updates flow through the unlabeled
// moments. Returns the reconstruction loss.
double semi_unlabeled_step(TrainState& st, int i, const TrainSample& s, int slice_k);

struct EpochMetrics {
  int epoch = 0;
  Phase phase = Phase::pretrain_params;
  double lr = 0.0;  // labeled-group rate after the schedule factor
  double iou = 0.0;
  double material = 0.0;
  double recon = 0.0;
};

// Epoch drivers: visit samples in index order, dispatch by labeled flag, then
// advance the epoch counter. Entering a driver whose phase differs from the
// state's resets the counter (each phase counts its own epochs).
EpochMetrics pretrain_epoch(TrainState& st, const GloDataset& ds);
EpochMetrics pretrain_enhancer_epoch(TrainState& st, const GloDataset& ds);
EpochMetrics semi_supervised_epoch(TrainState& st, const GloDataset& ds);

void write_metrics_header(std::ostream& out);
void append_metrics(std::ostream& out, const EpochMetrics& m);

// -- sampling / persistence -------------------------------------------------------

struct Generated {
  Tensor vol;    // enhanced volume [slice_res^3]
  Tensor label;  // binary union labels on the same raster
};

Generated generate_sample(TrainState& st, const Tensor& z);
// n draws from the prior; pair j depends only on (seed, j).
std::vector<Generated> sample_dataset(TrainState& st, const LatentPrior& prior, int n,
                                      uint64_t seed);

// Parameters, codes, flags, and phase/epoch counters (optimizer moments are
// not persisted; checkpoints feed inference and fresh runs reproduce training
// from the config seed).
void save_state(const TrainState& st, const std::string& path);
void load_state_params(TrainState& st, const std::string& path);

}  // namespace fedsim::glo
