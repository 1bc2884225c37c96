#pragma once

// The three learnable generator networks: a latent-to-shape-parameter MLP, a
// convolutional latent-to-material decoder, and a slicewise enhancer that
// sharpens coarse renderings. All parameters live in named ParamStores so
// training, checkpointing, and federated exchange see one flat layout.

#include "fedsim/container.hpp"
#include "fedsim/params.hpp"
#include "fedsim/ssm.hpp"
#include "fedsim/tape.hpp"

namespace fedsim::nets {

inline constexpr int kLatentDim = 32;
inline constexpr double kMuMax = 0.05;  // attenuation ceiling, mm^-1 (water scale)

// Latent -> 21 shape coordinates in (-1,1): linear 32->256->128->21 with
// LeakyReLU, LeakyReLU, Tanh. Parameter arrays g_s.{w,b}{1,2,3}.
struct ShapeNet {
  ParamStore params;
};

ShapeNet make_shape_net(Rng& rng);
Tensor shape_net_forward(Tape* tp, ShapeNet& net, Tensor z);

// Per-coordinate scales mapping the tanh outputs onto shape-parameter ranges:
// modes j -> 1.5 sqrt(lambda_j) (inside the clamp box by construction),
// rotation -> pi/8 rad, translation -> extent/8 mm, log-scale -> 0.1.
std::vector<double> shape_denorm_scales(const ssm::ShapeModel& m, double extent);

// Differentiable denormalized head: forward pass times the scale vector;
// the returned tensor is the flat (k+7) parameter vector on the tape.
Tensor shape_params_tensor(Tape* tp, ShapeNet& net, Tensor z, const std::vector<double>& scales);

// Convenience copy-out of a flat parameter tensor.
ssm::ShapeParams to_shape_params(const Tensor& flat, int k);

// Off-tape full head: z -> denormalized ShapeParams.
ssm::ShapeParams gen_shape_params(ShapeNet& net, const Tensor& z, const ssm::ShapeModel& m, double extent);

// Latent -> coarse attenuation map in (0, kMuMax), exactly 16^3: reshape z to
// 32 channels at 1^3, then upsample x4 -> conv(32->256) -> BN -> ReLU ->
// upsample x2 -> conv(256->128) -> BN -> ReLU -> upsample x2 -> conv(128->1)
// -> Tanh, affinely mapped to the attenuation range. Parameter arrays
// g_m.conv{1,2,3}.{w,b} and g_m.bn{1,2}.{gamma,beta}. Normalization always
// uses the live batch statistics (single-volume batches), so generation is a
// pure function of the parameters and the latent; the running buffers exist
// only inside the op and never steer this forward pass.
struct MaterialNet {
  ParamStore params;
  ops::BatchNormBuffers bn1, bn2;
};

MaterialNet make_material_net(Rng& rng);
Tensor material_net_forward(Tape* tp, MaterialNet& net, Tensor z);
Tensor gen_material(Tape* tp, MaterialNet& net, Tensor z);  // alias of the forward

// Coarse slice + label slice + constant plane k/H -> enhanced slice, same
// extents. Four 3x3 convs (3->32->32->32->1) with LeakyReLU between, linear
// output, added onto the coarse slice as a residual. The last conv starts at
// zero, so a fresh enhancer is exactly the identity on the coarse channel.
// Parameter arrays enh.conv{1..4}.{w,b}.
struct Enhancer {
  ParamStore params;
};

Enhancer make_enhancer(Rng& rng);
Tensor enhance_slice(Tape* tp, Enhancer& net, Tensor coarse, Tensor label, int k, int h);

// Glorot-uniform fill: +-sqrt(6 / (fan_in + fan_out)).
void glorot_fill(Tensor& t, int64_t fan_in, int64_t fan_out, Rng& rng);

// Checkpoint helpers: every store tensor under its own name, shape-checked on
// the way back in.
void put_params(Container& c, const ParamStore& p);
void get_params(const Container& c, ParamStore& p);

}  // namespace fedsim::nets
