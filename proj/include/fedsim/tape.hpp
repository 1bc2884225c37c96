#pragma once

// Reverse-mode autodiff tape. Ops append a backward closure as they execute;
// backward() replays them once, in reverse recording order. Passing a null
// Tape* to any op gives a plain forward evaluation that records nothing.

#include <functional>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

class Tape {
 public:
  void record(std::function<void()> back) { nodes_.push_back(std::move(back)); }

  // Caller seeds the loss gradient (usually loss.grad()[0] = 1) first.
  void backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  void clear() { nodes_.clear(); }
  size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::function<void()>> nodes_;
};

namespace ops {

// -- elementwise / reductions ------------------------------------------------
Tensor add(Tape* tp, Tensor a, Tensor b);
Tensor sub(Tape* tp, Tensor a, Tensor b);
Tensor mul(Tape* tp, Tensor a, Tensor b);
Tensor scale(Tape* tp, Tensor a, double s);
// Per-element constant scale (used for output denormalization vectors).
Tensor scale_vec(Tape* tp, Tensor a, const std::vector<double>& s);
Tensor sum(Tape* tp, Tensor a);                      // -> [1]
Tensor sum_squares(Tape* tp, Tensor a);              // -> [1]
Tensor mean(Tape* tp, Tensor a);                     // -> [1]

// -- activations ---------------------------------------------------------------
Tensor relu(Tape* tp, Tensor a);
Tensor leaky_relu(Tape* tp, Tensor a, double slope = 0.01);
Tensor tanh_act(Tape* tp, Tensor a);
Tensor sigmoid(Tape* tp, Tensor a);

// -- linear algebra ------------------------------------------------------------
Tensor matmul(Tape* tp, Tensor a, Tensor b);  // [m,k]x[k,n] -> [m,n]

// -- batchnorm -----------------------------------------------------------------
// Normalizes each channel over its spatial extent (batch of one). Training
// mode uses batch statistics and refreshes the running buffers; eval mode
// uses the running buffers. A constant channel yields x_hat == 0 exactly, so
// the output is beta there by construction.
struct BatchNormBuffers {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  void init(int64_t channels) {
    running_mean.assign(size_t(channels), 0.0);
    running_var.assign(size_t(channels), 1.0);
  }
};
Tensor batchnorm(Tape* tp, Tensor x, Tensor gamma, Tensor beta,
                 BatchNormBuffers& buffers, bool training, double eps = 1e-5);

// -- convolutions (3x3(x3) kernels, stride 1, zero padding 1) ------------------
Tensor conv3d(Tape* tp, Tensor x, Tensor w, Tensor bias);
Tensor conv2d(Tape* tp, Tensor x, Tensor w, Tensor bias);

// -- resampling ----------------------------------------------------------------
Tensor upsample_nn3d(Tape* tp, Tensor x, int factor);       // factor in {2,4}, x [C,D,H,W]
Tensor avgpool3d(Tape* tp, Tensor x, int factor);           // x [C,D,H,W]
Tensor avgpool2d(Tape* tp, Tensor x, int factor);           // x [C,H,W]
// Nearest-neighbor volume upsample by any integer factor >= 1 (no channel dim).
Tensor nn_upsample_vol(Tape* tp, Tensor x, int factor);     // x [D,H,W]
// Trilinear interpolation of volume [D,H,W] at the fractional depth of output
// slice k out of n_out; returns [n_out, n_out] (cube volumes assumed H == W).
Tensor trilinear_slice(Tape* tp, Tensor vol, int k, int n_out);

// -- structure -----------------------------------------------------------------
// Copy with a new shape of equal element count (e.g. [D,H,W] <-> [1,D,H,W]).
Tensor reshape(Tape* tp, Tensor a, std::vector<int64_t> shape);
Tensor concat_ch(Tape* tp, Tensor a, Tensor b);      // along dim 0
Tensor stack_ch(Tape* tp, const std::vector<Tensor>& planes);      // n x [H,W] -> [n,H,W]

// -- fused losses ----------------------------------------------------------------
// Soft intersection-over-union loss: 1 - sum(a*y) / sum(a + y - a*y).
// Both-empty inputs give loss 0 by convention.
Tensor soft_iou_loss(Tape* tp, Tensor a, Tensor y);
// Numerically stable binary cross-entropy on logits, summed over elements.
Tensor bce_with_logits(Tape* tp, Tensor logits, Tensor targets);

}  // namespace ops
}  // namespace fedsim
