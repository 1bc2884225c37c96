#include <cmath>

#include "fedsim/nets.hpp"

namespace fedsim::nets {

namespace {
constexpr double kQuarterPi = 0.78539816339744830961;  // pi/4
}

void glorot_fill(Tensor& t, int64_t fan_in, int64_t fan_out, Rng& rng) {
  const double lim = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (int64_t i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(-lim, lim);
}

// ------------------------------------------------------------------ shape net

ShapeNet make_shape_net(Rng& rng) {
  ShapeNet net;
  auto layer = [&](const std::string& idx, int64_t in, int64_t out) {
    Tensor w({in, out});
    glorot_fill(w, in, out, rng);
    net.params.add("g_s.w" + idx, w);
    net.params.add("g_s.b" + idx, Tensor({out}));
  };
  layer("1", kLatentDim, 256);
  layer("2", 256, 128);
  layer("3", 128, 21);
  return net;
}

Tensor shape_net_forward(Tape* tp, ShapeNet& net, Tensor z) {
  require(z.size() == kLatentDim, ErrorCode::shape, "shape net: latent must be 32-dimensional");
  Tensor h = ops::reshape(tp, z, {1, kLatentDim});
  h = ops::add(tp, ops::matmul(tp, h, net.params.get("g_s.w1")),
               ops::reshape(tp, net.params.get("g_s.b1"), {1, 256}));
  h = ops::leaky_relu(tp, h);
  h = ops::add(tp, ops::matmul(tp, h, net.params.get("g_s.w2")),
               ops::reshape(tp, net.params.get("g_s.b2"), {1, 128}));
  h = ops::leaky_relu(tp, h);
  h = ops::add(tp, ops::matmul(tp, h, net.params.get("g_s.w3")),
               ops::reshape(tp, net.params.get("g_s.b3"), {1, 21}));
  return ops::tanh_act(tp, ops::reshape(tp, h, {21}));
}

std::vector<double> shape_denorm_scales(const ssm::ShapeModel& m, double extent) {
  std::vector<double> s;
  s.reserve(static_cast<size_t>(m.modes()) + 7);
  for (double lam : m.eigvals) s.push_back(1.5 * std::sqrt(lam));
  for (int i = 0; i < 3; ++i) s.push_back(kQuarterPi / 2.0);  // pi/8 rad
  for (int i = 0; i < 3; ++i) s.push_back(extent / 8.0);
  s.push_back(0.1);
  return s;
}

Tensor shape_params_tensor(Tape* tp, ShapeNet& net, Tensor z, const std::vector<double>& scales) {
  require(scales.size() == 21, ErrorCode::shape, "shape net: need one scale per output coordinate");
  return ops::scale_vec(tp, shape_net_forward(tp, net, z), scales);
}

ssm::ShapeParams to_shape_params(const Tensor& flat, int k) {
  return ssm::ShapeParams::from_flat(std::vector<double>(flat.data(), flat.data() + flat.size()), k);
}

ssm::ShapeParams gen_shape_params(ShapeNet& net, const Tensor& z, const ssm::ShapeModel& m, double extent) {
  const Tensor t = shape_params_tensor(nullptr, net, z, shape_denorm_scales(m, extent));
  return to_shape_params(t, m.modes());
}

// --------------------------------------------------------------- material net

MaterialNet make_material_net(Rng& rng) {
  MaterialNet net;
  auto conv = [&](const std::string& idx, int64_t ci, int64_t co) {
    Tensor w({co, ci, 3, 3, 3});
    glorot_fill(w, ci * 27, co * 27, rng);
    net.params.add("g_m.conv" + idx + ".w", w);
    net.params.add("g_m.conv" + idx + ".b", Tensor({co}));
  };
  auto bn = [&](const std::string& idx, int64_t c) {
    net.params.add("g_m.bn" + idx + ".gamma", Tensor::full({c}, 1.0));
    net.params.add("g_m.bn" + idx + ".beta", Tensor({c}));
  };
  conv("1", kLatentDim, 256);
  bn("1", 256);
  conv("2", 256, 128);
  bn("2", 128);
  conv("3", 128, 1);
  net.bn1.init(256);
  net.bn2.init(128);
  return net;
}

Tensor material_net_forward(Tape* tp, MaterialNet& net, Tensor z) {
  require(z.size() == kLatentDim, ErrorCode::shape, "material net: latent must be 32-dimensional");
  Tensor h = ops::reshape(tp, z, {kLatentDim, 1, 1, 1});
  h = ops::upsample_nn3d(tp, h, 4);
  h = ops::conv3d(tp, h, net.params.get("g_m.conv1.w"), net.params.get("g_m.conv1.b"));
  h = ops::batchnorm(tp, h, net.params.get("g_m.bn1.gamma"), net.params.get("g_m.bn1.beta"),
                     net.bn1, /*training=*/true);
  h = ops::relu(tp, h);
  h = ops::upsample_nn3d(tp, h, 2);
  h = ops::conv3d(tp, h, net.params.get("g_m.conv2.w"), net.params.get("g_m.conv2.b"));
  h = ops::batchnorm(tp, h, net.params.get("g_m.bn2.gamma"), net.params.get("g_m.bn2.beta"),
                     net.bn2, /*training=*/true);
  h = ops::relu(tp, h);
  h = ops::upsample_nn3d(tp, h, 2);
  h = ops::conv3d(tp, h, net.params.get("g_m.conv3.w"), net.params.get("g_m.conv3.b"));
  h = ops::tanh_act(tp, h);
  // (-1,1) -> (0, mu_max)
  h = ops::add(tp, h, Tensor::full(h.shape(), 1.0));
  h = ops::scale(tp, h, kMuMax / 2.0);
  return ops::reshape(tp, h, {16, 16, 16});
}

Tensor gen_material(Tape* tp, MaterialNet& net, Tensor z) { return material_net_forward(tp, net, z); }

// ------------------------------------------------------------------- enhancer

Enhancer make_enhancer(Rng& rng) {
  Enhancer net;
  auto conv = [&](const std::string& idx, int64_t ci, int64_t co, bool zero) {
    Tensor w({co, ci, 3, 3});
    if (!zero) glorot_fill(w, ci * 9, co * 9, rng);
    net.params.add("enh.conv" + idx + ".w", w);
    net.params.add("enh.conv" + idx + ".b", Tensor({co}));
  };
  conv("1", 3, 32, false);
  conv("2", 32, 32, false);
  conv("3", 32, 32, false);
  conv("4", 32, 1, true);  // zero head: fresh enhancer = identity on the coarse channel
  return net;
}

Tensor enhance_slice(Tape* tp, Enhancer& net, Tensor coarse, Tensor label, int k, int h) {
  require(h > 0 && coarse.rank() == 2 && coarse.dim(0) == h && coarse.dim(1) == h,
          ErrorCode::shape, "enhancer: coarse slice must be h x h");
  require(label.shape() == coarse.shape(), ErrorCode::shape, "enhancer: label slice extents differ");
  require(k >= 0 && k < h, ErrorCode::config, "enhancer: slice index out of range");
  Tensor x = ops::stack_ch(tp, {coarse, label, Tensor::full({h, h}, static_cast<double>(k) / h)});
  x = ops::leaky_relu(tp, ops::conv2d(tp, x, net.params.get("enh.conv1.w"), net.params.get("enh.conv1.b")));
  x = ops::leaky_relu(tp, ops::conv2d(tp, x, net.params.get("enh.conv2.w"), net.params.get("enh.conv2.b")));
  x = ops::leaky_relu(tp, ops::conv2d(tp, x, net.params.get("enh.conv3.w"), net.params.get("enh.conv3.b")));
  x = ops::conv2d(tp, x, net.params.get("enh.conv4.w"), net.params.get("enh.conv4.b"));
  return ops::add(tp, ops::reshape(tp, x, {h, h}), coarse);
}

// ----------------------------------------------------------------- checkpoint

void put_params(Container& c, const ParamStore& p) {
  for (const auto& [name, t] : p.items()) c.put(name, t);
}

void get_params(const Container& c, ParamStore& p) {
  for (auto& [name, t] : p.items()) {
    const Tensor& src = c.get(name);
    require(src.shape() == t.shape(), ErrorCode::io, "checkpoint: shape mismatch for " + name);
    std::copy(src.data(), src.data() + src.size(), t.data());
  }
}

}  // namespace fedsim::nets
