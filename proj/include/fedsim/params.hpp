#pragma once

// Named parameter collections and the Adam update. Each parameter tensor
// carries its own Adam state (first/second moments plus step count), which
// keeps updates identical no matter where a tensor lives (server, client,
// or a centralized reference loop).

#include <map>
#include <string>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Tensor m, v;
  int64_t t = 0;
  void init(const Tensor& like) {
    m = Tensor(like.shape());
    v = Tensor(like.shape());
    t = 0;
  }
  bool initialized() const { return m.size() > 0; }
};

// One bias-corrected Adam step; `t` is the 1-based step count after this call.
void adam_update(Tensor& param, const double* grad, AdamState& st, double lr,
                 const AdamConfig& cfg = AdamConfig());

// Ordered name -> tensor map. Order is the serialization and flattening order.
class ParamStore {
 public:
  Tensor& add(const std::string& name, Tensor t);
  Tensor& get(const std::string& name);
  const Tensor& get(const std::string& name) const;
  bool has(const std::string& name) const;

  std::vector<std::pair<std::string, Tensor>>& items() { return items_; }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  size_t size() const { return items_.size(); }
  int64_t total_elements() const;

  void ensure_grads();
  void zero_grads();

  // Gradients of all tensors, flattened in store order.
  std::vector<double> flat_grads() const;
  // Values of all tensors, flattened in store order.
  std::vector<double> flat_values() const;
  void set_flat_values(const std::vector<double>& v);

  // Adam over every tensor in the store, gradients taken from each tensor's
  // own grad buffer (or from `ext_grads`, flattened in store order).
  void adam_step_all(double lr, const AdamConfig& cfg = AdamConfig());
  void adam_step_all_from(const std::vector<double>& ext_grads, double lr,
                          const AdamConfig& cfg = AdamConfig());

  AdamState& adam_state(const std::string& name);

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
  std::map<std::string, size_t> index_;
  std::map<std::string, AdamState> adam_;
};

}  // namespace fedsim
