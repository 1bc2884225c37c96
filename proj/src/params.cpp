#include "fedsim/params.hpp"

#include <cmath>

namespace fedsim {

void adam_update(Tensor& param, const double* grad, AdamState& st, double lr, const AdamConfig& cfg) {
  if (!st.initialized()) st.init(param);
  st.t += 1;
  const double b1 = cfg.beta1, b2 = cfg.beta2;
  const double c1 = 1.0 - std::pow(b1, double(st.t));
  const double c2 = 1.0 - std::pow(b2, double(st.t));
  double* p = param.data();
  double* m = st.m.data();
  double* v = st.v.data();
  for (int64_t i = 0; i < param.size(); ++i) {
    m[i] = b1 * m[i] + (1.0 - b1) * grad[i];
    v[i] = b2 * v[i] + (1.0 - b2) * grad[i] * grad[i];
    const double mh = m[i] / c1;
    const double vh = v[i] / c2;
    p[i] -= lr * mh / (std::sqrt(vh) + cfg.eps);
  }
}

Tensor& ParamStore::add(const std::string& name, Tensor t) {
  require(!index_.count(name), ErrorCode::shape, "ParamStore: duplicate name " + name);
  index_[name] = items_.size();
  items_.emplace_back(name, std::move(t));
  return items_.back().second;
}

Tensor& ParamStore::get(const std::string& name) {
  auto it = index_.find(name);
  require(it != index_.end(), ErrorCode::shape, "ParamStore: missing " + name);
  return items_[it->second].second;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  require(it != index_.end(), ErrorCode::shape, "ParamStore: missing " + name);
  return items_[it->second].second;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

int64_t ParamStore::total_elements() const {
  int64_t n = 0;
  for (const auto& [_, t] : items_) n += t.size();
  return n;
}

void ParamStore::ensure_grads() {
  for (auto& [_, t] : items_) t.ensure_grad();
}

void ParamStore::zero_grads() {
  for (auto& [_, t] : items_) {
    t.ensure_grad();
    t.zero_grad();
  }
}

std::vector<double> ParamStore::flat_grads() const {
  std::vector<double> out;
  out.reserve(size_t(total_elements()));
  for (const auto& [_, t] : items_) {
    Tensor tt = t;  // shallow; grad() needs non-const
    const double* g = tt.grad();
    out.insert(out.end(), g, g + t.size());
  }
  return out;
}

std::vector<double> ParamStore::flat_values() const {
  std::vector<double> out;
  out.reserve(size_t(total_elements()));
  for (const auto& [_, t] : items_) out.insert(out.end(), t.data(), t.data() + t.size());
  return out;
}

void ParamStore::set_flat_values(const std::vector<double>& v) {
  require(int64_t(v.size()) == total_elements(), ErrorCode::shape, "ParamStore: flat size mismatch");
  size_t off = 0;
  for (auto& [_, t] : items_) {
    std::copy(v.begin() + long(off), v.begin() + long(off) + t.size(), t.data());
    off += size_t(t.size());
  }
}

void ParamStore::adam_step_all(double lr, const AdamConfig& cfg) {
  for (auto& [name, t] : items_) {
    t.ensure_grad();
    adam_update(t, t.grad(), adam_state(name), lr, cfg);
  }
}

void ParamStore::adam_step_all_from(const std::vector<double>& ext, double lr, const AdamConfig& cfg) {
  require(int64_t(ext.size()) == total_elements(), ErrorCode::shape, "ParamStore: grad size mismatch");
  size_t off = 0;
  for (auto& [name, t] : items_) {
    adam_update(t, ext.data() + off, adam_state(name), lr, cfg);
    off += size_t(t.size());
  }
}

AdamState& ParamStore::adam_state(const std::string& name) { return adam_[name]; }

}  // namespace fedsim
