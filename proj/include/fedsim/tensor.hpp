#pragma once

// Dense row-major f64 tensor with an optional gradient buffer of the same
// shape. Copies share storage (shallow); ops treat written tensors as
// immutable, so sharing is safe. Gradients are allocated lazily and
// accumulated into during reverse passes.

#include <cmath>
#include <memory>
#include <numeric>
#include <vector>

#include "fedsim/common.hpp"

namespace fedsim {

class Tensor {
 public:
  Tensor() : st_(std::make_shared<Storage>()) {}

  explicit Tensor(std::vector<int64_t> shape) : st_(std::make_shared<Storage>()) {
    st_->shape = std::move(shape);
    st_->data.assign(size_t(count(st_->shape)), 0.0);
  }

  static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

  static Tensor full(std::vector<int64_t> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.st_->data) x = v;
    return t;
  }

  static Tensor from(std::vector<int64_t> shape, std::vector<double> vals) {
    Tensor t;
    require(int64_t(vals.size()) == count(shape), ErrorCode::shape, "tensor init size mismatch");
    t.st_->shape = std::move(shape);
    t.st_->data = std::move(vals);
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  const std::vector<int64_t>& shape() const { return st_->shape; }
  int64_t size() const { return int64_t(st_->data.size()); }
  int64_t dim(size_t i) const { return st_->shape.at(i); }
  size_t rank() const { return st_->shape.size(); }

  double* data() { return st_->data.data(); }
  const double* data() const { return st_->data.data(); }
  double item() const {
    require(size() == 1, ErrorCode::shape, "item() on non-scalar");
    return st_->data[0];
  }

  bool has_grad() const { return !st_->grad.empty(); }
  void ensure_grad() {
    if (st_->grad.empty()) st_->grad.assign(st_->data.size(), 0.0);
  }
  void zero_grad() {
    for (auto& g : st_->grad) g = 0.0;
  }
  void drop_grad() { st_->grad.clear(); }
  double* grad() {
    ensure_grad();
    return st_->grad.data();
  }
  const double* grad() const { return st_->grad.data(); }

  // Deep copy of values only (fresh storage, no grad).
  Tensor clone() const {
    Tensor t;
    t.st_->shape = st_->shape;
    t.st_->data = st_->data;
    return t;
  }

  bool same_storage(const Tensor& o) const { return st_ == o.st_; }

  bool shape_equals(const std::vector<int64_t>& s) const { return st_->shape == s; }

  static int64_t count(const std::vector<int64_t>& shape) {
    int64_t n = 1;
    for (auto e : shape) {
      require(e > 0, ErrorCode::shape, "tensor extents must be positive");
      n *= e;
    }
    return n;
  }

 private:
  struct Storage {
    std::vector<int64_t> shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until touched
  };
  std::shared_ptr<Storage> st_;
};

inline std::string shape_str(const std::vector<int64_t>& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
  return r + "]";
}

}  // namespace fedsim
