#pragma once

// FSCT binary container: named f64 arrays in one file. Layout (little-endian):
//   "FSCT"  u32 version  u32 array_count
//   per array: u16 name_len, name bytes, u8 rank, u64 extents[rank], f64 data[]
// Round-trips are bit-exact (doubles are moved as raw IEEE-754 bits).

#include <string>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

class Container {
 public:
  static constexpr uint32_t kVersion = 1;

  void put(const std::string& name, const Tensor& t);
  void put_vector(const std::string& name, const std::vector<double>& v);
  void put_scalar(const std::string& name, double v);

  bool has(const std::string& name) const;
  const Tensor& get(const std::string& name) const;
  std::vector<double> get_vector(const std::string& name) const;
  double get_scalar(const std::string& name) const;

  const std::vector<std::pair<std::string, Tensor>>& arrays() const { return arrays_; }
  size_t size() const { return arrays_.size(); }

  std::vector<uint8_t> serialize() const;
  static Container deserialize(const uint8_t* data, size_t size);
  static Container deserialize(const std::vector<uint8_t>& bytes) {
    return deserialize(bytes.data(), bytes.size());
  }

  void save(const std::string& path) const;
  static Container load(const std::string& path);

 private:
  std::vector<std::pair<std::string, Tensor>> arrays_;
};

}  // namespace fedsim
