#include "fedsim/container.hpp"

#include <cstdio>

namespace fedsim {

void Container::put(const std::string& name, const Tensor& t) {
  require(!name.empty() && name.size() <= 0xffff, ErrorCode::io, "container: bad array name");
  for (auto& [n, _] : arrays_)
    require(n != name, ErrorCode::io, "container: duplicate array " + name);
  arrays_.emplace_back(name, t);
}

void Container::put_vector(const std::string& name, const std::vector<double>& v) {
  put(name, Tensor::from({int64_t(v.size())}, v));
}

void Container::put_scalar(const std::string& name, double v) { put(name, Tensor::scalar(v)); }

bool Container::has(const std::string& name) const {
  for (auto& [n, _] : arrays_)
    if (n == name) return true;
  return false;
}

const Tensor& Container::get(const std::string& name) const {
  for (auto& [n, t] : arrays_)
    if (n == name) return t;
  fail(ErrorCode::io, "container: missing array " + name);
}

std::vector<double> Container::get_vector(const std::string& name) const {
  const Tensor& t = get(name);
  return std::vector<double>(t.data(), t.data() + t.size());
}

double Container::get_scalar(const std::string& name) const {
  const Tensor& t = get(name);
  require(t.size() == 1, ErrorCode::io, "container: " + name + " is not a scalar");
  return t.data()[0];
}

std::vector<uint8_t> Container::serialize() const {
  std::vector<uint8_t> out;
  put_bytes(out, "FSCT", 4);
  put_le<uint32_t>(out, kVersion);
  put_le<uint32_t>(out, uint32_t(arrays_.size()));
  for (const auto& [name, t] : arrays_) {
    put_le<uint16_t>(out, uint16_t(name.size()));
    put_bytes(out, name.data(), name.size());
    out.push_back(uint8_t(t.rank()));
    for (auto e : t.shape()) put_le<uint64_t>(out, uint64_t(e));
    const double* p = t.data();
    for (int64_t i = 0; i < t.size(); ++i) put_f64_le(out, p[i]);
  }
  return out;
}

Container Container::deserialize(const uint8_t* data, size_t size) {
  ByteReader r(data, size);
  require(r.get_string(4) == "FSCT", ErrorCode::io, "container: bad magic");
  uint32_t version = r.get_le<uint32_t>();
  require(version == kVersion, ErrorCode::io, "container: unsupported version " + std::to_string(version));
  uint32_t count = r.get_le<uint32_t>();
  Container c;
  for (uint32_t i = 0; i < count; ++i) {
    uint16_t nlen = r.get_le<uint16_t>();
    std::string name = r.get_string(nlen);
    uint8_t rank = r.get_le<uint8_t>();
    require(rank >= 1 && rank <= 8, ErrorCode::io, "container: bad rank");
    std::vector<int64_t> shape(rank);
    int64_t n = 1;
    for (auto& e : shape) {
      e = int64_t(r.get_le<uint64_t>());
      require(e > 0 && e < (int64_t(1) << 40), ErrorCode::io, "container: bad extent");
      n *= e;
    }
    std::vector<double> vals(static_cast<size_t>(n));
    for (auto& v : vals) v = r.get_f64_le();
    c.put(name, Tensor::from(shape, std::move(vals)));
  }
  require(r.remaining() == 0, ErrorCode::io, "container: trailing bytes");
  return c;
}

void Container::save(const std::string& path) const {
  std::vector<uint8_t> bytes = serialize();
  std::FILE* f = std::fopen(path.c_str(), "wb");
  require(f != nullptr, ErrorCode::io, "cannot open for write: " + path);
  size_t n = std::fwrite(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  require(n == bytes.size(), ErrorCode::io, "short write: " + path);
}

Container Container::load(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  require(f != nullptr, ErrorCode::io, "cannot open: " + path);
  std::fseek(f, 0, SEEK_END);
  long sz = std::ftell(f);
  std::fseek(f, 0, SEEK_SET);
  std::vector<uint8_t> bytes(static_cast<size_t>(sz));
  size_t n = std::fread(bytes.data(), 1, bytes.size(), f);
  std::fclose(f);
  require(n == bytes.size(), ErrorCode::io, "short read: " + path);
  return deserialize(bytes);
}

}  // namespace fedsim
