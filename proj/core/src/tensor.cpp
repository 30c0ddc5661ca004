#include "abstractnet/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <mutex>
#include <sstream>

#include "abstractnet/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

namespace abstractnet {

std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '(' << s.n << ',' << s.c << ',' << s.h << ',' << s.w << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape) {
  if (!shape.valid()) {
    throw ShapeError("tensor: invalid shape " + to_string(shape));
  }
  data_.assign(shape.size(), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
  if (!shape.valid()) {
    throw ShapeError("tensor: invalid shape " + to_string(shape));
  }
  if (data_.size() != shape.size()) {
    throw ShapeError("tensor: data length " + std::to_string(data_.size()) + " does not match shape " +
                     to_string(shape));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (!shape.valid() || shape.size() != size()) {
    throw ShapeError("reshape: " + to_string(shape_) + " -> " + to_string(shape));
  }
  return Tensor(shape, data_);
}

void Tensor::fill(double value) noexcept { std::fill(data_.begin(), data_.end(), value); }

void Tensor::add_inplace(const Tensor& other) {
  require_same_shape(shape_, other.shape_, "add_inplace");
  for (std::size_t i = 0; i < data_.size(); ++i) {
    data_[i] += other.data_[i];
  }
}

double Tensor::sum() const noexcept {
  double s = 0.0;
  for (double v : data_) {
    s += v;
  }
  return s;
}

Tensor tensor_new(Shape shape, double fill) { return Tensor(shape, fill); }

Tensor map_binary(const Tensor& a, const Tensor& b, BinaryOp op) {
  require_same_shape(a.shape(), b.shape(), "map_binary");
  Tensor out(a.shape());
  const auto x = a.data();
  const auto y = b.data();
  auto z = out.data();
  switch (op) {
    case BinaryOp::add:
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] + y[i];
      break;
    case BinaryOp::sub:
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] - y[i];
      break;
    case BinaryOp::mul:
      for (std::size_t i = 0; i < z.size(); ++i) z[i] = x[i] * y[i];
      break;
  }
  require_finite(out, "map_binary");
  return out;
}

Tensor rng_uniform(SeededRng& rng, Shape shape, double lo, double hi) {
  if (!(lo < hi)) {
    throw RangeError("rng_uniform: require lo < hi");
  }
  Tensor out(shape);
  for (double& v : out.data()) {
    v = rng.uniform(lo, hi);
  }
  return out;
}

void require_same_shape(const Shape& a, const Shape& b, std::string_view what) {
  if (!(a == b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
  }
}

void require_finite(const Tensor& t, std::string_view where) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (!std::isfinite(t[i])) {
      throw NumericError(std::string(where) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    m = std::max(m, std::abs(a[i] - b[i]));
  }
  return m;
}

namespace {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put_le(std::ostream& os, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes, bytes + sizeof(T));
  }
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  unsigned char bytes[sizeof(T)];
  is.read(reinterpret_cast<char*>(bytes), sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes, bytes + sizeof(T));
  }
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void write_t4(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw IoError("cannot open for writing: " + path.string());
  }
  const Shape& s = t.shape();
  for (int d : {s.n, s.c, s.h, s.w}) {
    put_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
  }
  for (double v : t.data()) {
    put_le<double>(os, v);
  }
  if (!os) {
    throw IoError("write failed: " + path.string());
  }
}

Tensor read_t4(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("cannot open: " + path.string());
  }
  Shape s;
  s.n = static_cast<int>(get_le<std::uint32_t>(is));
  s.c = static_cast<int>(get_le<std::uint32_t>(is));
  s.h = static_cast<int>(get_le<std::uint32_t>(is));
  s.w = static_cast<int>(get_le<std::uint32_t>(is));
  if (!is || !s.valid()) {
    throw IoError("bad .t4 header: " + path.string());
  }
  std::vector<double> data(s.size());
  for (double& v : data) {
    v = get_le<double>(is);
  }
  if (!is) {
    throw IoError("truncated .t4 payload: " + path.string());
  }
  return Tensor(s, std::move(data));
}

void retain_freed_memory() {
#if defined(__GLIBC__)
  static std::once_flag once;
  std::call_once(once, [] {
    // 32 MiB is the largest mmap threshold glibc accepts on 64-bit targets.
    mallopt(M_MMAP_THRESHOLD, 32 << 20);
    mallopt(M_TRIM_THRESHOLD, 256 << 20);
  });
#endif
}

}  // namespace abstractnet
