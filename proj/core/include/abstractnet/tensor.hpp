#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "abstractnet/rng.hpp"

namespace abstractnet {

/// Extents of a rank-4 tensor in (batch, channel, row, column) order.
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t size() const noexcept {
    return static_cast<std::size_t>(n) * static_cast<std::size_t>(c) * static_cast<std::size_t>(h) *
           static_cast<std::size_t>(w);
  }
  std::size_t plane() const noexcept { return static_cast<std::size_t>(h) * static_cast<std::size_t>(w); }
  std::size_t item() const noexcept { return static_cast<std::size_t>(c) * plane(); }
  bool valid() const noexcept { return n >= 1 && c >= 1 && h >= 1 && w >= 1; }

  friend bool operator==(const Shape&, const Shape&) = default;
};

std::string to_string(const Shape& s);

/// Dense float64 tensor stored row-major in (n, c, h, w) order.
///
/// A default-constructed tensor is empty (size 0) and only serves as a
/// placeholder; every tensor produced by an operation has a valid shape.
class Tensor {
 public:
  Tensor() = default;
  /// Throws ShapeError if any dimension is below 1.
  explicit Tensor(Shape shape, double fill = 0.0);
  /// Takes ownership of `data`; its length must equal shape.size().
  Tensor(Shape shape, std::vector<double> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* raw() noexcept { return data_.data(); }
  const double* raw() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  std::size_t offset(int n, int c, int h, int w) const noexcept {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }
  double& at(int n, int c, int h, int w) noexcept { return data_[offset(n, c, h, w)]; }
  double at(int n, int c, int h, int w) const noexcept { return data_[offset(n, c, h, w)]; }

  /// Same data viewed with a different shape of equal size.
  Tensor reshaped(Shape shape) const;

  void fill(double value) noexcept;
  /// this += other, elementwise. Shapes must match.
  void add_inplace(const Tensor& other);
  double sum() const noexcept;

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<double> data_;
};

enum class BinaryOp { add, sub, mul };

Tensor tensor_new(Shape shape, double fill);
Tensor map_binary(const Tensor& a, const Tensor& b, BinaryOp op);
/// i.i.d. uniform on [lo, hi); throws RangeError unless lo < hi.
Tensor rng_uniform(SeededRng& rng, Shape shape, double lo, double hi);

void require_same_shape(const Shape& a, const Shape& b, std::string_view what);
/// Throws NumericError naming `where` if any element is NaN or infinite.
void require_finite(const Tensor& t, std::string_view where);
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Keeps freed tensor buffers in the process heap instead of handing them back
/// to the kernel (glibc only; a no-op elsewhere). A training step allocates and
/// releases tens of megabytes, and refaulting those pages otherwise costs about
/// a third of the runtime. Idempotent; train() calls it.
void retain_freed_memory();

/// `.t4` dump: four little-endian u32 dims (n, c, h, w) then the float64
/// payload, little-endian, row-major.
void write_t4(const Tensor& t, const std::filesystem::path& path);
Tensor read_t4(const std::filesystem::path& path);

}  // namespace abstractnet
