#pragma once

#include <cstdint>
#include <initializer_list>
#include <optional>
#include <vector>

#include "consisaug/errors.hpp"

namespace consisaug {

class Tape;

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) {
    if (d < 0) raise(ErrorCode::ShapeMismatch, "negative dimension in shape");
    n *= d;
  }
  return n;
}

/// Dense row-major array of f64. A Tensor may reference a node on a Tape,
/// in which case operations consuming it record backward rules; a Tensor
/// with node < 0 is plain data and never accumulates gradient.
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;  // filled for watched leaves after backward
  int node = -1;
  Tape* tape = nullptr;

  Tensor() = default;

  Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      raise(ErrorCode::ShapeMismatch, "shape does not match data length");
  }

  static Tensor zeros(Shape s) {
    auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), 0.0));
  }

  static Tensor full(Shape s, double v) {
    auto n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(static_cast<std::size_t>(n), v));
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }

  static Tensor from(Shape s, std::initializer_list<double> vals) {
    return Tensor(std::move(s), std::vector<double>(vals));
  }

  std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  bool on_tape() const { return node >= 0 && tape != nullptr; }
  bool is_scalar() const { return data.size() == 1; }

  double value() const {
    if (!is_scalar()) raise(ErrorCode::NotScalar, "value() on non-scalar tensor");
    return data[0];
  }
};

/// Off-tape view: same values, no gradient flow. Idempotent.
inline Tensor detach(const Tensor& t) {
  Tensor r;
  r.shape = t.shape;
  r.data = t.data;
  return r;
}

}  // namespace consisaug
