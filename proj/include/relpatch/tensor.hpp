#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "relpatch/error.hpp"

namespace relpatch {

enum class DType : uint8_t { f32, f64 };

inline const char* dtype_name(DType d) { return d == DType::f32 ? "float32" : "float64"; }
inline size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape);

// Dense n-dimensional array. The single value carrier for activations,
// parameters, gradients, and relevance. Storage is shared and treated as
// immutable once a tensor has been published to a tape or cache; kernels
// fill freshly-allocated tensors before handing them out.
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype = DType::f64);
  static Tensor full(Shape shape, double value, DType dtype = DType::f64);
  static Tensor scalar(double value, DType dtype = DType::f64);
  static Tensor from(Shape shape, const std::vector<double>& values, DType dtype = DType::f64);

  bool defined() const { return storage_ != nullptr; }
  const Shape& shape() const { return shape_; }
  size_t rank() const { return shape_.size(); }
  int64_t dim(size_t axis) const { return shape_.at(axis); }
  int64_t numel() const { return numel_; }
  DType dtype() const { return dtype_; }
  bool requires_record() const { return requires_record_; }
  void set_requires_record(bool v) { requires_record_ = v; }

  template <class T>
  std::span<const T> data() const;
  template <class T>
  std::span<T> mutable_data();

  // Scalar element access (converts through double regardless of dtype).
  double item() const;
  double at(int64_t flat_index) const;
  void set(int64_t flat_index, double v);

  Tensor astype(DType dtype) const;
  Tensor clone() const;

  // Exact element-wise equality (same shape, same dtype, identical bits).
  bool equals(const Tensor& other) const;

  bool all_finite() const;

private:
  struct Storage {
    std::vector<float> f32;
    std::vector<double> f64;
  };

  void allocate(Shape shape, DType dtype);

  Shape shape_;
  int64_t numel_ = 0;
  DType dtype_ = DType::f64;
  bool requires_record_ = false;
  std::shared_ptr<Storage> storage_;
};

template <>
inline std::span<const float> Tensor::data<float>() const {
  return {storage_->f32.data(), storage_->f32.size()};
}
template <>
inline std::span<const double> Tensor::data<double>() const {
  return {storage_->f64.data(), storage_->f64.size()};
}
template <>
inline std::span<float> Tensor::mutable_data<float>() {
  return {storage_->f32.data(), storage_->f32.size()};
}
template <>
inline std::span<double> Tensor::mutable_data<double>() {
  return {storage_->f64.data(), storage_->f64.size()};
}

// Debug-time finite checks on op outputs. Defaults to on in debug builds.
bool debug_checks_enabled();
void set_debug_checks(bool enabled);

}  // namespace relpatch
