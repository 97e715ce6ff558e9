#include "relpatch/tensor.hpp"

#include <cmath>
#include <cstring>

namespace relpatch {

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  s += "]";
  return s;
}

void Tensor::allocate(Shape shape, DType dtype) {
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError(cat("negative dimension in shape ", shape_str(shape)));
  }
  shape_ = std::move(shape);
  numel_ = shape_numel(shape_);
  dtype_ = dtype;
  storage_ = std::make_shared<Storage>();
  if (dtype == DType::f32)
    storage_->f32.assign(static_cast<size_t>(numel_), 0.0f);
  else
    storage_->f64.assign(static_cast<size_t>(numel_), 0.0);
}

Tensor Tensor::zeros(Shape shape, DType dtype) {
  Tensor t;
  t.allocate(std::move(shape), dtype);
  return t;
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t;
  t.allocate(std::move(shape), dtype);
  if (dtype == DType::f32)
    for (auto& v : t.storage_->f32) v = static_cast<float>(value);
  else
    for (auto& v : t.storage_->f64) v = value;
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

Tensor Tensor::from(Shape shape, const std::vector<double>& values, DType dtype) {
  Tensor t;
  t.allocate(std::move(shape), dtype);
  if (static_cast<int64_t>(values.size()) != t.numel_)
    throw ShapeError(cat("from(): ", values.size(), " values for shape ", shape_str(t.shape_)));
  for (int64_t i = 0; i < t.numel_; ++i) t.set(i, values[static_cast<size_t>(i)]);
  return t;
}

double Tensor::item() const {
  if (numel_ != 1) throw ShapeError(cat("item() on tensor of shape ", shape_str(shape_)));
  return at(0);
}

double Tensor::at(int64_t i) const {
  return dtype_ == DType::f32 ? static_cast<double>(storage_->f32[static_cast<size_t>(i)])
                              : storage_->f64[static_cast<size_t>(i)];
}

void Tensor::set(int64_t i, double v) {
  if (dtype_ == DType::f32)
    storage_->f32[static_cast<size_t>(i)] = static_cast<float>(v);
  else
    storage_->f64[static_cast<size_t>(i)] = v;
}

Tensor Tensor::astype(DType dtype) const {
  if (dtype == dtype_) return *this;
  Tensor t = Tensor::zeros(shape_, dtype);
  for (int64_t i = 0; i < numel_; ++i) t.set(i, at(i));
  return t;
}

Tensor Tensor::clone() const {
  Tensor t = Tensor::zeros(shape_, dtype_);
  if (dtype_ == DType::f32)
    t.storage_->f32 = storage_->f32;
  else
    t.storage_->f64 = storage_->f64;
  return t;
}

bool Tensor::equals(const Tensor& other) const {
  if (!defined() || !other.defined()) return defined() == other.defined();
  if (dtype_ != other.dtype_ || shape_ != other.shape_) return false;
  if (dtype_ == DType::f32)
    return std::memcmp(storage_->f32.data(), other.storage_->f32.data(),
                       storage_->f32.size() * sizeof(float)) == 0;
  return std::memcmp(storage_->f64.data(), other.storage_->f64.data(),
                     storage_->f64.size() * sizeof(double)) == 0;
}

bool Tensor::all_finite() const {
  for (int64_t i = 0; i < numel_; ++i)
    if (!std::isfinite(at(i))) return false;
  return true;
}

namespace {
#ifdef NDEBUG
bool g_debug_checks = false;
#else
bool g_debug_checks = true;
#endif
}  // namespace

bool debug_checks_enabled() { return g_debug_checks; }
void set_debug_checks(bool enabled) { g_debug_checks = enabled; }

}  // namespace relpatch
