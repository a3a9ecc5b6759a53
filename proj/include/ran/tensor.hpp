#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace ran::ad {

enum class TensorErrc { shape_error, kernel_size_error, index_error, non_finite };

class TensorError : public std::runtime_error {
 public:
  TensorError(TensorErrc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  TensorErrc code() const noexcept { return code_; }

 private:
  TensorErrc code_;
};

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major tensor.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0)) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_size(shape_) != data_.size())
      throw TensorError(TensorErrc::shape_error,
                        "shape " + shape_string(shape_) + " does not hold " + std::to_string(data_.size()) + " values");
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  T* data() noexcept { return data_.data(); }
  const T* data() const noexcept { return data_.data(); }
  std::span<T> values() noexcept { return data_; }
  std::span<const T> values() const noexcept { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  T operator[](std::size_t i) const { return data_[i]; }

  T& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  T operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  T& operator()(std::size_t c, std::size_t y, std::size_t x) { return data_[(c * shape_[1] + y) * shape_[2] + x]; }
  T operator()(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  /// Same values, new shape of equal size.
  Tensor reshaped(Shape shape) const {
    if (shape_size(shape) != data_.size())
      throw TensorError(TensorErrc::shape_error, "cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  Tensor& operator+=(const Tensor& other) {
    if (other.shape_ != shape_)
      throw TensorError(TensorErrc::shape_error, "+= of " + shape_string(other.shape_) + " into " + shape_string(shape_));
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
  }

  bool operator==(const Tensor&) const = default;

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape_, std::vector<U>(data_.begin(), data_.end()));
  }

 private:
  Shape shape_;
  std::vector<T> data_;
};

/// Ordered table of named parameter tensors.
template <typename T>
class ParamSet {
 public:
  std::size_t add(std::string name, Tensor<T> value) {
    if (index_.contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
    index_.emplace(name, names_.size());
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const std::vector<std::string>& names() const noexcept { return names_; }

  bool contains(const std::string& name) const { return index_.contains(name); }
  std::size_t index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter '" + name + "'");
    return it->second;
  }

  Tensor<T>& operator[](std::size_t i) { return values_.at(i); }
  const Tensor<T>& operator[](std::size_t i) const { return values_.at(i); }
  Tensor<T>& operator[](const std::string& name) { return values_[index_of(name)]; }
  const Tensor<T>& operator[](const std::string& name) const { return values_[index_of(name)]; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

  bool operator==(const ParamSet& other) const { return names_ == other.names_ && values_ == other.values_; }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// One gradient tensor per parameter, aligned with the ParamSet.
template <typename T>
using Gradients = std::vector<Tensor<T>>;

template <typename T>
Gradients<T> zero_gradients(const ParamSet<T>& params) {
  Gradients<T> g;
  g.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) g.emplace_back(params[i].shape());
  return g;
}

template <typename T>
void accumulate(Gradients<T>& into, const Gradients<T>& g) {
  for (std::size_t i = 0; i < into.size(); ++i) into[i] += g[i];
}

}  // namespace ran::ad
