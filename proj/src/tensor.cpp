// SPDX-License-Identifier: Apache-2.0
#include "kdforge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace kdforge {

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::dimension: return "dimension";
    case ErrorKind::numeric: return "numeric";
    case ErrorKind::config: return "config";
    case ErrorKind::label: return "label";
    case ErrorKind::state: return "state";
    case ErrorKind::input: return "input";
    case ErrorKind::vocab: return "vocab";
    case ErrorKind::distribution: return "distribution";
    case ErrorKind::empty_batch: return "empty-batch";
    case ErrorKind::compatibility: return "compatibility";
    case ErrorKind::divergence: return "divergence";
    case ErrorKind::balance: return "balance";
    case ErrorKind::split: return "split";
    case ErrorKind::degenerate: return "degenerate-input";
    case ErrorKind::io: return "io";
    case ErrorKind::checkpoint_magic: return "checkpoint-magic";
    case ErrorKind::checkpoint_truncated: return "checkpoint-truncated";
    case ErrorKind::checkpoint_version: return "checkpoint-version";
  }
  return "unknown";
}

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
      return 1;
    case ErrorKind::numeric:
    case ErrorKind::divergence:
      return 3;
    default:
      return 2;
  }
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty() || shape.size() > 3)
    throw Error(ErrorKind::dimension, "tensor rank must be 1..3, got shape " + shape_str(shape));
  for (auto e : shape)
    if (e == 0) throw Error(ErrorKind::dimension, "zero extent in shape " + shape_str(shape));
}

}  // namespace

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, T fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(shape_numel(shape_), fill);
}

template <typename T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (shape_numel(shape_) != data_.size())
    throw Error(ErrorKind::dimension, "shape " + shape_str(shape_) + " does not match " +
                                          std::to_string(data_.size()) + " values");
}

template <typename T>
BasicTensor<T> BasicTensor<T>::reshaped(Shape shape) const {
  return BasicTensor(std::move(shape), data_);
}

template <typename T>
void BasicTensor<T>::fill(T value) {
  std::fill(data_.begin(), data_.end(), value);
}

template <typename T>
bool BasicTensor<T>::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

template <typename T>
void require_finite(const BasicTensor<T>& t, std::string_view op) {
  if (!t.all_finite())
    throw Error(ErrorKind::numeric, "non-finite value in " + std::string(op) + " " +
                                        shape_str(t.shape()));
}

void require_same_shape(const Shape& a, const Shape& b, std::string_view op) {
  if (a != b)
    throw Error(ErrorKind::dimension,
                std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) + " differ");
}

template class BasicTensor<float>;
template class BasicTensor<double>;
template void require_finite(const BasicTensor<float>&, std::string_view);
template void require_finite(const BasicTensor<double>&, std::string_view);

}  // namespace kdforge
