#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace useg {

// Dense rank-4 array layout (N, C, H, W), row-major, W fastest.
struct Shape4 {
  int n = 1, c = 1, h = 1, w = 1;

  std::int64_t numel() const {
    return std::int64_t(n) * c * h * w;
  }
  bool operator==(const Shape4&) const = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

inline void check_shape(const Shape4& s, const char* who) {
  if (s.n < 1 || s.c < 1 || s.h < 1 || s.w < 1)
    throw std::invalid_argument(std::string(who) + ": all shape components must be >= 1, got " + s.str());
}

template <class S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape4 shape, S fill = S(0)) : shape_(shape) {
    check_shape(shape, "Tensor");
    data_.assign(static_cast<std::size_t>(shape.numel()), fill);
  }
  Tensor(Shape4 shape, std::vector<S> data) : shape_(shape), data_(std::move(data)) {
    check_shape(shape, "Tensor");
    if (static_cast<std::int64_t>(data_.size()) != shape_.numel())
      throw std::invalid_argument("Tensor: data length " + std::to_string(data_.size()) +
                                  " does not match shape " + shape_.str());
  }

  const Shape4& shape() const { return shape_; }
  std::int64_t numel() const { return shape_.numel(); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& vec() { return data_; }
  const std::vector<S>& vec() const { return data_; }

  S& at(int n, int c, int h, int w) { return data_[idx(n, c, h, w)]; }
  S at(int n, int c, int h, int w) const { return data_[idx(n, c, h, w)]; }
  S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  S operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  std::int64_t idx(int n, int c, int h, int w) const {
    return ((std::int64_t(n) * shape_.c + c) * shape_.h + h) * shape_.w + w;
  }

  void fill(S v) { data_.assign(data_.size(), v); }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i) out.data()[i] = static_cast<T>(data_[i]);
    return out;
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape4 shape_{1, 1, 1, 1};
  std::vector<S> data_ = std::vector<S>(1, S(0));
};

using Tensor4 = Tensor<float>;

// Sum with a fixed chunked evaluation order so the result is identical for
// any OpenMP thread count. Accumulates in double.
template <class S>
double chunked_sum(const S* p, std::int64_t n) {
  constexpr std::int64_t kChunk = 4096;
  const std::int64_t nchunks = (n + kChunk - 1) / kChunk;
  std::vector<double> partial(static_cast<std::size_t>(nchunks), 0.0);
#pragma omp parallel for schedule(static)
  for (std::int64_t ci = 0; ci < nchunks; ++ci) {
    const std::int64_t lo = ci * kChunk;
    const std::int64_t hi = lo + kChunk < n ? lo + kChunk : n;
    double acc = 0.0;
    for (std::int64_t i = lo; i < hi; ++i) acc += static_cast<double>(p[i]);
    partial[static_cast<std::size_t>(ci)] = acc;
  }
  double total = 0.0;
  for (double v : partial) total += v;
  return total;
}

}  // namespace useg
