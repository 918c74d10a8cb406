#pragma once

// Dense row-major tensor plus the matmul kernel the conv/dense layers are
// lowered to. The GEMM parallelizes across column blocks; each output element
// accumulates over k in ascending order no matter the thread count.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <vector>

#include "colearn/common.hpp"

namespace colearn {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

template <class T>
struct Tensor {
  Shape shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(size_t(shape_numel(shape)), T(0)) {}
  Tensor(Shape s, T fill) : shape(std::move(s)), data(size_t(shape_numel(shape)), fill) {}

  static Tensor zeros(Shape s) { return Tensor(std::move(s)); }
  static Tensor full(Shape s, T v) { return Tensor(std::move(s), v); }

  int64_t numel() const { return int64_t(data.size()); }
  int ndim() const { return int(shape.size()); }
  int64_t dim(int i) const { return shape[size_t(i)]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  // 5-d convenience indexing for [N,C,D,H,W] tensors.
  T& at5(int64_t n, int64_t c, int64_t z, int64_t y, int64_t x) {
    const Shape& s = shape;
    return data[size_t((((n * s[1] + c) * s[2] + z) * s[3] + y) * s[4] + x)];
  }
  T at5(int64_t n, int64_t c, int64_t z, int64_t y, int64_t x) const {
    const Shape& s = shape;
    return data[size_t((((n * s[1] + c) * s[2] + z) * s[3] + y) * s[4] + x)];
  }
  T& at2(int64_t r, int64_t c) { return data[size_t(r * shape[1] + c)]; }
  T at2(int64_t r, int64_t c) const { return data[size_t(r * shape[1] + c)]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out(shape);
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = U(data[i]);
    return out;
  }
};

// C[M x N] = (accumulate ? C : 0) + A[M x K] * B[K x N], all row-major.
template <class T>
void gemm_nn(int64_t M, int64_t K, int64_t N, const T* A, const T* B, T* C,
             bool accumulate = false) {
  constexpr int64_t JB = 256;
  const int64_t nblocks = (N + JB - 1) / JB;
  parallel_for(nblocks, [&](int64_t bj) {
    const int64_t j0 = bj * JB;
    const int64_t j1 = std::min(N, j0 + JB);
    for (int64_t i = 0; i < M; ++i) {
      T* crow = C + i * N;
      if (!accumulate) {
        for (int64_t j = j0; j < j1; ++j) crow[j] = T(0);
      }
      const T* arow = A + i * K;
      for (int64_t k = 0; k < K; ++k) {
        const T a = arow[k];
        const T* brow = B + k * N;
        for (int64_t j = j0; j < j1; ++j) crow[j] += a * brow[j];
      }
    }
  });
}

// dst[C x R] = src[R x C]^T
template <class T>
void transpose2d(int64_t R, int64_t C, const T* src, T* dst) {
  parallel_for(C, [&](int64_t c) {
    for (int64_t r = 0; r < R; ++r) dst[c * R + r] = src[r * C + c];
  });
}

}  // namespace colearn
