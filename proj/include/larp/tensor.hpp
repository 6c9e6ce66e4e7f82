#pragma once

// Dense row-major 2-D tensor of doubles. Rows are the batch dimension
// everywhere in this codebase; a scalar is a 1x1 tensor. Eigen maps provide
// the GEMM kernels, everything else is plain loops.

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <vector>

namespace larp {

using EigenRowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// 64-byte-aligned storage for all tensor buffers. Eigen's vectorized kernels
// peel loops based on the runtime alignment of the pointers involved, and the
// peeled and packed portions accumulate in different groupings — so the same
// product into a 16-byte-aligned versus a 32-byte-aligned destination can
// differ in the last ulp. Pinning every buffer to one alignment class keeps
// results a pure function of shapes and values, which the bit-exactness
// guarantees in this library rely on.
template <class T>
struct AlignedAlloc {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAlloc() = default;
  template <class U>
  AlignedAlloc(const AlignedAlloc<U>&) {}

  T* allocate(size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, alignment); }
  template <class U>
  bool operator==(const AlignedAlloc<U>&) const {
    return true;
  }
};

using AlignedVec = std::vector<double, AlignedAlloc<double>>;

struct Tensor {
  int rows = 0, cols = 0;
  AlignedVec d;

  Tensor() = default;
  Tensor(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * c, 0.0) {}
  Tensor(int r, int c, AlignedVec data) : rows(r), cols(c), d(std::move(data)) {
    if (d.size() != static_cast<size_t>(r) * c)
      throw std::invalid_argument("tensor data size does not match shape");
  }

  static Tensor scalar(double v) {
    Tensor t(1, 1);
    t.d[0] = v;
    return t;
  }
  static Tensor full(int r, int c, double v) {
    Tensor t(r, c);
    std::fill(t.d.begin(), t.d.end(), v);
    return t;
  }

  size_t size() const { return d.size(); }
  bool empty() const { return d.empty(); }
  double& at(int r, int c) { return d[static_cast<size_t>(r) * cols + c]; }
  const double& at(int r, int c) const { return d[static_cast<size_t>(r) * cols + c]; }
  bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }

  Eigen::Map<EigenRowMat> map() { return {d.data(), rows, cols}; }
  Eigen::Map<const EigenRowMat> map() const { return {d.data(), rows, cols}; }
};

// Kernel selection for the product out = a * b (+ optional row bias).
//
// Eigen's blocked GEMM is the default, but it may round a given output row
// differently depending on the batch height (a one-row product dispatches to
// a GEMV kernel). The naive kernel computes every output row independently
// with a fixed left-to-right accumulation order, so a row's result cannot
// depend on which batch it was part of — that is what the bit-exact
// batched-equals-single rollout guarantee is built on.
inline bool& exact_kernels() {
  static bool v = false;
  return v;
}

// out = a * b, optionally adding `bias` (a [1, cols] row) to every row.
inline void gemm(const Tensor& a, const Tensor& b, const Tensor* bias, Tensor& out) {
  if (exact_kernels()) {
    for (int r = 0; r < a.rows; ++r)
      for (int j = 0; j < b.cols; ++j) {
        double acc = 0;
        for (int k = 0; k < a.cols; ++k) acc += a.at(r, k) * b.at(k, j);
        out.at(r, j) = bias ? acc + bias->at(0, j) : acc;
      }
    return;
  }
  out.map().noalias() = a.map() * b.map();
  if (bias) out.map().rowwise() += bias->map().row(0);
}

// Uniform He-style initialization: U(-s, s) with s = sqrt(6 / fan_in).
inline Tensor he_uniform(int rows, int cols, int fan_in, std::mt19937_64& rng) {
  double s = std::sqrt(6.0 / fan_in);
  std::uniform_real_distribution<double> dist(-s, s);
  Tensor t(rows, cols);
  for (double& v : t.d) v = dist(rng);
  return t;
}

}  // namespace larp
