#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "roboscape/common.hpp"
#include "roboscape/parallel.hpp"
#include "roboscape/rng.hpp"

namespace rs {

// Dense row-major tensor. Immutable shape; data is a flat scalar buffer.
template <class T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)), data(count(shape)) {}
  Tensor(std::vector<int> s, T fill) : shape(std::move(s)), data(count(shape), fill) {}
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    RS_CHECK(static_cast<int64_t>(data.size()) == count(shape),
             "tensor: data size %zu does not match shape product %lld", data.size(),
             static_cast<long long>(count(shape)));
  }

  static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int> s, T v) { return Tensor(std::move(s), v); }

  static Tensor uniform(std::vector<int> s, Rng& rng, T lo, T hi) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }
  static Tensor normal(std::vector<int> s, Rng& rng, T mean, T std) {
    Tensor t(std::move(s));
    for (auto& v : t.data) v = static_cast<T>(rng.normal(mean, std));
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  int ndim() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<size_t>(i)]; }
  int rows() const { return ndim() >= 1 ? shape[0] : 1; }
  int cols() const { return ndim() >= 2 ? shape[1] : 1; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& at(int i) { return data[static_cast<size_t>(i)]; }
  T at(int i) const { return data[static_cast<size_t>(i)]; }
  T& at(int i, int j) { return data[static_cast<size_t>(i) * cols() + j]; }
  T at(int i, int j) const { return data[static_cast<size_t>(i) * cols() + j]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (const T v : data) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  template <class U>
  Tensor<U> cast() const {
    Tensor<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      RS_CHECK(d >= 1, "tensor: shape entries must be >= 1, got %d", d);
      n *= d;
    }
    return n;
  }
};

inline std::string shape_str(const std::vector<int>& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out + "]";
}

// ---------------------------------------------------------------------------
// Matmul kernels. Loop orders chosen so the inner loop is contiguous over the
// output row and auto-vectorizes; accumulation order is fixed (deterministic
// for any thread count, rows are disjoint).
// ---------------------------------------------------------------------------

// C[n,m] = A[n,k] * B[k,m]
template <class T>
void matmul(const T* A, const T* B, T* C, int n, int k, int m) {
  parallel_for(n, [=](int64_t i) {
    const T* a = A + i * k;
    T* c = C + i * m;
    std::memset(c, 0, sizeof(T) * static_cast<size_t>(m));
    for (int p = 0; p < k; ++p) {
      const T av = a[p];
      const T* b = B + static_cast<int64_t>(p) * m;
      for (int j = 0; j < m; ++j) c[j] += av * b[j];
    }
  });
}

// C[k,m] = A[n,k]^T * B[n,m], accumulating over n in index order.
template <class T>
void matmul_tn(const T* A, const T* B, T* C, int n, int k, int m) {
  std::memset(C, 0, sizeof(T) * static_cast<size_t>(k) * m);
  const int64_t kk = k;
  // parallelize over output rows p; each row scans all n (still index order)
  parallel_for(kk, [=](int64_t p) {
    T* c = C + p * m;
    for (int i = 0; i < n; ++i) {
      const T av = A[static_cast<int64_t>(i) * k + p];
      const T* b = B + static_cast<int64_t>(i) * m;
      for (int j = 0; j < m; ++j) c[j] += av * b[j];
    }
  });
}

template <class T>
void transpose(const T* A, T* At, int n, int m) {
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) At[static_cast<int64_t>(j) * n + i] = A[static_cast<int64_t>(i) * m + j];
}

// C[n,k] = A[n,m] * B[k,m]^T, via an explicit transpose of B (B is small).
template <class T>
void matmul_nt(const T* A, const T* B, T* C, int n, int m, int k) {
  std::vector<T> Bt(static_cast<size_t>(m) * k);
  transpose(B, Bt.data(), k, m);
  matmul(A, Bt.data(), C, n, m, k);
}

template <class T>
Tensor<T> matmul(const Tensor<T>& A, const Tensor<T>& B) {
  RS_CHECK(A.ndim() == 2 && B.ndim() == 2 && A.dim(1) == B.dim(0),
           "matmul: incompatible shapes %s x %s", shape_str(A.shape).c_str(),
           shape_str(B.shape).c_str());
  Tensor<T> C({A.dim(0), B.dim(1)});
  matmul(A.ptr(), B.ptr(), C.ptr(), A.dim(0), A.dim(1), B.dim(1));
  return C;
}

// Row softmax in place; masked entries (<= -1e29 before scaling) end up exactly 0.
template <class T>
void softmax_row(T* row, int n) {
  T mx = row[0];
  for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
  T sum = 0;
  for (int j = 0; j < n; ++j) {
    row[j] = std::exp(row[j] - mx);
    sum += row[j];
  }
  const T inv = T(1) / sum;
  for (int j = 0; j < n; ++j) row[j] *= inv;
}

}  // namespace rs
