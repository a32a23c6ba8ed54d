#pragma once

// Row-major matrix products over raw buffers, backed by Eigen. Single
// threaded, so results are bit-reproducible run to run.

#include <Eigen/Core>
#include <cstddef>

namespace encodenet::detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m,n] (+)= A[m,k] * B[k,n]
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  Eigen::Map<const RowMatrix<T>> A(a, m, k);
  Eigen::Map<const RowMatrix<T>> B(b, k, n);
  Eigen::Map<RowMatrix<T>> C(c, m, n);
  if (accumulate) {
    C.noalias() += A * B;
  } else {
    C.noalias() = A * B;
  }
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  Eigen::Map<const RowMatrix<T>> A(a, k, m);
  Eigen::Map<const RowMatrix<T>> B(b, k, n);
  Eigen::Map<RowMatrix<T>> C(c, m, n);
  if (accumulate) {
    C.noalias() += A.transpose() * B;
  } else {
    C.noalias() = A.transpose() * B;
  }
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <typename T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  Eigen::Map<const RowMatrix<T>> A(a, m, k);
  Eigen::Map<const RowMatrix<T>> B(b, n, k);
  Eigen::Map<RowMatrix<T>> C(c, m, n);
  if (accumulate) {
    C.noalias() += A * B.transpose();
  } else {
    C.noalias() = A * B.transpose();
  }
}

}  // namespace encodenet::detail
