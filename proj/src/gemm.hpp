#pragma once

// Row-major dense products used by conv2d and linear. All accumulate into C.
// Loop orders keep the innermost access contiguous; the reduction order is
// fixed, so results are reproducible bit for bit.

#include <cstddef>

namespace mvi2p::detail {

// C[m,n] += A[m,k] * B[k,n]
inline void gemm_nn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B,
                    double* C) {
  for (std::size_t i = 0; i < M; ++i) {
    double* c = C + i * N;
    const double* a = A + i * K;
    for (std::size_t k = 0; k < K; ++k) {
      const double av = a[k];
      if (av == 0.0) continue;
      const double* b = B + k * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]
inline void gemm_nt(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B,
                    double* C) {
  for (std::size_t i = 0; i < M; ++i) {
    const double* a = A + i * K;
    for (std::size_t j = 0; j < N; ++j) {
      const double* b = B + j * K;
      double s0 = 0.0, s1 = 0.0, s2 = 0.0, s3 = 0.0;
      std::size_t k = 0;
      for (; k + 4 <= K; k += 4) {
        s0 += a[k] * b[k];
        s1 += a[k + 1] * b[k + 1];
        s2 += a[k + 2] * b[k + 2];
        s3 += a[k + 3] * b[k + 3];
      }
      for (; k < K; ++k) s0 += a[k] * b[k];
      C[i * N + j] += (s0 + s1) + (s2 + s3);
    }
  }
}

// C[m,n] += A[k,m] * B[k,n]
inline void gemm_tn(std::size_t M, std::size_t N, std::size_t K, const double* A, const double* B,
                    double* C) {
  for (std::size_t k = 0; k < K; ++k) {
    const double* a = A + k * M;
    const double* b = B + k * N;
    for (std::size_t i = 0; i < M; ++i) {
      const double av = a[i];
      if (av == 0.0) continue;
      double* c = C + i * N;
      for (std::size_t j = 0; j < N; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace mvi2p::detail
