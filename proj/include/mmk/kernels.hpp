#pragma once

#include <cstddef>

// Row-major accumulate-into GEMM kernels used by matmul and its gradients.
namespace mmk::kernels {

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
// C[m x n] += A[m x k] * B^T, with B stored [n x k]
void gemm_nt(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);
// C[m x n] += A^T * B[k x n], with A stored [k x m]
void gemm_tn(std::size_t m, std::size_t k, std::size_t n, const double* a, const double* b, double* c);

}  // namespace mmk::kernels
