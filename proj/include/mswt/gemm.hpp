#pragma once

#include <cstddef>

namespace mswt {

// C(m,n) = A(m,k) * B(k,n), all row-major, C overwritten.
//
// Every output element is produced by one fused-multiply-add chain that runs
// over p = 0..k-1 in ascending order, regardless of which code path (register
// tile or remainder) computes it. Two consequences the rest of the code relies
// on: results are bit-deterministic, and permuting rows of A (or columns of B)
// permutes rows (columns) of C with bit-identical values.
void gemm(const double* A, const double* B, double* C, int m, int k, int n);

// Same product over strided row-major views: row i of A starts at A + i*lda,
// row p of B at B + p*ldb, row i of C at C + i*ldc. Lets callers multiply a
// column slice of a wider matrix (e.g. one attention head) or write into one
// without staging copies. gemm(A,B,C,m,k,n) == gemm(A,B,C,m,k,n,k,n,n).
void gemm(const double* A, const double* B, double* C, int m, int k, int n, int lda, int ldb,
          int ldc);

// C(m,n) = A(m,k) * B(n,k)^T: C[i][j] = sum_p A[i][p] * B[j][p], p ascending.
// Bit-identical to transpose(B) followed by gemm — the per-element fma chain
// is unchanged — but B's rows are packed into register-tile panels on the fly
// instead of materializing the transpose.
void gemm_nt(const double* A, const double* B, double* C, int m, int k, int n, int lda, int ldb,
             int ldc);

// C(m,n) = A(k,m)^T * B(k,n): C[i][j] = sum_p A[p][i] * B[p][j], p ascending.
// Bit-identical to transpose(A) followed by gemm, with the same on-the-fly
// panel packing instead of a materialized transpose.
void gemm_tn(const double* A, const double* B, double* C, int m, int k, int n, int lda, int ldb,
             int ldc);

// out(cols,rows) = in(rows,cols)^T, row-major.
void transpose(const double* in, double* out, int rows, int cols);

// In-place exp over n doubles. Polynomial approximation, max relative error
// ~3e-13 against the libm exp; inputs below -700 flush to exactly 0 (their
// true value is at or below the subnormal range and never matters after a
// max-subtracted softmax). Branch-free, ~13x faster than calling exp in a
// loop, and bit-deterministic.
void vexp(double* x, std::size_t n);

}  // namespace mswt
