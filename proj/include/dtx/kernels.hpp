#pragma once
// Dense double-precision inner loops used by the autodiff ops.
//
// Every kernel has a portable scalar reference implementation and, where the
// CPU supports it, an AVX2+FMA variant. The variant is chosen once at startup
// (override with DTX_KERNELS=scalar|avx2) and stays fixed for the process, so
// results are bitwise reproducible on a given machine. The two variants agree
// to rounding error only: FMA contraction and lane-wise reduction order differ.

#include <cstddef>
#include <string_view>

namespace dtx::kernels {

enum class Isa { scalar, avx2 };

struct KernelTable {
  Isa isa;
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(double alpha, const double* x, double* y, std::size_t n);
  // y = a + b, y = a * b (y may alias a or b)
  void (*add)(const double* a, const double* b, double* y, std::size_t n);
  void (*mul)(const double* a, const double* b, double* y, std::size_t n);
  // C[m x n] (+)= A[m x k] * B[k x n]
  void (*gemm_nn)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c, bool accumulate);
  // C[m x n] (+)= A[m x k] * B[n x k]^T
  void (*gemm_nt)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c, bool accumulate);
  // C[m x n] (+)= A[k x m]^T * B[k x n]
  void (*gemm_tn)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                  const double* b, double* c, bool accumulate);
};

const KernelTable& scalar_table();
// nullptr when the binary was built without AVX2 support.
const KernelTable* avx2_table();

bool cpu_has_avx2();

// Active table. Selected on first use.
const KernelTable& active();

// Test hook: force a variant. Returns false if it is unavailable.
bool select(Isa isa);

std::string_view isa_name(Isa isa);

}  // namespace dtx::kernels
