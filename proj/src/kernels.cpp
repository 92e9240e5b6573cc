#include "dtx/kernels.hpp"

#include <atomic>
#include <cstdlib>
#include <string>

namespace dtx::kernels {
namespace {

const KernelTable* pick_default() {
  if (const char* env = std::getenv("DTX_KERNELS")) {
    const std::string want(env);
    if (want == "scalar") return &scalar_table();
    if (want == "avx2" && avx2_table() && cpu_has_avx2()) return avx2_table();
  }
  if (avx2_table() && cpu_has_avx2()) return avx2_table();
  return &scalar_table();
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> table{pick_default()};
  return table;
}

}  // namespace

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

const KernelTable& active() { return *slot().load(std::memory_order_relaxed); }

bool select(Isa isa) {
  if (isa == Isa::scalar) {
    slot().store(&scalar_table());
    return true;
  }
  if (!avx2_table() || !cpu_has_avx2()) return false;
  slot().store(avx2_table());
  return true;
}

std::string_view isa_name(Isa isa) {
  return isa == Isa::avx2 ? "avx2" : "scalar";
}

}  // namespace dtx::kernels
