#include "msmamba/kernels.hpp"

#include <cstdlib>
#include <stdexcept>
#include <string>

namespace msmamba::kernels {
namespace {

const Ops* g_active = nullptr;

const Ops* pick_default() {
  if (const char* env = std::getenv("MSMAMBA_KERNELS")) {
    std::string_view want(env);
    if (want == "scalar") return &scalar_ops();
    if (want == "avx2") {
      if (const Ops* ops = avx2_ops()) return ops;
      throw std::runtime_error("MSMAMBA_KERNELS=avx2 but host has no AVX2");
    }
    throw std::runtime_error("MSMAMBA_KERNELS: unknown backend '" + std::string(want) + "'");
  }
  if (const Ops* ops = avx2_ops()) return ops;
  return &scalar_ops();
}

}  // namespace

bool host_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2");
#else
  return false;
#endif
}

const Ops& active() {
  if (!g_active) g_active = pick_default();
  return *g_active;
}

std::string_view active_name() { return active().name; }

void force_backend(std::string_view name) {
  if (name == "scalar") {
    g_active = &scalar_ops();
    return;
  }
  if (name == "avx2") {
    if (const Ops* ops = avx2_ops()) {
      g_active = ops;
      return;
    }
    throw std::runtime_error("avx2 backend unavailable on this host");
  }
  throw std::runtime_error("unknown kernel backend '" + std::string(name) + "'");
}

}  // namespace msmamba::kernels
