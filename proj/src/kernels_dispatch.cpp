#include "sora/kernels.hpp"

#include "sora/errors.hpp"

#include <cstdlib>
#include <string>

namespace sora::kernels {
namespace {

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(_M_X64)
    return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
    return false;
#endif
}

const KernelTable* table_for(Backend b) {
    switch (b) {
        case Backend::scalar: return &scalar_table();
        case Backend::avx2: return cpu_has_avx2() ? avx2_table() : nullptr;
        case Backend::neon: return neon_table();
    }
    return nullptr;
}

Backend pick_auto() {
    if (const char* env = std::getenv("SORA_KERNELS")) {
        const std::string want(env);
        if (want == "scalar") return Backend::scalar;
        if (want == "avx2" && table_for(Backend::avx2)) return Backend::avx2;
        if (want == "neon" && table_for(Backend::neon)) return Backend::neon;
        if (want != "auto") {
            throw ConfigError("SORA_KERNELS=" + want + " is not available on this machine");
        }
    }
    if (table_for(Backend::avx2)) return Backend::avx2;
    if (table_for(Backend::neon)) return Backend::neon;
    return Backend::scalar;
}

struct Dispatch {
    Backend backend;
    const KernelTable* kt;
    Dispatch() : backend(pick_auto()), kt(table_for(backend)) {}
};

Dispatch& dispatch() {
    static Dispatch d;
    return d;
}

} // namespace

Backend active_backend() { return dispatch().backend; }

const char* backend_name(Backend b) {
    switch (b) {
        case Backend::scalar: return "scalar";
        case Backend::avx2: return "avx2";
        case Backend::neon: return "neon";
    }
    return "?";
}

bool backend_supported(Backend b) { return table_for(b) != nullptr; }

void force_backend(Backend b) {
    const KernelTable* kt = table_for(b);
    if (!kt) {
        throw ConfigError(std::string("kernel backend not supported here: ") + backend_name(b));
    }
    dispatch().backend = b;
    dispatch().kt = kt;
}

void reset_backend() {
    dispatch().backend = pick_auto();
    dispatch().kt = table_for(dispatch().backend);
}

const KernelTable& table() { return *dispatch().kt; }

} // namespace sora::kernels
