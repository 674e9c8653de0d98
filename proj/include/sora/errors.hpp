#pragma once

#include <stdexcept>
#include <string>

namespace sora {

// Exit codes shared by the library and the CLI:
// 1 = configuration error, 2 = input / contract violation, 3 = numerical failure.
enum class ExitCode : int { ok = 0, config = 1, input = 2, numeric = 3 };

class Error : public std::runtime_error {
public:
    Error(ExitCode code, const std::string& msg) : std::runtime_error(msg), code_(code) {}
    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

// Bad or inconsistent configuration (also covers config-hash mismatches).
struct ConfigError : Error {
    explicit ConfigError(const std::string& m) : Error(ExitCode::config, m) {}
};

// Violated input contract: malformed artifacts, stage-order problems, bad shapes.
struct InputError : Error {
    explicit InputError(const std::string& m) : Error(ExitCode::input, m) {}
};

struct DimensionError : InputError {
    explicit DimensionError(const std::string& m) : InputError(m) {}
};

struct DegenerateVectorError : InputError {
    explicit DegenerateVectorError(const std::string& m) : InputError(m) {}
};

struct IoError : InputError {
    explicit IoError(const std::string& m) : InputError(m) {}
};

struct StageOrderError : InputError {
    explicit StageOrderError(const std::string& m) : InputError(m) {}
};

// Non-finite values or other numerical breakdown during compute.
struct NumericError : Error {
    explicit NumericError(const std::string& m) : Error(ExitCode::numeric, m) {}
};

} // namespace sora
