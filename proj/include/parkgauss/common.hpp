#pragma once

#include <cmath>
#include <stdexcept>
#include <string>

namespace parkgauss {

inline constexpr const char* kVersion = "0.1.0";

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Exit codes used by the CLI and encoded in error types.
enum ExitCode : int {
  kExitOk = 0,
  kExitUsage = 1,
  kExitData = 2,
  kExitNumerical = 3,
};

class Error : public std::runtime_error {
public:
  Error(int code, std::string message, std::string context = {})
      : std::runtime_error(message), code_(code), context_(std::move(context)) {}
  int code() const { return code_; }
  const std::string& context() const { return context_; }

private:
  int code_;
  std::string context_;
};

struct UsageError : Error {
  explicit UsageError(std::string message, std::string context = {})
      : Error(kExitUsage, std::move(message), std::move(context)) {}
};

struct DataError : Error {
  explicit DataError(std::string message, std::string context = {})
      : Error(kExitData, std::move(message), std::move(context)) {}
};

struct NumericalError : Error {
  explicit NumericalError(std::string message, std::string context = {})
      : Error(kExitNumerical, std::move(message), std::move(context)) {}
};

}  // namespace parkgauss
