#pragma once

#include <stdexcept>
#include <string>

namespace magma {

// Base of every error raised by the library. The code is a short stable tag
// (e.g. "E_DIMENSION") used as the machine-greppable prefix by the CLI.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& message)
      : std::runtime_error(message), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define MAGMA_DEFINE_ERROR(Name, Code)                                   \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& message) : Error(Code, message) {} \
  }

MAGMA_DEFINE_ERROR(DimensionError, "E_DIMENSION");
MAGMA_DEFINE_ERROR(DomainError, "E_DOMAIN");
MAGMA_DEFINE_ERROR(DegenerateInputError, "E_DEGENERATE");
MAGMA_DEFINE_ERROR(ContractError, "E_CONTRACT");
MAGMA_DEFINE_ERROR(NonFiniteError, "E_NONFINITE");
MAGMA_DEFINE_ERROR(ConfigError, "E_CONFIG");
MAGMA_DEFINE_ERROR(ValidationError, "E_VALIDATION");
MAGMA_DEFINE_ERROR(DataError, "E_DATA");
MAGMA_DEFINE_ERROR(CheckpointError, "E_CHECKPOINT");
MAGMA_DEFINE_ERROR(IoError, "E_IO");

#undef MAGMA_DEFINE_ERROR

}  // namespace magma
