#pragma once

#include <stdexcept>
#include <string>

namespace rejshand {

// Validation errors (bad config, bad shapes requested by the caller, bad
// assets) map to CLI exit code 1; everything else that escapes a command is a
// runtime failure and maps to exit code 2.
class Error : public std::runtime_error {
   public:
    explicit Error(const std::string& what, bool validation = false)
        : std::runtime_error(what), validation_(validation) {}

    bool is_validation() const noexcept { return validation_; }

   private:
    bool validation_;
};

// Operand shapes do not conform.
class DimensionError : public Error {
   public:
    explicit DimensionError(const std::string& what) : Error("dimension error: " + what) {}
};

// A precondition of an operation was violated by the caller.
class ContractError : public Error {
   public:
    explicit ContractError(const std::string& what) : Error("contract error: " + what) {}
};

class ConfigError : public Error {
   public:
    explicit ConfigError(const std::string& what) : Error("config error: " + what, true) {}
};

// Assets (regressor, faces) that fail their invariants.
class AssetError : public Error {
   public:
    explicit AssetError(const std::string& what) : Error("asset error: " + what, true) {}
};

// Missing or malformed files: manifests, blobs, checkpoints, images.
class LoadError : public Error {
   public:
    explicit LoadError(const std::string& what) : Error("load error: " + what) {}
};

class ValidationError : public Error {
   public:
    explicit ValidationError(const std::string& what) : Error("validation error: " + what, true) {}
};

class NumericError : public Error {
   public:
    explicit NumericError(const std::string& what) : Error("numeric error: " + what) {}
};

}  // namespace rejshand
