#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace llavaseg {

/// Base class of every error raised by the library. `kind()` is a short,
/// stable tag used by the CLI to choose an exit code and by tests.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define LLAVASEG_DEFINE_ERROR(Name, tag)                                  \
  class Name : public Error {                                             \
   public:                                                                \
    explicit Name(const std::string& what) : Error(tag, what) {}          \
  };

LLAVASEG_DEFINE_ERROR(InvalidInput, "invalid-input")
LLAVASEG_DEFINE_ERROR(RenderError, "render")
LLAVASEG_DEFINE_ERROR(ShapeError, "shape")
LLAVASEG_DEFINE_ERROR(ConfigError, "config")
LLAVASEG_DEFINE_ERROR(CodecError, "codec")
LLAVASEG_DEFINE_ERROR(InvalidSpan, "invalid-span")
LLAVASEG_DEFINE_ERROR(InvalidPrompt, "invalid-prompt")
LLAVASEG_DEFINE_ERROR(PolicyViolation, "policy-violation")
LLAVASEG_DEFINE_ERROR(CheckpointError, "checkpoint")
LLAVASEG_DEFINE_ERROR(IoError, "io")

#undef LLAVASEG_DEFINE_ERROR

/// Target extraction failed; keeps the raw model output for audit.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::string raw)
      : Error("parse", what), raw_(std::move(raw)) {}
  const std::string& raw_response() const noexcept { return raw_; }

 private:
  std::string raw_;
};

/// Transport-level failure talking to a model endpoint.
class BackendError : public Error {
 public:
  BackendError(const std::string& what, bool retryable)
      : Error("backend", what), retryable_(retryable) {}
  bool retryable() const noexcept { return retryable_; }

 private:
  bool retryable_;
};

/// The scripted backend has no canned response for a request.
class ScriptMissError : public Error {
 public:
  ScriptMissError(const std::string& key, std::string nearest)
      : Error("script-miss", "no scripted response for key " + key +
                                 (nearest.empty() ? std::string(" (script is empty)")
                                                  : " (nearest scripted key: " + nearest + ")")),
        key_(key),
        nearest_(std::move(nearest)) {}
  const std::string& key() const noexcept { return key_; }
  const std::string& nearest_key() const noexcept { return nearest_; }

 private:
  std::string key_;
  std::string nearest_;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  DivergenceError(const std::string& what, std::vector<std::string> batch_ids)
      : Error("divergence", what), batch_ids_(std::move(batch_ids)) {}
  const std::vector<std::string>& batch_ids() const noexcept { return batch_ids_; }

 private:
  std::vector<std::string> batch_ids_;
};

}  // namespace llavaseg
