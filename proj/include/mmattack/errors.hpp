#pragma once

#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mmattack {

// Root of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
 public:
  using Error::Error;
};

// Configuration problem; `field` is a dotted path into the offending document.
class ConfigError : public Error {
 public:
  ConfigError(std::string field, const std::string& message)
      : Error(field.empty() ? message : field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

// A loss produced a non-finite value. iteration is -1 when raised outside the outer loop.
class DivergenceError : public Error {
 public:
  DivergenceError(long iteration, std::string surrogate_id, const std::string& detail)
      : Error(describe(iteration, surrogate_id, detail)),
        iteration_(iteration),
        surrogate_id_(std::move(surrogate_id)),
        detail_(detail) {}

  long iteration() const noexcept { return iteration_; }
  const std::string& surrogate_id() const noexcept { return surrogate_id_; }
  const std::string& detail() const noexcept { return detail_; }

  DivergenceError at_iteration(long iteration) const {
    return DivergenceError(iteration, surrogate_id_, detail_);
  }

 private:
  static std::string describe(long iteration, const std::string& id, const std::string& detail) {
    std::string msg = "optimizer diverged";
    if (iteration >= 0) msg += " at iteration " + std::to_string(iteration);
    if (!id.empty()) msg += " (surrogate '" + id + "')";
    return msg + ": " + detail;
  }

  long iteration_;
  std::string surrogate_id_;
  std::string detail_;
};

class UnsupportedSurrogate : public Error {
 public:
  using Error::Error;
};

// Operation called on an adapter of the wrong kind.
class InterfaceError : public Error {
 public:
  using Error::Error;
};

class RegistryError : public Error {
 public:
  RegistryError(const std::string& id, std::vector<std::string> known)
      : Error(describe(id, known)), id_(id), known_(std::move(known)) {}
  const std::string& id() const noexcept { return id_; }
  const std::vector<std::string>& known_ids() const noexcept { return known_; }

 private:
  static std::string describe(const std::string& id, const std::vector<std::string>& known) {
    std::string msg = "unknown surrogate id '" + id + "'; known ids:";
    for (const auto& k : known) msg += " " + k;
    return msg;
  }
  std::string id_;
  std::vector<std::string> known_;
};

class LoadError : public Error {
 public:
  LoadError(std::string locator, const std::string& detail)
      : Error("cannot load weights from '" + locator + "': " + detail), locator_(std::move(locator)) {}
  const std::string& locator() const noexcept { return locator_; }

 private:
  std::string locator_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class IngestionError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& message)
      : Error(field + ": " + message), field_(std::move(field)) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

class PendingVerdictsError : public Error {
 public:
  explicit PendingVerdictsError(std::vector<std::string> ids)
      : Error(describe(ids)), ids_(std::move(ids)) {}
  const std::vector<std::string>& record_ids() const noexcept { return ids_; }

 private:
  static std::string describe(const std::vector<std::string>& ids) {
    std::string msg = "records with pending verdicts:";
    for (const auto& id : ids) msg += " " + id;
    return msg;
  }
  std::vector<std::string> ids_;
};

// Failures talking to a black-box target.
class ServiceError : public Error {
 public:
  using Error::Error;
};

class AuthError : public ServiceError {
 public:
  using ServiceError::ServiceError;
};

class RateLimitError : public ServiceError {
 public:
  using ServiceError::ServiceError;
};

// Transient transport failure (connection reset, timeout, 5xx).
class TransportError : public ServiceError {
 public:
  using ServiceError::ServiceError;
};

// The service declined to process the request on content grounds. Never
// retried: asking again does not change the answer.
class ContentRejected : public ServiceError {
 public:
  explicit ContentRejected(std::string response_text)
      : ServiceError("target rejected the request: " + response_text), response_text_(std::move(response_text)) {}
  const std::string& response_text() const noexcept { return response_text_; }

 private:
  std::string response_text_;
};

class MissingCredential : public ServiceError {
 public:
  explicit MissingCredential(std::string variable)
      : ServiceError("missing credential: environment variable " + variable + " is not set"),
        variable_(std::move(variable)) {}
  const std::string& variable() const noexcept { return variable_; }

 private:
  std::string variable_;
};

}  // namespace mmattack
