#pragma once

#include <stdexcept>
#include <string>

namespace sigma {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Mismatched tensor shapes or dimensions.
class DimensionError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration values (bad hyperparameters, weights not summing, ...).
class ConfigError : public Error {
 public:
  using Error::Error;
};

// Malformed or empty inputs at a module boundary.
class InputError : public Error {
 public:
  using Error::Error;
};

// Word not present in the fixed vocabulary.
class VocabError : public Error {
 public:
  using Error::Error;
};

// Filesystem problems; iterate_shards treats these as transient and retries.
class IoError : public Error {
 public:
  using Error::Error;
};

// Corrupt or inconsistent on-disk artifacts; never retried.
class IntegrityError : public Error {
 public:
  using Error::Error;
};

// Caller violated an API contract (non-scalar loss, empty batch, ...).
class ContractError : public Error {
 public:
  using Error::Error;
};

}  // namespace sigma
