#pragma once

#include <stdexcept>
#include <string>

namespace atr {

// Exit-code families used by the CLI: config = 2, data = 3, runtime = 4.
enum class ErrorKind { kConfig = 2, kData = 3, kRuntime = 4 };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error(ErrorKind::kConfig, "configuration error: " + what) {}
};

class DataError : public Error {
 public:
  explicit DataError(const std::string& what) : Error(ErrorKind::kData, what) {}
};

class ParseError : public DataError {
 public:
  ParseError(std::size_t line, const std::string& what)
      : DataError("parse error at line " + std::to_string(line) + ": " + what),
        line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

class EmptyDatasetError : public DataError {
 public:
  explicit EmptyDatasetError(const std::string& what)
      : DataError("empty dataset: " + what) {}
};

class ShapeError : public Error {
 public:
  explicit ShapeError(const std::string& what)
      : Error(ErrorKind::kRuntime, "shape error: " + what) {}
};

class IndexError : public Error {
 public:
  explicit IndexError(const std::string& what)
      : Error(ErrorKind::kRuntime, "index error: " + what) {}
};

class RangeError : public Error {
 public:
  explicit RangeError(const std::string& what)
      : Error(ErrorKind::kRuntime, "range error: " + what) {}
};

class FrozenModelError : public Error {
 public:
  explicit FrozenModelError(const std::string& what)
      : Error(ErrorKind::kRuntime, "frozen model: " + what) {}
};

class ContractError : public Error {
 public:
  explicit ContractError(const std::string& what)
      : Error(ErrorKind::kRuntime, "contract violation: " + what) {}
};

class TypeMismatchError : public Error {
 public:
  explicit TypeMismatchError(const std::string& what)
      : Error(ErrorKind::kRuntime, "type error: " + what) {}
};

class EmptyTextError : public Error {
 public:
  explicit EmptyTextError(const std::string& what)
      : Error(ErrorKind::kRuntime, "empty text: " + what) {}
};

class UndefinedSimilarityError : public Error {
 public:
  explicit UndefinedSimilarityError(const std::string& what)
      : Error(ErrorKind::kRuntime, "undefined similarity: " + what) {}
};

class GenerationError : public Error {
 public:
  GenerationError(const std::string& what, std::string prompt_hash)
      : Error(ErrorKind::kRuntime,
              "generation failed (prompt " + prompt_hash + "): " + what),
        prompt_hash_(std::move(prompt_hash)) {}
  const std::string& prompt_hash() const noexcept { return prompt_hash_; }

 private:
  std::string prompt_hash_;
};

}  // namespace atr
