#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace dcollapse {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values, out-of-range arguments, violated preconditions.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// Incompatible tensor or matrix shapes.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// A row with zero norm where a direction is required.
class DegenerateRow : public Error {
 public:
  DegenerateRow(const std::string& what, std::size_t row)
      : Error(what + " (row " + std::to_string(row) + ")"), row_(row) {}
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Malformed binary file. `offset` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(what + " at byte offset " + std::to_string(offset)), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Training aborted (non-finite loss and similar runtime failures).
class TrainingError : public Error {
 public:
  using Error::Error;
};

}  // namespace dcollapse
