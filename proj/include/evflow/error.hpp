#pragma once

#include <stdexcept>
#include <string>

namespace evflow {

enum class ErrorKind {
  Validation,  // malformed input, bad config or flags
  Data,        // file/format/coverage problems
  Numeric,     // non-finite values
  Empty,       // evaluation over an empty mask
};

class Error : public std::runtime_error
{
public:
  Error(ErrorKind kind, const std::string &what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

private:
  ErrorKind kind_;
};

inline Error validation_error(const std::string &m) { return {ErrorKind::Validation, m}; }
inline Error data_error(const std::string &m) { return {ErrorKind::Data, m}; }
inline Error numeric_error(const std::string &m) { return {ErrorKind::Numeric, m}; }
inline Error empty_error(const std::string &m) { return {ErrorKind::Empty, m}; }

// Exit codes used by the command-line tool.
inline int exit_code(ErrorKind kind)
{
  switch (kind) {
  case ErrorKind::Validation: return 2;
  case ErrorKind::Data: return 3;
  case ErrorKind::Empty: return 3;
  case ErrorKind::Numeric: return 4;
  }
  return 1;
}

} // namespace evflow
