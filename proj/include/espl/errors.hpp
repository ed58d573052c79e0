#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace espl {

class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

class ConfigError : public Error {
public:
  using Error::Error;
};

// A rating update was asked for with an ill-formed match (too few players,
// ranking not a permutation, mismatched lengths).
class MatchError : public Error {
public:
  using Error::Error;
};

class NumericError : public Error {
public:
  NumericError(const std::string& what, std::string diagnostic)
      : Error(what + ": " + diagnostic), diagnostic_(std::move(diagnostic)) {}
  const std::string& diagnostic() const { return diagnostic_; }

private:
  std::string diagnostic_;
};

class LookupError : public Error {
public:
  using Error::Error;
};

// Structured-edit application failed; carries the offending edit position.
class EditError : public Error {
public:
  EditError(const std::string& what, std::size_t edit_index)
      : Error(what), edit_index_(edit_index) {}
  std::size_t edit_index() const { return edit_index_; }

private:
  std::size_t edit_index_ = 0;
};

class ParseError : public Error {
public:
  using Error::Error;
};

// Backend/sampler transport failure; carries the (prompt, problem) context
// of the cell that failed so an aborted batch can be diagnosed.
class TransportError : public Error {
public:
  TransportError(const std::string& what, std::string prompt_id = {},
                 std::string problem_id = {})
      : Error(what), prompt_id_(std::move(prompt_id)),
        problem_id_(std::move(problem_id)) {}
  const std::string& prompt_id() const { return prompt_id_; }
  const std::string& problem_id() const { return problem_id_; }

private:
  std::string prompt_id_;
  std::string problem_id_;
};

class IoError : public Error {
public:
  using Error::Error;
};

} // namespace espl
