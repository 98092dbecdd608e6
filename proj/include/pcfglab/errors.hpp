#pragma once

#include <stdexcept>
#include <string>

namespace pcfglab {

// Grammar file syntax problems, with 1-based position info.
class ParseError : public std::runtime_error {
 public:
  ParseError(int line, int col, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ", col " +
                           std::to_string(col) + ": " + what),
        line_(line),
        col_(col) {}
  int line() const { return line_; }
  int col() const { return col_; }

 private:
  int line_;
  int col_;
};

// Semantic problems with otherwise well-formed inputs (bad covers, vocab
// mismatches, malformed corpora, ...). CLI maps these to exit code 2.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Numerical failures: non-finite losses, exhausted resample budgets,
// enumeration tail over budget, ... CLI maps these to exit code 3.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace pcfglab
