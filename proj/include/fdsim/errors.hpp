#pragma once

#include <stdexcept>
#include <string>

namespace fdsim {

// Bad user input: config fields, shapes, infeasible plans. The CLI maps this
// to exit code 1; everything else that escapes is a runtime failure (exit 2).
class ValidationError : public std::runtime_error {
 public:
  explicit ValidationError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace fdsim
