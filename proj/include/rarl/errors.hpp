#pragma once

#include <stdexcept>
#include <string>

namespace rarl {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Rank statistics
class MismatchedIdSets : public Error {
 public:
  explicit MismatchedIdSets(const std::string& msg) : Error(msg) {}
};
class DegenerateLength : public Error {
 public:
  explicit DegenerateLength(const std::string& msg) : Error(msg) {}
};
class DegenerateInput : public Error {
 public:
  explicit DegenerateInput(const std::string& msg) : Error(msg) {}
};
class DuplicateIds : public Error {
 public:
  explicit DuplicateIds(const std::string& msg) : Error(msg) {}
};

// Response serialization
class EmptyEntries : public Error {
 public:
  explicit EmptyEntries(const std::string& msg) : Error(msg) {}
};
class NonFiniteValue : public Error {
 public:
  explicit NonFiniteValue(const std::string& msg) : Error(msg) {}
};

// Group optimization
class GroupTooSmall : public Error {
 public:
  explicit GroupTooSmall(const std::string& msg) : Error(msg) {}
};
class DistributionMismatch : public Error {
 public:
  explicit DistributionMismatch(const std::string& msg) : Error(msg) {}
};
class NonFiniteGradient : public Error {
 public:
  explicit NonFiniteGradient(const std::string& msg) : Error(msg) {}
};

// Policy
class InconsistentAction : public Error {
 public:
  explicit InconsistentAction(const std::string& msg) : Error(msg) {}
};

// Task generation
class ConstructionFailed : public Error {
 public:
  explicit ConstructionFailed(const std::string& msg) : Error(msg) {}
};

// Evaluation / harness
class EmptyEvalSet : public Error {
 public:
  explicit EmptyEvalSet(const std::string& msg) : Error(msg) {}
};
class ConfigInvalid : public Error {
 public:
  explicit ConfigInvalid(const std::string& msg) : Error(msg) {}
};
class IoError : public Error {
 public:
  explicit IoError(const std::string& msg) : Error(msg) {}
};

}  // namespace rarl
