#pragma once

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace hourglass {

using Shape = std::vector<int64_t>;

// Shape/dimension mismatches between operands.
struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// Invalid hyperparameter or preset combinations.
struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// A caller broke a documented precondition (e.g. fully masked attention row).
struct ContractError : std::runtime_error {
  explicit ContractError(const std::string& msg) : std::runtime_error(msg) {}
};

// I/O or file-format failures (checkpoints, feature files).
struct IoError : std::runtime_error {
  explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

inline int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

inline int64_t ceil_div(int64_t a, int64_t b) { return (a + b - 1) / b; }

namespace detail {

template <typename... Args>
std::string concat_msg(Args&&... args) {
  std::ostringstream os;
  (os << ... << args);
  return os.str();
}

}  // namespace detail

template <typename... Args>
void check_shape(bool cond, Args&&... args) {
  if (!cond) throw ShapeError(detail::concat_msg(std::forward<Args>(args)...));
}

template <typename... Args>
void check_config(bool cond, Args&&... args) {
  if (!cond) throw ConfigError(detail::concat_msg(std::forward<Args>(args)...));
}

template <typename... Args>
void check_contract(bool cond, Args&&... args) {
  if (!cond) throw ContractError(detail::concat_msg(std::forward<Args>(args)...));
}

}  // namespace hourglass
