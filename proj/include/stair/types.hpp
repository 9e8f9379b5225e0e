#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace stair {

// All numeric state is held in dense row-major matrices. Token blocks are
// [rows = tokens, cols = model dim]; vectors are 1xN rows.
template <typename S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using MaskMat = Eigen::Matrix<uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct MaskError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct VocabError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Raised when a verification oracle cannot run (e.g. the function under
// test turned out to be non-deterministic).
struct OracleError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(Index rows, Index cols) {
  return "[" + std::to_string(rows) + "x" + std::to_string(cols) + "]";
}

template <typename S>
std::string shape_str(const Mat<S>& m) {
  return shape_str(m.rows(), m.cols());
}

// Token ids; -1 marks unsupervised target positions.
constexpr int kIgnoreIndex = -1;

struct TokenSeq {
  std::vector<int> ids;

  Index size() const { return static_cast<Index>(ids.size()); }
  bool empty() const { return ids.empty(); }
};

}  // namespace stair
