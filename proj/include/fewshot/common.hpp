#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace fewshot {

/// Row-major so that one sample is one contiguous row.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

using ClassId = int;
inline constexpr ClassId kMaskedLabel = -1;
inline constexpr int kUnassigned = -1;

// Error hierarchy. Everything derives from std::runtime_error so callers can
// catch broadly at the CLI boundary.

struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AdaptationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Raised when an operation needs ground-truth labels that were masked on export.
struct LabelsUnavailable : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IncompleteLabeling : std::runtime_error {
  IncompleteLabeling(const std::string& what, std::vector<int> clusters)
      : std::runtime_error(what), missing_clusters(std::move(clusters)) {}
  std::vector<int> missing_clusters;
};

struct ParseError : std::runtime_error {
  ParseError(const std::string& what, std::size_t line_no)
      : std::runtime_error("line " + std::to_string(line_no) + ": " + what), line(line_no) {}
  std::size_t line;
};

/// Squared Euclidean distance between two rows / vectors.
template <typename A, typename B>
inline double squared_distance(const Eigen::MatrixBase<A>& a, const Eigen::MatrixBase<B>& b) {
  return (a - b).squaredNorm();
}

/// Stacks matrices with the same column count vertically.
inline Matrix vstack(std::initializer_list<const Matrix*> parts) {
  Eigen::Index rows = 0;
  Eigen::Index cols = -1;
  for (const Matrix* p : parts) {
    if (p->rows() == 0) continue;
    if (cols >= 0 && p->cols() != cols) throw ShapeError("vstack: column count mismatch");
    cols = p->cols();
    rows += p->rows();
  }
  if (cols < 0) {
    for (const Matrix* p : parts) cols = std::max<Eigen::Index>(cols, p->cols());
    return Matrix(0, std::max<Eigen::Index>(cols, 0));
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (const Matrix* p : parts) {
    if (p->rows() == 0) continue;
    out.middleRows(at, p->rows()) = *p;
    at += p->rows();
  }
  return out;
}

}  // namespace fewshot
