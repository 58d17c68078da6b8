#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace resad {

// Row-major so that one row is one spatial position's feature vector.
template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVectorX = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Real = double;
using Mat = MatrixX<Real>;
using Vec = VectorX<Real>;

/// Base for every error raised by the library. `kind()` is a short
/// machine-parseable token used by the CLI error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

}  // namespace resad
