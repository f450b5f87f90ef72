#pragma once

#include <Eigen/Dense>

#include "dkf/linalg.hpp"

namespace dkf::detail {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using Stride = Eigen::OuterStride<>;
using BlockMap = Eigen::Map<RowMatrix, 0, Stride>;
using ConstBlockMap = Eigen::Map<const RowMatrix, 0, Stride>;

inline MatrixMap view(Matrix& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}
inline ConstMatrixMap view(const Matrix& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

/// Sub-block [row0, row0+rows) x [col0, col0+cols) of a row-major matrix.
inline BlockMap block(Matrix& m, std::size_t row0, std::size_t rows, std::size_t col0,
                      std::size_t cols) {
  return {m.data() + row0 * m.cols() + col0, static_cast<Eigen::Index>(rows),
          static_cast<Eigen::Index>(cols), Stride(static_cast<Eigen::Index>(m.cols()))};
}
inline ConstBlockMap block(const Matrix& m, std::size_t row0, std::size_t rows, std::size_t col0,
                           std::size_t cols) {
  return {m.data() + row0 * m.cols() + col0, static_cast<Eigen::Index>(rows),
          static_cast<Eigen::Index>(cols), Stride(static_cast<Eigen::Index>(m.cols()))};
}

}  // namespace dkf::detail
