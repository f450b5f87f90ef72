#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <random>
#include <span>
#include <utility>
#include <vector>

namespace dkf {

/// 64-byte aligned allocation for matrix storage.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};

  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, alignment); }

  template <class U>
  friend bool operator==(const AlignedAllocator&, const AlignedAllocator<U>&) noexcept {
    return true;
  }
};

using AlignedBuffer = std::vector<double, AlignedAllocator<double>>;

/// Dense row-major matrix of doubles.
///
/// The checked factories (`from_rows`, `from_data`) reject non-finite entries;
/// the sized constructor zero-fills and is what the numeric kernels use.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);

  static Matrix from_data(std::size_t rows, std::size_t cols, std::vector<double> data);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);
  static Matrix diagonal(std::span<const double> diag);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<const double> row(std::size_t r) const noexcept {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }

  Matrix transposed() const;
  bool all_finite() const noexcept;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  AlignedBuffer data_;
};

/// Dense vector of doubles (latent states, diagonal factors).
class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t n, double fill = 0.0) : data_(n, fill) {}
  Vector(std::initializer_list<double> values);

  static Vector from_data(std::vector<double> data);

  std::size_t size() const noexcept { return data_.size(); }
  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }
  auto begin() const noexcept { return data_.begin(); }
  auto end() const noexcept { return data_.end(); }

  double norm() const noexcept;
  bool all_finite() const noexcept;

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

Matrix operator*(const Matrix& a, const Matrix& b);
Vector operator*(const Matrix& a, const Vector& x);
Matrix operator+(const Matrix& a, const Matrix& b);
Matrix operator-(const Matrix& a, const Matrix& b);
Matrix operator*(double s, const Matrix& a);
Vector operator-(const Vector& a, const Vector& b);

double frobenius_norm(const Matrix& m) noexcept;
double max_abs_diff(const Matrix& a, const Matrix& b);

struct QrResult {
  Matrix q;
  Matrix r;
};

/// Householder QR of a square matrix with R's diagonal made nonnegative, so the
/// factorization (and everything re-orthogonalized through it) is deterministic.
QrResult householder_qr(const Matrix& m);

struct SpectralNormOptions {
  double rel_tol = 1e-10;
  int max_iterations = 1000;
  std::uint64_t seed = 0x5eed;
};

/// Largest singular value by power iteration on MᵀM. On non-convergence the
/// iteration is restarted once from a differently seeded start vector, this
/// time stepping with (MᵀM)^1024 formed by repeated squaring, before a
/// NumericError is raised.
double spectral_norm(const Matrix& m, const SpectralNormOptions& opts = {});

/// Logistic function evaluated without overflow for any finite input.
double stable_sigmoid(double x) noexcept;

/// Gaussian-filled matrix drawn from `rng`; used for initialisation and tests.
Matrix random_gaussian(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double stddev = 1.0);
Matrix random_gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed, double stddev = 1.0);

}  // namespace dkf
