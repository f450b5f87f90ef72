#include "dkf/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dkf/error.hpp"
#include "eigen_view.hpp"

namespace dkf {

namespace {

bool finite_range(std::span<const double> xs) noexcept {
  return std::all_of(xs.begin(), xs.end(), [](double x) { return std::isfinite(x); });
}

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    std::ostringstream os;
    os << what << ": shape mismatch " << a.rows() << "x" << a.cols() << " vs " << b.rows() << "x"
       << b.cols();
    throw ShapeError(os.str());
  }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix Matrix::from_data(std::size_t rows, std::size_t cols, std::vector<double> data) {
  if (data.size() != rows * cols) {
    std::ostringstream os;
    os << "Matrix::from_data: " << data.size() << " entries for a " << rows << "x" << cols
       << " matrix";
    throw ShapeError(os.str());
  }
  if (!finite_range(data)) throw NumericError("Matrix::from_data: non-finite entry");
  Matrix m;
  m.rows_ = rows;
  m.cols_ = cols;
  m.data_.assign(data.begin(), data.end());
  return m;
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("Matrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return from_data(r, c, std::move(data));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

Matrix Matrix::diagonal(std::span<const double> diag) {
  Matrix m(diag.size(), diag.size());
  for (std::size_t i = 0; i < diag.size(); ++i) m(i, i) = diag[i];
  return m;
}

Matrix Matrix::transposed() const {
  Matrix t(cols_, rows_);
  for (std::size_t r = 0; r < rows_; ++r)
    for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
  return t;
}

bool Matrix::all_finite() const noexcept { return finite_range(data_); }

Vector::Vector(std::initializer_list<double> values) : data_(values) {
  if (!finite_range(data_)) throw NumericError("Vector: non-finite entry");
}

Vector Vector::from_data(std::vector<double> data) {
  if (!finite_range(data)) throw NumericError("Vector::from_data: non-finite entry");
  Vector v;
  v.data_ = std::move(data);
  return v;
}

double Vector::norm() const noexcept {
  double s = 0.0;
  for (double x : data_) s += x * x;
  return std::sqrt(s);
}

bool Vector::all_finite() const noexcept { return finite_range(data_); }

Matrix operator*(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matrix product: inner dimensions differ");
  Matrix out(a.rows(), b.cols());
  detail::view(out).noalias() = detail::view(a) * detail::view(b);
  return out;
}

Vector operator*(const Matrix& a, const Vector& x) {
  if (a.cols() != x.size()) throw ShapeError("matrix-vector product: dimension mismatch");
  Vector out(a.rows());
  for (std::size_t r = 0; r < a.rows(); ++r) {
    double s = 0.0;
    const auto row = a.row(r);
    for (std::size_t c = 0; c < a.cols(); ++c) s += row[c] * x[c];
    out[r] = s;
  }
  return out;
}

Matrix operator+(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "matrix sum");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] += b.data()[i];
  return out;
}

Matrix operator-(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "matrix difference");
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= b.data()[i];
  return out;
}

Matrix operator*(double s, const Matrix& a) {
  Matrix out = a;
  for (double& x : out.values()) x *= s;
  return out;
}

Vector operator-(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ShapeError("vector difference: length mismatch");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

double frobenius_norm(const Matrix& m) noexcept {
  double s = 0.0;
  for (double x : m.values()) s += x * x;
  return std::sqrt(s);
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  return worst;
}

QrResult householder_qr(const Matrix& m) {
  if (m.rows() != m.cols()) throw ShapeError("householder_qr: matrix must be square");
  if (!m.all_finite()) throw NumericError("householder_qr: non-finite input");
  const std::size_t n = m.rows();
  Matrix r = m;
  Matrix q = Matrix::identity(n);
  std::vector<double> v(n);

  for (std::size_t k = 0; k + 1 < n; ++k) {
    double norm_x = 0.0;
    for (std::size_t i = k; i < n; ++i) norm_x += r(i, k) * r(i, k);
    norm_x = std::sqrt(norm_x);
    if (norm_x == 0.0) continue;

    const double alpha = r(k, k) >= 0.0 ? -norm_x : norm_x;
    double norm_v = 0.0;
    for (std::size_t i = k; i < n; ++i) {
      v[i] = r(i, k) - (i == k ? alpha : 0.0);
      norm_v += v[i] * v[i];
    }
    norm_v = std::sqrt(norm_v);
    if (norm_v == 0.0) continue;
    for (std::size_t i = k; i < n; ++i) v[i] /= norm_v;

    // R <- (I - 2vvᵀ) R on the trailing block.
    for (std::size_t c = k; c < n; ++c) {
      double dot = 0.0;
      for (std::size_t i = k; i < n; ++i) dot += v[i] * r(i, c);
      for (std::size_t i = k; i < n; ++i) r(i, c) -= 2.0 * v[i] * dot;
    }
    for (std::size_t i = k + 1; i < n; ++i) r(i, k) = 0.0;

    // Q <- Q (I - 2vvᵀ).
    for (std::size_t row = 0; row < n; ++row) {
      double dot = 0.0;
      for (std::size_t i = k; i < n; ++i) dot += q(row, i) * v[i];
      for (std::size_t i = k; i < n; ++i) q(row, i) -= 2.0 * dot * v[i];
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    if (r(i, i) < 0.0) {
      for (std::size_t c = i; c < n; ++c) r(i, c) = -r(i, c);
      for (std::size_t row = 0; row < n; ++row) q(row, i) = -q(row, i);
    }
  }
  return {std::move(q), std::move(r)};
}

namespace {

// Returns a negative value when the iteration cap is hit. Each step applies
// (MᵀM)^(2^squarings); the Rayleigh quotient is always taken on MᵀM itself.
double power_iteration(const Matrix& m, const SpectralNormOptions& opts, std::uint64_t seed,
                       int squarings) {
  const std::size_t n = m.cols();
  const Matrix a = m.transposed() * m;
  Matrix step = a;
  for (int s = 0; s < squarings; ++s) {
    step = step * step;
    double scale = 0.0;
    for (double x : step.values()) scale = std::max(scale, std::abs(x));
    if (scale == 0.0) return 0.0;
    for (double& x : step.values()) x /= scale;
  }

  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> v(n), w(n);
  double norm = 0.0;
  for (double& x : v) {
    x = gauss(rng);
    norm += x * x;
  }
  norm = std::sqrt(norm);
  for (double& x : v) x /= norm;

  auto multiply = [n](const Matrix& b, const std::vector<double>& x, std::vector<double>& out) {
    for (std::size_t r = 0; r < n; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < n; ++c) acc += b(r, c) * x[c];
      out[r] = acc;
    }
  };

  double lambda = -1.0;
  for (int it = 0; it < opts.max_iterations; ++it) {
    multiply(step, v, w);
    double w_norm = 0.0;
    for (double x : w) w_norm += x * x;
    w_norm = std::sqrt(w_norm);
    if (w_norm == 0.0) return 0.0;
    for (std::size_t c = 0; c < n; ++c) v[c] = w[c] / w_norm;

    multiply(a, v, w);
    double rayleigh = 0.0;
    for (std::size_t c = 0; c < n; ++c) rayleigh += v[c] * w[c];

    if (lambda >= 0.0 && std::abs(rayleigh - lambda) <= opts.rel_tol * rayleigh)
      return std::sqrt(std::max(rayleigh, 0.0));
    lambda = rayleigh;
  }
  return -1.0;
}

}  // namespace

double spectral_norm(const Matrix& m, const SpectralNormOptions& opts) {
  if (!m.all_finite()) throw NumericError("spectral_norm: non-finite input");
  if (m.empty()) return 0.0;
  double s = power_iteration(m, opts, opts.seed, 0);
  if (s < 0.0) s = power_iteration(m, opts, opts.seed ^ 0x9e3779b97f4a7c15ULL, 10);
  if (s < 0.0) throw NumericError("spectral_norm: power iteration did not converge");
  return s;
}

double stable_sigmoid(double x) noexcept {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Matrix random_gaussian(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> gauss(0.0, stddev);
  Matrix m(rows, cols);
  for (double& x : m.values()) x = gauss(rng);
  return m;
}

Matrix random_gaussian(std::size_t rows, std::size_t cols, std::uint64_t seed, double stddev) {
  std::mt19937_64 rng(seed);
  return random_gaussian(rows, cols, rng, stddev);
}

}  // namespace dkf
