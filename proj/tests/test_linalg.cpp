#include "doctest.h"

#include <cmath>
#include <limits>

#include "dkf/error.hpp"
#include "dkf/linalg.hpp"
#include "oracles.hpp"

using dkf::Matrix;

namespace {

double orthogonality_defect(const Matrix& q) {
  const oracle::Mat e = oracle::to_eigen(q);
  return (e.transpose() * e - oracle::Mat::Identity(e.cols(), e.cols())).norm();
}

}  // namespace

TEST_CASE("matrix factories check shape and finiteness") {
  CHECK_THROWS_AS(Matrix::from_data(2, 2, {1.0, 2.0, 3.0}), dkf::ShapeError);
  CHECK_THROWS_AS(Matrix::from_data(1, 1, {std::nan("")}), dkf::NumericError);
  CHECK_THROWS_AS(Matrix::from_rows({{1.0, 2.0}, {3.0}}), dkf::ShapeError);
  const Matrix m = Matrix::from_rows({{1, 2}, {3, 4}});
  CHECK(m(1, 0) == 3.0);
  CHECK(m.transposed()(0, 1) == 3.0);
  CHECK(Matrix::identity(3)(2, 2) == 1.0);
}

TEST_CASE("products agree with the dense oracle") {
  const Matrix a = dkf::random_gaussian(5, 7, 11);
  const Matrix b = dkf::random_gaussian(7, 3, 12);
  const oracle::Mat expect = oracle::to_eigen(a) * oracle::to_eigen(b);
  CHECK((oracle::to_eigen(a * b) - expect).norm() < 1e-12);
  CHECK_THROWS_AS(a * a, dkf::ShapeError);
}

TEST_CASE("householder_qr of the identity is trivial") {
  const auto qr = dkf::householder_qr(Matrix::identity(4));
  CHECK(qr.q == Matrix::identity(4));
  CHECK(qr.r == Matrix::identity(4));
}

TEST_CASE("householder_qr returns an orthogonal input unchanged") {
  const Matrix q0 = oracle::from_eigen(oracle::positive_qr(dkf::random_gaussian(6, 6, 3)).q);
  const auto qr = dkf::householder_qr(q0);
  CHECK(dkf::max_abs_diff(qr.q, q0) < 1e-12);
  CHECK(dkf::max_abs_diff(qr.r, Matrix::identity(6)) < 1e-12);
}

TEST_CASE("householder_qr on a seeded 8x8 Gaussian") {
  const Matrix m = dkf::random_gaussian(8, 8, 99);
  const auto qr = dkf::householder_qr(m);
  CHECK(orthogonality_defect(qr.q) <= 1e-12);
  const auto ref = oracle::positive_qr(m);
  CHECK((oracle::to_eigen(qr.q) - ref.q).norm() < 1e-10);
  CHECK((oracle::to_eigen(qr.r) - ref.r).norm() < 1e-10);
}

TEST_CASE("householder_qr property sweep: 200 matrices of size 2..64") {
  std::mt19937_64 rng(2025);
  std::uniform_int_distribution<std::size_t> size(2, 64);
  double worst_orth = 0.0, worst_rec = 0.0;
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = size(rng);
    const Matrix m = dkf::random_gaussian(n, n, rng);
    const auto qr = dkf::householder_qr(m);
    worst_orth = std::max(worst_orth, orthogonality_defect(qr.q));
    worst_rec = std::max(worst_rec, dkf::frobenius_norm(qr.q * qr.r - m) / dkf::frobenius_norm(m));
    for (std::size_t k = 0; k < n; ++k) REQUIRE(qr.r(k, k) >= 0.0);
    for (std::size_t r = 1; r < n; ++r)
      for (std::size_t c = 0; c < r; ++c) REQUIRE(qr.r(r, c) == 0.0);
  }
  CHECK(worst_orth <= 1e-10);
  CHECK(worst_rec <= 1e-10);
}

TEST_CASE("householder_qr rejects bad input") {
  CHECK_THROWS_AS(dkf::householder_qr(Matrix(2, 3)), dkf::ShapeError);
}

TEST_CASE("spectral_norm on simple matrices") {
  const std::vector<double> diag{3.0, 1.0};
  CHECK(dkf::spectral_norm(Matrix::diagonal(diag)) == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(dkf::spectral_norm(Matrix::identity(5)) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(dkf::spectral_norm(Matrix(3, 3)) == 0.0);
}

TEST_CASE("spectral_norm of a random 6x6 matches the SVD oracle") {
  const Matrix m = dkf::random_gaussian(6, 6, 5);
  const double expect = oracle::top_singular_value(m);
  CHECK(std::abs(dkf::spectral_norm(m) - expect) <= 1e-8 * expect);
}

TEST_CASE("spectral_norm agrees with the SVD oracle on 100 matrices") {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<std::size_t> size(1, 40);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const Matrix m = dkf::random_gaussian(size(rng), size(rng), rng);
    const double expect = oracle::top_singular_value(m);
    worst = std::max(worst, std::abs(dkf::spectral_norm(m) - expect) / expect);
  }
  CHECK(worst <= 1e-8);
}

TEST_CASE("spectral_norm copes with nearly tied top singular values") {
  std::mt19937_64 rng(4);
  const Matrix u = oracle::from_eigen(oracle::positive_qr(dkf::random_gaussian(10, 10, rng)).q);
  const Matrix v = oracle::from_eigen(oracle::positive_qr(dkf::random_gaussian(10, 10, rng)).q);
  std::vector<double> s(10, 0.1);
  s[0] = 0.9;
  s[1] = 0.9 - 1e-9;
  const Matrix k = u * Matrix::diagonal(s) * v.transposed();
  CHECK(dkf::spectral_norm(k) == doctest::Approx(0.9).epsilon(1e-9));
}

TEST_CASE("spectral_norm rejects non-finite input") {
  Matrix m(2, 2);
  m(0, 0) = std::numeric_limits<double>::infinity();
  CHECK_THROWS_AS(dkf::spectral_norm(m), dkf::NumericError);
}

TEST_CASE("stable_sigmoid") {
  CHECK(dkf::stable_sigmoid(0.0) == 0.5);
  const double tiny = dkf::stable_sigmoid(-700.0);
  CHECK(tiny > 0.0);
  CHECK(tiny < 1e-300);
  CHECK(dkf::stable_sigmoid(700.0) == 1.0);
  CHECK(dkf::stable_sigmoid(2.0) == doctest::Approx(0.8807970779778823).epsilon(1e-15));
  for (double x = -50.0; x <= 50.0; x += 0.37) {
    CHECK(dkf::stable_sigmoid(-x) == doctest::Approx(1.0 - dkf::stable_sigmoid(x)).epsilon(1e-15));
    CHECK(dkf::stable_sigmoid(x + 0.37) >= dkf::stable_sigmoid(x));
  }
}
