#pragma once

#include <cstddef>
#include <random>
#include <vector>

#include "dkf/autodiff.hpp"
#include "dkf/encoder.hpp"
#include "dkf/linalg.hpp"

namespace dkf {

/// Latent transition K = U diag(Σ) Vᵀ with Σ_i = sigmoid(Σ_i^raw) * rho_max.
///
/// U and V are re-orthogonalised from the unconstrained raw matrices through
/// the positive-diagonal Householder QR on every materialisation, so every
/// singular value of K stays strictly below rho_max < 1.
struct StableKoopmanOperator {
  Matrix u_raw;      // d x d
  Matrix v_raw;      // d x d, ignored when tie_factors is set
  Matrix sigma_raw;  // 1 x d
  double rho_max = 0.99;
  bool tie_factors = false;  // V := U, making K normal

  std::size_t dim() const noexcept { return u_raw.rows(); }
  void validate() const;

  /// u_raw, v_raw ~ N(0, 1) and sigma_raw = 0, so all singular values start at rho_max / 2.
  static StableKoopmanOperator init(std::size_t dim, double rho_max, std::mt19937_64& rng,
                                    bool tie_factors = false);
};

struct MaterializedKoopman {
  Matrix k;
  Matrix u;
  Matrix v;
  Vector sigma;
};

MaterializedKoopman materialize(const StableKoopmanOperator& op);

/// K z with a freshly materialised K.
Vector apply(const StableKoopmanOperator& op, const Vector& z);

/// K^{j+1} z0 for j = 0..h-1, by repeated application of one materialised K.
std::vector<Vector> rollout(const StableKoopmanOperator& op, const Vector& z0, std::size_t h);

/// ‖W‖₂ rho_max^h ‖Δz‖: certified cap on the decoded deviation h steps ahead.
double perturbation_bound(const StableKoopmanOperator& op, double decoder_norm, std::size_t h,
                          double delta_z_norm);

/// Largest singular value max_i Σ_i of the materialised operator.
double spectral_trace_entry(const StableKoopmanOperator& op);

struct KoopmanVars {
  ad::Var u;
  ad::Var v;
  ad::Var sigma;  // 1 x d
  ad::Var k;
};

/// Differentiable materialisation on a tape. With `stop_gradient_qr` the
/// orthogonal factors are treated as constants.
KoopmanVars koopman_graph(ParamResolver& params, const StableKoopmanOperator& op,
                          bool stop_gradient_qr = false);

}  // namespace dkf
