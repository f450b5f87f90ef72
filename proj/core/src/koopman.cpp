#include "dkf/koopman.hpp"

#include <algorithm>
#include <cmath>

#include "dkf/error.hpp"

namespace dkf {

void StableKoopmanOperator::validate() const {
  if (!(rho_max > 0.0 && rho_max < 1.0))
    throw ConfigError("koopman operator: rho_max must lie in (0, 1)");
  const std::size_t d = dim();
  if (d == 0 || u_raw.cols() != d) throw ShapeError("koopman operator: u_raw must be square");
  if (!tie_factors && (v_raw.rows() != d || v_raw.cols() != d))
    throw ShapeError("koopman operator: v_raw must match u_raw");
  if (sigma_raw.rows() != 1 || sigma_raw.cols() != d)
    throw ShapeError("koopman operator: sigma_raw must be 1 x d");
  if (!u_raw.all_finite() || !v_raw.all_finite() || !sigma_raw.all_finite())
    throw NumericError("koopman operator: non-finite parameter");
}

StableKoopmanOperator StableKoopmanOperator::init(std::size_t dim, double rho_max,
                                                  std::mt19937_64& rng, bool tie_factors) {
  StableKoopmanOperator op;
  op.u_raw = random_gaussian(dim, dim, rng);
  op.v_raw = random_gaussian(dim, dim, rng);
  if (tie_factors) op.v_raw = op.u_raw;
  op.sigma_raw = Matrix(1, dim);
  op.rho_max = rho_max;
  op.tie_factors = tie_factors;
  op.validate();
  return op;
}

KoopmanVars koopman_graph(ParamResolver& P, const StableKoopmanOperator& op,
                          bool stop_gradient_qr) {
  KoopmanVars out;
  out.u = ad::qr_orthogonal(P(op.u_raw), stop_gradient_qr);
  out.v = op.tie_factors ? out.u : ad::qr_orthogonal(P(op.v_raw), stop_gradient_qr);
  out.sigma = ad::scale(ad::sigmoid(P(op.sigma_raw)), op.rho_max);
  out.k = ad::matmul_nt(ad::scale_columns(out.u, out.sigma), out.v);
  return out;
}

MaterializedKoopman materialize(const StableKoopmanOperator& op) {
  op.validate();
  ad::Tape tape;
  ConstantResolver resolve(tape);
  const KoopmanVars vars = koopman_graph(resolve, op);
  const auto& s = vars.sigma.value().values();
  return {vars.k.value(), vars.u.value(), vars.v.value(),
          Vector::from_data(std::vector<double>(s.begin(), s.end()))};
}

Vector apply(const StableKoopmanOperator& op, const Vector& z) {
  if (z.size() != op.dim()) throw ShapeError("koopman apply: latent length does not match operator");
  return materialize(op).k * z;
}

std::vector<Vector> rollout(const StableKoopmanOperator& op, const Vector& z0, std::size_t h) {
  if (z0.size() != op.dim())
    throw ShapeError("koopman rollout: latent length does not match operator");
  std::vector<Vector> out;
  if (h == 0) return out;
  const Matrix k = materialize(op).k;
  out.reserve(h);
  Vector z = z0;
  for (std::size_t j = 0; j < h; ++j) {
    z = k * z;
    out.push_back(z);
  }
  return out;
}

double perturbation_bound(const StableKoopmanOperator& op, double decoder_norm, std::size_t h,
                          double delta_z_norm) {
  if (decoder_norm < 0.0 || delta_z_norm < 0.0)
    throw ConfigError("perturbation_bound: norms must be nonnegative");
  return decoder_norm * std::pow(op.rho_max, static_cast<double>(h)) * delta_z_norm;
}

double spectral_trace_entry(const StableKoopmanOperator& op) {
  op.validate();
  const auto raw = op.sigma_raw.values();
  const double top = *std::max_element(raw.begin(), raw.end());
  return stable_sigmoid(top) * op.rho_max;
}

}  // namespace dkf
