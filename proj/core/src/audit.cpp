#include "dkf/audit.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "dkf/data.hpp"
#include "dkf/error.hpp"
#include "dkf/training.hpp"

namespace dkf {

namespace {

std::size_t count(std::size_t full, const AuditOptions& o) {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(static_cast<double>(full) * o.scale)));
}

std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

double uniform_real(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

Vector random_vector(std::mt19937_64& rng, std::size_t n) {
  std::normal_distribution<double> g;
  Vector v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = g(rng);
  return v;
}

StableKoopmanOperator random_operator(std::mt19937_64& rng, std::size_t d) {
  const double rho = uniform_real(rng, 0.5, 0.99);
  StableKoopmanOperator op = StableKoopmanOperator::init(d, rho, rng, uniform(rng, 0, 3) == 0);
  op.sigma_raw = random_gaussian(1, d, rng, 3.0);
  return op;
}

double gram_defect(const Matrix& q) {
  Matrix g = q.transposed() * q;
  for (std::size_t i = 0; i < g.rows(); ++i) g(i, i) -= 1.0;
  return frobenius_norm(g);
}

EncoderConfig tiny_config(EncoderVariant v) {
  EncoderConfig c;
  c.variant = v;
  c.context_len = 8;
  c.channels = 2;
  c.d_model = 4;
  c.n_layers = 1;
  c.n_heads = 2;
  c.ffn_width = 8;
  c.patch_len = 4;
  c.ma_kernel = 3;
  return c;
}

DeepKoopFormerModel random_tiny_model(std::mt19937_64& rng, std::size_t i, std::size_t horizon) {
  const EncoderVariant v = static_cast<EncoderVariant>(i % 3);
  DeepKoopFormerModel m = init_model(tiny_config(v), horizon, rng());
  m.koop.sigma_raw = random_gaussian(1, m.cfg.d_model, rng, 2.0);
  if (m.has_trend_head()) m.trend_head = random_gaussian(horizon, m.cfg.context_len, rng, 0.3);
  return m;
}

Vector decode(const Matrix& w, const Vector& z) { return w * z; }

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(12);
  os << v;
  return os.str();
}

void rollout_bound_cases(AuditCheck& c, const Matrix& k, const Matrix& w, double rho,
                         double w_norm, const Vector& z0, const Vector& dz, std::size_t steps) {
  Vector a = z0;
  Vector b = z0;
  for (std::size_t i = 0; i < z0.size(); ++i) b[i] += dz[i];
  const double dz_norm = dz.norm();
  for (std::size_t h = 1; h <= steps; ++h) {
    a = k * a;
    b = k * b;
    const Vector diff = decode(w, a) - decode(w, b);
    const double bound = w_norm * std::pow(rho, static_cast<double>(h)) * dz_norm;
    const double measured = diff.norm();
    if (bound > 0.0) c.worst = std::max(c.worst, measured / bound);
    if (measured > bound * (1.0 + 1e-8) + 1e-300) c.passed = false;
  }
}

}  // namespace

AuditCheck audit_spectral_cap(const AuditOptions& o) {
  AuditCheck c{"spectral_cap", true, 0, 0.0, {}};
  std::mt19937_64 rng(o.seed);
  for (std::size_t i = 0, n = count(1000, o); i < n; ++i, ++c.cases) {
    const StableKoopmanOperator op = random_operator(rng, uniform(rng, 2, 64));
    const double s = spectral_norm(materialize(op).k);
    c.worst = std::max(c.worst, s / op.rho_max);
    if (s > op.rho_max + 1e-8) c.passed = false;
  }
  c.detail = "max spectral_norm(K) / rho_max = " + fmt(c.worst);
  return c;
}

AuditCheck audit_geometric_decay(const AuditOptions& o) {
  AuditCheck c{"geometric_decay", true, 0, 0.0, {}};
  std::mt19937_64 rng(o.seed + 1);
  for (std::size_t i = 0, n = count(200, o); i < n; ++i, ++c.cases) {
    const StableKoopmanOperator op = random_operator(rng, uniform(rng, 2, 32));
    const Vector z0 = random_vector(rng, op.dim());
    const auto traj = rollout(op, z0, 100);
    for (std::size_t j = 0; j < traj.size(); ++j) {
      const double env = std::pow(op.rho_max, static_cast<double>(j + 1)) * z0.norm();
      c.worst = std::max(c.worst, traj[j].norm() / env);
      if (traj[j].norm() > env * (1.0 + 1e-8)) c.passed = false;
    }
  }
  c.detail = "max ‖K^h z0‖ / (rho^h ‖z0‖) = " + fmt(c.worst);
  return c;
}

AuditCheck audit_perturbation_bound(const AuditOptions& o) {
  AuditCheck c{"perturbation_bound", true, 0, 0.0, {}};
  std::mt19937_64 rng(o.seed + 2);
  for (std::size_t i = 0, n = count(100, o); i < n; ++i, ++c.cases) {
    const DeepKoopFormerModel m = random_tiny_model(rng, i, 2);
    const Matrix x = random_gaussian(m.cfg.context_len, m.cfg.channels, rng);
    const Vector z0 = forward(m, x).latent_trajectory.front();
    Vector dz = random_vector(rng, z0.size());
    const double s = std::pow(10.0, uniform_real(rng, -6.0, 0.0));
    for (std::size_t k = 0; k < dz.size(); ++k) dz[k] *= s;
    rollout_bound_cases(c, materialize(m.koop).k, m.decoder, m.koop.rho_max,
                        spectral_norm(m.decoder), z0, dz, 50);
  }
  c.detail = "max measured / certified deviation = " + fmt(c.worst);
  return c;
}

AuditCheck audit_orthogonality(const AuditOptions& o) {
  AuditCheck c{"orthogonality", true, 0, 0.0, {}};
  std::mt19937_64 rng(o.seed + 3);
  for (std::size_t i = 0, n = count(300, o); i < n; ++i, ++c.cases) {
    const MaterializedKoopman mk = materialize(random_operator(rng, uniform(rng, 2, 64)));
    c.worst = std::max({c.worst, gram_defect(mk.u), gram_defect(mk.v)});
  }
  c.passed = c.worst <= 1e-10;
  c.detail = "max ‖QᵀQ - I‖_F = " + fmt(c.worst);
  return c;
}

AuditCheck audit_gradients(const AuditOptions& o) {
  AuditCheck c{"gradient_finite_difference", true, 0, 0.0, {}};
  std::mt19937_64 rng(o.seed + 4);
  std::string worst_name;
  for (std::size_t i = 0, n = count(20, o); i < n; ++i, ++c.cases) {
    const DeepKoopFormerModel m = random_tiny_model(rng, i, 2);
    const Matrix series = random_gaussian(13, 2, rng);
    const WindowBatch batch = make_windows(series, 8, 2);
    FiniteDifferenceOptions fo;
    fo.seed = rng();
    const FiniteDifferenceReport r = finite_difference_check(m, batch, fo);
    if (r.max_rel_error > c.worst) {
      c.worst = r.max_rel_error;
      worst_name = r.worst_parameter;
    }
  }
  c.passed = c.worst <= 1e-4;
  c.detail = "max relative error = " + fmt(c.worst) + (worst_name.empty() ? "" : " at " + worst_name);
  return c;
}

AuditCheck audit_sigma_gradient_bound(const AuditOptions& o) {
  AuditCheck c{"sigma_gradient_bound", true, 0, 0.0, {}};
  std::mt19937_64 rng(o.seed + 5);
  for (std::size_t i = 0, n = count(100, o); i < n; ++i, ++c.cases) {
    const DeepKoopFormerModel m = random_tiny_model(rng, i, 1);
    const Matrix x = random_gaussian(m.cfg.context_len, m.cfg.channels, rng);
    const SigmaGradientAudit a = sigma_gradient_bound_audit(m, x);
    if (a.bound > 0.0) c.worst = std::max(c.worst, a.measured / a.bound);
    if (a.measured > a.bound * (1.0 + 1e-10)) c.passed = false;
  }
  c.detail = "max measured / bound = " + fmt(c.worst);
  return c;
}

AuditCheck audit_probsparse_degeneracy(const AuditOptions& o) {
  AuditCheck c{"probsparse_degeneracy", true, 0, 0.0, {}};
  std::mt19937_64 rng(o.seed + 6);
  for (std::size_t i = 0, n = count(100, o); i < n; ++i, ++c.cases) {
    const std::size_t tokens = uniform(rng, 1, 24);
    const std::size_t width = uniform(rng, 1, 8);
    const Matrix q = random_gaussian(tokens, width, rng);
    const Matrix k = random_gaussian(tokens, width, rng);
    const Matrix v = random_gaussian(tokens, width, rng);
    const double factor = 1e6;  // u = min(n, ceil(c ln(n+1))) = n
    c.worst = std::max(c.worst, max_abs_diff(probsparse_attention(q, k, v, factor),
                                             full_attention(q, k, v)));
  }
  c.passed = c.worst <= 1e-12;
  c.detail = "max |probsparse - full| = " + fmt(c.worst);
  return c;
}

AuditCheck audit_decomposition(const AuditOptions& o) {
  AuditCheck c{"decomposition_identity", true, 0, 0.0, {}};
  std::mt19937_64 rng(o.seed + 7);
  std::size_t mismatched = 0, entries = 0;
  for (std::size_t i = 0, n = count(100, o); i < n; ++i, ++c.cases) {
    const std::size_t rows = uniform(rng, 8, 128);
    const Matrix x = random_gaussian(rows, uniform(rng, 1, 4), rng);
    const std::size_t kernel = 2 * uniform(rng, 0, (rows - 1) / 2) + 1;
    const Decomposition d = decompose(x, kernel);
    const Matrix back = d.trend + d.seasonal;
    for (std::size_t j = 0; j < x.size(); ++j, ++entries) {
      if (back.data()[j] != x.data()[j]) ++mismatched;
      c.worst = std::max(c.worst, std::abs(back.data()[j] - x.data()[j]));
    }
  }
  c.passed = mismatched == 0;
  c.detail = std::to_string(mismatched) + " of " + std::to_string(entries) +
             " entries differ from the input; max |trend + seasonal - x| = " + fmt(c.worst);
  return c;
}

AuditCheck audit_windowing(const AuditOptions& o) {
  AuditCheck c{"windowing", true, 0, 0.0, {}};
  std::mt19937_64 rng(o.seed + 8);
  for (std::size_t i = 0, n = count(200, o); i < n; ++i, ++c.cases) {
    const std::size_t P = uniform(rng, 1, 20);
    const std::size_t H = uniform(rng, 1, 10);
    const std::size_t T = P + H + uniform(rng, 0, 60);
    const Matrix s = random_gaussian(T, uniform(rng, 1, 3), rng);
    const WindowBatch w = make_windows(s, P, H);
    if (w.size() != T - P - H + 1) c.passed = false;
    for (std::size_t b = 0; b < w.size() && c.passed; ++b)
      for (std::size_t ch = 0; ch < s.cols(); ++ch) {
        for (std::size_t t = 0; t < P; ++t)
          if (w.x(b * P + t, ch) != s(b + t, ch)) c.passed = false;
        for (std::size_t t = 0; t < H; ++t)
          if (w.y(b * H + t, ch) != s(b + P + t, ch)) c.passed = false;
      }
  }
  c.detail = c.passed ? "batch size and alignment verified" : "window misalignment detected";
  return c;
}

std::vector<AuditCheck> run_all_audits(const AuditOptions& o) {
  return {audit_spectral_cap(o),          audit_geometric_decay(o),
          audit_perturbation_bound(o),    audit_orthogonality(o),
          audit_gradients(o),             audit_sigma_gradient_bound(o),
          audit_probsparse_degeneracy(o), audit_decomposition(o),
          audit_windowing(o)};
}

std::vector<AuditCheck> audit_model(const DeepKoopFormerModel& model, const AuditOptions& o) {
  model.validate();
  const MaterializedKoopman mk = materialize(model.koop);
  const double rho = model.koop.rho_max;
  std::vector<AuditCheck> out;

  AuditCheck cap{"model_spectral_cap", true, 1, 0.0, {}};
  const double s = spectral_norm(mk.k);
  cap.worst = s - rho;
  cap.passed = s <= rho + 1e-8;
  cap.detail = "spectral_norm(K) = " + fmt(s) + ", rho_max = " + fmt(rho);
  out.push_back(cap);

  AuditCheck orth{"model_orthogonality", true, 1, 0.0, {}};
  orth.worst = std::max(gram_defect(mk.u), gram_defect(mk.v));
  orth.passed = orth.worst <= 1e-10;
  orth.detail = "max ‖QᵀQ - I‖_F = " + fmt(orth.worst);
  out.push_back(orth);

  std::mt19937_64 rng(o.seed);
  AuditCheck decay{"model_contraction", true, 0, 0.0, {}};
  AuditCheck pert{"model_perturbation_bound", true, 0, 0.0, {}};
  const double w_norm = spectral_norm(model.decoder);
  for (std::size_t i = 0, n = count(100, o); i < n; ++i) {
    const Vector z0 = random_vector(rng, model.latent_dim());
    Vector z = z0;
    for (std::size_t h = 1; h <= 50; ++h) {
      z = mk.k * z;
      const double env = std::pow(rho, static_cast<double>(h)) * z0.norm();
      decay.worst = std::max(decay.worst, z.norm() / env);
      if (z.norm() > env * (1.0 + 1e-8)) decay.passed = false;
    }
    ++decay.cases;
    Vector dz = random_vector(rng, model.latent_dim());
    rollout_bound_cases(pert, mk.k, model.decoder, rho, w_norm, z0, dz, 50);
    ++pert.cases;
  }
  decay.detail = "max ‖K^h z0‖ / (rho^h ‖z0‖) = " + fmt(decay.worst);
  pert.detail = "max measured / certified deviation = " + fmt(pert.worst);
  out.push_back(decay);
  out.push_back(pert);
  return out;
}

}  // namespace dkf
