#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "dkf/forecaster.hpp"

namespace dkf {

struct AuditCheck {
  std::string name;
  bool passed = true;
  std::size_t cases = 0;
  /// Largest observed violation ratio or error, check-specific.
  double worst = 0.0;
  std::string detail;
};

struct AuditOptions {
  std::uint64_t seed = 2024;
  /// Multiplies every case count; 1.0 runs the full suites.
  double scale = 1.0;
};

AuditCheck audit_spectral_cap(const AuditOptions& opts = {});
AuditCheck audit_geometric_decay(const AuditOptions& opts = {});
AuditCheck audit_perturbation_bound(const AuditOptions& opts = {});
AuditCheck audit_orthogonality(const AuditOptions& opts = {});
AuditCheck audit_gradients(const AuditOptions& opts = {});
AuditCheck audit_sigma_gradient_bound(const AuditOptions& opts = {});
AuditCheck audit_probsparse_degeneracy(const AuditOptions& opts = {});
AuditCheck audit_decomposition(const AuditOptions& opts = {});
AuditCheck audit_windowing(const AuditOptions& opts = {});

/// Every suite above, in order.
std::vector<AuditCheck> run_all_audits(const AuditOptions& opts = {});

/// Invariants of one trained model: operator cap, orthogonal factors, latent
/// contraction and the certified output bound on seeded random latents.
std::vector<AuditCheck> audit_model(const DeepKoopFormerModel& model, const AuditOptions& opts = {});

}  // namespace dkf
