#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dkf/data.hpp"
#include "dkf/forecaster.hpp"

namespace dkf {

/// Flat registry of the trainable matrices of a model, in a stable order.
class ParameterSet {
 public:
  struct Entry {
    std::string name;
    Matrix* value;
  };

  explicit ParameterSet(DeepKoopFormerModel& model);

  std::size_t size() const noexcept { return entries_.size(); }
  const Entry& operator[](std::size_t i) const noexcept { return entries_[i]; }
  auto begin() const noexcept { return entries_.begin(); }
  auto end() const noexcept { return entries_.end(); }
  std::size_t scalar_count() const noexcept;

 private:
  std::vector<Entry> entries_;
};

struct TrainingConfig {
  std::size_t epochs = 100;
  double learning_rate = 1e-3;
  double lambda = 0.1;
  double rho_max = 0.99;
  /// 0 trains full-batch.
  std::size_t batch_size = 0;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  LyapunovMode lyapunov_mode = LyapunovMode::all_pairs;
  bool stop_gradient_qr = false;
  /// Windows per tape during gradient evaluation; only affects memory.
  std::size_t chunk_windows = 128;

  void validate() const;
};

/// Loss terms and one gradient per ParameterSet entry.
struct Gradient {
  LossTerms loss;
  std::vector<Matrix> grads;
};

/// Batch-mean loss and its exact reverse-mode gradient. Windows are processed
/// in fixed-size chunks in index order, so the result is deterministic.
/// Throws NumericError naming the parameter when a gradient is non-finite.
Gradient loss_and_gradient(const DeepKoopFormerModel& model, const WindowBatch& batch,
                           const TrainingConfig& cfg);

/// Batch-mean loss without gradients.
LossTerms evaluate_loss(const DeepKoopFormerModel& model, const WindowBatch& batch,
                        double lambda, LyapunovMode mode = LyapunovMode::all_pairs);

struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::size_t step = 0;
};

/// One bias-corrected Adam update in place.
void adam_step(ParameterSet& params, const std::vector<Matrix>& grads, AdamState& state,
               const TrainingConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double total_loss = 0.0;
  double mse = 0.0;
  double lyap = 0.0;
  double spectral_radius = 0.0;
  double seconds = 0.0;
};

struct TrainingTrace {
  std::vector<EpochRecord> epochs;

  /// Columns: epoch,total_loss,mse,lyap,spectral_radius,seconds.
  void write_csv(const std::filesystem::path& path) const;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Adam training loop. The loss of each epoch is the window-weighted mean of
/// the batch losses seen during that epoch; the spectral entry is taken after
/// the epoch's last update. Mini-batch order is shuffled from cfg.seed.
TrainingTrace train(DeepKoopFormerModel& model, const WindowBatch& windows,
                    const TrainingConfig& cfg, const EpochCallback& on_epoch = {});

struct FiniteDifferenceOptions {
  double epsilon = 1e-5;
  std::size_t max_coordinates = 500;
  std::uint64_t seed = 0;
  double abs_tol = 1e-8;
  double lambda = 0.1;
  LyapunovMode lyapunov_mode = LyapunovMode::all_pairs;
};

struct FiniteDifferenceReport {
  double max_rel_error = 0.0;
  /// Without the abs_tol exemption.
  double max_raw_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t coordinates = 0;
  std::string worst_parameter;
};

/// Compares reverse-mode gradients with central differences of the batch loss
/// on a seeded subset of coordinates. Coordinates whose absolute discrepancy is
/// within abs_tol count as exact.
FiniteDifferenceReport finite_difference_check(const DeepKoopFormerModel& model,
                                               const WindowBatch& sample,
                                               const FiniteDifferenceOptions& opts = {});

struct SigmaGradientAudit {
  double measured = 0.0;  // max_ij |d x_hat_{t+1,j} / d sigma_raw_i|
  double bound = 0.0;     // spectral_norm(W) rho_max ‖z_t‖ / 4
};

/// One-step sensitivity of the decoded forecast to the raw singular values.
SigmaGradientAudit sigma_gradient_bound_audit(const DeepKoopFormerModel& model, const Matrix& x);

}  // namespace dkf
