#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "dkf/data.hpp"
#include "dkf/forecaster.hpp"
#include "dkf/training.hpp"

namespace dkf {

enum class DataSource { simulator, csv };

struct ExperimentConfig {
  DataSource source = DataSource::simulator;
  SimulatorConfig simulator;
  std::filesystem::path csv_path;
  std::vector<std::string> csv_columns;
  std::size_t csv_split = 1;

  EncoderVariant variant = EncoderVariant::patch;
  std::size_t context_len = 32;  // P
  std::size_t horizon = 5;       // H
  std::size_t patch_len = 16;    // p
  std::size_t d_model = 16;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t ffn_width = 32;
  PositionalEncoding pe_kind = PositionalEncoding::sinusoidal;
  std::size_t ma_kernel = 15;
  double probsparse_factor = 5.0;
  bool tie_factors = false;
  bool trend_head = true;

  double rho_max = 0.99;
  double lambda = 0.1;
  std::size_t epochs = 1000;
  double learning_rate = 1e-3;
  std::size_t batch_size = 0;
  LyapunovMode lyapunov_mode = LyapunovMode::all_pairs;
  bool stop_gradient_qr = false;
  std::uint64_t seed = 0;
  double train_fraction = 0.8;
  bool scale = true;
  /// Report metrics in the original units instead of the scaled [0, 1] domain.
  bool inverse_metrics = false;

  std::filesystem::path output_dir;

  EncoderConfig encoder_config(std::size_t channels) const;
  TrainingConfig training_config() const;
  void validate() const;
  /// Stable 16-hex-digit hash of every field that influences results.
  std::string fingerprint() const;
};

/// Van der Pol desk configuration for one encoder variant.
ExperimentConfig van_der_pol_experiment(EncoderVariant variant, std::uint64_t seed);
/// Lorenz smoke configuration (P = 150, p = 50, 300 epochs, patch variant).
ExperimentConfig lorenz_experiment(std::uint64_t seed);

std::string config_to_json(const ExperimentConfig& cfg);
ExperimentConfig config_from_json(const std::string& text);

struct MetricsRecord {
  std::string fingerprint;
  std::string split;  // "train" or "test"
  double mse = 0.0;
  double mae = 0.0;
  double wall_seconds = 0.0;
  double final_spectral_radius = 0.0;
  std::string variant;
  std::size_t patch_len = 0;
  std::size_t horizon = 0;
  std::size_t d_model = 0;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  /// Set when a grid cell failed; metrics are then meaningless.
  std::string error;

  std::string to_json_line() const;
  static MetricsRecord from_json_line(const std::string& line);
  /// Equality of everything except the wall-clock time.
  bool same_result(const MetricsRecord& other) const;
};

struct Metrics {
  double mse = 0.0;
  double mae = 0.0;
};
Metrics compute_metrics(const Matrix& y_hat, const Matrix& y);

/// Loaded or simulated series split and scaled the way run_experiment does it.
struct PreparedData {
  TimeSeries train;  // scaled when cfg.scale
  TimeSeries test;
  MinMaxScaler scaler;  // unfitted when scaling is off
  WindowBatch train_windows;
  WindowBatch test_windows;
};
PreparedData prepare_data(const ExperimentConfig& cfg);

struct ExperimentResult {
  MetricsRecord train;
  MetricsRecord test;
  TrainingTrace trace;
  DeepKoopFormerModel model;
  MinMaxScaler scaler;
  std::vector<std::string> channel_names;
  double dt = 1.0;
  std::size_t test_offset = 0;  // index of the first test step in the full series
  Matrix test_prediction;       // B*H x d, window-major, scaled domain
  Matrix test_truth;
};

/// Simulate or load, scale on the training part, window each split, train,
/// evaluate both splits and, when cfg.output_dir is set, persist metrics.jsonl,
/// trace.csv, checkpoint.json and plot data.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const EpochCallback& on_epoch = {});

/// Metrics of a trained model on the test windows of cfg's data, using the
/// scaler recorded in the checkpoint metadata when present.
MetricsRecord evaluate_checkpoint(const std::filesystem::path& checkpoint,
                                  const ExperimentConfig& cfg);

/// Writes plot CSVs for a finished run into `dir`: predictions_<channel>.csv
/// (window,step,t,truth,prediction), eigen_trace.csv (epoch,spectral_radius).
void emit_plot_data(const ExperimentResult& result, const std::filesystem::path& dir);

enum class GridAxis { patch_len, d_model };

struct GridOptions {
  /// Append-only results file; existing successful cells are skipped.
  std::filesystem::path results_path;
  /// Called after every finished cell (1-based count of cells handled this call).
  std::function<void(std::size_t cell, const MetricsRecord& test)> on_cell;
};

struct GridResult {
  std::vector<MetricsRecord> records;  // train and test record per cell, grid order
  std::size_t computed = 0;
  std::size_t reused = 0;
  std::size_t failed = 0;
};

/// Per-cell seed hash(base_seed, p, H, d_model).
std::uint64_t cell_seed(std::uint64_t base_seed, std::size_t p, std::size_t horizon,
                        std::size_t d_model);

/// Cartesian sweep, H outermost, then p, then d_model. Each cell is an
/// independent run_experiment with its own seed; failures are recorded and the
/// sweep continues.
GridResult grid_search(const ExperimentConfig& base, const std::vector<std::size_t>& p_values,
                       const std::vector<std::size_t>& h_values,
                       const std::vector<std::size_t>& d_model_values,
                       const GridOptions& opts = {});

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);

/// Heatmap of test-split cells: one row per H, one column per p (or d_model).
void write_heatmap_csv(const std::vector<MetricsRecord>& records, GridAxis columns,
                       const std::string& metric, const std::filesystem::path& path);

}  // namespace dkf
