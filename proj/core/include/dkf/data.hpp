#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dkf/linalg.hpp"

namespace dkf {

struct TimeSeries {
  Matrix values;  // T x d
  double dt = 1.0;
  std::vector<std::string> channel_names;

  std::size_t length() const noexcept { return values.rows(); }
  std::size_t channels() const noexcept { return values.cols(); }
  void validate() const;
};

/// Stacked context/target pairs. Window b occupies rows [b*P, (b+1)*P) of x and
/// rows [b*H, (b+1)*H) of y.
struct WindowBatch {
  Matrix x;  // B*P x d
  Matrix y;  // B*H x d
  std::size_t context = 0;  // P
  std::size_t horizon = 0;  // H

  std::size_t size() const noexcept { return context == 0 ? 0 : x.rows() / context; }
  std::size_t channels() const noexcept { return x.cols(); }
  Matrix input(std::size_t b) const;
  Matrix target(std::size_t b) const;
  /// Windows [first, first + count).
  WindowBatch slice(std::size_t first, std::size_t count) const;
  /// Windows in the given order.
  WindowBatch gather(const std::vector<std::size_t>& order) const;
};

enum class DynamicalSystem { van_der_pol, lorenz };

std::string_view to_string(DynamicalSystem s) noexcept;
DynamicalSystem parse_system(std::string_view name);

struct SimulatorConfig {
  DynamicalSystem system = DynamicalSystem::van_der_pol;
  double mu = 1.0;
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
  double dt = 0.01;
  double t_end = 20.0;
  double noise_std = 0.02;
  std::uint64_t seed = 0;
  /// Empty selects (2, 0) for Van der Pol and (1, 1, 1) for Lorenz.
  std::vector<double> initial_state;

  /// round(t_end / dt) + 1 samples, the initial state included.
  std::size_t samples() const;
  std::vector<double> start() const;
  void validate() const;
};

/// Van der Pol settings of the desk experiment: mu 1, dt 0.01, 20 s, noise 0.02.
SimulatorConfig van_der_pol_defaults();
/// Lorenz settings: sigma 10, rho 28, beta 8/3, dt 0.01, noise 0.1.
SimulatorConfig lorenz_defaults();

/// Explicit Euler with additive Gaussian process noise after every step.
TimeSeries simulate_van_der_pol(const SimulatorConfig& cfg);
TimeSeries simulate_lorenz(const SimulatorConfig& cfg);
TimeSeries simulate(const SimulatorConfig& cfg);

/// All T - P - H + 1 sliding windows of a T x d series.
WindowBatch make_windows(const Matrix& series, std::size_t context, std::size_t horizon);

class MinMaxScaler {
 public:
  MinMaxScaler() = default;
  MinMaxScaler(std::vector<double> min, std::vector<double> max);

  void fit(const Matrix& data);
  bool fitted() const noexcept { return !min_.empty(); }
  /// Maps [min, max] to [0, 1] per channel; constant channels map to 0.
  Matrix transform(const Matrix& data) const;
  Matrix inverse_transform(const Matrix& data) const;

  const std::vector<double>& min() const noexcept { return min_; }
  const std::vector<double>& max() const noexcept { return max_; }

 private:
  void check(const Matrix& data, const char* op) const;
  std::vector<double> min_;
  std::vector<double> max_;
};

struct CsvOptions {
  /// Column names to read in order; empty reads every column.
  std::vector<std::string> columns;
  /// Splits a single selected column into this many equal-length parallel channels.
  std::size_t split_into = 1;
  double dt = 1.0;
};

TimeSeries load_csv(const std::filesystem::path& path, const CsvOptions& opts = {});
void write_csv(const TimeSeries& series, const std::filesystem::path& path);

/// Chronological split: the first round(fraction * T) steps train, the rest test.
std::pair<TimeSeries, TimeSeries> train_test_split(const TimeSeries& series, double fraction);
/// Chronological split of a window batch by window index.
std::pair<WindowBatch, WindowBatch> train_test_split(const WindowBatch& windows, double fraction);

}  // namespace dkf
