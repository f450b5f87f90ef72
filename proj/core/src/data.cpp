#include "dkf/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "dkf/error.hpp"

namespace dkf {

namespace {

Matrix copy_rows(const Matrix& m, std::size_t first, std::size_t count) {
  const std::size_t cols = m.cols();
  Matrix out(count, cols);
  std::copy(m.data() + first * cols, m.data() + (first + count) * cols, out.data());
  return out;
}

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\"");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\"");
  return std::string(s.substr(b, e - b + 1));
}

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> cells;
  std::size_t start = 0;
  while (true) {
    const auto comma = line.find(',', start);
    cells.push_back(trim(std::string_view(line).substr(start, comma - start)));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return cells;
}

}  // namespace

void TimeSeries::validate() const {
  if (values.rows() == 0 || values.cols() == 0) throw ConfigError("time series is empty");
  if (!values.all_finite()) throw NumericError("time series contains non-finite values");
  if (!(dt > 0.0)) throw ConfigError("time series dt must be positive");
  if (!channel_names.empty() && channel_names.size() != values.cols())
    throw ShapeError("time series has " + std::to_string(values.cols()) + " channels but " +
                     std::to_string(channel_names.size()) + " names");
}

Matrix WindowBatch::input(std::size_t b) const { return copy_rows(x, b * context, context); }
Matrix WindowBatch::target(std::size_t b) const { return copy_rows(y, b * horizon, horizon); }

WindowBatch WindowBatch::slice(std::size_t first, std::size_t count) const {
  if (first + count > size()) throw ShapeError("window slice out of range");
  return {copy_rows(x, first * context, count * context),
          copy_rows(y, first * horizon, count * horizon), context, horizon};
}

WindowBatch WindowBatch::gather(const std::vector<std::size_t>& order) const {
  const std::size_t d = channels();
  WindowBatch out{Matrix(order.size() * context, d), Matrix(order.size() * horizon, d), context,
                  horizon};
  for (std::size_t i = 0; i < order.size(); ++i) {
    const std::size_t b = order[i];
    if (b >= size()) throw ShapeError("window index out of range");
    std::copy(x.data() + b * context * d, x.data() + (b + 1) * context * d,
              out.x.data() + i * context * d);
    std::copy(y.data() + b * horizon * d, y.data() + (b + 1) * horizon * d,
              out.y.data() + i * horizon * d);
  }
  return out;
}

std::string_view to_string(DynamicalSystem s) noexcept {
  return s == DynamicalSystem::van_der_pol ? "van_der_pol" : "lorenz";
}

DynamicalSystem parse_system(std::string_view name) {
  if (name == "van_der_pol" || name == "vdp") return DynamicalSystem::van_der_pol;
  if (name == "lorenz") return DynamicalSystem::lorenz;
  throw ConfigError("unknown system '" + std::string(name) + "' (expected van_der_pol or lorenz)");
}

std::size_t SimulatorConfig::samples() const {
  validate();
  return static_cast<std::size_t>(std::llround(t_end / dt)) + 1;
}

std::vector<double> SimulatorConfig::start() const {
  if (!initial_state.empty()) return initial_state;
  if (system == DynamicalSystem::van_der_pol) return {2.0, 0.0};
  return {1.0, 1.0, 1.0};
}

void SimulatorConfig::validate() const {
  if (!(dt > 0.0) || !std::isfinite(dt)) throw ConfigError("simulator dt must be positive");
  if (!(t_end > 0.0) || !std::isfinite(t_end))
    throw ConfigError("simulator T_end must be positive");
  if (!(noise_std >= 0.0) || !std::isfinite(noise_std))
    throw ConfigError("simulator noise std must be nonnegative");
  const std::size_t dim = system == DynamicalSystem::van_der_pol ? 2 : 3;
  if (!initial_state.empty() && initial_state.size() != dim)
    throw ConfigError("initial state for " + std::string(to_string(system)) + " needs " +
                      std::to_string(dim) + " entries");
  for (double v : initial_state)
    if (!std::isfinite(v)) throw ConfigError("initial state must be finite");
}

SimulatorConfig van_der_pol_defaults() { return SimulatorConfig{}; }

SimulatorConfig lorenz_defaults() {
  SimulatorConfig c;
  c.system = DynamicalSystem::lorenz;
  c.noise_std = 0.1;
  return c;
}

namespace {

template <class Field>
TimeSeries euler(const SimulatorConfig& cfg, std::vector<std::string> names, Field&& f) {
  const std::size_t n = cfg.samples();
  std::vector<double> state = cfg.start();
  const std::size_t d = state.size();
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> noise(0.0, cfg.noise_std > 0.0 ? cfg.noise_std : 1.0);
  TimeSeries ts;
  ts.values = Matrix(n, d);
  ts.dt = cfg.dt;
  ts.channel_names = std::move(names);
  std::vector<double> rate(d);
  for (std::size_t t = 0; t < n; ++t) {
    if (t > 0) {
      f(state, rate);
      for (std::size_t i = 0; i < d; ++i) state[i] += cfg.dt * rate[i];
      if (cfg.noise_std > 0.0)
        for (std::size_t i = 0; i < d; ++i) state[i] += noise(rng);
    }
    for (std::size_t i = 0; i < d; ++i) {
      if (!std::isfinite(state[i]))
        throw NumericError("simulation diverged at step " + std::to_string(t));
      ts.values(t, i) = state[i];
    }
  }
  return ts;
}

}  // namespace

TimeSeries simulate_van_der_pol(const SimulatorConfig& cfg) {
  if (cfg.system != DynamicalSystem::van_der_pol)
    throw ConfigError("simulate_van_der_pol called with a non-Van der Pol config");
  cfg.validate();
  const double mu = cfg.mu;
  return euler(cfg, {"x1", "x2"}, [mu](const std::vector<double>& s, std::vector<double>& r) {
    r[0] = s[1];
    r[1] = mu * (1.0 - s[0] * s[0]) * s[1] - s[0];
  });
}

TimeSeries simulate_lorenz(const SimulatorConfig& cfg) {
  if (cfg.system != DynamicalSystem::lorenz)
    throw ConfigError("simulate_lorenz called with a non-Lorenz config");
  cfg.validate();
  const double sg = cfg.sigma, rh = cfg.rho, bt = cfg.beta;
  return euler(cfg, {"x1", "x2", "x3"},
               [sg, rh, bt](const std::vector<double>& s, std::vector<double>& r) {
                 r[0] = sg * (s[1] - s[0]);
                 r[1] = s[0] * (rh - s[2]) - s[1];
                 r[2] = s[0] * s[1] - bt * s[2];
               });
}

TimeSeries simulate(const SimulatorConfig& cfg) {
  return cfg.system == DynamicalSystem::van_der_pol ? simulate_van_der_pol(cfg)
                                                    : simulate_lorenz(cfg);
}

WindowBatch make_windows(const Matrix& series, std::size_t context, std::size_t horizon) {
  if (context == 0 || horizon == 0) throw ConfigError("context and horizon must be positive");
  const std::size_t T = series.rows();
  if (T < context + horizon)
    throw ConfigError("series of length " + std::to_string(T) + " is too short for P=" +
                      std::to_string(context) + ", H=" + std::to_string(horizon));
  const std::size_t B = T - context - horizon + 1;
  const std::size_t d = series.cols();
  WindowBatch w{Matrix(B * context, d), Matrix(B * horizon, d), context, horizon};
  for (std::size_t b = 0; b < B; ++b) {
    std::copy(series.data() + b * d, series.data() + (b + context) * d,
              w.x.data() + b * context * d);
    std::copy(series.data() + (b + context) * d, series.data() + (b + context + horizon) * d,
              w.y.data() + b * horizon * d);
  }
  return w;
}

MinMaxScaler::MinMaxScaler(std::vector<double> min, std::vector<double> max)
    : min_(std::move(min)), max_(std::move(max)) {
  if (min_.size() != max_.size()) throw ShapeError("scaler min/max lengths differ");
  for (std::size_t c = 0; c < min_.size(); ++c)
    if (!(max_[c] >= min_[c])) throw ConfigError("scaler max below min on channel " + std::to_string(c));
}

void MinMaxScaler::fit(const Matrix& data) {
  if (data.rows() == 0 || data.cols() == 0) throw ConfigError("cannot fit a scaler on empty data");
  if (!data.all_finite()) throw NumericError("cannot fit a scaler on non-finite data");
  min_.assign(data.cols(), 0.0);
  max_.assign(data.cols(), 0.0);
  for (std::size_t c = 0; c < data.cols(); ++c) {
    min_[c] = max_[c] = data(0, c);
    for (std::size_t r = 1; r < data.rows(); ++r) {
      min_[c] = std::min(min_[c], data(r, c));
      max_[c] = std::max(max_[c], data(r, c));
    }
  }
}

void MinMaxScaler::check(const Matrix& data, const char* op) const {
  if (!fitted()) throw ConfigError(std::string("MinMaxScaler::") + op + " before fit");
  if (data.cols() != min_.size())
    throw ShapeError(std::string("MinMaxScaler::") + op + ": expected " +
                     std::to_string(min_.size()) + " channels, got " +
                     std::to_string(data.cols()));
}

Matrix MinMaxScaler::transform(const Matrix& data) const {
  check(data, "transform");
  Matrix out(data.rows(), data.cols());
  for (std::size_t r = 0; r < data.rows(); ++r)
    for (std::size_t c = 0; c < data.cols(); ++c) {
      const double range = max_[c] - min_[c];
      out(r, c) = range > 0.0 ? (data(r, c) - min_[c]) / range : 0.0;
    }
  return out;
}

Matrix MinMaxScaler::inverse_transform(const Matrix& data) const {
  check(data, "inverse_transform");
  Matrix out(data.rows(), data.cols());
  for (std::size_t r = 0; r < data.rows(); ++r)
    for (std::size_t c = 0; c < data.cols(); ++c)
      out(r, c) = min_[c] + data(r, c) * (max_[c] - min_[c]);
  return out;
}

TimeSeries load_csv(const std::filesystem::path& path, const CsvOptions& opts) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open CSV file: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw IoError("CSV file has no header row: " + path.string());
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  const std::vector<std::string> header = split_line(line);

  std::vector<std::size_t> picked;
  std::vector<std::string> names;
  if (opts.columns.empty()) {
    for (std::size_t i = 0; i < header.size(); ++i) picked.push_back(i);
    names = header;
  } else {
    for (const auto& col : opts.columns) {
      const auto it = std::find(header.begin(), header.end(), col);
      if (it == header.end())
        throw ConfigError("column '" + col + "' not found in " + path.string());
      picked.push_back(static_cast<std::size_t>(it - header.begin()));
      names.push_back(col);
    }
  }

  std::vector<double> values;
  std::size_t rows = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const std::vector<std::string> cells = split_line(line);
    if (cells.size() != header.size())
      throw IoError(path.string() + ": row " + std::to_string(line_no) + " has " +
                    std::to_string(cells.size()) + " cells, header has " +
                    std::to_string(header.size()));
    for (std::size_t idx : picked) {
      const std::string& cell = cells[idx];
      double v = 0.0;
      const auto [ptr, ec] = std::from_chars(cell.data(), cell.data() + cell.size(), v);
      if (ec != std::errc{} || ptr != cell.data() + cell.size() || cell.empty() ||
          !std::isfinite(v))
        throw IoError(path.string() + ": cannot parse '" + cell + "' at row " +
                      std::to_string(line_no) + ", column '" + header[idx] + "'");
      values.push_back(v);
    }
    ++rows;
  }
  if (rows == 0) throw IoError("CSV file has no data rows: " + path.string());

  TimeSeries ts;
  ts.dt = opts.dt;
  const std::size_t n = opts.split_into;
  if (n == 0) throw ConfigError("split_into must be positive");
  if (n == 1) {
    ts.values = Matrix::from_data(rows, picked.size(), std::move(values));
    ts.channel_names = std::move(names);
  } else {
    if (picked.size() != 1) throw ConfigError("column splitting needs exactly one selected column");
    if (rows % n != 0)
      throw ConfigError("column of length " + std::to_string(rows) +
                        " cannot be split into " + std::to_string(n) + " equal segments");
    const std::size_t len = rows / n;
    ts.values = Matrix(len, n);
    for (std::size_t s = 0; s < n; ++s) {
      for (std::size_t t = 0; t < len; ++t) ts.values(t, s) = values[s * len + t];
      ts.channel_names.push_back(names.front() + "_" + std::to_string(s + 1));
    }
  }
  ts.validate();
  return ts;
}

void write_csv(const TimeSeries& series, const std::filesystem::path& path) {
  series.validate();
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open CSV for writing: " + path.string());
  for (std::size_t c = 0; c < series.channels(); ++c) {
    if (c) out << ',';
    out << (series.channel_names.empty() ? "x" + std::to_string(c + 1) : series.channel_names[c]);
  }
  out << '\n';
  out.precision(17);
  for (std::size_t r = 0; r < series.length(); ++r) {
    for (std::size_t c = 0; c < series.channels(); ++c) {
      if (c) out << ',';
      out << series.values(r, c);
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing CSV: " + path.string());
}

namespace {

std::size_t split_point(std::size_t n, double fraction) {
  if (!(fraction > 0.0 && fraction < 1.0)) throw ConfigError("split fraction must lie in (0, 1)");
  return static_cast<std::size_t>(std::llround(fraction * static_cast<double>(n)));
}

}  // namespace

std::pair<TimeSeries, TimeSeries> train_test_split(const TimeSeries& series, double fraction) {
  const std::size_t cut = split_point(series.length(), fraction);
  if (cut == 0 || cut >= series.length())
    throw ConfigError("split leaves an empty train or test part");
  TimeSeries train{copy_rows(series.values, 0, cut), series.dt, series.channel_names};
  TimeSeries test{copy_rows(series.values, cut, series.length() - cut), series.dt,
                  series.channel_names};
  return {std::move(train), std::move(test)};
}

std::pair<WindowBatch, WindowBatch> train_test_split(const WindowBatch& windows, double fraction) {
  const std::size_t cut = split_point(windows.size(), fraction);
  if (cut == 0 || cut >= windows.size())
    throw ConfigError("split leaves an empty train or test part");
  return {windows.slice(0, cut), windows.slice(cut, windows.size() - cut)};
}

}  // namespace dkf
