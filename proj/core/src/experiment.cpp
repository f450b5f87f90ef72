#include "dkf/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

#include "dkf/error.hpp"

namespace dkf {

namespace {

using json = nlohmann::json;

std::string lyapunov_name(LyapunovMode m) {
  return m == LyapunovMode::all_pairs ? "all_pairs" : "first_pair";
}

LyapunovMode parse_lyapunov(const std::string& s) {
  if (s == "all_pairs") return LyapunovMode::all_pairs;
  if (s == "first_pair") return LyapunovMode::first_pair;
  throw ConfigError("unknown Lyapunov mode '" + s + "'");
}

json config_json(const ExperimentConfig& c, bool with_output) {
  const SimulatorConfig& s = c.simulator;
  json j{
      {"source", c.source == DataSource::simulator ? "simulator" : "csv"},
      {"simulator",
       {{"system", std::string(to_string(s.system))},
        {"mu", s.mu},
        {"sigma", s.sigma},
        {"rho", s.rho},
        {"beta", s.beta},
        {"dt", s.dt},
        {"t_end", s.t_end},
        {"noise_std", s.noise_std},
        {"seed", s.seed},
        {"initial_state", s.initial_state}}},
      {"csv_path", c.csv_path.string()},
      {"csv_columns", c.csv_columns},
      {"csv_split", c.csv_split},
      {"variant", std::string(to_string(c.variant))},
      {"context_len", c.context_len},
      {"horizon", c.horizon},
      {"patch_len", c.patch_len},
      {"d_model", c.d_model},
      {"n_layers", c.n_layers},
      {"n_heads", c.n_heads},
      {"ffn_width", c.ffn_width},
      {"pe_kind", std::string(to_string(c.pe_kind))},
      {"ma_kernel", c.ma_kernel},
      {"probsparse_factor", c.probsparse_factor},
      {"tie_factors", c.tie_factors},
      {"trend_head", c.trend_head},
      {"rho_max", c.rho_max},
      {"lambda", c.lambda},
      {"epochs", c.epochs},
      {"learning_rate", c.learning_rate},
      {"batch_size", c.batch_size},
      {"lyapunov_mode", lyapunov_name(c.lyapunov_mode)},
      {"stop_gradient_qr", c.stop_gradient_qr},
      {"seed", c.seed},
      {"train_fraction", c.train_fraction},
      {"scale", c.scale},
      {"inverse_metrics", c.inverse_metrics}};
  if (with_output) j["output_dir"] = c.output_dir.string();
  return j;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec || !std::filesystem::is_directory(dir))
    throw IoError("cannot create directory " + dir.string());
}

std::ofstream open_out(const std::filesystem::path& path, std::ios::openmode mode = std::ios::out) {
  if (path.has_parent_path()) ensure_dir(path.parent_path());
  std::ofstream out(path, mode);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.precision(17);
  return out;
}

PreparedData prepare_data_with(const ExperimentConfig& cfg, const MinMaxScaler* fixed) {
  TimeSeries series;
  if (cfg.source == DataSource::simulator) {
    series = simulate(cfg.simulator);
  } else {
    CsvOptions opts;
    opts.columns = cfg.csv_columns;
    opts.split_into = cfg.csv_split;
    series = load_csv(cfg.csv_path, opts);
  }
  auto [train, test] = train_test_split(series, cfg.train_fraction);
  PreparedData d;
  if (fixed) {
    d.scaler = *fixed;
  } else if (cfg.scale) {
    d.scaler.fit(train.values);
  }
  if (d.scaler.fitted()) {
    train.values = d.scaler.transform(train.values);
    test.values = d.scaler.transform(test.values);
  }
  d.train_windows = make_windows(train.values, cfg.context_len, cfg.horizon);
  d.test_windows = make_windows(test.values, cfg.context_len, cfg.horizon);
  d.train = std::move(train);
  d.test = std::move(test);
  return d;
}

template <class E>
[[noreturn]] void rethrow_tagged(const E& e, const std::string& fp) {
  throw E("[config " + fp + "] " + e.what());
}

std::string format_cell(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

}  // namespace

EncoderConfig ExperimentConfig::encoder_config(std::size_t channels) const {
  EncoderConfig e;
  e.variant = variant;
  e.context_len = context_len;
  e.channels = channels;
  e.d_model = d_model;
  e.n_layers = n_layers;
  e.n_heads = n_heads;
  e.ffn_width = ffn_width;
  e.patch_len = patch_len;
  e.pe_kind = pe_kind;
  e.ma_kernel = ma_kernel;
  e.probsparse_factor = probsparse_factor;
  return e;
}

TrainingConfig ExperimentConfig::training_config() const {
  TrainingConfig t;
  t.epochs = epochs;
  t.learning_rate = learning_rate;
  t.lambda = lambda;
  t.rho_max = rho_max;
  t.batch_size = batch_size;
  t.seed = seed;
  t.lyapunov_mode = lyapunov_mode;
  t.stop_gradient_qr = stop_gradient_qr;
  return t;
}

void ExperimentConfig::validate() const {
  encoder_config(1).validate();
  training_config().validate();
  if (horizon == 0) throw ConfigError("horizon must be positive");
  if (!(train_fraction > 0.0 && train_fraction < 1.0))
    throw ConfigError("train fraction must lie in (0, 1)");
  if (source == DataSource::simulator) simulator.validate();
  if (source == DataSource::csv && csv_path.empty()) throw ConfigError("CSV source needs a path");
}

std::string ExperimentConfig::fingerprint() const {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a(config_json(*this, false).dump())));
  return buf;
}

ExperimentConfig van_der_pol_experiment(EncoderVariant variant, std::uint64_t seed) {
  ExperimentConfig c;
  c.simulator = van_der_pol_defaults();
  c.simulator.seed = seed;
  c.variant = variant;
  c.seed = seed;
  return c;
}

ExperimentConfig lorenz_experiment(std::uint64_t seed) {
  ExperimentConfig c;
  c.simulator = lorenz_defaults();
  c.simulator.seed = seed;
  c.variant = EncoderVariant::patch;
  c.context_len = 150;
  c.patch_len = 50;
  c.epochs = 300;
  c.seed = seed;
  return c;
}

std::string config_to_json(const ExperimentConfig& cfg) { return config_json(cfg, true).dump(2); }

ExperimentConfig config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  ExperimentConfig c;
  try {
    c.source = j.value("source", std::string("simulator")) == "csv" ? DataSource::csv
                                                                     : DataSource::simulator;
    if (j.contains("simulator")) {
      const json& s = j.at("simulator");
      SimulatorConfig& sc = c.simulator;
      sc.system = parse_system(s.value("system", std::string("van_der_pol")));
      if (sc.system == DynamicalSystem::lorenz) sc = lorenz_defaults();
      sc.mu = s.value("mu", sc.mu);
      sc.sigma = s.value("sigma", sc.sigma);
      sc.rho = s.value("rho", sc.rho);
      sc.beta = s.value("beta", sc.beta);
      sc.dt = s.value("dt", sc.dt);
      sc.t_end = s.value("t_end", sc.t_end);
      sc.noise_std = s.value("noise_std", sc.noise_std);
      sc.seed = s.value("seed", sc.seed);
      sc.initial_state = s.value("initial_state", sc.initial_state);
    }
    c.csv_path = j.value("csv_path", std::string());
    c.csv_columns = j.value("csv_columns", c.csv_columns);
    c.csv_split = j.value("csv_split", c.csv_split);
    c.variant = parse_variant(j.value("variant", std::string(to_string(c.variant))));
    c.context_len = j.value("context_len", c.context_len);
    c.horizon = j.value("horizon", c.horizon);
    c.patch_len = j.value("patch_len", c.patch_len);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.ffn_width = j.value("ffn_width", c.ffn_width);
    c.pe_kind = parse_positional_encoding(j.value("pe_kind", std::string(to_string(c.pe_kind))));
    c.ma_kernel = j.value("ma_kernel", c.ma_kernel);
    c.probsparse_factor = j.value("probsparse_factor", c.probsparse_factor);
    c.tie_factors = j.value("tie_factors", c.tie_factors);
    c.trend_head = j.value("trend_head", c.trend_head);
    c.rho_max = j.value("rho_max", c.rho_max);
    c.lambda = j.value("lambda", c.lambda);
    c.epochs = j.value("epochs", c.epochs);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.lyapunov_mode = parse_lyapunov(j.value("lyapunov_mode", lyapunov_name(c.lyapunov_mode)));
    c.stop_gradient_qr = j.value("stop_gradient_qr", c.stop_gradient_qr);
    c.seed = j.value("seed", c.seed);
    c.train_fraction = j.value("train_fraction", c.train_fraction);
    c.scale = j.value("scale", c.scale);
    c.inverse_metrics = j.value("inverse_metrics", c.inverse_metrics);
    c.output_dir = j.value("output_dir", std::string());
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config field has the wrong type: ") + e.what());
  }
  return c;
}

std::string MetricsRecord::to_json_line() const {
  json j{{"fingerprint", fingerprint},
         {"split", split},
         {"mse", mse},
         {"mae", mae},
         {"wall_seconds", wall_seconds},
         {"final_spectral_radius", final_spectral_radius},
         {"variant", variant},
         {"patch_len", patch_len},
         {"horizon", horizon},
         {"d_model", d_model},
         {"seed", seed},
         {"epochs", epochs}};
  if (!error.empty()) j["error"] = error;
  return j.dump();
}

MetricsRecord MetricsRecord::from_json_line(const std::string& line) {
  try {
    const json j = json::parse(line);
    MetricsRecord r;
    r.fingerprint = j.at("fingerprint").get<std::string>();
    r.split = j.at("split").get<std::string>();
    r.mse = j.at("mse").get<double>();
    r.mae = j.at("mae").get<double>();
    r.wall_seconds = j.value("wall_seconds", 0.0);
    r.final_spectral_radius = j.value("final_spectral_radius", 0.0);
    r.variant = j.value("variant", std::string());
    r.patch_len = j.value("patch_len", std::size_t{0});
    r.horizon = j.value("horizon", std::size_t{0});
    r.d_model = j.value("d_model", std::size_t{0});
    r.seed = j.value("seed", std::uint64_t{0});
    r.epochs = j.value("epochs", std::size_t{0});
    r.error = j.value("error", std::string());
    return r;
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed metrics record: ") + e.what());
  }
}

bool MetricsRecord::same_result(const MetricsRecord& o) const {
  return fingerprint == o.fingerprint && split == o.split && mse == o.mse && mae == o.mae &&
         final_spectral_radius == o.final_spectral_radius && variant == o.variant &&
         patch_len == o.patch_len && horizon == o.horizon && d_model == o.d_model &&
         seed == o.seed && epochs == o.epochs && error == o.error;
}

Metrics compute_metrics(const Matrix& y_hat, const Matrix& y) {
  if (y_hat.rows() != y.rows() || y_hat.cols() != y.cols())
    throw ShapeError("compute_metrics: shapes differ");
  if (y.empty()) throw ShapeError("compute_metrics: empty input");
  Metrics m;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = y_hat.data()[i] - y.data()[i];
    m.mse += e * e;
    m.mae += std::abs(e);
  }
  m.mse /= static_cast<double>(y.size());
  m.mae /= static_cast<double>(y.size());
  return m;
}

PreparedData prepare_data(const ExperimentConfig& cfg) { return prepare_data_with(cfg, nullptr); }

ExperimentResult run_experiment(const ExperimentConfig& cfg, const EpochCallback& on_epoch) {
  const std::string fp = cfg.fingerprint();
  try {
    cfg.validate();
    const auto t0 = std::chrono::steady_clock::now();
    PreparedData data = prepare_data(cfg);
    ExperimentResult r;
    ModelOptions mo;
    mo.rho_max = cfg.rho_max;
    mo.tie_factors = cfg.tie_factors;
    mo.trend_head = cfg.trend_head;
    r.model = init_model(cfg.encoder_config(data.train.channels()), cfg.horizon, cfg.seed, mo);
    r.trace = train(r.model, data.train_windows, cfg.training_config(), on_epoch);

    auto evaluate = [&](const WindowBatch& w, const char* split, Matrix* pred_out,
                        Matrix* truth_out) {
      Matrix pred = predict(r.model, w.x);
      Matrix truth = w.y;
      if (cfg.inverse_metrics && data.scaler.fitted()) {
        pred = data.scaler.inverse_transform(pred);
        truth = data.scaler.inverse_transform(truth);
      }
      const Metrics m = compute_metrics(pred, truth);
      MetricsRecord rec;
      rec.fingerprint = fp;
      rec.split = split;
      rec.mse = m.mse;
      rec.mae = m.mae;
      rec.variant = std::string(to_string(cfg.variant));
      rec.patch_len = cfg.patch_len;
      rec.horizon = cfg.horizon;
      rec.d_model = cfg.d_model;
      rec.seed = cfg.seed;
      rec.epochs = cfg.epochs;
      rec.final_spectral_radius = spectral_trace_entry(r.model.koop);
      if (pred_out) *pred_out = std::move(pred);
      if (truth_out) *truth_out = std::move(truth);
      return rec;
    };
    r.train = evaluate(data.train_windows, "train", nullptr, nullptr);
    r.test = evaluate(data.test_windows, "test", &r.test_prediction, &r.test_truth);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.train.wall_seconds = wall;
    r.test.wall_seconds = wall;
    r.scaler = data.scaler;
    r.channel_names = data.train.channel_names;
    r.dt = data.train.dt;
    r.test_offset = data.train.length();

    if (!cfg.output_dir.empty()) {
      ensure_dir(cfg.output_dir);
      {
        auto out = open_out(cfg.output_dir / "metrics.jsonl");
        out << r.train.to_json_line() << '\n' << r.test.to_json_line() << '\n';
      }
      {
        auto out = open_out(cfg.output_dir / "config.json");
        out << config_to_json(cfg) << '\n';
      }
      r.trace.write_csv(cfg.output_dir / "trace.csv");
      CheckpointMetadata meta{r.channel_names, r.scaler.min(), r.scaler.max()};
      save_checkpoint(r.model, cfg.output_dir / "checkpoint.json", meta);
      emit_plot_data(r, cfg.output_dir / "plots");
    }
    return r;
  } catch (const IoError& e) {
    rethrow_tagged(e, fp);
  } catch (const ShapeError& e) {
    rethrow_tagged(e, fp);
  } catch (const ConfigError& e) {
    rethrow_tagged(e, fp);
  } catch (const NumericError& e) {
    rethrow_tagged(e, fp);
  }
}

MetricsRecord evaluate_checkpoint(const std::filesystem::path& checkpoint,
                                  const ExperimentConfig& cfg_in) {
  CheckpointMetadata meta;
  const DeepKoopFormerModel model = load_checkpoint(checkpoint, &meta);
  ExperimentConfig cfg = cfg_in;
  cfg.context_len = model.cfg.context_len;
  cfg.horizon = model.horizon;
  cfg.variant = model.cfg.variant;
  cfg.patch_len = model.cfg.patch_len;
  cfg.d_model = model.cfg.d_model;
  std::optional<MinMaxScaler> fixed;
  if (!meta.scaler_min.empty()) fixed.emplace(meta.scaler_min, meta.scaler_max);
  const PreparedData data = prepare_data_with(cfg, fixed ? &*fixed : nullptr);
  if (data.test.channels() != model.cfg.channels)
    throw ShapeError("data has " + std::to_string(data.test.channels()) +
                     " channels, checkpoint expects " + std::to_string(model.cfg.channels));
  Matrix pred = predict(model, data.test_windows.x);
  Matrix truth = data.test_windows.y;
  if (cfg.inverse_metrics && data.scaler.fitted()) {
    pred = data.scaler.inverse_transform(pred);
    truth = data.scaler.inverse_transform(truth);
  }
  const Metrics m = compute_metrics(pred, truth);
  MetricsRecord rec;
  rec.fingerprint = cfg.fingerprint();
  rec.split = "test";
  rec.mse = m.mse;
  rec.mae = m.mae;
  rec.final_spectral_radius = spectral_trace_entry(model.koop);
  rec.variant = std::string(to_string(model.cfg.variant));
  rec.patch_len = model.cfg.patch_len;
  rec.horizon = model.horizon;
  rec.d_model = model.cfg.d_model;
  rec.seed = model.seed;
  rec.epochs = cfg.epochs;
  return rec;
}

void emit_plot_data(const ExperimentResult& r, const std::filesystem::path& dir) {
  ensure_dir(dir);
  const std::size_t P = r.model.cfg.context_len;
  const std::size_t H = r.model.horizon;
  const std::size_t d = r.test_truth.cols();
  const std::size_t windows = H == 0 ? 0 : r.test_truth.rows() / H;
  for (std::size_t c = 0; c < d; ++c) {
    const std::string name = c < r.channel_names.size() ? r.channel_names[c] : "x" + std::to_string(c + 1);
    auto out = open_out(dir / ("predictions_" + name + ".csv"));
    out << "window,step,t,truth,prediction\n";
    for (std::size_t b = 0; b < windows; ++b)
      for (std::size_t h = 0; h < H; ++h) {
        const std::size_t row = b * H + h;
        const double t = static_cast<double>(r.test_offset + b + P + h) * r.dt;
        out << b << ',' << h + 1 << ',' << t << ',' << r.test_truth(row, c) << ','
            << r.test_prediction(row, c) << '\n';
      }
    if (!out) throw IoError("failed writing prediction CSV in " + dir.string());
  }
  auto out = open_out(dir / "eigen_trace.csv");
  out << "epoch,spectral_radius\n";
  for (const auto& e : r.trace.epochs) out << e.epoch << ',' << e.spectral_radius << '\n';
  if (!out) throw IoError("failed writing eigen trace in " + dir.string());
}

std::uint64_t cell_seed(std::uint64_t base_seed, std::size_t p, std::size_t horizon,
                        std::size_t d_model) {
  std::uint64_t h = splitmix(base_seed);
  h = splitmix(h ^ static_cast<std::uint64_t>(p));
  h = splitmix(h ^ static_cast<std::uint64_t>(horizon));
  h = splitmix(h ^ static_cast<std::uint64_t>(d_model));
  return h;
}

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::vector<MetricsRecord> out;
  std::ifstream in(path);
  if (!in) return out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      out.push_back(MetricsRecord::from_json_line(line));
    } catch (const IoError&) {
      // A torn final line from an interrupted writer; the cell is redone.
    }
  }
  return out;
}

GridResult grid_search(const ExperimentConfig& base, const std::vector<std::size_t>& p_values,
                       const std::vector<std::size_t>& h_values,
                       const std::vector<std::size_t>& d_model_values, const GridOptions& opts) {
  if (p_values.empty() || h_values.empty() || d_model_values.empty())
    throw ConfigError("grid value lists must be nonempty");

  std::map<std::string, std::vector<MetricsRecord>> done;
  if (!opts.results_path.empty()) {
    for (auto& rec : read_metrics(opts.results_path))
      if (rec.error.empty()) done[rec.fingerprint].push_back(std::move(rec));
  }

  GridResult result;
  std::size_t position = 0;
  for (std::size_t H : h_values)
    for (std::size_t p : p_values)
      for (std::size_t dm : d_model_values) {
        ++position;
        ExperimentConfig cell = base;
        cell.patch_len = p;
        cell.horizon = H;
        cell.d_model = dm;
        cell.seed = cell_seed(base.seed, p, H, dm);
        cell.output_dir.clear();
        const std::string fp = cell.fingerprint();

        std::vector<MetricsRecord> recs;
        auto it = done.find(fp);
        if (it != done.end() && it->second.size() >= 2) {
          for (const auto& r : it->second)
            if (r.split == "train" || r.split == "test") recs.push_back(r);
          ++result.reused;
        } else {
          try {
            ExperimentResult r = run_experiment(cell);
            recs = {r.train, r.test};
            ++result.computed;
          } catch (const Error& e) {
            MetricsRecord failed;
            failed.fingerprint = fp;
            failed.split = "test";
            failed.variant = std::string(to_string(cell.variant));
            failed.patch_len = p;
            failed.horizon = H;
            failed.d_model = dm;
            failed.seed = cell.seed;
            failed.epochs = cell.epochs;
            failed.error = e.what();
            recs = {failed};
            ++result.failed;
          }
          if (!opts.results_path.empty()) {
            std::string block;
            for (const auto& r : recs) block += r.to_json_line() + '\n';
            auto out = open_out(opts.results_path, std::ios::app);
            out << block << std::flush;
            if (!out) throw IoError("failed appending to " + opts.results_path.string());
          }
        }
        const MetricsRecord& test_rec = recs.back();
        result.records.insert(result.records.end(), recs.begin(), recs.end());
        if (opts.on_cell) opts.on_cell(position, test_rec);
      }
  return result;
}

void write_heatmap_csv(const std::vector<MetricsRecord>& records, GridAxis columns,
                       const std::string& metric, const std::filesystem::path& path) {
  if (metric != "mse" && metric != "mae")
    throw ConfigError("heatmap metric must be mse or mae, got '" + metric + "'");
  std::set<std::size_t> rows, cols;
  std::map<std::pair<std::size_t, std::size_t>, std::string> cells;
  for (const auto& r : records) {
    if (r.split != "test") continue;
    const std::size_t col = columns == GridAxis::patch_len ? r.patch_len : r.d_model;
    rows.insert(r.horizon);
    cols.insert(col);
    const auto key = std::make_pair(r.horizon, col);
    if (cells.count(key)) continue;
    cells[key] = r.error.empty() ? format_cell(metric == "mse" ? r.mse : r.mae) : "nan";
  }
  auto out = open_out(path);
  out << (columns == GridAxis::patch_len ? "H/p" : "H/d_model");
  for (std::size_t c : cols) out << ',' << c;
  out << '\n';
  for (std::size_t h : rows) {
    out << h;
    for (std::size_t c : cols) {
      auto it = cells.find({h, c});
      out << ',' << (it == cells.end() ? "" : it->second);
    }
    out << '\n';
  }
  if (!out) throw IoError("failed writing heatmap " + path.string());
}

}  // namespace dkf
