#include <cstdint>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dkf/audit.hpp"
#include "dkf/data.hpp"
#include "dkf/error.hpp"
#include "dkf/experiment.hpp"
#include "dkf/runtime.hpp"

namespace {

constexpr int kExitConfig = 1;
constexpr int kExitNumeric = 2;
constexpr int kExitIo = 3;

struct SimulatorFlags {
  std::string system = "van_der_pol";
  double mu = 1.0;
  double sigma = 10.0;
  double rho = 28.0;
  double beta = 8.0 / 3.0;
  double dt = 0.01;
  double t_end = 20.0;
  double noise_std = -1.0;  // negative picks the system default
  std::uint64_t seed = 0;
  std::vector<double> initial_state;

  void attach(CLI::App* app) {
    app->add_option("--system", system, "van_der_pol or lorenz")->capture_default_str();
    app->add_option("--mu", mu, "Van der Pol damping")->capture_default_str();
    app->add_option("--sigma", sigma, "Lorenz sigma")->capture_default_str();
    app->add_option("--rho", rho, "Lorenz rho")->capture_default_str();
    app->add_option("--beta", beta, "Lorenz beta")->capture_default_str();
    app->add_option("--dt", dt, "Euler step")->capture_default_str();
    app->add_option("--t-end", t_end, "simulated time span")->capture_default_str();
    app->add_option("--noise-std", noise_std,
                    "process noise std (default 0.02 Van der Pol, 0.1 Lorenz)");
    app->add_option("--sim-seed", seed, "noise seed")->capture_default_str();
    app->add_option("--initial-state", initial_state, "initial state values")->delimiter(',');
  }

  dkf::SimulatorConfig build() const {
    dkf::SimulatorConfig c;
    c.system = dkf::parse_system(system);
    if (c.system == dkf::DynamicalSystem::lorenz) c = dkf::lorenz_defaults();
    c.mu = mu;
    c.sigma = sigma;
    c.rho = rho;
    c.beta = beta;
    c.dt = dt;
    c.t_end = t_end;
    if (noise_std >= 0.0) c.noise_std = noise_std;
    c.seed = seed;
    c.initial_state = initial_state;
    c.validate();
    return c;
  }
};

struct ExperimentFlags {
  dkf::ExperimentConfig cfg;
  SimulatorFlags sim;
  std::string config_file;
  std::string csv;
  std::string variant = "patch";
  std::string pe = "sinusoidal";
  std::string lyapunov = "all_pairs";
  std::string output_dir;
  bool no_scale = false;

  void attach(CLI::App* app) {
    sim.attach(app);
    app->add_option("--config", config_file, "JSON experiment config; flags override it");
    app->add_option("--csv", csv, "CSV data file instead of the simulator");
    app->add_option("--columns", cfg.csv_columns, "CSV columns to use")->delimiter(',');
    app->add_option("--split-column", cfg.csv_split, "split one column into n channels");
    app->add_option("--variant", variant, "patch, probsparse or decomp")->capture_default_str();
    app->add_option("--context", cfg.context_len, "context length P")->capture_default_str();
    app->add_option("--horizon", cfg.horizon, "forecast horizon H")->capture_default_str();
    app->add_option("--patch", cfg.patch_len, "patch length p")->capture_default_str();
    app->add_option("--d-model", cfg.d_model, "encoder width")->capture_default_str();
    app->add_option("--layers", cfg.n_layers, "encoder layers")->capture_default_str();
    app->add_option("--heads", cfg.n_heads, "attention heads")->capture_default_str();
    app->add_option("--ffn", cfg.ffn_width, "feed-forward width")->capture_default_str();
    app->add_option("--pe", pe, "sinusoidal or learnable")->capture_default_str();
    app->add_option("--ma-kernel", cfg.ma_kernel, "moving-average kernel (decomp)")
        ->capture_default_str();
    app->add_option("--probsparse-factor", cfg.probsparse_factor, "ProbSparse factor c")
        ->capture_default_str();
    app->add_flag("--tie-factors", cfg.tie_factors, "use V = U in the Koopman operator");
    app->add_option("--trend-head", cfg.trend_head, "trend head for decomp (true/false)")
        ->capture_default_str();
    app->add_option("--rho-max", cfg.rho_max, "operator norm cap")->capture_default_str();
    app->add_option("--lambda", cfg.lambda, "Lyapunov weight")->capture_default_str();
    app->add_option("--lyapunov", lyapunov, "all_pairs or first_pair")->capture_default_str();
    app->add_option("--epochs", cfg.epochs, "training epochs")->capture_default_str();
    app->add_option("--lr", cfg.learning_rate, "Adam learning rate (CSV data defaults to 3e-4)")->capture_default_str();
    app->add_option("--batch-size", cfg.batch_size, "0 = full batch")->capture_default_str();
    app->add_flag("--stop-gradient-qr", cfg.stop_gradient_qr, "treat QR factors as constants");
    app->add_option("--train-fraction", cfg.train_fraction, "chronological split")
        ->capture_default_str();
    app->add_flag("--no-scale", no_scale, "disable MinMax scaling");
    app->add_flag("--inverse-metrics", cfg.inverse_metrics, "report metrics in original units");
    app->add_option("--output-dir", output_dir, "directory for run artifacts");
  }

  dkf::ExperimentConfig build(const CLI::App* app) const {
    dkf::ExperimentConfig c = cfg;
    if (!config_file.empty()) {
      std::ifstream in(config_file);
      if (!in) throw dkf::IoError("cannot open config file " + config_file);
      std::stringstream ss;
      ss << in.rdbuf();
      const dkf::ExperimentConfig file = dkf::config_from_json(ss.str());
      // Flags given explicitly win over the file.
      c = file;
      auto given = [&](const char* name) { return app->count(name) > 0; };
      if (given("--columns")) c.csv_columns = cfg.csv_columns;
      if (given("--split-column")) c.csv_split = cfg.csv_split;
      if (given("--context")) c.context_len = cfg.context_len;
      if (given("--horizon")) c.horizon = cfg.horizon;
      if (given("--patch")) c.patch_len = cfg.patch_len;
      if (given("--d-model")) c.d_model = cfg.d_model;
      if (given("--layers")) c.n_layers = cfg.n_layers;
      if (given("--heads")) c.n_heads = cfg.n_heads;
      if (given("--ffn")) c.ffn_width = cfg.ffn_width;
      if (given("--ma-kernel")) c.ma_kernel = cfg.ma_kernel;
      if (given("--probsparse-factor")) c.probsparse_factor = cfg.probsparse_factor;
      if (given("--tie-factors")) c.tie_factors = cfg.tie_factors;
      if (given("--trend-head")) c.trend_head = cfg.trend_head;
      if (given("--rho-max")) c.rho_max = cfg.rho_max;
      if (given("--lambda")) c.lambda = cfg.lambda;
      if (given("--epochs")) c.epochs = cfg.epochs;
      if (given("--lr")) c.learning_rate = cfg.learning_rate;
      if (given("--batch-size")) c.batch_size = cfg.batch_size;
      if (given("--stop-gradient-qr")) c.stop_gradient_qr = cfg.stop_gradient_qr;
      if (given("--train-fraction")) c.train_fraction = cfg.train_fraction;
      if (given("--inverse-metrics")) c.inverse_metrics = cfg.inverse_metrics;
      if (given("--seed")) c.seed = cfg.seed;
      if (given("--variant")) c.variant = dkf::parse_variant(variant);
      if (given("--pe")) c.pe_kind = dkf::parse_positional_encoding(pe);
      if (given("--no-scale")) c.scale = false;
      if (given("--csv")) {
        c.source = dkf::DataSource::csv;
        c.csv_path = csv;
      }
      if (given("--system") || given("--sim-seed") || given("--dt") || given("--t-end") ||
          given("--noise-std") || given("--mu") || given("--initial-state"))
        c.simulator = sim.build();
    } else {
      c.variant = dkf::parse_variant(variant);
      c.pe_kind = dkf::parse_positional_encoding(pe);
      c.scale = !no_scale;
      c.simulator = sim.build();
      if (!csv.empty()) {
        c.source = dkf::DataSource::csv;
        c.csv_path = csv;
        if (app->count("--lr") == 0) c.learning_rate = 3e-4;
      }
    }
    if (lyapunov == "first_pair") c.lyapunov_mode = dkf::LyapunovMode::first_pair;
    else if (lyapunov != "all_pairs") throw dkf::ConfigError("unknown Lyapunov mode " + lyapunov);
    if (!output_dir.empty()) c.output_dir = output_dir;
    c.validate();
    return c;
  }
};

void print_record(const dkf::MetricsRecord& r) { std::cout << r.to_json_line() << '\n'; }

int run_simulate(const SimulatorFlags& flags, const std::string& out) {
  const dkf::TimeSeries ts = dkf::simulate(flags.build());
  dkf::write_csv(ts, out);
  std::cerr << "wrote " << ts.length() << " x " << ts.channels() << " series to " << out << '\n';
  return 0;
}

int run_train(const ExperimentFlags& flags, const CLI::App* app, bool quiet) {
  const dkf::ExperimentConfig cfg = flags.build(app);
  std::cerr << "config " << cfg.fingerprint() << ": " << dkf::to_string(cfg.variant) << ", P="
            << cfg.context_len << ", H=" << cfg.horizon << ", " << cfg.epochs << " epochs\n";
  dkf::EpochCallback progress;
  if (!quiet) {
    const std::size_t every = std::max<std::size_t>(1, cfg.epochs / 20);
    progress = [every](const dkf::EpochRecord& e) {
      if (e.epoch % every == 0 || e.epoch == 1)
        std::cerr << "epoch " << e.epoch << " loss " << e.total_loss << " mse " << e.mse
                  << " lyap " << e.lyap << " spectral " << e.spectral_radius << '\n';
    };
  }
  const dkf::ExperimentResult r = dkf::run_experiment(cfg, progress);
  print_record(r.train);
  print_record(r.test);
  return 0;
}

int run_grid(const ExperimentFlags& flags, const CLI::App* app,
             const std::vector<std::size_t>& p_values, const std::vector<std::size_t>& h_values,
             std::vector<std::size_t> d_values, const std::string& results,
             const std::string& heatmap_dir) {
  dkf::ExperimentConfig base = flags.build(app);
  if (d_values.empty()) d_values = {base.d_model};
  dkf::GridOptions opts;
  opts.results_path = results;
  opts.on_cell = [](std::size_t cell, const dkf::MetricsRecord& r) {
    std::cerr << "cell " << cell << " H=" << r.horizon << " p=" << r.patch_len
              << " d_model=" << r.d_model
              << (r.error.empty() ? " test mse " + std::to_string(r.mse) : " failed: " + r.error)
              << '\n';
  };
  const dkf::GridResult g = dkf::grid_search(base, p_values, h_values, d_values, opts);
  std::cerr << g.computed << " cells computed, " << g.reused << " reused, " << g.failed
            << " failed\n";
  if (!heatmap_dir.empty()) {
    const auto axis = d_values.size() > 1 && p_values.size() == 1 ? dkf::GridAxis::d_model
                                                                  : dkf::GridAxis::patch_len;
    dkf::write_heatmap_csv(g.records, axis, "mse", std::filesystem::path(heatmap_dir) / "heatmap_mse.csv");
    dkf::write_heatmap_csv(g.records, axis, "mae", std::filesystem::path(heatmap_dir) / "heatmap_mae.csv");
  }
  for (const auto& r : g.records) print_record(r);
  return g.failed == 0 ? 0 : kExitNumeric;
}

int run_audit(double scale, std::uint64_t seed, const std::string& checkpoint) {
  dkf::AuditOptions opts;
  opts.scale = scale;
  opts.seed = seed;
  const auto checks =
      checkpoint.empty() ? dkf::run_all_audits(opts) : dkf::audit_model(dkf::load_checkpoint(checkpoint), opts);
  bool ok = true;
  for (const auto& c : checks) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << " (" << c.cases << " cases): "
              << c.detail << '\n';
    ok = ok && c.passed;
  }
  return ok ? 0 : kExitNumeric;
}

dkf::TrainingTrace read_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw dkf::IoError("cannot open trace " + path.string());
  dkf::TrainingTrace t;
  std::string line;
  std::getline(in, line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    dkf::EpochRecord e;
    char comma;
    if (!(ss >> e.epoch >> comma >> e.total_loss >> comma >> e.mse >> comma >> e.lyap >> comma >>
          e.spectral_radius >> comma >> e.seconds))
      throw dkf::IoError("malformed trace row in " + path.string() + ": " + line);
    t.epochs.push_back(e);
  }
  return t;
}

int run_export(const std::string& run_dir, const std::string& results, const std::string& axis,
               const std::string& out_dir) {
  if (run_dir.empty() && results.empty())
    throw dkf::ConfigError("export-plots needs --run-dir and/or --results");
  const std::filesystem::path out = out_dir;
  if (!results.empty()) {
    const auto records = dkf::read_metrics(results);
    if (records.empty()) throw dkf::IoError("no metrics records in " + results);
    const auto ax = axis == "d_model" ? dkf::GridAxis::d_model : dkf::GridAxis::patch_len;
    if (axis != "p" && axis != "d_model") throw dkf::ConfigError("--axis must be p or d_model");
    dkf::write_heatmap_csv(records, ax, "mse", out / "heatmap_mse.csv");
    dkf::write_heatmap_csv(records, ax, "mae", out / "heatmap_mae.csv");
  }
  if (!run_dir.empty()) {
    const std::filesystem::path dir = run_dir;
    std::ifstream in(dir / "config.json");
    if (!in) throw dkf::IoError("cannot open " + (dir / "config.json").string());
    std::stringstream ss;
    ss << in.rdbuf();
    const dkf::ExperimentConfig cfg = dkf::config_from_json(ss.str());
    dkf::CheckpointMetadata meta;
    dkf::ExperimentResult r;
    r.model = dkf::load_checkpoint(dir / "checkpoint.json", &meta);
    r.trace = read_trace(dir / "trace.csv");
    const dkf::PreparedData data = dkf::prepare_data(cfg);
    r.test_prediction = dkf::predict(r.model, data.test_windows.x);
    r.test_truth = data.test_windows.y;
    if (cfg.inverse_metrics && data.scaler.fitted()) {
      r.test_prediction = data.scaler.inverse_transform(r.test_prediction);
      r.test_truth = data.scaler.inverse_transform(r.test_truth);
    }
    r.channel_names = data.test.channel_names;
    r.dt = data.test.dt;
    r.test_offset = data.train.length();
    dkf::emit_plot_data(r, out);
  }
  std::cerr << "plot data written to " << out.string() << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  dkf::tune_allocator();
  CLI::App app{"DeepKoopFormer forecasting toolkit"};
  app.require_subcommand(1);

  auto* simulate = app.add_subcommand("simulate", "write a synthetic trajectory as CSV");
  SimulatorFlags sim_flags;
  sim_flags.attach(simulate);
  std::string sim_out;
  simulate->add_option("--out", sim_out, "output CSV")->required();

  auto* train = app.add_subcommand("train", "train and evaluate one configuration");
  ExperimentFlags train_flags;
  train_flags.attach(train);
  train->add_option("--seed", train_flags.cfg.seed, "model and training seed")->required();
  bool quiet = false;
  train->add_flag("--quiet", quiet, "no per-epoch progress");

  auto* evaluate = app.add_subcommand("evaluate", "metrics of a checkpoint on the test split");
  ExperimentFlags eval_flags;
  eval_flags.attach(evaluate);
  evaluate->add_option("--seed", eval_flags.cfg.seed, "seed recorded in the fingerprint");
  std::string checkpoint;
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint.json")->required();

  auto* grid = app.add_subcommand("grid", "sweep patch length, horizon and width");
  ExperimentFlags grid_flags;
  grid_flags.attach(grid);
  grid->add_option("--seed", grid_flags.cfg.seed, "base seed")->required();
  std::vector<std::size_t> p_values, h_values, d_values;
  std::string results, heatmap_dir;
  grid->add_option("--p-values", p_values, "patch lengths")->delimiter(',')->required();
  grid->add_option("--h-values", h_values, "horizons")->delimiter(',')->required();
  grid->add_option("--d-model-values", d_values, "encoder widths")->delimiter(',');
  grid->add_option("--results", results, "JSONL results file (resumable)")->required();
  grid->add_option("--heatmap-dir", heatmap_dir, "write heatmap CSVs here");

  auto* audit = app.add_subcommand("audit", "run the invariant and bound suites");
  double audit_scale = 1.0;
  std::uint64_t audit_seed = 2024;
  std::string audit_checkpoint;
  audit->add_option("--scale", audit_scale, "case-count multiplier")->capture_default_str();
  audit->add_option("--seed", audit_seed, "audit seed")->capture_default_str();
  audit->add_option("--checkpoint", audit_checkpoint, "audit a trained model instead");

  auto* plots = app.add_subcommand("export-plots", "emit plot CSVs for a run or a grid");
  std::string run_dir, plot_results, axis = "p", plot_out;
  plots->add_option("--run-dir", run_dir, "output directory of a train run");
  plots->add_option("--results", plot_results, "grid JSONL results");
  plots->add_option("--axis", axis, "heatmap column axis: p or d_model")->capture_default_str();
  plots->add_option("--out", plot_out, "destination directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*simulate) return run_simulate(sim_flags, sim_out);
    if (*train) return run_train(train_flags, train, quiet);
    if (*evaluate) {
      const dkf::ExperimentConfig cfg = eval_flags.build(evaluate);
      print_record(dkf::evaluate_checkpoint(checkpoint, cfg));
      return 0;
    }
    if (*grid) return run_grid(grid_flags, grid, p_values, h_values, d_values, results, heatmap_dir);
    if (*audit) return run_audit(audit_scale, audit_seed, audit_checkpoint);
    if (*plots) return run_export(run_dir, plot_results, axis, plot_out);
  } catch (const dkf::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const dkf::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const dkf::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return kExitIo;
  }
  return 0;
}
