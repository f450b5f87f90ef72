#include "doctest.h"

#include <fstream>
#include <sstream>
#include <string>

#include "dkf/error.hpp"
#include "dkf/experiment.hpp"
#include "test_support.hpp"

using dkf::ExperimentConfig;
using dkf::Matrix;
using testing_support::TempDir;

namespace {

ExperimentConfig small_experiment(dkf::EncoderVariant variant = dkf::EncoderVariant::patch) {
  ExperimentConfig cfg = dkf::van_der_pol_experiment(variant, 5);
  cfg.simulator.t_end = 3.0;
  cfg.context_len = 8;
  cfg.horizon = 2;
  cfg.patch_len = 4;
  cfg.d_model = 4;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.ffn_width = 8;
  cfg.ma_kernel = 3;
  cfg.probsparse_factor = 1.0;
  cfg.epochs = 3;
  cfg.learning_rate = 5e-3;
  return cfg;
}

std::size_t count_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  std::size_t n = 0;
  std::string line;
  while (std::getline(in, line)) ++n;
  return n;
}

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("metrics on hand cases") {
  const auto m = dkf::compute_metrics(Matrix::from_rows({{1.0, 2.0}}), Matrix(1, 2));
  CHECK(m.mse == 2.5);
  CHECK(m.mae == 1.5);
  const auto neg = dkf::compute_metrics(Matrix::from_rows({{-1.0, -2.0}}), Matrix(1, 2));
  CHECK(neg.mse == m.mse);
  CHECK(neg.mae == m.mae);
  CHECK(dkf::compute_metrics(Matrix(3, 2), Matrix(3, 2)).mse == 0.0);
  CHECK_THROWS_AS(dkf::compute_metrics(Matrix(3, 2), Matrix(2, 2)), dkf::ShapeError);
}

TEST_CASE("desk configurations") {
  const auto v = dkf::van_der_pol_experiment(dkf::EncoderVariant::decomp, 9);
  CHECK(v.seed == 9);
  CHECK(v.epochs == 1000);
  CHECK(v.rho_max == 0.99);
  CHECK(v.horizon == 5);
  CHECK_NOTHROW(v.validate());
  const auto l = dkf::lorenz_experiment(2);
  CHECK(l.context_len == 150);
  CHECK(l.patch_len == 50);
  CHECK(l.epochs == 300);
  CHECK(l.simulator.system == dkf::DynamicalSystem::lorenz);
  CHECK_NOTHROW(l.validate());
}

TEST_CASE("config validation") {
  ExperimentConfig cfg = small_experiment();
  cfg.patch_len = 3;
  CHECK_THROWS_AS(cfg.validate(), dkf::ConfigError);
  cfg = small_experiment();
  cfg.train_fraction = 1.5;
  CHECK_THROWS_AS(cfg.validate(), dkf::ConfigError);
  cfg = small_experiment();
  cfg.source = dkf::DataSource::csv;
  CHECK_THROWS_AS(cfg.validate(), dkf::ConfigError);
}

TEST_CASE("config JSON round trip and fingerprint") {
  ExperimentConfig cfg = small_experiment(dkf::EncoderVariant::probsparse);
  cfg.lyapunov_mode = dkf::LyapunovMode::first_pair;
  cfg.tie_factors = true;
  cfg.pe_kind = dkf::PositionalEncoding::learnable;
  cfg.output_dir = "out/x";
  const ExperimentConfig back = dkf::config_from_json(dkf::config_to_json(cfg));
  CHECK(back.fingerprint() == cfg.fingerprint());
  CHECK(back.output_dir == cfg.output_dir);
  CHECK(back.lyapunov_mode == cfg.lyapunov_mode);
  CHECK(back.tie_factors);
  CHECK(cfg.fingerprint().size() == 16);

  ExperimentConfig moved = cfg;
  moved.output_dir = "elsewhere";
  CHECK(moved.fingerprint() == cfg.fingerprint());
  ExperimentConfig reseeded = cfg;
  reseeded.seed = 6;
  CHECK(reseeded.fingerprint() != cfg.fingerprint());

  CHECK_THROWS_AS(dkf::config_from_json("{not json"), dkf::ConfigError);
  CHECK_THROWS_AS(dkf::config_from_json(R"({"variant": "lstm"})"), dkf::ConfigError);
}

TEST_CASE("metrics record JSON lines") {
  dkf::MetricsRecord r;
  r.fingerprint = "0123456789abcdef";
  r.split = "test";
  r.mse = 0.1 + 0.2;
  r.mae = 1.0 / 3.0;
  r.wall_seconds = 4.5;
  r.variant = "patch";
  r.patch_len = 4;
  r.horizon = 2;
  r.d_model = 8;
  r.seed = 18446744073709551615ull;
  r.epochs = 3;
  const auto back = dkf::MetricsRecord::from_json_line(r.to_json_line());
  CHECK(back.same_result(r));
  CHECK(back.mse == r.mse);
  CHECK(back.seed == r.seed);
  dkf::MetricsRecord slower = r;
  slower.wall_seconds = 99.0;
  CHECK(slower.same_result(r));
  slower.mae = 0.0;
  CHECK_FALSE(slower.same_result(r));
  CHECK_THROWS_AS(dkf::MetricsRecord::from_json_line("{\"mse\": "), dkf::IoError);
}

TEST_CASE("data preparation scales on the training part only") {
  const ExperimentConfig cfg = small_experiment();
  const auto data = dkf::prepare_data(cfg);
  CHECK(data.train.length() == 241);
  CHECK(data.test.length() == 60);
  CHECK(data.train_windows.size() == 241 - 8 - 2 + 1);
  CHECK(data.scaler.fitted());
  for (std::size_t c = 0; c < 2; ++c) {
    double lo = 1.0, hi = 0.0;
    for (std::size_t t = 0; t < data.train.length(); ++t) {
      lo = std::min(lo, data.train.values(t, c));
      hi = std::max(hi, data.train.values(t, c));
    }
    CHECK(lo == 0.0);
    CHECK(hi == doctest::Approx(1.0));
  }
  ExperimentConfig raw = cfg;
  raw.scale = false;
  CHECK_FALSE(dkf::prepare_data(raw).scaler.fitted());
}

TEST_CASE("experiments are deterministic") {
  const ExperimentConfig cfg = small_experiment(dkf::EncoderVariant::decomp);
  const auto a = dkf::run_experiment(cfg);
  const auto b = dkf::run_experiment(cfg);
  CHECK(a.test.same_result(b.test));
  CHECK(a.train.same_result(b.train));
  CHECK(a.test_prediction == b.test_prediction);
  CHECK(a.trace.epochs.size() == 3);
  CHECK(a.test.final_spectral_radius <= 0.99);
}

TEST_CASE("zero-epoch experiments report the untrained baseline") {
  ExperimentConfig cfg = small_experiment();
  cfg.epochs = 0;
  const auto r = dkf::run_experiment(cfg);
  CHECK(r.trace.epochs.empty());
  CHECK(r.test.epochs == 0);
  CHECK(std::isfinite(r.test.mse));
}

TEST_CASE("run artifacts and checkpoint evaluation") {
  TempDir dir("exp");
  ExperimentConfig cfg = small_experiment(dkf::EncoderVariant::probsparse);
  cfg.output_dir = dir / "run";
  const auto r = dkf::run_experiment(cfg);
  CHECK(count_lines(dir / "run" / "metrics.jsonl") == 2);
  CHECK(count_lines(dir / "run" / "trace.csv") == 4);
  CHECK(count_lines(dir / "run" / "plots" / "eigen_trace.csv") == 4);
  const std::size_t rows = r.test_truth.rows();
  CHECK(count_lines(dir / "run" / "plots" / "predictions_x1.csv") == rows + 1);
  CHECK(count_lines(dir / "run" / "plots" / "predictions_x2.csv") == rows + 1);

  const auto reloaded = dkf::config_from_json(read_all(dir / "run" / "config.json"));
  CHECK(reloaded.fingerprint() == cfg.fingerprint());

  const auto eval = dkf::evaluate_checkpoint(dir / "run" / "checkpoint.json", cfg);
  CHECK(eval.mse == doctest::Approx(r.test.mse).epsilon(1e-12));
  CHECK(eval.mae == doctest::Approx(r.test.mae).epsilon(1e-12));
  CHECK_THROWS_AS(dkf::evaluate_checkpoint(dir / "missing.json", cfg), dkf::IoError);
}

TEST_CASE("inverse metrics report original units") {
  ExperimentConfig cfg = small_experiment();
  const auto scaled = dkf::run_experiment(cfg);
  cfg.inverse_metrics = true;
  const auto raw = dkf::run_experiment(cfg);
  CHECK(raw.test.mse != scaled.test.mse);
  CHECK(raw.test.mse > 0.0);
}

TEST_CASE("swapping CSV columns swaps channels end to end") {
  TempDir dir("perm");
  dkf::SimulatorConfig sim = dkf::van_der_pol_defaults();
  sim.t_end = 3.0;
  const auto ts = dkf::simulate(sim);
  dkf::write_csv(ts, dir / "vdp.csv");

  ExperimentConfig cfg = small_experiment();
  cfg.source = dkf::DataSource::csv;
  cfg.csv_path = dir / "vdp.csv";
  cfg.csv_columns = {"x1", "x2"};
  cfg.epochs = 0;
  const auto a = dkf::run_experiment(cfg);
  cfg.csv_columns = {"x2", "x1"};
  const auto b = dkf::run_experiment(cfg);
  CHECK(a.test_truth.rows() == b.test_truth.rows());
  for (std::size_t r = 0; r < a.test_truth.rows(); ++r) {
    CHECK(a.test_truth(r, 0) == b.test_truth(r, 1));
    CHECK(a.test_truth(r, 1) == b.test_truth(r, 0));
  }
  CHECK(a.scaler.min()[0] == b.scaler.min()[1]);
  CHECK(a.scaler.max()[1] == b.scaler.max()[0]);
  CHECK(b.channel_names == std::vector<std::string>{"x2", "x1"});
}

TEST_CASE("cell seeds depend on every coordinate") {
  const auto s = dkf::cell_seed(1, 4, 2, 8);
  CHECK(s == dkf::cell_seed(1, 4, 2, 8));
  CHECK(s != dkf::cell_seed(2, 4, 2, 8));
  CHECK(s != dkf::cell_seed(1, 8, 2, 8));
  CHECK(s != dkf::cell_seed(1, 4, 3, 8));
  CHECK(s != dkf::cell_seed(1, 4, 2, 4));
}

TEST_CASE("a one-cell grid equals a single experiment") {
  const ExperimentConfig base = small_experiment();
  const auto g = dkf::grid_search(base, {4}, {2}, {4});
  REQUIRE(g.records.size() == 2);
  CHECK(g.computed == 1);
  ExperimentConfig cell = base;
  cell.seed = dkf::cell_seed(base.seed, 4, 2, 4);
  const auto r = dkf::run_experiment(cell);
  CHECK(g.records[1].same_result(r.test));
  CHECK_THROWS_AS(dkf::grid_search(base, {}, {2}, {4}), dkf::ConfigError);
}

TEST_CASE("grid resume after an interruption") {
  TempDir dir("grid");
  ExperimentConfig base = small_experiment();
  base.epochs = 2;
  const std::vector<std::size_t> ps{2, 4}, hs{1, 2}, ds{4};
  dkf::GridOptions opts;
  opts.results_path = dir / "grid.jsonl";

  const auto full = dkf::grid_search(base, ps, hs, ds);
  CHECK(full.records.size() == 8);

  struct Stop {};
  dkf::GridOptions interrupting = opts;
  interrupting.on_cell = [](std::size_t cell, const dkf::MetricsRecord&) {
    if (cell == 3) throw Stop{};
  };
  CHECK_THROWS_AS(dkf::grid_search(base, ps, hs, ds, interrupting), Stop);
  CHECK(count_lines(opts.results_path) == 6);

  const auto resumed = dkf::grid_search(base, ps, hs, ds, opts);
  CHECK(resumed.reused == 3);
  CHECK(resumed.computed == 1);
  REQUIRE(resumed.records.size() == full.records.size());
  for (std::size_t i = 0; i < full.records.size(); ++i)
    CHECK(resumed.records[i].same_result(full.records[i]));

  const auto again = dkf::grid_search(base, ps, hs, ds, opts);
  CHECK(again.reused == 4);
  CHECK(again.computed == 0);
  CHECK(count_lines(opts.results_path) == 8);

  dkf::write_heatmap_csv(again.records, dkf::GridAxis::patch_len, "mse", dir / "heat.csv");
  std::ifstream in(dir / "heat.csv");
  std::string line;
  std::getline(in, line);
  CHECK(line == "H/p,2,4");
  std::size_t rows = 0;
  while (std::getline(in, line)) {
    ++rows;
    CHECK(std::count(line.begin(), line.end(), ',') == 2);
  }
  CHECK(rows == 2);
  CHECK_THROWS_AS(dkf::write_heatmap_csv(again.records, dkf::GridAxis::d_model, "rmse", dir / "h.csv"),
                  dkf::ConfigError);
}

TEST_CASE("failed grid cells are recorded and retried") {
  TempDir dir("gridfail");
  ExperimentConfig base = small_experiment();
  base.epochs = 1;
  dkf::GridOptions opts;
  opts.results_path = dir / "grid.jsonl";
  const auto g = dkf::grid_search(base, {3, 4}, {2}, {4}, opts);
  CHECK(g.failed == 1);
  CHECK(g.computed == 1);
  CHECK_FALSE(g.records.front().error.empty());
  const auto again = dkf::grid_search(base, {3, 4}, {2}, {4}, opts);
  CHECK(again.failed == 1);
  CHECK(again.reused == 1);
}
