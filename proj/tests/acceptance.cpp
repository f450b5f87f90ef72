#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <unistd.h>

#include "dkf/data.hpp"
#include "dkf/encoder.hpp"
#include "dkf/experiment.hpp"
#include "dkf/forecaster.hpp"
#include "dkf/koopman.hpp"
#include "dkf/runtime.hpp"
#include "dkf/training.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

namespace fs = std::filesystem;
using dkf::Matrix;
using dkf::Vector;

namespace {

struct Outcome {
  bool passed = true;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

std::size_t uniform(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

dkf::StableKoopmanOperator random_operator(std::mt19937_64& rng, std::size_t d) {
  const double rho = std::uniform_real_distribution<double>(0.5, 0.99)(rng);
  dkf::StableKoopmanOperator op = dkf::StableKoopmanOperator::init(d, rho, rng, uniform(rng, 0, 3) == 0);
  op.sigma_raw = dkf::random_gaussian(1, d, rng, 3.0);
  return op;
}

dkf::DeepKoopFormerModel random_tiny_model(std::mt19937_64& rng, std::size_t i, std::size_t horizon) {
  const auto variant = static_cast<dkf::EncoderVariant>(i % 3);
  dkf::DeepKoopFormerModel m = dkf::init_model(testing_support::tiny_config(variant), horizon, rng());
  m.koop.sigma_raw = dkf::random_gaussian(1, m.cfg.d_model, rng, 2.0);
  if (m.has_trend_head()) m.trend_head = dkf::random_gaussian(horizon, m.cfg.context_len, rng, 0.3);
  return m;
}

double gram_defect(const Matrix& q) {
  const oracle::Mat e = oracle::to_eigen(q);
  return (e.transpose() * e - oracle::Mat::Identity(e.cols(), e.cols())).norm();
}

/// Largest ‖QᵀQ − I‖_F seen over every materialisation of criteria 1-3.
double g_orthogonality = 0.0;
std::size_t g_materializations = 0;

dkf::MaterializedKoopman tracked(const dkf::StableKoopmanOperator& op) {
  dkf::MaterializedKoopman mk = dkf::materialize(op);
  g_orthogonality = std::max({g_orthogonality, gram_defect(mk.u), gram_defect(mk.v)});
  ++g_materializations;
  return mk;
}

std::string read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path g_work;

Outcome spectral_cap() {
  std::mt19937_64 rng(101);
  double worst_power = 0.0, worst_svd = 0.0;
  Outcome o;
  for (int i = 0; i < 1000; ++i) {
    const auto op = random_operator(rng, uniform(rng, 2, 64));
    const Matrix k = tracked(op).k;
    const double power = dkf::spectral_norm(k);
    const double svd = oracle::top_singular_value(k);
    worst_power = std::max(worst_power, power - op.rho_max);
    worst_svd = std::max(worst_svd, svd - op.rho_max);
    if (power > op.rho_max + 1e-8 || svd > op.rho_max + 1e-8) o.passed = false;
  }
  o.detail = "1000 operators, max (norm - rho_max): power " + fmt(worst_power) + ", SVD " + fmt(worst_svd);
  return o;
}

Outcome geometric_decay() {
  std::mt19937_64 rng(202);
  std::normal_distribution<double> g;
  double worst = 0.0;
  Outcome o;
  for (int i = 0; i < 200; ++i) {
    const auto op = random_operator(rng, uniform(rng, 2, 32));
    Vector z0(op.dim());
    for (std::size_t j = 0; j < z0.size(); ++j) z0[j] = g(rng);
    tracked(op);
    const auto traj = dkf::rollout(op, z0, 100);
    if (traj.size() != 100) o.passed = false;
    for (std::size_t h = 0; h < traj.size(); ++h) {
      const double env = std::pow(op.rho_max, static_cast<double>(h + 1)) * z0.norm();
      worst = std::max(worst, traj[h].norm() / env);
      if (traj[h].norm() > env * (1.0 + 1e-8)) o.passed = false;
    }
  }
  o.detail = "200 pairs, h = 100, max ‖K^h z0‖ / (rho^h ‖z0‖) = " + fmt(worst);
  return o;
}

Outcome perturbation_bound() {
  std::mt19937_64 rng(303);
  std::normal_distribution<double> g;
  double worst = 0.0;
  Outcome o;
  for (std::size_t i = 0; i < 100; ++i) {
    const dkf::DeepKoopFormerModel m = random_tiny_model(rng, i, 2);
    const Matrix x = dkf::random_gaussian(m.cfg.context_len, m.cfg.channels, rng);
    const Vector z0 = dkf::forward(m, x).latent_trajectory.front();
    const double scale = std::pow(10.0, std::uniform_real_distribution<double>(-6.0, 0.0)(rng));
    Vector dz(z0.size());
    for (std::size_t j = 0; j < dz.size(); ++j) dz[j] = scale * g(rng);
    const oracle::Mat K = oracle::to_eigen(tracked(m.koop).k);
    const oracle::Mat W = oracle::to_eigen(m.decoder);
    const double w_norm = oracle::top_singular_value(m.decoder);
    oracle::Vec a = oracle::to_eigen(z0);
    oracle::Vec b = a + oracle::to_eigen(dz);
    for (std::size_t h = 1; h <= 50; ++h) {
      a = K * a;
      b = K * b;
      const double measured = (W * a - W * b).norm();
      const double bound = w_norm * std::pow(m.koop.rho_max, static_cast<double>(h)) * dz.norm();
      const double lib = dkf::perturbation_bound(m.koop, w_norm, h, dz.norm());
      if (std::abs(lib - bound) > 1e-12 * bound) o.passed = false;
      worst = std::max(worst, measured / bound);
      if (measured > bound) o.passed = false;
    }
  }
  o.detail = "100 models, h = 1..50, max measured / bound = " + fmt(worst);
  return o;
}

Outcome orthogonality() {
  Outcome o;
  o.passed = g_materializations > 0 && g_orthogonality <= 1e-10;
  o.detail = std::to_string(g_materializations) + " materialisations, max ‖QᵀQ - I‖_F = " + fmt(g_orthogonality);
  return o;
}

Outcome gradient_audit() {
  std::mt19937_64 rng(505);
  double worst = 0.0, raw = 0.0, abs_err = 0.0;
  std::string where;
  std::size_t coords = 0;
  for (std::size_t i = 0; i < 20; ++i) {
    const dkf::DeepKoopFormerModel m = random_tiny_model(rng, i, 2);
    const dkf::WindowBatch batch = dkf::make_windows(dkf::random_gaussian(13, 2, rng), 8, 2);
    dkf::FiniteDifferenceOptions fo;
    fo.seed = rng();
    const auto r = dkf::finite_difference_check(m, batch, fo);
    coords += r.coordinates;
    raw = std::max(raw, r.max_raw_rel_error);
    abs_err = std::max(abs_err, r.max_abs_error);
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      where = r.worst_parameter;
    }
  }
  Outcome o;
  o.passed = worst <= 1e-4;
  o.detail = "20 samples, " + std::to_string(coords) + " coordinates, max rel error " + fmt(worst) +
             (where.empty() ? "" : " (" + where + ")") + " with abs tol 1e-8; unmasked max rel " +
             fmt(raw) + ", max abs " + fmt(abs_err);
  return o;
}

Outcome sigma_bound() {
  std::mt19937_64 rng(606);
  double worst = 0.0;
  Outcome o;
  for (std::size_t i = 0; i < 100; ++i) {
    const dkf::DeepKoopFormerModel m = random_tiny_model(rng, i, 1);
    const Matrix x = dkf::random_gaussian(m.cfg.context_len, m.cfg.channels, rng);
    const auto audit = dkf::sigma_gradient_bound_audit(m, x);
    const double z_norm = dkf::forward(m, x).latent_trajectory.front().norm();
    const double bound = oracle::top_singular_value(m.decoder) * m.koop.rho_max * z_norm / 4.0;
    worst = std::max(worst, audit.measured / bound);
    if (audit.measured > bound) o.passed = false;
  }
  o.detail = "100 models, max measured / (‖W‖ rho ‖z‖ / 4) = " + fmt(worst);
  return o;
}

Outcome probsparse_degeneracy() {
  std::mt19937_64 rng(707);
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t n = uniform(rng, 1, 24), w = uniform(rng, 1, 8);
    const Matrix q = dkf::random_gaussian(n, w, rng);
    const Matrix k = dkf::random_gaussian(n, w, rng);
    const Matrix v = dkf::random_gaussian(n, w, rng);
    const double factor = static_cast<double>(n) / std::log(static_cast<double>(n) + 1.0);
    const Matrix sparse = dkf::probsparse_attention(q, k, v, factor);
    worst = std::max(worst, dkf::max_abs_diff(sparse, dkf::full_attention(q, k, v)));
    const Matrix ref = oracle::from_eigen(
        oracle::attention_head(oracle::to_eigen(q), oracle::to_eigen(k), oracle::to_eigen(v),
                               std::vector<bool>(n, true)));
    worst = std::max(worst, dkf::max_abs_diff(sparse, ref));
  }
  Outcome o;
  o.passed = worst <= 1e-12;
  o.detail = "100 cases with u = n, max |probsparse - full| = " + fmt(worst);
  return o;
}

Outcome decomposition_identity() {
  std::mt19937_64 rng(808);
  std::size_t entries = 0, mismatched = 0, series_bad = 0;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::size_t rows = uniform(rng, 8, 128);
    const Matrix x = dkf::random_gaussian(rows, uniform(rng, 1, 4), rng);
    const std::size_t kernel = 2 * uniform(rng, 0, (rows - 1) / 2) + 1;
    const auto d = dkf::decompose(x, kernel);
    std::size_t bad = 0;
    for (std::size_t j = 0; j < x.size(); ++j, ++entries) {
      const double back = d.trend.data()[j] + d.seasonal.data()[j];
      if (back != x.data()[j]) ++bad;
      worst = std::max(worst, std::abs(back - x.data()[j]));
    }
    mismatched += bad;
    if (bad > 0) ++series_bad;
  }
  Outcome o;
  o.passed = mismatched == 0;
  o.detail = std::to_string(series_bad) + " of 100 series inexact, " + std::to_string(mismatched) +
             " of " + std::to_string(entries) + " entries, max |trend + seasonal - x| = " + fmt(worst);
  return o;
}

const std::vector<dkf::EncoderVariant> kVariants{dkf::EncoderVariant::patch,
                                                 dkf::EncoderVariant::probsparse,
                                                 dkf::EncoderVariant::decomp};

std::vector<dkf::ExperimentResult> g_desk_runs;

dkf::ExperimentResult desk_run(dkf::EncoderVariant v, const fs::path& dir) {
  dkf::ExperimentConfig cfg = dkf::van_der_pol_experiment(v, 7);
  cfg.output_dir = dir / std::string(dkf::to_string(v));
  return dkf::run_experiment(cfg);
}

Outcome van_der_pol() {
  Outcome o;
  for (auto v : kVariants) {
    const auto t0 = std::chrono::steady_clock::now();
    auto r = desk_run(v, g_work / "desk_a");
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const auto& ep = r.trace.epochs;
    double max_rho = 0.0;
    for (const auto& e : ep) max_rho = std::max(max_rho, e.spectral_radius);
    const bool ok = ep.size() == 1000 && r.test.mse <= 0.05 && max_rho <= 0.99 &&
                    ep[999].total_loss < ep[9].total_loss && secs < 900.0;
    o.passed = o.passed && ok;
    o.detail += std::string(o.detail.empty() ? "" : "; ") + std::string(dkf::to_string(v)) +
                ": test mse " + fmt(r.test.mse) + ", max rho " + fmt(max_rho) + ", loss@10 " +
                fmt(ep.size() > 9 ? ep[9].total_loss : NAN) + " -> loss@1000 " +
                fmt(ep.empty() ? NAN : ep.back().total_loss) + ", " + fmt(secs) + " s";
    g_desk_runs.push_back(std::move(r));
  }
  return o;
}

Outcome lorenz() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto r = dkf::run_experiment(dkf::lorenz_experiment(7));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto& ep = r.trace.epochs;
  double max_rho = 0.0;
  for (const auto& e : ep) max_rho = std::max(max_rho, e.spectral_radius);
  std::size_t violations = 0;
  double prev = INFINITY;
  for (std::size_t i = 19; i < ep.size(); ++i) {
    double sum = 0.0;
    for (std::size_t j = i - 19; j <= i; ++j) sum += ep[j].total_loss;
    const double ma = sum / 20.0;
    if (!(ma < prev)) ++violations;
    prev = ma;
  }
  Outcome o;
  o.passed = ep.size() == 300 && violations == 0 && max_rho <= 0.99 && secs < 1200.0;
  o.detail = std::to_string(violations) + " non-decreasing steps of the 20-epoch average, max rho " +
             fmt(max_rho) + ", loss " + fmt(ep.empty() ? NAN : ep.front().total_loss) + " -> " +
             fmt(ep.empty() ? NAN : ep.back().total_loss) + ", test mse " + fmt(r.test.mse) + ", " +
             fmt(secs) + " s";
  return o;
}

Outcome determinism() {
  Outcome o;
  if (g_desk_runs.size() != kVariants.size()) {
    for (auto v : kVariants) g_desk_runs.push_back(desk_run(v, g_work / "desk_a"));
  }
  for (std::size_t i = 0; i < kVariants.size(); ++i) {
    const auto v = kVariants[i];
    const auto again = desk_run(v, g_work / "desk_b");
    const std::string name(dkf::to_string(v));
    const bool records = again.train.same_result(g_desk_runs[i].train) &&
                         again.test.same_result(g_desk_runs[i].test);
    const std::string a = read_bytes(g_work / "desk_a" / name / "checkpoint.json");
    const bool bytes = !a.empty() && a == read_bytes(g_work / "desk_b" / name / "checkpoint.json");
    o.passed = o.passed && records && bytes;
    o.detail += std::string(o.detail.empty() ? "" : "; ") + name + ": records " +
                (records ? "identical" : "differ") + ", checkpoint " + (bytes ? "identical" : "differs");
  }
  return o;
}

Outcome windowing() {
  std::mt19937_64 rng(1212);
  Outcome o;
  std::size_t checked = 0;
  for (int i = 0; i < 200; ++i) {
    const std::size_t P = uniform(rng, 1, 40), H = uniform(rng, 1, 20);
    const std::size_t T = P + H - 1 + uniform(rng, 1, 200), d = uniform(rng, 1, 4);
    const Matrix s = dkf::random_gaussian(T, d, rng);
    const auto w = dkf::make_windows(s, P, H);
    if (w.size() != T - P - H + 1) o.passed = false;
    for (std::size_t b = 0; b < w.size(); ++b)
      for (std::size_t c = 0; c < d; ++c) {
        for (std::size_t t = 0; t < P; ++t, ++checked)
          if (w.x(b * P + t, c) != s(b + t, c)) o.passed = false;
        for (std::size_t t = 0; t < H; ++t, ++checked)
          if (w.y(b * H + t, c) != s(b + P + t, c)) o.passed = false;
      }
  }
  o.detail = "200 (T, P, H) triples, " + std::to_string(checked) + " elements compared";
  return o;
}

Outcome grid_harness() {
  dkf::ExperimentConfig base = dkf::van_der_pol_experiment(dkf::EncoderVariant::patch, 7);
  base.simulator.t_end = 6.0;
  base.context_len = 24;
  base.d_model = 8;
  base.n_layers = 1;
  base.ffn_width = 16;
  base.epochs = 50;
  const std::vector<std::size_t> ps{2, 3, 4, 6, 8, 12}, hs{1, 2, 3, 4, 5}, ds{8};
  Outcome o;

  const auto reference = dkf::grid_search(base, ps, hs, ds);

  dkf::GridOptions opts;
  opts.results_path = g_work / "grid" / "results.jsonl";
  fs::create_directories(opts.results_path.parent_path());
  struct Interrupted {};
  dkf::GridOptions cut = opts;
  cut.on_cell = [](std::size_t cell, const dkf::MetricsRecord&) {
    if (cell == 13) throw Interrupted{};
  };
  bool interrupted = false;
  try {
    dkf::grid_search(base, ps, hs, ds, cut);
  } catch (const Interrupted&) {
    interrupted = true;
  }
  const std::size_t lines_before = dkf::read_metrics(opts.results_path).size();
  const auto resumed = dkf::grid_search(base, ps, hs, ds, opts);

  bool same = resumed.records.size() == reference.records.size();
  for (std::size_t i = 0; same && i < reference.records.size(); ++i)
    same = resumed.records[i].same_result(reference.records[i]);

  const fs::path heat = g_work / "grid" / "heatmap_mse.csv";
  dkf::write_heatmap_csv(resumed.records, dkf::GridAxis::patch_len, "mse", heat);
  std::ifstream in(heat);
  std::string line;
  std::size_t rows = 0, filled = 0;
  std::getline(in, line);
  const bool header = line == "H/p,2,3,4,6,8,12";
  while (std::getline(in, line)) {
    ++rows;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');
    while (std::getline(ss, cell, ','))
      if (!cell.empty() && cell != "nan") ++filled;
  }

  o.passed = reference.computed == 30 && reference.failed == 0 && interrupted &&
             lines_before == 26 && resumed.reused == 13 && resumed.computed == 17 && same &&
             header && rows == 5 && filled == 30 &&
             dkf::read_metrics(opts.results_path).size() == 60;
  o.detail = "interrupted after 13 of 30 cells, resumed " + std::to_string(resumed.reused) +
             " reused + " + std::to_string(resumed.computed) + " computed, records " +
             (same ? "match" : "differ from") + " an uninterrupted sweep, heatmap " +
             std::to_string(rows) + "x6 with " + std::to_string(filled) + " values";
  return o;
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
  double limit_seconds;  // 0 = no runtime gate
};

}  // namespace

int main(int argc, char** argv) {
  dkf::tune_allocator();
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) selected.insert(std::atoi(argv[i]));

  g_work = fs::temp_directory_path() / ("dkf_acceptance_" + std::to_string(::getpid()));
  fs::create_directories(g_work);

  const std::vector<Criterion> criteria{
      {1, "spectral cap", spectral_cap, 30.0},
      {2, "geometric decay", geometric_decay, 30.0},
      {3, "perturbation bound", perturbation_bound, 120.0},
      {4, "orthogonality conditioning", orthogonality, 0.0},
      {5, "gradient audit", gradient_audit, 120.0},
      {6, "sigma-gradient bound", sigma_bound, 0.0},
      {7, "probsparse degeneracy", probsparse_degeneracy, 0.0},
      {8, "decomposition identity", decomposition_identity, 0.0},
      {9, "van der pol desk run", van_der_pol, 0.0},
      {10, "lorenz smoke run", lorenz, 0.0},
      {11, "determinism", determinism, 0.0},
      {12, "windowing", windowing, 0.0},
      {13, "grid harness", grid_harness, 0.0},
  };

  int failures = 0;
  for (const auto& c : criteria) {
    if (!selected.empty() && !selected.count(c.id)) continue;
    if (c.id == 4 && g_materializations == 0) {
      spectral_cap();
      geometric_decay();
      perturbation_bound();
    }
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.limit_seconds > 0.0 && secs >= c.limit_seconds) {
      o.passed = false;
      o.detail += " (over the " + fmt(c.limit_seconds) + " s limit)";
    }
    if (!o.passed) ++failures;
    std::printf("%s  %2d %-28s %9.2f s  %s\n", o.passed ? "PASS" : "FAIL", c.id, c.name, secs,
                o.detail.c_str());
    std::fflush(stdout);
  }

  std::error_code ec;
  fs::remove_all(g_work, ec);
  std::printf("%d criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
