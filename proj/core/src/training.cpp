#include "dkf/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <unordered_map>

#include "dkf/error.hpp"

namespace dkf {

namespace {

struct NamedParam {
  std::string name;
  const Matrix* value;
};

std::vector<NamedParam> named_parameters(const DeepKoopFormerModel& model) {
  std::vector<NamedParam> out;
  for_each_parameter(model, [&](const std::string& name, const Matrix& m) {
    out.push_back({name, &m});
  });
  return out;
}

/// Binds the listed matrices as tracked leaves and everything else as constants.
class TrackedResolver final : public ParamResolver {
 public:
  TrackedResolver(ad::Tape& tape, const std::vector<NamedParam>& tracked) : tape_(tape) {
    for (const auto& p : tracked) tracked_.emplace(p.value, true);
  }

  ad::Var operator()(const Matrix& param) override {
    auto it = bound_.find(&param);
    if (it != bound_.end()) return it->second;
    ad::Var v = tracked_.count(&param) ? tape_.parameter(param) : tape_.constant(param);
    bound_.emplace(&param, v);
    return v;
  }

  Matrix grad(const Matrix& param) const {
    auto it = bound_.find(&param);
    if (it == bound_.end()) return Matrix(param.rows(), param.cols());
    return tape_.grad(it->second);
  }

 private:
  ad::Tape& tape_;
  std::unordered_map<const Matrix*, bool> tracked_;
  std::unordered_map<const Matrix*, ad::Var> bound_;
};

void add_into(Matrix& acc, const Matrix& g) {
  for (std::size_t i = 0; i < acc.size(); ++i) acc.data()[i] += g.data()[i];
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

ParameterSet::ParameterSet(DeepKoopFormerModel& model) {
  for_each_parameter(model, [&](const std::string& name, Matrix& m) {
    entries_.push_back({name, &m});
  });
}

std::size_t ParameterSet::scalar_count() const noexcept {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value->size();
  return n;
}

void TrainingConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning rate must be positive");
  if (!(rho_max > 0.0 && rho_max < 1.0)) throw ConfigError("rho_max must lie in (0, 1)");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be nonnegative");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(adam_eps > 0.0)) throw ConfigError("Adam epsilon must be positive");
  if (chunk_windows == 0) throw ConfigError("chunk size must be positive");
}

Gradient loss_and_gradient(const DeepKoopFormerModel& model, const WindowBatch& batch,
                           const TrainingConfig& cfg) {
  const std::size_t B = batch.size();
  if (B == 0) throw ConfigError("cannot train on an empty window batch");
  if (batch.context != model.cfg.context_len || batch.horizon != model.horizon)
    throw ShapeError("window batch P/H do not match the model");
  const std::vector<NamedParam> named = named_parameters(model);
  Gradient out;
  for (const auto& p : named) out.grads.emplace_back(p.value->rows(), p.value->cols());

  for (std::size_t first = 0; first < B; first += cfg.chunk_windows) {
    const std::size_t n = std::min(cfg.chunk_windows, B - first);
    const WindowBatch chunk = n == B ? batch : batch.slice(first, n);
    const double weight = static_cast<double>(n) / static_cast<double>(B);
    ad::Tape tape;
    TrackedResolver resolve(tape, named);
    const ForecastGraph fg =
        forecast_graph(tape, resolve, model, prepare_inputs(model, chunk.x), cfg.stop_gradient_qr);
    const LossGraph lg = loss_graph(tape, fg, chunk.y, cfg.lambda, cfg.lyapunov_mode);
    out.loss.total += weight * lg.total.value()(0, 0);
    out.loss.mse += weight * lg.mse.value()(0, 0);
    out.loss.lyap += weight * lg.lyap.value()(0, 0);
    tape.backward(lg.total, weight);
    for (std::size_t i = 0; i < named.size(); ++i) add_into(out.grads[i], resolve.grad(*named[i].value));
  }
  if (!std::isfinite(out.loss.total)) throw NumericError("non-finite training loss");
  for (std::size_t i = 0; i < named.size(); ++i)
    if (!out.grads[i].all_finite())
      throw NumericError("non-finite gradient in parameter " + named[i].name);
  return out;
}

LossTerms evaluate_loss(const DeepKoopFormerModel& model, const WindowBatch& batch, double lambda,
                        LyapunovMode mode) {
  const std::size_t B = batch.size();
  if (B == 0) throw ConfigError("cannot evaluate on an empty window batch");
  constexpr std::size_t chunk_windows = 128;
  LossTerms out;
  for (std::size_t first = 0; first < B; first += chunk_windows) {
    const std::size_t n = std::min(chunk_windows, B - first);
    const WindowBatch chunk = n == B ? batch : batch.slice(first, n);
    const double weight = static_cast<double>(n) / static_cast<double>(B);
    ad::Tape tape;
    ConstantResolver resolve(tape);
    const ForecastGraph fg = forecast_graph(tape, resolve, model, prepare_inputs(model, chunk.x));
    const LossGraph lg = loss_graph(tape, fg, chunk.y, lambda, mode);
    out.total += weight * lg.total.value()(0, 0);
    out.mse += weight * lg.mse.value()(0, 0);
    out.lyap += weight * lg.lyap.value()(0, 0);
  }
  return out;
}

void adam_step(ParameterSet& params, const std::vector<Matrix>& grads, AdamState& state,
               const TrainingConfig& cfg) {
  if (grads.size() != params.size())
    throw ShapeError("adam_step: " + std::to_string(grads.size()) + " gradients for " +
                     std::to_string(params.size()) + " parameters");
  if (state.m.empty()) {
    for (const auto& e : params) {
      state.m.emplace_back(e.value->rows(), e.value->cols());
      state.v.emplace_back(e.value->rows(), e.value->cols());
    }
  }
  const std::size_t t = state.step + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));

  std::vector<Matrix> updated;
  updated.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& p = *params[i].value;
    const Matrix& g = grads[i];
    if (g.rows() != p.rows() || g.cols() != p.cols())
      throw ShapeError("adam_step: gradient shape mismatch for " + params[i].name);
    Matrix next = p;
    Matrix& m = state.m[i];
    Matrix& v = state.v[i];
    Matrix m_new = m;
    Matrix v_new = v;
    for (std::size_t k = 0; k < p.size(); ++k) {
      const double gk = g.data()[k];
      m_new.data()[k] = cfg.beta1 * m.data()[k] + (1.0 - cfg.beta1) * gk;
      v_new.data()[k] = cfg.beta2 * v.data()[k] + (1.0 - cfg.beta2) * gk * gk;
      const double mhat = m_new.data()[k] / bc1;
      const double vhat = v_new.data()[k] / bc2;
      next.data()[k] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
    if (!next.all_finite()) throw NumericError("non-finite Adam update for parameter " + params[i].name);
    m = std::move(m_new);
    v = std::move(v_new);
    updated.push_back(std::move(next));
  }
  for (std::size_t i = 0; i < params.size(); ++i) *params[i].value = std::move(updated[i]);
  state.step = t;
}

void TrainingTrace::write_csv(const std::filesystem::path& path) const {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open trace file for writing: " + path.string());
  out << "epoch,total_loss,mse,lyap,spectral_radius,seconds\n";
  out.precision(17);
  for (const auto& e : epochs)
    out << e.epoch << ',' << e.total_loss << ',' << e.mse << ',' << e.lyap << ','
        << e.spectral_radius << ',' << e.seconds << '\n';
  if (!out) throw IoError("failed writing trace file: " + path.string());
}

TrainingTrace train(DeepKoopFormerModel& model, const WindowBatch& windows,
                    const TrainingConfig& cfg, const EpochCallback& on_epoch) {
  cfg.validate();
  model.validate();
  if (windows.size() == 0) throw ConfigError("cannot train on an empty window batch");
  if (cfg.rho_max != model.koop.rho_max)
    throw ConfigError("training rho_max differs from the model's operator cap");

  ParameterSet params(model);
  AdamState state;
  TrainingTrace trace;
  std::mt19937_64 shuffle_rng(cfg.seed);
  const std::size_t B = windows.size();
  const bool full_batch = cfg.batch_size == 0 || cfg.batch_size >= B;
  std::vector<std::size_t> order(B);
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    auto step = [&](const WindowBatch& batch, double weight) {
      Gradient g;
      try {
        g = loss_and_gradient(model, batch, cfg);
        adam_step(params, g.grads, state, cfg);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ": " + e.what());
      }
      if (model.koop.tie_factors) model.koop.v_raw = model.koop.u_raw;
      rec.total_loss += weight * g.loss.total;
      rec.mse += weight * g.loss.mse;
      rec.lyap += weight * g.loss.lyap;
    };
    if (full_batch) {
      step(windows, 1.0);
    } else {
      std::shuffle(order.begin(), order.end(), shuffle_rng);
      for (std::size_t first = 0; first < B; first += cfg.batch_size) {
        const std::size_t n = std::min(cfg.batch_size, B - first);
        const std::vector<std::size_t> idx(order.begin() + static_cast<std::ptrdiff_t>(first),
                                           order.begin() + static_cast<std::ptrdiff_t>(first + n));
        step(windows.gather(idx), static_cast<double>(n) / static_cast<double>(B));
      }
    }
    rec.spectral_radius = spectral_trace_entry(model.koop);
    rec.seconds = seconds_since(t0);
    trace.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return trace;
}

FiniteDifferenceReport finite_difference_check(const DeepKoopFormerModel& model,
                                               const WindowBatch& sample,
                                               const FiniteDifferenceOptions& opts) {
  if (!(opts.epsilon > 0.0)) throw ConfigError("finite-difference epsilon must be positive");
  TrainingConfig tc;
  tc.lambda = opts.lambda;
  tc.rho_max = model.koop.rho_max;
  tc.lyapunov_mode = opts.lyapunov_mode;
  const Gradient analytic = loss_and_gradient(model, sample, tc);

  DeepKoopFormerModel probe = model;
  ParameterSet params(probe);
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t k = 0; k < params[i].value->size(); ++k) coords.emplace_back(i, k);
  if (coords.size() > opts.max_coordinates) {
    std::mt19937_64 rng(opts.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opts.max_coordinates);
    std::sort(coords.begin(), coords.end());
  }

  FiniteDifferenceReport report;
  report.coordinates = coords.size();
  for (const auto& [i, k] : coords) {
    double& slot = params[i].value->data()[k];
    const double saved = slot;
    slot = saved + opts.epsilon;
    if (probe.koop.tie_factors) probe.koop.v_raw = probe.koop.u_raw;
    const double up = evaluate_loss(probe, sample, opts.lambda, opts.lyapunov_mode).total;
    slot = saved - opts.epsilon;
    if (probe.koop.tie_factors) probe.koop.v_raw = probe.koop.u_raw;
    const double down = evaluate_loss(probe, sample, opts.lambda, opts.lyapunov_mode).total;
    slot = saved;
    const double fd = (up - down) / (2.0 * opts.epsilon);
    const double ad = analytic.grads[i].data()[k];
    const double diff = std::abs(fd - ad);
    const double raw = diff == 0.0 ? 0.0 : diff / std::max(std::abs(fd), std::abs(ad));
    const double rel = diff <= opts.abs_tol ? 0.0 : raw;
    report.max_raw_rel_error = std::max(report.max_raw_rel_error, raw);
    report.max_abs_error = std::max(report.max_abs_error, diff);
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_parameter = params[i].name + "[" + std::to_string(k) + "]";
    }
  }
  return report;
}

SigmaGradientAudit sigma_gradient_bound_audit(const DeepKoopFormerModel& model, const Matrix& x) {
  model.validate();
  const ModelInputs inputs = prepare_inputs(model, x);
  if (inputs.windows != 1) throw ShapeError("sigma audit expects a single P x d window");
  const std::size_t d = model.cfg.channels;
  const std::vector<NamedParam> tracked{{"koopman.sigma_raw", &model.koop.sigma_raw}};

  SigmaGradientAudit out;
  Matrix first_row(1, model.horizon);
  first_row(0, 0) = 1.0;
  for (std::size_t j = 0; j < d; ++j) {
    ad::Tape tape;
    TrackedResolver resolve(tape, tracked);
    const ForecastGraph fg = forecast_graph(tape, resolve, model, inputs);
    Matrix pick(d, 1);
    pick(j, 0) = 1.0;
    const ad::Var xj =
        ad::matmul(ad::matmul(tape.constant(first_row), fg.y_hat), tape.constant(pick));
    tape.backward(xj);
    const Matrix g_sigma = resolve.grad(model.koop.sigma_raw);
    for (double g : g_sigma.values())
      out.measured = std::max(out.measured, std::abs(g));
    if (j == 0) {
      double zz = 0.0;
      for (double v : fg.latents[0].value().values()) zz += v * v;
      out.bound = spectral_norm(model.decoder) * model.koop.rho_max * std::sqrt(zz) / 4.0;
    }
  }
  return out;
}

}  // namespace dkf
