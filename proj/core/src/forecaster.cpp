#include "dkf/forecaster.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>

#include "dkf/error.hpp"

namespace dkf {

namespace {

constexpr std::size_t kPredictChunk = 256;

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const char* name) {
  if (m.rows() != rows || m.cols() != cols) {
    std::ostringstream os;
    os << "model parameter " << name << " is " << m.rows() << "x" << m.cols() << ", expected "
       << rows << "x" << cols;
    throw ShapeError(os.str());
  }
}

Matrix window_of(const Matrix& stack, std::size_t w, std::size_t len) {
  const std::size_t cols = stack.cols();
  const double* first = stack.data() + w * len * cols;
  return Matrix::from_data(len, cols, std::vector<double>(first, first + len * cols));
}

void append_rows(std::vector<double>& out, const Matrix& m) {
  out.insert(out.end(), m.values().begin(), m.values().end());
}

double squared_norm(const Vector& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return s;
}

}  // namespace

void DeepKoopFormerModel::validate() const {
  cfg.validate();
  if (horizon == 0) throw ConfigError("forecast horizon must be positive");
  check_encoder_params(cfg, enc);
  koop.validate();
  if (koop.dim() != cfg.d_model)
    throw ShapeError("Koopman operator dimension " + std::to_string(koop.dim()) +
                     " does not match d_model " + std::to_string(cfg.d_model));
  expect_shape(decoder, cfg.channels, cfg.d_model, "decoder.w");
  if (has_trend_head()) {
    if (cfg.variant != EncoderVariant::decomp)
      throw ShapeError("trend head is only defined for the decomp variant");
    expect_shape(trend_head, horizon, cfg.context_len, "trend_head.w");
  }
}

DeepKoopFormerModel init_model(const EncoderConfig& cfg, std::size_t horizon, std::uint64_t seed,
                               const ModelOptions& opts) {
  cfg.validate();
  if (horizon == 0) throw ConfigError("forecast horizon must be positive");
  std::mt19937_64 rng(seed);
  DeepKoopFormerModel m;
  m.cfg = cfg;
  m.horizon = horizon;
  m.seed = seed;
  m.enc = init_encoder_params(cfg, rng);
  m.koop = StableKoopmanOperator::init(cfg.d_model, opts.rho_max, rng, opts.tie_factors);
  m.decoder = random_gaussian(cfg.channels, cfg.d_model, rng,
                              1.0 / std::sqrt(static_cast<double>(cfg.d_model)));
  if (cfg.variant == EncoderVariant::decomp && opts.trend_head)
    m.trend_head = Matrix(horizon, cfg.context_len);
  return m;
}

ModelInputs prepare_inputs(const DeepKoopFormerModel& model, const Matrix& x_stack) {
  const EncoderConfig& cfg = model.cfg;
  const std::size_t P = cfg.context_len;
  if (x_stack.cols() != cfg.channels || x_stack.rows() == 0 || x_stack.rows() % P != 0) {
    std::ostringstream os;
    os << "input stack is " << x_stack.rows() << "x" << x_stack.cols()
       << ", expected a multiple of " << P << " rows and " << cfg.channels << " columns";
    throw ShapeError(os.str());
  }
  ModelInputs in;
  in.windows = x_stack.rows() / P;
  std::vector<double> tokens;
  std::vector<double> trend;
  tokens.reserve(in.windows * cfg.tokens() * cfg.token_width());
  for (std::size_t w = 0; w < in.windows; ++w) {
    const Matrix x = window_of(x_stack, w, P);
    if (cfg.variant == EncoderVariant::decomp) {
      const Decomposition parts = decompose(x, cfg.ma_kernel);
      append_rows(tokens, parts.seasonal);
      if (model.has_trend_head()) append_rows(trend, parts.trend);
    } else {
      append_rows(tokens, encoder_tokens(x, cfg));
    }
  }
  in.tokens = Matrix::from_data(in.windows * cfg.tokens(), cfg.token_width(), std::move(tokens));
  if (model.has_trend_head())
    in.trend = Matrix::from_data(in.windows * P, cfg.channels, std::move(trend));
  return in;
}

ForecastGraph forecast_graph(ad::Tape& tape, ParamResolver& P, const DeepKoopFormerModel& model,
                             const ModelInputs& inputs, bool stop_gradient_qr) {
  ForecastGraph g;
  ad::Var z = encoder_graph(tape, P, model.cfg, model.enc, tape.constant(inputs.tokens));
  g.koopman = koopman_graph(P, model.koop, stop_gradient_qr);
  g.latents.reserve(model.horizon + 1);
  g.latents.push_back(z);
  for (std::size_t h = 0; h < model.horizon; ++h) {
    z = ad::matmul_nt(z, g.koopman.k);
    g.latents.push_back(z);
  }
  const std::vector<ad::Var> future(g.latents.begin() + 1, g.latents.end());
  g.y_hat = ad::matmul_nt(ad::interleave_rows(future), P(model.decoder));
  if (model.has_trend_head())
    g.y_hat = ad::add(g.y_hat, ad::temporal_map(P(model.trend_head), tape.constant(inputs.trend)));
  return g;
}

LossGraph loss_graph(ad::Tape& tape, const ForecastGraph& forecast, const Matrix& y_stack,
                     double lambda, LyapunovMode mode) {
  const Matrix& y_hat = forecast.y_hat.value();
  if (y_hat.rows() != y_stack.rows() || y_hat.cols() != y_stack.cols()) {
    std::ostringstream os;
    os << "target stack is " << y_stack.rows() << "x" << y_stack.cols() << ", forecast is "
       << y_hat.rows() << "x" << y_hat.cols();
    throw ShapeError(os.str());
  }
  LossGraph out;
  out.mse = ad::mse(forecast.y_hat, tape.constant(y_stack));
  const std::size_t pairs =
      mode == LyapunovMode::first_pair ? std::min<std::size_t>(1, forecast.latents.size() - 1)
                                       : forecast.latents.size() - 1;
  if (pairs == 0) {
    out.lyap = tape.constant(Matrix(1, 1));
  } else {
    ad::Var prev = ad::row_sq_norms(forecast.latents[0]);
    ad::Var sum;
    for (std::size_t h = 1; h <= pairs; ++h) {
      ad::Var next = ad::row_sq_norms(forecast.latents[h]);
      ad::Var term = ad::mean(ad::relu(ad::sub(next, prev)));
      sum = sum.valid() ? ad::add(sum, term) : term;
      prev = next;
    }
    out.lyap = ad::scale(sum, 1.0 / static_cast<double>(pairs));
  }
  out.total = ad::add(out.mse, ad::scale(out.lyap, lambda));
  return out;
}

ForecastOutput forward(const DeepKoopFormerModel& model, const Matrix& x) {
  model.validate();
  if (x.rows() != model.cfg.context_len || x.cols() != model.cfg.channels) {
    std::ostringstream os;
    os << "input window is " << x.rows() << "x" << x.cols() << ", expected "
       << model.cfg.context_len << "x" << model.cfg.channels;
    throw ShapeError(os.str());
  }
  if (!x.all_finite()) throw NumericError("input window contains non-finite values");
  ad::Tape tape;
  ConstantResolver resolve(tape);
  const ForecastGraph g = forecast_graph(tape, resolve, model, prepare_inputs(model, x));
  ForecastOutput out;
  out.y_hat = g.y_hat.value();
  for (const ad::Var& z : g.latents) {
    const auto row = z.value().row(0);
    out.latent_trajectory.push_back(Vector::from_data(std::vector<double>(row.begin(), row.end())));
  }
  return out;
}

Matrix predict(const DeepKoopFormerModel& model, const Matrix& x_stack) {
  model.validate();
  const std::size_t P = model.cfg.context_len;
  if (x_stack.cols() != model.cfg.channels || x_stack.rows() == 0 || x_stack.rows() % P != 0)
    throw ShapeError("predict: input stack shape does not match the model");
  const std::size_t windows = x_stack.rows() / P;
  const std::size_t d = model.cfg.channels;
  std::vector<double> out;
  out.reserve(windows * model.horizon * d);
  for (std::size_t w0 = 0; w0 < windows; w0 += kPredictChunk) {
    const std::size_t n = std::min(kPredictChunk, windows - w0);
    const double* first = x_stack.data() + w0 * P * d;
    const Matrix chunk = Matrix::from_data(n * P, d, std::vector<double>(first, first + n * P * d));
    ad::Tape tape;
    ConstantResolver resolve(tape);
    const ForecastGraph g = forecast_graph(tape, resolve, model, prepare_inputs(model, chunk));
    append_rows(out, g.y_hat.value());
  }
  Matrix y(windows * model.horizon, d);
  std::copy(out.begin(), out.end(), y.data());
  return y;
}

LossTerms training_loss(const Matrix& y_hat, const Matrix& y,
                        const std::vector<Vector>& trajectory, double lambda, LyapunovMode mode) {
  if (y_hat.rows() != y.rows() || y_hat.cols() != y.cols() || y.empty())
    throw ShapeError("training_loss: forecast and target shapes differ");
  LossTerms t;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = y_hat.data()[i] - y.data()[i];
    t.mse += e * e;
  }
  t.mse /= static_cast<double>(y.size());
  if (trajectory.size() >= 2) {
    const std::size_t pairs = mode == LyapunovMode::first_pair ? 1 : trajectory.size() - 1;
    for (std::size_t h = 1; h <= pairs; ++h) {
      t.lyap += std::max(0.0, squared_norm(trajectory[h]) - squared_norm(trajectory[h - 1]));
    }
    t.lyap /= static_cast<double>(pairs);
  }
  t.total = t.mse + lambda * t.lyap;
  return t;
}

double certified_output_bound(const DeepKoopFormerModel& model, std::size_t h,
                              double delta_z_norm) {
  return perturbation_bound(model.koop, spectral_norm(model.decoder), h, delta_z_norm);
}

}  // namespace dkf
