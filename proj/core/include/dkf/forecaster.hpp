#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dkf/autodiff.hpp"
#include "dkf/encoder.hpp"
#include "dkf/koopman.hpp"
#include "dkf/linalg.hpp"

namespace dkf {

/// Encoder -> stable Koopman rollout -> shared linear decoder, plus an optional
/// trend head (decomp variant) that maps the P x d trend window to H x d.
struct DeepKoopFormerModel {
  EncoderConfig cfg;
  std::size_t horizon = 1;  // H
  EncoderParams enc;
  StableKoopmanOperator koop;
  Matrix decoder;     // d x d_model
  Matrix trend_head;  // H x P, empty when absent
  std::uint64_t seed = 0;

  bool has_trend_head() const noexcept { return !trend_head.empty(); }
  std::size_t latent_dim() const noexcept { return cfg.d_model; }
  void validate() const;
};

struct ModelOptions {
  double rho_max = 0.99;
  bool tie_factors = false;
  /// Only honoured for the decomp variant.
  bool trend_head = true;
};

/// Seeded initialisation. The decoder is N(0, 1/d_model); the trend head starts at zero.
DeepKoopFormerModel init_model(const EncoderConfig& cfg, std::size_t horizon, std::uint64_t seed,
                               const ModelOptions& opts = {});

/// Visits every trainable matrix with a stable, unique name.
template <class Model, class Fn>
void for_each_parameter(Model& model, Fn&& fn) {
  auto& enc = model.enc;
  fn(std::string("encoder.embed_w"), enc.embed_w);
  fn(std::string("encoder.embed_b"), enc.embed_b);
  if (!enc.pos_table.empty()) fn(std::string("encoder.pos_table"), enc.pos_table);
  for (std::size_t l = 0; l < enc.layers.size(); ++l) {
    auto& L = enc.layers[l];
    const std::string pre = "encoder.layers." + std::to_string(l) + ".";
    fn(pre + "wq", L.wq);
    fn(pre + "wk", L.wk);
    fn(pre + "wv", L.wv);
    fn(pre + "wo", L.wo);
    fn(pre + "ffn_w1", L.ffn_w1);
    fn(pre + "ffn_b1", L.ffn_b1);
    fn(pre + "ffn_w2", L.ffn_w2);
    fn(pre + "ffn_b2", L.ffn_b2);
    fn(pre + "ln1_gamma", L.ln1_gamma);
    fn(pre + "ln1_beta", L.ln1_beta);
    fn(pre + "ln2_gamma", L.ln2_gamma);
    fn(pre + "ln2_beta", L.ln2_beta);
  }
  fn(std::string("koopman.u_raw"), model.koop.u_raw);
  if (!model.koop.tie_factors) fn(std::string("koopman.v_raw"), model.koop.v_raw);
  fn(std::string("koopman.sigma_raw"), model.koop.sigma_raw);
  fn(std::string("decoder.w"), model.decoder);
  if (!model.trend_head.empty()) fn(std::string("trend_head.w"), model.trend_head);
}

struct ForecastOutput {
  Matrix y_hat;                           // H x d
  std::vector<Vector> latent_trajectory;  // z_t, z_{t+1}, ..., z_{t+H}
};

ForecastOutput forward(const DeepKoopFormerModel& model, const Matrix& x);

/// Forecasts for a stack of windows (B*P x d) as a stacked B*H x d matrix.
Matrix predict(const DeepKoopFormerModel& model, const Matrix& x_stack);

enum class LyapunovMode {
  all_pairs,   // mean over every consecutive pair of the rollout
  first_pair,  // only (z_t, z_{t+1})
};

struct LossTerms {
  double total = 0.0;
  double mse = 0.0;
  double lyap = 0.0;
};

LossTerms training_loss(const Matrix& y_hat, const Matrix& y,
                        const std::vector<Vector>& trajectory, double lambda,
                        LyapunovMode mode = LyapunovMode::all_pairs);

/// spectral_norm(W) rho_max^h ‖Δz‖.
double certified_output_bound(const DeepKoopFormerModel& model, std::size_t h,
                              double delta_z_norm);

/// Encoder tokens and trend stack for B stacked windows (B*P x d).
struct ModelInputs {
  std::size_t windows = 0;
  Matrix tokens;  // B*tokens x token_width
  Matrix trend;   // B*P x d, empty unless the model has a trend head
};
ModelInputs prepare_inputs(const DeepKoopFormerModel& model, const Matrix& x_stack);

struct ForecastGraph {
  ad::Var y_hat;                // B*H x d, window-major
  std::vector<ad::Var> latents; // H+1 entries of B x d_model
  KoopmanVars koopman;
};

ForecastGraph forecast_graph(ad::Tape& tape, ParamResolver& params,
                             const DeepKoopFormerModel& model, const ModelInputs& inputs,
                             bool stop_gradient_qr = false);

struct LossGraph {
  ad::Var total;
  ad::Var mse;
  ad::Var lyap;
};

LossGraph loss_graph(ad::Tape& tape, const ForecastGraph& forecast, const Matrix& y_stack,
                     double lambda, LyapunovMode mode = LyapunovMode::all_pairs);

/// Extra run information carried in a checkpoint next to the parameters.
struct CheckpointMetadata {
  std::vector<std::string> channel_names;
  std::vector<double> scaler_min;
  std::vector<double> scaler_max;
};

inline constexpr int kCheckpointFormatVersion = 1;

/// Self-describing JSON checkpoint: format version, config, seed, rho_max and
/// every parameter tensor with its shape. Doubles round-trip bit-exactly.
void save_checkpoint(const DeepKoopFormerModel& model, const std::filesystem::path& path,
                     const CheckpointMetadata& meta = {});
DeepKoopFormerModel load_checkpoint(const std::filesystem::path& path,
                                    CheckpointMetadata* meta = nullptr);

}  // namespace dkf
