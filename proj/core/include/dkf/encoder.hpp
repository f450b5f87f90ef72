#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "dkf/autodiff.hpp"
#include "dkf/linalg.hpp"

namespace dkf {

enum class EncoderVariant { patch, probsparse, decomp };
enum class PositionalEncoding { sinusoidal, learnable };

std::string_view to_string(EncoderVariant v) noexcept;
std::string_view to_string(PositionalEncoding pe) noexcept;
EncoderVariant parse_variant(std::string_view name);
PositionalEncoding parse_positional_encoding(std::string_view name);

struct EncoderConfig {
  EncoderVariant variant = EncoderVariant::patch;
  std::size_t context_len = 32;  // P
  std::size_t channels = 1;      // d
  std::size_t d_model = 16;
  std::size_t n_layers = 2;
  std::size_t n_heads = 2;
  std::size_t ffn_width = 64;
  std::size_t patch_len = 16;  // p
  PositionalEncoding pe_kind = PositionalEncoding::sinusoidal;
  std::size_t ma_kernel = 25;  // k, decomp only
  double probsparse_factor = 5.0;

  /// Number of encoder tokens: P/p for the patch variant, P otherwise.
  std::size_t tokens() const noexcept;
  /// Width of one raw token before embedding: p*d for patches, d otherwise.
  std::size_t token_width() const noexcept;
  /// Throws ConfigError on any violated invariant.
  void validate() const;
};

struct EncoderLayerParams {
  Matrix wq, wk, wv, wo;    // d_model x d_model
  Matrix ffn_w1, ffn_b1;    // d_model x ffn, 1 x ffn
  Matrix ffn_w2, ffn_b2;    // ffn x d_model, 1 x d_model
  Matrix ln1_gamma, ln1_beta, ln2_gamma, ln2_beta;  // 1 x d_model
};

struct EncoderParams {
  Matrix embed_w;    // token_width x d_model
  Matrix embed_b;    // 1 x d_model
  Matrix pos_table;  // tokens x d_model; empty unless pe_kind == learnable
  std::vector<EncoderLayerParams> layers;
};

/// Seeded initialisation: projections ~ N(0, 1/fan_in), biases 0, layer-norm
/// scales 1, learnable positional table ~ N(0, 0.02²).
EncoderParams init_encoder_params(const EncoderConfig& cfg, std::mt19937_64& rng);

/// Throws ShapeError when `params` does not match `cfg`.
void check_encoder_params(const EncoderConfig& cfg, const EncoderParams& params);

Matrix sinusoidal_pe(std::size_t length, std::size_t d_model);

/// Non-overlapping patches, each row the time-major flattening of p steps.
Matrix patchify(const Matrix& x, std::size_t patch_len);

/// Centered moving average per channel with replicate padding at both ends.
Matrix moving_average(const Matrix& x, std::size_t kernel);

struct Decomposition {
  Matrix trend;
  Matrix seasonal;  // x - trend
};
Decomposition decompose(const Matrix& x, std::size_t kernel);

/// Softmax(Q Kᵀ / sqrt(width)) V for one head.
Matrix full_attention(const Matrix& q, const Matrix& k, const Matrix& v);

/// M(q_i) = max_j a_ij - mean_j a_ij with a = Q Kᵀ / sqrt(width).
Vector probsparse_scores(const Matrix& q, const Matrix& k);

/// u = min(n, ceil(c ln(n + 1))).
std::size_t probsparse_query_count(std::size_t tokens, double factor);

/// Indices of the u highest-scoring queries (ties go to the lower index), ascending.
std::vector<std::size_t> probsparse_select(const Vector& scores, std::size_t u);

Matrix probsparse_attention(const Matrix& q, const Matrix& k, const Matrix& v, double factor);

struct EncodeResult {
  Matrix hidden;  // tokens x d_model, output of the last layer
  Vector z;       // average-pooled latent
  Matrix trend;   // P x d moving-average trend (decomp variant), empty otherwise
};

EncodeResult encode(const Matrix& x, const EncoderConfig& cfg, const EncoderParams& params);

/// Resolves a parameter matrix to a tape variable. Implementations bind model
/// parameters either as tracked leaves (training) or as constants (inference).
class ParamResolver {
 public:
  virtual ~ParamResolver() = default;
  virtual ad::Var operator()(const Matrix& param) = 0;
};

/// Binds every parameter as an untracked constant (one copy per matrix).
class ConstantResolver final : public ParamResolver {
 public:
  explicit ConstantResolver(ad::Tape& tape) : tape_(tape) {}
  ad::Var operator()(const Matrix& param) override;

 private:
  ad::Tape& tape_;
  std::unordered_map<const Matrix*, ad::Var> bound_;
};

/// Batched encoder graph. `tokens` stacks the raw tokens of every window
/// (windows*cfg.tokens() rows, cfg.token_width() columns; seasonal part already
/// removed for the decomp variant). Returns the pooled latents (windows x d_model)
/// and, through `hidden`, the last-layer token states when requested.
ad::Var encoder_graph(ad::Tape& tape, ParamResolver& params, const EncoderConfig& cfg,
                      const EncoderParams& values, ad::Var tokens, ad::Var* hidden = nullptr);

/// Raw encoder tokens for one P x d window (patches, raw steps, or the seasonal part).
Matrix encoder_tokens(const Matrix& x, const EncoderConfig& cfg);

}  // namespace dkf
