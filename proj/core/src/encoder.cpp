#include "dkf/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dkf/error.hpp"

namespace dkf {

std::string_view to_string(EncoderVariant v) noexcept {
  switch (v) {
    case EncoderVariant::patch: return "patch";
    case EncoderVariant::probsparse: return "probsparse";
    case EncoderVariant::decomp: return "decomp";
  }
  return "unknown";
}

std::string_view to_string(PositionalEncoding pe) noexcept {
  return pe == PositionalEncoding::sinusoidal ? "sinusoidal" : "learnable";
}

EncoderVariant parse_variant(std::string_view name) {
  if (name == "patch") return EncoderVariant::patch;
  if (name == "probsparse") return EncoderVariant::probsparse;
  if (name == "decomp") return EncoderVariant::decomp;
  throw ConfigError("unknown encoder variant '" + std::string(name) +
                    "' (expected patch, probsparse or decomp)");
}

PositionalEncoding parse_positional_encoding(std::string_view name) {
  if (name == "sinusoidal") return PositionalEncoding::sinusoidal;
  if (name == "learnable") return PositionalEncoding::learnable;
  throw ConfigError("unknown positional encoding '" + std::string(name) + "'");
}

std::size_t EncoderConfig::tokens() const noexcept {
  if (variant == EncoderVariant::patch) return patch_len == 0 ? 0 : context_len / patch_len;
  return context_len;
}

std::size_t EncoderConfig::token_width() const noexcept {
  return variant == EncoderVariant::patch ? patch_len * channels : channels;
}

void EncoderConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("encoder config: " + msg); };
  if (context_len == 0) fail("context length must be positive");
  if (channels == 0) fail("channel count must be positive");
  if (d_model == 0 || n_layers == 0 || n_heads == 0 || ffn_width == 0)
    fail("d_model, n_layers, n_heads and ffn_width must be positive");
  if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
  if (variant == EncoderVariant::patch) {
    if (patch_len == 0 || context_len % patch_len != 0)
      fail("context length " + std::to_string(context_len) + " not divisible by patch length " +
           std::to_string(patch_len));
  }
  if (variant == EncoderVariant::decomp) {
    if (ma_kernel == 0 || ma_kernel % 2 == 0) fail("moving-average kernel must be odd");
    if (ma_kernel > context_len) fail("moving-average kernel longer than the context");
  }
  if (!(probsparse_factor > 0.0)) fail("probsparse factor must be positive");
}

EncoderParams init_encoder_params(const EncoderConfig& cfg, std::mt19937_64& rng) {
  cfg.validate();
  const std::size_t dm = cfg.d_model;
  auto projection = [&](std::size_t in, std::size_t out) {
    return random_gaussian(in, out, rng, 1.0 / std::sqrt(static_cast<double>(in)));
  };
  EncoderParams p;
  p.embed_w = projection(cfg.token_width(), dm);
  p.embed_b = Matrix(1, dm);
  if (cfg.pe_kind == PositionalEncoding::learnable)
    p.pos_table = random_gaussian(cfg.tokens(), dm, rng, 0.02);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    EncoderLayerParams layer;
    layer.wq = projection(dm, dm);
    layer.wk = projection(dm, dm);
    layer.wv = projection(dm, dm);
    layer.wo = projection(dm, dm);
    layer.ffn_w1 = projection(dm, cfg.ffn_width);
    layer.ffn_b1 = Matrix(1, cfg.ffn_width);
    layer.ffn_w2 = projection(cfg.ffn_width, dm);
    layer.ffn_b2 = Matrix(1, dm);
    layer.ln1_gamma = Matrix(1, dm, 1.0);
    layer.ln1_beta = Matrix(1, dm);
    layer.ln2_gamma = Matrix(1, dm, 1.0);
    layer.ln2_beta = Matrix(1, dm);
    p.layers.push_back(std::move(layer));
  }
  return p;
}

namespace {

void expect_shape(const Matrix& m, std::size_t rows, std::size_t cols, const std::string& name) {
  if (m.rows() != rows || m.cols() != cols) {
    std::ostringstream os;
    os << "encoder parameter " << name << " is " << m.rows() << "x" << m.cols() << ", expected "
       << rows << "x" << cols;
    throw ShapeError(os.str());
  }
}

}  // namespace

void check_encoder_params(const EncoderConfig& cfg, const EncoderParams& p) {
  const std::size_t dm = cfg.d_model;
  expect_shape(p.embed_w, cfg.token_width(), dm, "embed_w");
  expect_shape(p.embed_b, 1, dm, "embed_b");
  if (cfg.pe_kind == PositionalEncoding::learnable)
    expect_shape(p.pos_table, cfg.tokens(), dm, "pos_table");
  else if (!p.pos_table.empty())
    throw ShapeError("encoder parameter pos_table present with sinusoidal encoding");
  if (p.layers.size() != cfg.n_layers)
    throw ShapeError("encoder has " + std::to_string(p.layers.size()) + " layers, expected " +
                     std::to_string(cfg.n_layers));
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    expect_shape(L.wq, dm, dm, pre + "wq");
    expect_shape(L.wk, dm, dm, pre + "wk");
    expect_shape(L.wv, dm, dm, pre + "wv");
    expect_shape(L.wo, dm, dm, pre + "wo");
    expect_shape(L.ffn_w1, dm, cfg.ffn_width, pre + "ffn_w1");
    expect_shape(L.ffn_b1, 1, cfg.ffn_width, pre + "ffn_b1");
    expect_shape(L.ffn_w2, cfg.ffn_width, dm, pre + "ffn_w2");
    expect_shape(L.ffn_b2, 1, dm, pre + "ffn_b2");
    expect_shape(L.ln1_gamma, 1, dm, pre + "ln1_gamma");
    expect_shape(L.ln1_beta, 1, dm, pre + "ln1_beta");
    expect_shape(L.ln2_gamma, 1, dm, pre + "ln2_gamma");
    expect_shape(L.ln2_beta, 1, dm, pre + "ln2_beta");
  }
}

Matrix sinusoidal_pe(std::size_t length, std::size_t d_model) {
  Matrix pe(length, d_model);
  for (std::size_t pos = 0; pos < length; ++pos) {
    for (std::size_t i = 0; i < d_model; i += 2) {
      const double angle =
          static_cast<double>(pos) /
          std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d_model));
      pe(pos, i) = std::sin(angle);
      if (i + 1 < d_model) pe(pos, i + 1) = std::cos(angle);
    }
  }
  return pe;
}

Matrix patchify(const Matrix& x, std::size_t patch_len) {
  if (patch_len == 0 || x.rows() % patch_len != 0)
    throw ShapeError("patchify: window length " + std::to_string(x.rows()) +
                     " not divisible by patch length " + std::to_string(patch_len));
  const std::size_t n = x.rows() / patch_len;
  const std::size_t d = x.cols();
  // row-major: patch i is the contiguous run of p*d values starting at i*p*d
  return Matrix::from_data(n, patch_len * d, std::vector<double>(x.data(), x.data() + x.size()));
}

Matrix moving_average(const Matrix& x, std::size_t kernel) {
  if (kernel == 0 || kernel % 2 == 0)
    throw ConfigError("moving_average: kernel must be odd, got " + std::to_string(kernel));
  if (kernel > x.rows()) throw ConfigError("moving_average: kernel longer than the series");
  const std::size_t rows = x.rows();
  const auto half = static_cast<std::ptrdiff_t>(kernel / 2);
  const auto last = static_cast<std::ptrdiff_t>(rows) - 1;
  Matrix trend(rows, x.cols());
  for (std::size_t c = 0; c < x.cols(); ++c) {
    for (std::size_t r = 0; r < rows; ++r) {
      // Averaging offsets from the centre keeps constant stretches exact.
      const double centre = x(r, c);
      double acc = 0.0;
      for (std::ptrdiff_t j = -half; j <= half; ++j) {
        const auto idx = std::clamp(static_cast<std::ptrdiff_t>(r) + j, std::ptrdiff_t{0}, last);
        acc += x(static_cast<std::size_t>(idx), c) - centre;
      }
      trend(r, c) = centre + acc / static_cast<double>(kernel);
    }
  }
  return trend;
}

Decomposition decompose(const Matrix& x, std::size_t kernel) {
  Matrix trend = moving_average(x, kernel);
  Matrix seasonal = x - trend;
  return {std::move(trend), std::move(seasonal)};
}

Matrix encoder_tokens(const Matrix& x, const EncoderConfig& cfg) {
  if (x.rows() != cfg.context_len || x.cols() != cfg.channels) {
    std::ostringstream os;
    os << "encoder input is " << x.rows() << "x" << x.cols() << ", expected " << cfg.context_len
       << "x" << cfg.channels;
    throw ShapeError(os.str());
  }
  switch (cfg.variant) {
    case EncoderVariant::patch: return patchify(x, cfg.patch_len);
    case EncoderVariant::probsparse: return x;
    case EncoderVariant::decomp: return decompose(x, cfg.ma_kernel).seasonal;
  }
  return x;
}

ad::Var ConstantResolver::operator()(const Matrix& param) {
  auto it = bound_.find(&param);
  if (it != bound_.end()) return it->second;
  ad::Var v = tape_.constant(param);
  bound_.emplace(&param, v);
  return v;
}

ad::Var encoder_graph(ad::Tape& tape, ParamResolver& P, const EncoderConfig& cfg,
                      const EncoderParams& values, ad::Var tokens, ad::Var* hidden) {
  const std::size_t n = cfg.tokens();
  if (tokens.cols() != cfg.token_width() || n == 0 || tokens.rows() % n != 0)
    throw ShapeError("encoder_graph: token stack does not match the encoder config");

  ad::Var e = ad::add_row(ad::matmul(tokens, P(values.embed_w)), P(values.embed_b));
  if (cfg.pe_kind == PositionalEncoding::learnable)
    e = ad::add_tiled(e, P(values.pos_table));
  else
    e = ad::add_tiled(e, tape.constant(sinusoidal_pe(n, cfg.d_model)));

  const ad::AttentionSpec spec{tokens.rows() / n, n, cfg.n_heads,
                               cfg.variant == EncoderVariant::probsparse, cfg.probsparse_factor};
  for (const auto& L : values.layers) {
    ad::Var q = ad::matmul(e, P(L.wq));
    ad::Var k = ad::matmul(e, P(L.wk));
    ad::Var v = ad::matmul(e, P(L.wv));
    ad::Var attn = ad::matmul(ad::attention(q, k, v, spec), P(L.wo));
    e = ad::layer_norm(ad::add(e, attn), P(L.ln1_gamma), P(L.ln1_beta));
    ad::Var ff = ad::gelu(ad::add_row(ad::matmul(e, P(L.ffn_w1)), P(L.ffn_b1)));
    ff = ad::add_row(ad::matmul(ff, P(L.ffn_w2)), P(L.ffn_b2));
    e = ad::layer_norm(ad::add(e, ff), P(L.ln2_gamma), P(L.ln2_beta));
  }
  if (hidden) *hidden = e;
  return ad::mean_pool(e, n);
}

EncodeResult encode(const Matrix& x, const EncoderConfig& cfg, const EncoderParams& params) {
  cfg.validate();
  check_encoder_params(cfg, params);
  ad::Tape tape;
  ConstantResolver resolve(tape);
  ad::Var hidden;
  ad::Var z = encoder_graph(tape, resolve, cfg, params, tape.constant(encoder_tokens(x, cfg)),
                            &hidden);
  EncodeResult out;
  out.hidden = hidden.value();
  out.z = Vector::from_data(std::vector<double>(z.value().values().begin(), z.value().values().end()));
  if (cfg.variant == EncoderVariant::decomp) out.trend = moving_average(x, cfg.ma_kernel);
  return out;
}

}  // namespace dkf
