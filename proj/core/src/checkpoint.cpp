#include <fstream>
#include <map>

#include <json.hpp>

#include "dkf/error.hpp"
#include "dkf/forecaster.hpp"

namespace dkf {

namespace {

using json = nlohmann::json;

json matrix_to_json(const Matrix& m) {
  return json{{"rows", m.rows()},
              {"cols", m.cols()},
              {"data", std::vector<double>(m.values().begin(), m.values().end())}};
}

Matrix matrix_from_json(const json& j, const std::string& name) {
  try {
    const auto rows = j.at("rows").get<std::size_t>();
    const auto cols = j.at("cols").get<std::size_t>();
    auto data = j.at("data").get<std::vector<double>>();
    if (data.size() != rows * cols)
      throw ShapeError("checkpoint tensor " + name + " holds " + std::to_string(data.size()) +
                       " values for a " + std::to_string(rows) + "x" + std::to_string(cols) +
                       " shape");
    if (rows == 0 || cols == 0) return Matrix{};
    return Matrix::from_data(rows, cols, std::move(data));
  } catch (const json::exception& e) {
    throw IoError("checkpoint tensor " + name + " is malformed: " + e.what());
  }
}

json encoder_config_to_json(const EncoderConfig& c) {
  return json{{"variant", std::string(to_string(c.variant))},
              {"context_len", c.context_len},
              {"channels", c.channels},
              {"d_model", c.d_model},
              {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},
              {"ffn_width", c.ffn_width},
              {"patch_len", c.patch_len},
              {"pe_kind", std::string(to_string(c.pe_kind))},
              {"ma_kernel", c.ma_kernel},
              {"probsparse_factor", c.probsparse_factor}};
}

EncoderConfig encoder_config_from_json(const json& j) {
  EncoderConfig c;
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.context_len = j.at("context_len").get<std::size_t>();
  c.channels = j.at("channels").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.ffn_width = j.at("ffn_width").get<std::size_t>();
  c.patch_len = j.at("patch_len").get<std::size_t>();
  c.pe_kind = parse_positional_encoding(j.at("pe_kind").get<std::string>());
  c.ma_kernel = j.at("ma_kernel").get<std::size_t>();
  c.probsparse_factor = j.at("probsparse_factor").get<double>();
  return c;
}

}  // namespace

void save_checkpoint(const DeepKoopFormerModel& model, const std::filesystem::path& path,
                     const CheckpointMetadata& meta) {
  model.validate();
  json params = json::object();
  for_each_parameter(model, [&](const std::string& name, const Matrix& m) {
    params[name] = matrix_to_json(m);
  });
  json doc{{"format_version", kCheckpointFormatVersion},
           {"model", "deep_koopformer"},
           {"config", encoder_config_to_json(model.cfg)},
           {"horizon", model.horizon},
           {"seed", model.seed},
           {"rho_max", model.koop.rho_max},
           {"tie_factors", model.koop.tie_factors},
           {"trend_head", model.has_trend_head()},
           {"channel_names", meta.channel_names},
           {"scaler_min", meta.scaler_min},
           {"scaler_max", meta.scaler_max},
           {"parameters", std::move(params)}};
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out << doc.dump(1) << '\n';
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

DeepKoopFormerModel load_checkpoint(const std::filesystem::path& path, CheckpointMetadata* meta) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("checkpoint " + path.string() + " is not valid JSON: " + e.what());
  }

  DeepKoopFormerModel model;
  std::map<std::string, json> tensors;
  try {
    const int version = doc.at("format_version").get<int>();
    if (version != kCheckpointFormatVersion)
      throw IoError("checkpoint format version " + std::to_string(version) +
                    " is not supported (expected " + std::to_string(kCheckpointFormatVersion) +
                    ")");
    model.cfg = encoder_config_from_json(doc.at("config"));
    model.horizon = doc.at("horizon").get<std::size_t>();
    model.seed = doc.at("seed").get<std::uint64_t>();
    model.koop.rho_max = doc.at("rho_max").get<double>();
    model.koop.tie_factors = doc.at("tie_factors").get<bool>();
    if (meta) {
      meta->channel_names = doc.value("channel_names", std::vector<std::string>{});
      meta->scaler_min = doc.value("scaler_min", std::vector<double>{});
      meta->scaler_max = doc.value("scaler_max", std::vector<double>{});
    }
    for (const auto& [name, value] : doc.at("parameters").items()) tensors[name] = value;
    model.enc.layers.resize(model.cfg.n_layers);
    if (doc.at("trend_head").get<bool>()) model.trend_head = Matrix(1, 1);
    if (model.cfg.pe_kind == PositionalEncoding::learnable) model.enc.pos_table = Matrix(1, 1);
  } catch (const json::exception& e) {
    throw IoError("checkpoint " + path.string() + " is missing fields: " + e.what());
  } catch (const ConfigError& e) {
    throw IoError("checkpoint " + path.string() + " has an invalid config: " + e.what());
  }

  for_each_parameter(model, [&](const std::string& name, Matrix& m) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw IoError("checkpoint is missing parameter " + name);
    m = matrix_from_json(it->second, name);
    tensors.erase(it);
  });
  if (!tensors.empty())
    throw ShapeError("checkpoint has unexpected parameter " + tensors.begin()->first);
  if (model.koop.tie_factors) model.koop.v_raw = model.koop.u_raw;
  model.validate();
  return model;
}

}  // namespace dkf
