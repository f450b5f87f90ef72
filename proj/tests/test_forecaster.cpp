#include "doctest.h"

#include <cmath>
#include <fstream>

#include "dkf/error.hpp"
#include "dkf/forecaster.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using dkf::DeepKoopFormerModel;
using dkf::EncoderVariant;
using dkf::Matrix;
using dkf::Vector;
using testing_support::tiny_config;

namespace {

DeepKoopFormerModel random_model(EncoderVariant variant, std::size_t horizon, std::uint64_t seed) {
  DeepKoopFormerModel m = dkf::init_model(tiny_config(variant), horizon, seed);
  std::mt19937_64 rng(seed + 1000);
  m.koop.sigma_raw = dkf::random_gaussian(1, 4, rng, 2.0);
  if (m.has_trend_head()) m.trend_head = dkf::random_gaussian(horizon, 8, rng, 0.2);
  return m;
}

}  // namespace

TEST_CASE("zero decoder without trend head forecasts zero") {
  DeepKoopFormerModel m = random_model(EncoderVariant::patch, 3, 1);
  m.decoder = Matrix(2, 4);
  CHECK(dkf::forward(m, dkf::random_gaussian(8, 2, 2)).y_hat == Matrix(3, 2));
}

TEST_CASE("H = 1 forecasts W K z") {
  const DeepKoopFormerModel m = random_model(EncoderVariant::probsparse, 1, 3);
  const Matrix x = dkf::random_gaussian(8, 2, 4);
  const auto out = dkf::forward(m, x);
  REQUIRE(out.y_hat.rows() == 1);
  const oracle::Vec z = oracle::to_eigen(dkf::encode(x, m.cfg, m.enc).z);
  const oracle::Vec expect = oracle::to_eigen(m.decoder) * oracle::koopman(m.koop) * z;
  CHECK(std::abs(out.y_hat(0, 0) - expect(0)) < 1e-12);
  CHECK(std::abs(out.y_hat(0, 1) - expect(1)) < 1e-12);
}

TEST_CASE("forward matches the dense matrix-chain oracle") {
  for (auto variant : {EncoderVariant::patch, EncoderVariant::probsparse, EncoderVariant::decomp}) {
    const DeepKoopFormerModel m = random_model(variant, 3, 7);
    const Matrix x = dkf::random_gaussian(8, 2, 8);
    const oracle::Mat expect = oracle::forecast(m, x);
    CHECK((oracle::to_eigen(dkf::forward(m, x).y_hat) - expect).norm() < 1e-12);
  }
}

TEST_CASE("predict stacks per-window forecasts") {
  const DeepKoopFormerModel m = random_model(EncoderVariant::decomp, 2, 9);
  const std::size_t windows = 300;  // spans two internal chunks
  const Matrix stack = dkf::random_gaussian(windows * 8, 2, 10);
  const Matrix y = dkf::predict(m, stack);
  REQUIRE(y.rows() == windows * 2);
  for (std::size_t w : {std::size_t{0}, std::size_t{255}, std::size_t{256}, std::size_t{299}}) {
    const Matrix x = Matrix::from_data(8, 2, std::vector<double>(stack.data() + w * 16, stack.data() + (w + 1) * 16));
    const Matrix one = dkf::forward(m, x).y_hat;
    for (std::size_t h = 0; h < 2; ++h)
      for (std::size_t c = 0; c < 2; ++c) CHECK(std::abs(y(w * 2 + h, c) - one(h, c)) < 1e-12);
  }
  CHECK_THROWS_AS(dkf::predict(m, Matrix(9, 2)), dkf::ShapeError);
}

TEST_CASE("latent trajectory contracts for random models") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const DeepKoopFormerModel m = random_model(EncoderVariant::patch, 6, seed);
    const auto traj = dkf::forward(m, dkf::random_gaussian(8, 2, seed + 50)).latent_trajectory;
    REQUIRE(traj.size() == 7);
    for (std::size_t h = 1; h < traj.size(); ++h)
      CHECK(traj[h].norm() <= std::pow(0.99, static_cast<double>(h)) * traj[0].norm() * (1 + 1e-8));
  }
}

TEST_CASE("training loss hand cases") {
  const Matrix y = Matrix::from_rows({{1.0, 2.0}});
  const std::vector<Vector> shrinking{Vector{2.0, 0.0}, Vector{1.0, 0.0}, Vector{0.5, 0.0}};
  const auto exact = dkf::training_loss(y, y, shrinking, 0.1);
  CHECK(exact.total == 0.0);

  const std::vector<Vector> growing{Vector{1.0}, Vector{std::sqrt(1.5)}};
  CHECK(dkf::training_loss(y, y, growing, 0.1).total == doctest::Approx(0.05).epsilon(1e-14));

  const Matrix off = Matrix::from_rows({{0.0, 0.0}});
  const auto no_penalty = dkf::training_loss(off, y, growing, 0.0);
  CHECK(no_penalty.total == no_penalty.mse);
  CHECK(no_penalty.mse == doctest::Approx(2.5));
  CHECK_THROWS_AS(dkf::training_loss(Matrix(2, 2), y, growing, 0.1), dkf::ShapeError);
}

TEST_CASE("lyapunov modes") {
  const Matrix y(1, 1);
  const std::vector<Vector> traj{Vector{1.0}, Vector{0.5}, Vector{2.0}};
  CHECK(dkf::training_loss(y, y, traj, 1.0, dkf::LyapunovMode::first_pair).lyap == 0.0);
  CHECK(dkf::training_loss(y, y, traj, 1.0, dkf::LyapunovMode::all_pairs).lyap ==
        doctest::Approx((4.0 - 0.25) / 2.0));
}

TEST_CASE("zero lyapunov term means non-increasing trajectory norms") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const DeepKoopFormerModel m = random_model(EncoderVariant::probsparse, 4, seed);
    const auto out = dkf::forward(m, dkf::random_gaussian(8, 2, seed));
    const auto loss = dkf::training_loss(out.y_hat, out.y_hat, out.latent_trajectory, 0.1);
    if (loss.lyap == 0.0)
      for (std::size_t h = 1; h < out.latent_trajectory.size(); ++h)
        CHECK(out.latent_trajectory[h].norm() <= out.latent_trajectory[h - 1].norm());
  }
}

TEST_CASE("batch loss is invariant to window order") {
  const DeepKoopFormerModel m = random_model(EncoderVariant::patch, 2, 4);
  const Matrix x = dkf::random_gaussian(5 * 8, 2, 1);
  const Matrix y = dkf::random_gaussian(5 * 2, 2, 2);
  auto loss_of = [&](const Matrix& xs, const Matrix& ys) {
    dkf::ad::Tape tape;
    dkf::ConstantResolver resolve(tape);
    const auto g = dkf::forecast_graph(tape, resolve, m, dkf::prepare_inputs(m, xs));
    return dkf::loss_graph(tape, g, ys, 0.1).total.value()(0, 0);
  };
  Matrix xr(x.rows(), 2), yr(y.rows(), 2);
  const std::vector<std::size_t> order{3, 0, 4, 1, 2};
  for (std::size_t i = 0; i < 5; ++i) {
    std::copy(x.data() + order[i] * 16, x.data() + (order[i] + 1) * 16, xr.data() + i * 16);
    std::copy(y.data() + order[i] * 4, y.data() + (order[i] + 1) * 4, yr.data() + i * 4);
  }
  CHECK(loss_of(x, y) == doctest::Approx(loss_of(xr, yr)).epsilon(1e-13));
}

TEST_CASE("loss graph agrees with training_loss on a single window") {
  const DeepKoopFormerModel m = random_model(EncoderVariant::decomp, 3, 5);
  const Matrix x = dkf::random_gaussian(8, 2, 6), y = dkf::random_gaussian(3, 2, 7);
  const auto out = dkf::forward(m, x);
  dkf::ad::Tape tape;
  dkf::ConstantResolver resolve(tape);
  const auto g = dkf::forecast_graph(tape, resolve, m, dkf::prepare_inputs(m, x));
  for (auto mode : {dkf::LyapunovMode::all_pairs, dkf::LyapunovMode::first_pair}) {
    const auto lg = dkf::loss_graph(tape, g, y, 0.3, mode);
    const auto ref = dkf::training_loss(out.y_hat, y, out.latent_trajectory, 0.3, mode);
    CHECK(lg.total.value()(0, 0) == doctest::Approx(ref.total).epsilon(1e-13));
    CHECK(lg.lyap.value()(0, 0) == doctest::Approx(ref.lyap).epsilon(1e-13));
  }
}

TEST_CASE("certified output bound") {
  DeepKoopFormerModel m = random_model(EncoderVariant::patch, 2, 11);
  CHECK(dkf::certified_output_bound(m, 3, 0.0) == 0.0);
  m.cfg.channels = 4;
  m.decoder = Matrix::identity(4);
  CHECK(dkf::certified_output_bound(m, 0, 0.7) == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("decoded deviation under latent perturbation respects the bound") {
  std::mt19937_64 rng(2);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const DeepKoopFormerModel m = random_model(EncoderVariant::patch, 2, seed);
    const oracle::Mat K = oracle::koopman(m.koop);
    const oracle::Mat W = oracle::to_eigen(m.decoder);
    oracle::Vec z = oracle::to_eigen(dkf::encode(dkf::random_gaussian(8, 2, rng), m.cfg, m.enc).z);
    const oracle::Vec dz = oracle::to_eigen(dkf::random_gaussian(4, 1, rng)).col(0) * 0.1;
    oracle::Vec zt = z + dz;
    for (std::size_t h = 1; h <= 50; ++h) {
      z = K * z;
      zt = K * zt;
      CHECK((W * (z - zt)).norm() <= dkf::certified_output_bound(m, h, dz.norm()) * (1 + 1e-10));
    }
  }
}

TEST_CASE("model validation") {
  DeepKoopFormerModel m = random_model(EncoderVariant::patch, 2, 1);
  m.decoder = Matrix(2, 5);
  CHECK_THROWS_AS(m.validate(), dkf::ShapeError);
  CHECK_THROWS_AS(dkf::init_model(tiny_config(EncoderVariant::patch), 0, 1), dkf::ConfigError);
  const DeepKoopFormerModel ok = random_model(EncoderVariant::patch, 2, 1);
  CHECK_THROWS_AS(dkf::forward(ok, Matrix(8, 3)), dkf::ShapeError);
  CHECK_FALSE(dkf::init_model(tiny_config(EncoderVariant::patch), 2, 1).has_trend_head());
  dkf::ModelOptions no_trend;
  no_trend.trend_head = false;
  CHECK_FALSE(dkf::init_model(tiny_config(EncoderVariant::decomp), 2, 1, no_trend).has_trend_head());
}

TEST_CASE("initialisation is seeded") {
  const auto a = dkf::init_model(tiny_config(EncoderVariant::probsparse), 2, 42);
  const auto b = dkf::init_model(tiny_config(EncoderVariant::probsparse), 2, 42);
  const auto c = dkf::init_model(tiny_config(EncoderVariant::probsparse), 2, 43);
  CHECK(a.decoder == b.decoder);
  CHECK(a.koop.u_raw == b.koop.u_raw);
  CHECK(a.decoder != c.decoder);
  CHECK(a.koop.sigma_raw == Matrix(1, 4));
}

TEST_CASE("checkpoint round trip is bit exact") {
  testing_support::TempDir dir("ckpt");
  for (auto variant : {EncoderVariant::patch, EncoderVariant::probsparse, EncoderVariant::decomp}) {
    DeepKoopFormerModel m = random_model(variant, 3, 12);
    m.cfg.pe_kind = dkf::PositionalEncoding::learnable;
    std::mt19937_64 rng(1);
    m.enc = dkf::init_encoder_params(m.cfg, rng);
    dkf::CheckpointMetadata meta{{"a", "b"}, {0.0, -1.0}, {1.0, 1.0 / 3.0}};
    const auto path = dir / (std::string(dkf::to_string(variant)) + ".json");
    dkf::save_checkpoint(m, path, meta);
    dkf::CheckpointMetadata back_meta;
    const DeepKoopFormerModel back = dkf::load_checkpoint(path, &back_meta);
    CHECK(back_meta.scaler_max == meta.scaler_max);
    CHECK(back_meta.channel_names == meta.channel_names);
    CHECK(back.seed == m.seed);
    CHECK(back.koop.rho_max == m.koop.rho_max);
    const Matrix x = dkf::random_gaussian(8, 2, 3);
    CHECK(dkf::forward(back, x).y_hat == dkf::forward(m, x).y_hat);
    dkf::for_each_parameter(back, [&](const std::string& name, const Matrix& value) {
      bool found = false;
      dkf::for_each_parameter(m, [&](const std::string& other, const Matrix& ref) {
        if (other == name) {
          found = true;
          CHECK(value == ref);
        }
      });
      CHECK(found);
    });
  }
}

TEST_CASE("checkpoint of a tied model keeps the factors tied") {
  testing_support::TempDir dir("ckpt-tie");
  dkf::ModelOptions opts;
  opts.tie_factors = true;
  const auto m = dkf::init_model(tiny_config(EncoderVariant::patch), 2, 5, opts);
  dkf::save_checkpoint(m, dir / "m.json");
  const auto back = dkf::load_checkpoint(dir / "m.json");
  CHECK(back.koop.tie_factors);
  CHECK(back.koop.v_raw == back.koop.u_raw);
}

TEST_CASE("checkpoint errors") {
  testing_support::TempDir dir("ckpt-bad");
  CHECK_THROWS_AS(dkf::load_checkpoint(dir / "missing.json"), dkf::IoError);
  {
    std::ofstream(dir / "garbage.json") << "{not json";
  }
  CHECK_THROWS_AS(dkf::load_checkpoint(dir / "garbage.json"), dkf::IoError);

  const auto m = dkf::init_model(tiny_config(EncoderVariant::patch), 2, 5);
  dkf::save_checkpoint(m, dir / "m.json");
  std::string text;
  {
    std::ifstream in(dir / "m.json");
    text.assign(std::istreambuf_iterator<char>(in), {});
  }
  // A checkpoint that claims d_model 6 while carrying width-4 tensors.
  const auto key = text.find("\"d_model\"");
  REQUIRE(key != std::string::npos);
  const auto digit = text.find('4', key);
  REQUIRE(digit != std::string::npos);
  text[digit] = '6';
  {
    std::ofstream(dir / "mismatch.json") << text;
  }
  CHECK_THROWS_AS(dkf::load_checkpoint(dir / "mismatch.json"), dkf::ShapeError);
  {
    std::ofstream(dir / "plain") << "x";
  }
  CHECK_THROWS_AS(dkf::save_checkpoint(m, dir / "plain" / "m.json"), dkf::IoError);
}
