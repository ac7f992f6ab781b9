#include "kneesight/inr.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <vector>

#include "doctest.h"
#include "kneesight/common.hpp"
#include "kneesight/rng.hpp"

using namespace kneesight;

namespace {

bool bitwise_equal(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  return a.empty() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

// |a - b| measured against max(|a|, |b|, floor).
double rel_err(double a, double b, double floor_v = 1.0) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor_v});
}

template <typename F>
std::vector<TrainingSample> curve_samples(int n, double x0, double x1, F f) {
  std::vector<TrainingSample> out;
  for (int i = 0; i < n; ++i) {
    const double x = x0 + (x1 - x0) * i / (n - 1);
    out.push_back({{x}, {f(x)}});
  }
  return out;
}

InrConfig small_config(InrVariant v) {
  InrConfig cfg;
  cfg.variant = v;
  cfg.input_dim = 2;
  cfg.output_dim = 1;
  cfg.hidden_layers = 2;
  cfg.hidden_width = 8;
  cfg.fourier_features = 8;
  cfg.rbf_centers = 8;
  cfg.seed = 77;
  return cfg;
}

struct TempDir {
  std::filesystem::path path;
  TempDir() {
    path = std::filesystem::temp_directory_path() /
           ("kneesight_inr_" + std::to_string(std::random_device{}()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

TEST_CASE("config validation rejects bad settings") {
  InrConfig cfg;
  CHECK_NOTHROW(validate(cfg));
  auto bad = cfg;
  bad.input_dim = 0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = cfg;
  bad.dropout_p = 1.0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = cfg;
  bad.dropout_p = -0.1;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = cfg;
  bad.learning_rate = 0.0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  bad = cfg;
  bad.omega0 = -1.0;
  CHECK_THROWS_AS(validate(bad), std::invalid_argument);
  CHECK(inr_variant_from_string("siren") == InrVariant::siren);
  CHECK(to_string(InrVariant::fourier) == "fourier");
  CHECK_THROWS_AS(inr_variant_from_string("perceptron"), std::invalid_argument);
}

TEST_CASE("encoding widths and parameter counts") {
  InrConfig cfg;  // defaults: d=1, L=6, width 64, 3 hidden layers
  SUBCASE("positional encoding keeps the raw input plus 12 sin/cos features") {
    cfg.variant = InrVariant::mlp_posenc;
    CHECK(encoding_dim(cfg) == 13);
    // 64*(13+1) + 2 * 64*(64+1) + 1*(64+1)
    CHECK(trainable_parameter_count(cfg) == 64 * 14 + 2 * 64 * 65 + 65);
    CHECK(total_parameter_count(cfg) == trainable_parameter_count(cfg));
  }
  SUBCASE("siren feeds the raw input directly") {
    cfg.variant = InrVariant::siren;
    CHECK(encoding_dim(cfg) == 1);
    CHECK(trainable_parameter_count(cfg) == 64 * 2 + 2 * 64 * 65 + 65);
  }
  SUBCASE("fourier makes cos/sin pairs and freezes the frequency table") {
    cfg.variant = InrVariant::fourier;
    CHECK(encoding_dim(cfg) == 128);
    CHECK(total_parameter_count(cfg) == trainable_parameter_count(cfg) + 64);
  }
  SUBCASE("rbf uses one feature per kernel and freezes the centers") {
    cfg.variant = InrVariant::rbf;
    CHECK(encoding_dim(cfg) == 64);
    CHECK(total_parameter_count(cfg) == trainable_parameter_count(cfg) + 64);
  }
  SUBCASE("multivariate positional encoding") {
    cfg.variant = InrVariant::mlp_posenc;
    cfg.input_dim = 3;
    cfg.posenc_frequencies = 4;
    CHECK(encoding_dim(cfg) == 3 + 2 * 4 * 3);
  }
}

TEST_CASE("initialisation is deterministic and respects the weight bounds") {
  InrConfig cfg;
  cfg.seed = 42;
  SUBCASE("same seed bit-identical, different seed different") {
    for (auto v :
         {InrVariant::mlp_posenc, InrVariant::siren, InrVariant::fourier, InrVariant::rbf}) {
      cfg.variant = v;
      const auto a = init_model(cfg);
      const auto b = init_model(cfg);
      CHECK(bitwise_equal(a.theta, b.theta));
      auto cfg2 = cfg;
      cfg2.seed = 43;
      CHECK_FALSE(bitwise_equal(a.theta, init_model(cfg2).theta));
    }
  }
  SUBCASE("siren first layer within 1/fan_in, later layers within sqrt(6/fan_in)/omega0") {
    cfg.variant = InrVariant::siren;
    const auto m = init_model(cfg);
    for (int k = 0; k < 64; ++k) CHECK(std::abs(m.theta[k]) <= 1.0);  // fan_in = 1
    const double hidden_bound = std::sqrt(6.0 / 64.0) / 30.0;
    // second layer weights start right after [W|b] of the first
    const std::size_t off = 64 * 2;
    for (std::size_t k = off; k < off + 64 * 64; ++k)
      CHECK(std::abs(m.theta[k]) <= hidden_bound);
  }
  SUBCASE("glorot bound for the tanh variants") {
    cfg.variant = InrVariant::mlp_posenc;
    const auto m = init_model(cfg);
    const double bound = std::sqrt(6.0 / (13 + 64));
    for (std::size_t k = 0; k < 64 * 13; ++k) CHECK(std::abs(m.theta[k]) <= bound);
  }
  SUBCASE("biases start at zero") {
    for (auto v :
         {InrVariant::mlp_posenc, InrVariant::siren, InrVariant::fourier, InrVariant::rbf}) {
      cfg.variant = v;
      const auto m = init_model(cfg);
      const std::size_t w0 = static_cast<std::size_t>(64) * encoding_dim(cfg);
      for (std::size_t k = w0; k < w0 + 64; ++k) CHECK(m.theta[k] == 0.0);
    }
  }
  SUBCASE("rbf centers form the fixed grid") {
    cfg.variant = InrVariant::rbf;
    cfg.rbf_centers = 4;
    const auto m = init_model(cfg);
    const std::size_t off = trainable_parameter_count(cfg);
    CHECK(m.theta[off + 0] == doctest::Approx(-1.0));
    CHECK(m.theta[off + 1] == doctest::Approx(-1.0 / 3.0));
    CHECK(m.theta[off + 2] == doctest::Approx(1.0 / 3.0));
    CHECK(m.theta[off + 3] == doctest::Approx(1.0));
  }
  SUBCASE("rbf grid in two dimensions is lexicographic") {
    cfg.variant = InrVariant::rbf;
    cfg.input_dim = 2;
    cfg.rbf_centers = 9;  // 3 per axis, spacing 1
    const auto m = init_model(cfg);
    const std::size_t off = trainable_parameter_count(cfg);
    const double expect[9][2] = {{-1, -1}, {-1, 0}, {-1, 1}, {0, -1}, {0, 0},
                                 {0, 1},   {1, -1}, {1, 0},  {1, 1}};
    for (int r = 0; r < 9; ++r) {
      CHECK(m.theta[off + 2 * r + 0] == doctest::Approx(expect[r][0]));
      CHECK(m.theta[off + 2 * r + 1] == doctest::Approx(expect[r][1]));
    }
  }
  SUBCASE("fourier table is gaussian-scaled and frozen at the tail") {
    cfg.variant = InrVariant::fourier;
    const auto m = init_model(cfg);
    const std::size_t off = trainable_parameter_count(cfg);
    double ss = 0.0;
    for (std::size_t k = off; k < m.theta.size(); ++k) ss += m.theta[k] * m.theta[k];
    const double sample_sd = std::sqrt(ss / 64.0);
    CHECK(sample_sd > 5.0);  // sigma_f = 10, n = 64
    CHECK(sample_sd < 15.0);
  }
}

TEST_CASE("forward pass basics") {
  for (auto v :
       {InrVariant::mlp_posenc, InrVariant::siren, InrVariant::fourier, InrVariant::rbf}) {
    InrConfig cfg;
    cfg.variant = v;
    cfg.seed = 5;
    const auto m = init_model(cfg);
    const std::vector<double> x{0.3};
    const auto a = forward(m, x);
    REQUIRE(a.size() == 1);
    CHECK(std::isfinite(a[0]));
    CHECK(bitwise_equal(a, forward(m, x)));
  }
  InrConfig cfg;
  const auto m = init_model(cfg);
  CHECK_THROWS_AS(forward(m, std::vector<double>{1.0, 2.0}), std::invalid_argument);
  CHECK_THROWS_AS(forward(m, std::vector<double>{std::nan("")}), std::invalid_argument);
}

// Hand-built one-unit networks give closed forms, so the derivative chain
// (encoding -> activation -> dense -> de-normalisation) can be checked
// exactly rather than against finite differences.
TEST_CASE("derivatives agree with closed forms on one-unit networks") {
  InrConfig cfg;
  cfg.hidden_layers = 1;
  cfg.hidden_width = 1;
  const double x = 0.37;

  SUBCASE("siren: f = w2 sin(30 a x) + b2") {
    cfg.variant = InrVariant::siren;
    auto m = init_model(cfg);
    const double a = 0.8, w2 = 1.7, b2 = 0.25;
    m.theta = {a, 0.0, w2, b2};
    const double omega_a = 30.0 * a;
    CHECK(rel_err(forward(m, std::vector<double>{x})[0],
                  w2 * std::sin(omega_a * x) + b2) < 1e-14);
    CHECK(rel_err(derivative(m, std::vector<double>{x}, 1),
                  w2 * omega_a * std::cos(omega_a * x)) < 1e-12);
    CHECK(rel_err(derivative(m, std::vector<double>{x}, 2),
                  -w2 * omega_a * omega_a * std::sin(omega_a * x)) < 1e-12);
  }

  SUBCASE("siren scales only the first layer by omega0; deeper layers use plain sin") {
    cfg.variant = InrVariant::siren;
    cfg.hidden_layers = 2;
    auto m = init_model(cfg);
    const double a = 0.8, w1 = 0.9, b1 = 0.2, w2 = 1.3, b2 = -0.15;
    m.theta = {a, 0.0, w1, b1, w2, b2};
    const double h0 = std::sin(30.0 * a * x);
    const double dh0 = 30.0 * a * std::cos(30.0 * a * x);
    const double ddh0 = -(30.0 * a) * (30.0 * a) * h0;
    const double z1 = w1 * h0 + b1;
    const double h1 = std::sin(z1);
    const double dh1 = std::cos(z1) * w1 * dh0;
    const double ddh1 = -std::sin(z1) * (w1 * dh0) * (w1 * dh0) + std::cos(z1) * w1 * ddh0;
    CHECK(rel_err(forward(m, std::vector<double>{x})[0], w2 * h1 + b2) < 1e-14);
    CHECK(rel_err(derivative(m, std::vector<double>{x}, 1), w2 * dh1) < 1e-12);
    CHECK(rel_err(derivative(m, std::vector<double>{x}, 2), w2 * ddh1) < 1e-12);
  }

  SUBCASE("rbf: single kernel at 0 with width 4") {
    cfg.variant = InrVariant::rbf;
    cfg.rbf_centers = 1;
    auto m = init_model(cfg);
    const double w1 = 1.3, b1 = -0.2, w2 = 0.9, b2 = 0.1;
    m.theta = {w1, b1, w2, b2, /*center*/ 0.0};
    const double u = std::exp(-x * x / 32.0);  // width 2*spacing = 4
    const double du = -x / 16.0 * u;
    const double ddu = (-1.0 / 16.0 + x * x / 256.0) * u;
    const double t = std::tanh(w1 * u + b1);
    const double dt = (1.0 - t * t) * w1 * du;
    const double ddt = (1.0 - t * t) * w1 * ddu - 2.0 * t * (1.0 - t * t) * w1 * w1 * du * du;
    CHECK(rel_err(forward(m, std::vector<double>{x})[0], w2 * t + b2) < 1e-14);
    CHECK(rel_err(derivative(m, std::vector<double>{x}, 1), w2 * dt) < 1e-12);
    CHECK(rel_err(derivative(m, std::vector<double>{x}, 2), w2 * ddt) < 1e-12);
  }

  SUBCASE("posenc: raw channel first, then sin/cos at pi and 2 pi") {
    cfg.variant = InrVariant::mlp_posenc;
    cfg.posenc_frequencies = 2;  // features: x, sin(pi x), cos(pi x), sin(2 pi x), cos(2 pi x)
    auto m = init_model(cfg);
    const double w_raw = 0.4, w_s1 = 0.7, w_c1 = -0.3, w_s2 = 0.5, w_c2 = 0.2;
    const double b1 = 0.05, w2 = 1.1, b2 = -0.6;
    m.theta = {w_raw, w_s1, w_c1, w_s2, w_c2, b1, w2, b2};
    const double pi = std::numbers::pi;
    auto z = [&](double xx) {
      return w_raw * xx + w_s1 * std::sin(pi * xx) + w_c1 * std::cos(pi * xx) +
             w_s2 * std::sin(2 * pi * xx) + w_c2 * std::cos(2 * pi * xx) + b1;
    };
    auto dz = [&](double xx) {
      return w_raw + w_s1 * pi * std::cos(pi * xx) - w_c1 * pi * std::sin(pi * xx) +
             w_s2 * 2 * pi * std::cos(2 * pi * xx) - w_c2 * 2 * pi * std::sin(2 * pi * xx);
    };
    auto ddz = [&](double xx) {
      return -w_s1 * pi * pi * std::sin(pi * xx) - w_c1 * pi * pi * std::cos(pi * xx) -
             w_s2 * 4 * pi * pi * std::sin(2 * pi * xx) - w_c2 * 4 * pi * pi * std::cos(2 * pi * xx);
    };
    const double t = std::tanh(z(x));
    const double dt = (1.0 - t * t) * dz(x);
    const double ddt = (1.0 - t * t) * ddz(x) - 2.0 * t * (1.0 - t * t) * dz(x) * dz(x);
    CHECK(rel_err(forward(m, std::vector<double>{x})[0], w2 * t + b2) < 1e-14);
    CHECK(rel_err(derivative(m, std::vector<double>{x}, 1), w2 * dt) < 1e-12);
    CHECK(rel_err(derivative(m, std::vector<double>{x}, 2), w2 * ddt) < 1e-12);
  }

  SUBCASE("fourier: cos feature before sin feature") {
    cfg.variant = InrVariant::fourier;
    cfg.fourier_features = 1;
    auto m = init_model(cfg);
    const double b0 = 0.5;  // frozen frequency, set by hand
    const double w_c = 0.8, w_s = -0.6, b1 = 0.15, w2 = 1.4, b2 = 0.3;
    m.theta = {w_c, w_s, b1, w2, b2, b0};
    const double tp = 2.0 * std::numbers::pi * b0;
    auto z = [&](double xx) { return w_c * std::cos(tp * xx) + w_s * std::sin(tp * xx) + b1; };
    auto dz = [&](double xx) { return -w_c * tp * std::sin(tp * xx) + w_s * tp * std::cos(tp * xx); };
    auto ddz = [&](double xx) { return -tp * tp * (w_c * std::cos(tp * xx) + w_s * std::sin(tp * xx)); };
    const double t = std::tanh(z(x));
    const double dt = (1.0 - t * t) * dz(x);
    const double ddt = (1.0 - t * t) * ddz(x) - 2.0 * t * (1.0 - t * t) * dz(x) * dz(x);
    CHECK(rel_err(forward(m, std::vector<double>{x})[0], w2 * t + b2) < 1e-14);
    CHECK(rel_err(derivative(m, std::vector<double>{x}, 1), w2 * dt) < 1e-12);
    CHECK(rel_err(derivative(m, std::vector<double>{x}, 2), w2 * ddt) < 1e-12);
  }

  SUBCASE("derivative argument validation") {
    cfg.variant = InrVariant::siren;
    const auto m = init_model(cfg);
    CHECK_THROWS_AS(derivative(m, std::vector<double>{x}, 0), std::invalid_argument);
    CHECK_THROWS_AS(derivative(m, std::vector<double>{x}, 3), std::invalid_argument);
    CHECK_THROWS_AS(derivative(m, std::vector<double>{x}, 1, 1), std::invalid_argument);
  }
}

TEST_CASE("parameter gradient matches central finite differences") {
  // Small two-input networks, random data; every trainable parameter.
  Rng rng(991);
  std::vector<TrainingSample> samples;
  for (int i = 0; i < 10; ++i)
    samples.push_back({{rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)},
                       {rng.uniform(-1.0, 1.0)}});
  for (auto v :
       {InrVariant::mlp_posenc, InrVariant::siren, InrVariant::fourier, InrVariant::rbf}) {
    CAPTURE(to_string(v));
    auto model = init_model(small_config(v));
    const auto grad = training_gradient(model, samples);
    REQUIRE(grad.size() == trainable_parameter_count(model.config));
    double worst = 0.0;
    for (std::size_t k = 0; k < grad.size(); ++k) {
      const double h = 1e-6 * std::max(1.0, std::abs(model.theta[k]));
      const double saved = model.theta[k];
      model.theta[k] = saved + h;
      const double lp = training_loss(model, samples);
      model.theta[k] = saved - h;
      const double lm = training_loss(model, samples);
      model.theta[k] = saved;
      const double fd = (lp - lm) / (2.0 * h);
      worst = std::max(worst, rel_err(grad[k], fd, 1e-4));
    }
    CAPTURE(worst);
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("input derivatives of trained models match finite differences") {
  // Train each full-size variant briefly on a smooth curve so the
  // normalisation maps are non-trivial, then compare both derivative orders
  // against central differences in raw coordinates.
  auto target = [](double x) { return 1.0 - 0.002 * x - 1e-5 * x * x; };
  const auto samples = curve_samples(60, 0.0, 120.0, target);
  for (auto v :
       {InrVariant::mlp_posenc, InrVariant::siren, InrVariant::fourier, InrVariant::rbf}) {
    CAPTURE(to_string(v));
    InrConfig cfg;
    cfg.variant = v;
    cfg.epochs = 60;
    cfg.learning_rate = 5e-3;
    cfg.seed = 3;
    auto model = init_model(cfg);
    train(model, samples, {}, {});
    const double scale = model.input_norm.scale[0];
    // ~1e-5 in normalised units: small enough that truncation from the
    // network's high-frequency content stays well under the tolerance,
    // large enough to avoid round-off in the second difference.
    const double h1 = 1e-5 / std::abs(scale);
    double worst1 = 0.0, worst2 = 0.0;
    for (int i = 0; i < 100; ++i) {
      const double x = 1.0 + (119.0 - 1.0) * i / 99.0;
      const auto f = [&](double xx) { return forward(model, std::vector<double>{xx})[0]; };
      const double d1 = derivative(model, std::vector<double>{x}, 1);
      const double fd1 = (f(x + h1) - f(x - h1)) / (2.0 * h1);
      // scale-aware floor: derivatives shrink with the input scale
      worst1 = std::max(worst1, std::abs(d1 - fd1) /
                                    std::max({std::abs(d1), std::abs(fd1), std::abs(scale)}));
      const double d2 = derivative(model, std::vector<double>{x}, 2);
      const double fd2 = (f(x + h1) - 2.0 * f(x) + f(x - h1)) / (h1 * h1);
      worst2 = std::max(worst2, std::abs(d2 - fd2) / std::max({std::abs(d2), std::abs(fd2),
                                                               scale * scale}));
    }
    CAPTURE(worst1);
    CAPTURE(worst2);
    CHECK(worst1 <= 1e-4);
    CHECK(worst2 <= 1e-4);
  }
}

TEST_CASE("training fits a constant to 0.9 within 1e-3") {
  for (auto v :
       {InrVariant::mlp_posenc, InrVariant::siren, InrVariant::fourier, InrVariant::rbf}) {
    CAPTURE(to_string(v));
    InrConfig cfg;
    cfg.variant = v;
    // The positional encoding needs a longer budget; fourier oscillates if
    // trained far past convergence at this learning rate.
    cfg.epochs = v == InrVariant::mlp_posenc ? 600 : 300;
    cfg.learning_rate = 5e-3;
    cfg.seed = 11;
    auto model = init_model(cfg);
    const auto samples = curve_samples(10, 0.0, 9.0, [](double) { return 0.9; });
    const auto report = train(model, samples, {}, {});
    CHECK(report.final_epoch == cfg.epochs);
    CHECK(report.train_loss.size() == static_cast<std::size_t>(cfg.epochs));
    CHECK(report.val_loss.empty());
    for (const auto& s : samples)
      CHECK(std::abs(forward(model, s.x)[0] - 0.9) <= 1e-3);
  }
}

TEST_CASE("a constant siren model is flat everywhere, not just at the samples") {
  InrConfig cfg;
  cfg.variant = InrVariant::siren;
  cfg.epochs = 300;
  cfg.learning_rate = 5e-3;
  cfg.seed = 11;
  auto model = init_model(cfg);
  const auto samples = curve_samples(101, 0.0, 1.0, [](double) { return 0.9; });
  train(model, samples, {}, {});
  for (int i = 0; i <= 500; ++i) {
    const double x = i / 500.0;
    CHECK(std::abs(forward(model, std::vector<double>{x})[0] - 0.9) <= 1e-3);
    CHECK(std::abs(derivative(model, std::vector<double>{x}, 1)) <= 0.01);
    CHECK(std::abs(derivative(model, std::vector<double>{x}, 2)) <= 0.5);
  }
}

TEST_CASE("a single sample is interpolated to train loss below 1e-8") {
  for (auto v :
       {InrVariant::mlp_posenc, InrVariant::siren, InrVariant::fourier, InrVariant::rbf}) {
    CAPTURE(to_string(v));
    InrConfig cfg;
    cfg.variant = v;
    cfg.epochs = 200;
    cfg.learning_rate = 5e-3;
    cfg.seed = 2;
    auto model = init_model(cfg);
    const std::vector<TrainingSample> one{{{3.7}, {0.42}}};
    const auto report = train(model, one, {}, {});
    CHECK(report.train_loss.back() < 1e-8);
  }
}

TEST_CASE("a model fitted to V(Q) = 4 - Q recovers the slope mid-domain") {
  InrConfig cfg;
  cfg.variant = InrVariant::siren;
  cfg.epochs = 1000;
  cfg.seed = 9;
  auto model = init_model(cfg);
  const auto samples = curve_samples(50, 0.0, 1.0, [](double q) { return 4.0 - q; });
  train(model, samples, {}, {});
  for (double q : {0.4, 0.5, 0.6})
    CHECK(std::abs(derivative(model, std::vector<double>{q}, 1) + 1.0) < 0.05);
}

TEST_CASE("siren fits one period of a sine to val MSE below 1e-3") {
  InrConfig cfg;
  cfg.variant = InrVariant::siren;
  cfg.epochs = 500;
  cfg.seed = 21;  // learning rate stays at the 1e-3 default
  const auto all = curve_samples(64, 0.0, 1.0, [](double x) {
    return std::sin(2.0 * std::numbers::pi * x);
  });
  const auto [tr, va] = split_train_val(all, 0.2);
  REQUIRE(va.size() == 12);  // every 5th of 64
  auto model = init_model(cfg);
  const auto report = train(model, tr, va, {});
  REQUIRE(report.val_loss.size() == 500);
  CAPTURE(report.val_loss.back());
  CHECK(report.val_loss.back() < 1e-3);
  CHECK(report.train_loss.back() <= report.train_loss.front());
}

TEST_CASE("one epoch performs exactly one full-batch Adam step") {
  InrConfig cfg;
  cfg.epochs = 1;
  cfg.learning_rate = 1e-3;
  cfg.seed = 9;
  auto model = init_model(cfg);
  const auto before = model.theta;
  const auto samples = curve_samples(20, 0.0, 19.0, [](double x) { return 1.0 - 0.01 * x; });
  train(model, samples, {}, {});
  // Adam's first step is +-lr per coordinate (up to the epsilon softening).
  double max_step = 0.0;
  for (std::size_t k = 0; k < before.size(); ++k)
    max_step = std::max(max_step, std::abs(model.theta[k] - before[k]));
  CHECK(max_step <= cfg.learning_rate * 1.0000001);
  CHECK(max_step > 0.5 * cfg.learning_rate);
}

TEST_CASE("training is deterministic and leaves frozen tables untouched") {
  InrConfig cfg;
  cfg.variant = InrVariant::fourier;
  cfg.epochs = 40;
  cfg.seed = 31;
  const auto samples = curve_samples(30, 0.0, 29.0, [](double x) { return 1.0 - 0.004 * x; });
  auto a = init_model(cfg);
  auto b = init_model(cfg);
  const std::vector<double> frozen(a.theta.end() - 64, a.theta.end());
  const auto ra = train(a, samples, {}, {});
  const auto rb = train(b, samples, {}, {});
  CHECK(bitwise_equal(a.theta, b.theta));
  CHECK(bitwise_equal(ra.train_loss, rb.train_loss));
  const std::vector<double> frozen_after(a.theta.end() - 64, a.theta.end());
  CHECK(bitwise_equal(frozen, frozen_after));
  auto cfg2 = cfg;
  cfg2.seed = 32;
  auto c = init_model(cfg2);
  train(c, samples, {}, {});
  CHECK_FALSE(bitwise_equal(a.theta, c.theta));
}

TEST_CASE("training rejects bad inputs and aborts on non-finite loss") {
  InrConfig cfg;
  auto model = init_model(cfg);
  CHECK_THROWS_AS(train(model, {}, {}, {}), std::invalid_argument);
  std::vector<TrainingSample> bad{{{std::nan("")}, {1.0}}};
  CHECK_THROWS_AS(train(model, bad, {}, {}), std::invalid_argument);
  bad = {{{1.0}, {std::numeric_limits<double>::infinity()}}};
  CHECK_THROWS_AS(train(model, bad, {}, {}), std::invalid_argument);
  bad = {{{1.0, 2.0}, {1.0}}};
  CHECK_THROWS_AS(train(model, bad, {}, {}), std::invalid_argument);

  auto poisoned = init_model(cfg);
  poisoned.theta[0] = std::nan("");
  const auto samples = curve_samples(5, 0.0, 4.0, [](double x) { return x; });
  try {
    train(poisoned, samples, {}, {});
    FAIL("expected numeric_error");
  } catch (const numeric_error& e) {
    CHECK(std::string(e.what()).find("epoch 0") != std::string::npos);
  }
}

TEST_CASE("normalisation invariance under an exact affine input map") {
  // Integer inputs, doubling plus power-of-two shift: the normalised
  // training problem is bit-identical, so predictions must agree.
  auto target = [](double x) { return 1.0 - 0.003 * x - 2e-5 * x * x; };
  const auto plain = curve_samples(40, 0.0, 39.0, target);
  std::vector<TrainingSample> mapped;
  for (const auto& s : plain) mapped.push_back({{2.0 * s.x[0] + 256.0}, s.y});
  InrConfig cfg;
  cfg.epochs = 50;
  cfg.seed = 8;
  auto a = init_model(cfg);
  auto b = init_model(cfg);
  const auto [tra, vaa] = split_train_val(plain, 0.2);
  const auto [trb, vab] = split_train_val(mapped, 0.2);
  const auto ra = train(a, tra, vaa, {});
  const auto rb = train(b, trb, vab, {});
  REQUIRE_FALSE(ra.val_loss.empty());
  CHECK(std::abs(ra.val_loss.back() - rb.val_loss.back()) <= 1e-10);
  for (double x : {0.0, 7.5, 21.0, 39.0})
    CHECK(std::abs(forward(a, std::vector<double>{x})[0] -
                   forward(b, std::vector<double>{2.0 * x + 256.0})[0]) <= 1e-10);
}

TEST_CASE("pinned input range widens the normalisation domain") {
  const auto samples = curve_samples(40, 0.0, 39.0, [](double x) { return 1.0 - 0.004 * x; });
  InrConfig cfg;
  cfg.epochs = 30;
  cfg.seed = 4;
  auto model = init_model(cfg);
  TrainOptions opts;
  opts.input_range = {{0.0, 120.0}};
  train(model, samples, {}, opts);
  CHECK(model.input_norm.scale[0] == doctest::Approx(2.0 / 120.0));
  CHECK(std::isfinite(forward(model, std::vector<double>{119.0})[0]));

  TrainOptions bad;
  bad.input_range = {{5.0, 5.0}};
  auto m2 = init_model(cfg);
  CHECK_THROWS_AS(train(m2, samples, {}, bad), std::invalid_argument);
}

TEST_CASE("early stopping halts on a stale validation loss and restores the best state") {
  // Noise-only targets: validation stops improving quickly.
  Rng rng(55);
  std::vector<TrainingSample> tr, va;
  for (int i = 0; i < 24; ++i) tr.push_back({{static_cast<double>(i)}, {rng.normal()}});
  for (int i = 0; i < 8; ++i) va.push_back({{i + 0.5}, {rng.normal()}});
  InrConfig cfg;
  cfg.epochs = 400;
  cfg.learning_rate = 2e-2;
  cfg.seed = 17;
  auto model = init_model(cfg);
  TrainOptions opts;
  opts.early_stop_patience = 10;
  const auto report = train(model, tr, va, opts);
  REQUIRE(report.final_epoch < 400);
  CHECK(report.val_loss.size() == static_cast<std::size_t>(report.final_epoch));
  const double best = *std::min_element(report.val_loss.begin(), report.val_loss.end());
  // restored parameters reproduce the best recorded validation loss
  double sse = 0.0;
  for (const auto& s : va) {
    const double r = forward(model, s.x)[0] - s.y[0];
    sse += r * r;
  }
  CHECK(std::abs(sse / va.size() - best) <= 1e-9 * std::max(1.0, best));
}

TEST_CASE("mc dropout") {
  InrConfig cfg;
  cfg.dropout_p = 0.2;
  cfg.epochs = 30;
  cfg.learning_rate = 1e-2;
  cfg.seed = 13;
  auto model = init_model(cfg);
  const auto samples = curve_samples(40, 0.0, 39.0, [](double x) { return 1.0 - 0.005 * x; });
  train(model, samples, {}, {});
  const std::vector<double> x{17.0};

  SUBCASE("p = 0 collapses to the deterministic forward pass") {
    auto m0 = model;
    m0.config.dropout_p = 0.0;
    const auto out = mc_dropout_predict(m0, x, 100, 99);
    CHECK(out.variance[0] == 0.0);
    CHECK(out.mean[0] == forward(m0, x)[0]);
  }
  SUBCASE("a single pass has zero variance") {
    const auto out = mc_dropout_predict(model, x, 1, 99);
    CHECK(out.variance[0] == 0.0);
  }
  SUBCASE("deterministic in the seed") {
    const auto a = mc_dropout_predict(model, x, 25, 7);
    const auto b = mc_dropout_predict(model, x, 25, 7);
    CHECK(a.mean[0] == b.mean[0]);
    CHECK(a.variance[0] == b.variance[0]);
    const auto c = mc_dropout_predict(model, x, 25, 8);
    CHECK(a.mean[0] != c.mean[0]);
  }
  SUBCASE("positive spread and ensemble-consistent means") {
    const auto big = mc_dropout_predict(model, x, 5000, 123);
    CHECK(big.variance[0] > 0.0);
    const auto small = mc_dropout_predict(model, x, 50, 321);
    const double se = std::sqrt(big.variance[0] / 50.0);
    CHECK(std::abs(small.mean[0] - big.mean[0]) <= 3.0 * se);
  }
  SUBCASE("rejects a non-positive pass count") {
    CHECK_THROWS_AS(mc_dropout_predict(model, x, 0, 1), std::invalid_argument);
  }
}

TEST_CASE("train/val split is sorted and takes every k-th sample") {
  std::vector<TrainingSample> samples;
  for (int i : {3, 0, 7, 1, 9, 4, 6, 2, 8, 5})
    samples.push_back({{static_cast<double>(i)}, {0.0}});
  const auto [tr, va] = split_train_val(samples, 0.2);
  REQUIRE(tr.size() == 8);
  REQUIRE(va.size() == 2);
  CHECK(va[0].x[0] == 4.0);  // every 5th after sorting: indices 4 and 9
  CHECK(va[1].x[0] == 9.0);
  for (std::size_t i = 1; i < tr.size(); ++i) CHECK(tr[i - 1].x[0] < tr[i].x[0]);
  const auto [all, none] = split_train_val(samples, 0.0);
  CHECK(all.size() == 10);
  CHECK(none.empty());
}

TEST_CASE("model serialisation round trip") {
  TempDir tmp;
  InrConfig cfg;
  cfg.variant = InrVariant::fourier;
  cfg.epochs = 25;
  cfg.seed = 710;
  auto model = init_model(cfg);
  const auto samples = curve_samples(30, 0.0, 29.0, [](double x) { return 1.0 - 0.006 * x; });
  train(model, samples, {}, {});
  const auto path = tmp.path / "model.json";
  save_model(model, path);
  const auto loaded = load_model(path);
  CHECK(bitwise_equal(model.theta, loaded.theta));
  CHECK(bitwise_equal(model.input_norm.scale, loaded.input_norm.scale));
  CHECK(bitwise_equal(model.output_norm.offset, loaded.output_norm.offset));
  for (double x : {0.0, 3.3, 14.91, 29.0}) {
    const double da = forward(model, std::vector<double>{x})[0];
    const double db = forward(loaded, std::vector<double>{x})[0];
    CHECK(std::abs(da - db) <= 1e-12 * std::max(1.0, std::abs(da)));
  }

  SUBCASE("parameter count mismatch is rejected") {
    auto broken = model;
    broken.theta.pop_back();
    const auto bad_path = tmp.path / "broken.json";
    save_model(broken, bad_path);
    CHECK_THROWS_WITH_AS(load_model(bad_path),
                         doctest::Contains("parameter count"), std::invalid_argument);
  }
  SUBCASE("invalid json is rejected") {
    const auto bad_path = tmp.path / "garbage.json";
    std::ofstream(bad_path) << "{not json";
    CHECK_THROWS_AS(load_model(bad_path), std::invalid_argument);
  }
  SUBCASE("missing file is rejected") {
    CHECK_THROWS_AS(load_model(tmp.path / "nope.json"), std::invalid_argument);
  }
}
