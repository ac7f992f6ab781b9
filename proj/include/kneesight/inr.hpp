#pragma once

// Continuous coordinate-based surrogate models ("implicit" trajectory
// representations): four encoding variants in front of a small MLP, trained
// with full-batch Adam on MSE. Parameter gradients come from hand-written
// reverse-mode differentiation; input derivatives (orders 1 and 2) from
// second-order dual numbers pushed through the same computation graph —
// never from nested numerical differencing.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace kneesight {

enum class InrVariant { mlp_posenc, siren, fourier, rbf };

std::string to_string(InrVariant v);
InrVariant inr_variant_from_string(const std::string& name);

struct InrConfig {
  InrVariant variant = InrVariant::mlp_posenc;
  int input_dim = 1;   // d
  int output_dim = 1;  // c
  int hidden_layers = 3;
  int hidden_width = 64;
  double omega0 = 30.0;        // siren frequency scale
  int posenc_frequencies = 6;  // L: frequencies 2^j * pi, j = 0..L-1
  int fourier_features = 64;   // rows of the random frequency matrix
  double fourier_scale = 10.0; // sigma_f of the frozen frequency draws
  int rbf_centers = 64;
  double dropout_p = 0.1;  // applied at inference only (MC dropout)
  int epochs = 50;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
};

void validate(const InrConfig& cfg);  // throws std::invalid_argument

// Affine per-dimension map norm = scale * raw + offset; invertible.
struct AffineNorm {
  std::vector<double> scale, offset;
};

struct TrainingSample {
  std::vector<double> x;  // d coordinates
  std::vector<double> y;  // c targets
};

struct TrainingReport {
  std::vector<double> train_loss;  // per-epoch MSE in target units
  std::vector<double> val_loss;    // empty when no validation set given
  int final_epoch = 0;             // epochs actually run
  std::uint64_t seed = 0;
};

struct InrModel {
  InrConfig config;
  // Flat parameters: dense layer weights+biases first (trainable), then the
  // frozen encoding table (fourier frequencies / rbf centers) when present.
  std::vector<double> theta;
  AffineNorm input_norm;   // raw coordinates -> [-1, 1]
  AffineNorm output_norm;  // z-score fitted on training targets only
};

// Width of the encoded input fed to the first dense layer.
int encoding_dim(const InrConfig& cfg);
// Dense weights + biases (what Adam updates).
std::size_t trainable_parameter_count(const InrConfig& cfg);
// Trainable plus frozen encoding-table entries (= theta.size()).
std::size_t total_parameter_count(const InrConfig& cfg);

// Deterministic initialisation from config.seed: Glorot uniform for
// non-siren layers, the siren-specific scheme (first layer +-1/fan_in,
// later layers +-sqrt(6/fan_in)/omega0) otherwise; fourier frequencies
// drawn Normal(0, sigma_f^2) and frozen; rbf centers on a fixed grid with
// width = 2 x spacing.
InrModel init_model(const InrConfig& cfg);

// Deterministic de-normalised prediction (dropout inactive).
std::vector<double> forward(const InrModel& model, std::span<const double> x);

// Exact derivative of output `out_index` w.r.t. the raw coordinate `wrt`,
// order 1 or 2, at x.
double derivative(const InrModel& model, std::span<const double> x, int order, int wrt = 0,
                  int out_index = 0);

struct TrainOptions {
  // > 0 enables early stopping: halt after this many consecutive epochs
  // without validation improvement and restore the best parameters.
  int early_stop_patience = 0;
  // Pins the input-normalisation domain (lo, hi per dimension) instead of
  // fitting it from the training inputs; used when a model must be
  // evaluated beyond its training range (prefix extrapolation).
  std::optional<std::vector<std::pair<double, double>>> input_range;
};

// Full-batch Adam (beta1 0.9, beta2 0.999, eps 1e-8) on MSE; deterministic
// given the model seed. Losses are reported in de-normalised target units.
// A non-finite loss aborts with the offending epoch in the message.
TrainingReport train(InrModel& model, std::span<const TrainingSample> train_set,
                     std::span<const TrainingSample> val_set, const TrainOptions& opts = {});

// MSE over `samples` evaluated in the model's normalised space, and its
// gradient w.r.t. the trainable parameters. Exposed so gradient correctness
// can be verified against finite differences.
double training_loss(const InrModel& model, std::span<const TrainingSample> samples);
std::vector<double> training_gradient(const InrModel& model,
                                      std::span<const TrainingSample> samples);

struct UncertainOutput {
  std::vector<double> mean;      // per output dimension
  std::vector<double> variance;  // population variance over passes
};

// M stochastic passes with inverted-dropout masks on hidden activations;
// mean and population variance (divide by M) per output. Deterministic
// given seed; p = 0 degenerates to the plain forward pass with zero
// variance.
UncertainOutput mc_dropout_predict(const InrModel& model, std::span<const double> x, int passes,
                                   std::uint64_t seed);

// Deterministic validation split: samples sorted by first coordinate, every
// k-th (k = round(1/val_fraction)) goes to validation.
std::pair<std::vector<TrainingSample>, std::vector<TrainingSample>> split_train_val(
    std::span<const TrainingSample> samples, double val_fraction = 0.2);

// JSON serialisation; round trip preserves forward outputs bit-exactly.
void save_model(const InrModel& model, const std::filesystem::path& path);
InrModel load_model(const std::filesystem::path& path);

}  // namespace kneesight
