#include "kneesight/inr.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <type_traits>

#include "kneesight/common.hpp"
#include "kneesight/csv.hpp"
#include "kneesight/log.hpp"
#include "kneesight/rng.hpp"
#include "nlohmann/json.hpp"

namespace kneesight {

namespace {

// ---------------------------------------------------------------------------
// Second-order dual number carrying value, first and second derivative along
// a single input direction. Pushing one Jet2 through the full forward pass
// yields exact first/second derivatives of the network output.
struct Jet2 {
  double v = 0.0, d1 = 0.0, d2 = 0.0;
};

inline Jet2 jet_const(double c) { return {c, 0.0, 0.0}; }

inline Jet2 operator+(const Jet2& a, const Jet2& b) { return {a.v + b.v, a.d1 + b.d1, a.d2 + b.d2}; }
inline Jet2 operator-(const Jet2& a, const Jet2& b) { return {a.v - b.v, a.d1 - b.d1, a.d2 - b.d2}; }
inline Jet2 operator*(const Jet2& a, const Jet2& b) {
  return {a.v * b.v, a.d1 * b.v + a.v * b.d1, a.d2 * b.v + 2.0 * a.d1 * b.d1 + a.v * b.d2};
}
inline Jet2 operator*(double c, const Jet2& a) { return {c * a.v, c * a.d1, c * a.d2}; }
inline Jet2 operator*(const Jet2& a, double c) { return c * a; }
inline Jet2 operator+(const Jet2& a, double c) { return {a.v + c, a.d1, a.d2}; }
inline Jet2 operator-(const Jet2& a, double c) { return {a.v - c, a.d1, a.d2}; }
inline Jet2& operator+=(Jet2& a, const Jet2& b) {
  a.v += b.v;
  a.d1 += b.d1;
  a.d2 += b.d2;
  return a;
}

// Chain rule for a scalar function: f(u), f'(u) * u', f''(u) * u'^2 + f'(u) * u''.
inline Jet2 apply(const Jet2& u, double f, double df, double ddf) {
  return {f, df * u.d1, ddf * u.d1 * u.d1 + df * u.d2};
}

inline Jet2 sin(const Jet2& u) {
  const double s = std::sin(u.v), c = std::cos(u.v);
  return apply(u, s, c, -s);
}
inline Jet2 cos(const Jet2& u) {
  const double s = std::sin(u.v), c = std::cos(u.v);
  return apply(u, c, -s, -c);
}
inline Jet2 tanh(const Jet2& u) {
  const double t = std::tanh(u.v);
  const double dt = 1.0 - t * t;
  return apply(u, t, dt, -2.0 * t * dt);
}
inline Jet2 exp(const Jet2& u) {
  const double e = std::exp(u.v);
  return apply(u, e, e, e);
}

// Overload set so templated code works for both scalar types.
inline double j_sin(double x) { return std::sin(x); }
inline Jet2 j_sin(const Jet2& x) { return sin(x); }
inline double j_cos(double x) { return std::cos(x); }
inline Jet2 j_cos(const Jet2& x) { return cos(x); }
inline double j_tanh(double x) { return std::tanh(x); }
inline Jet2 j_tanh(const Jet2& x) { return tanh(x); }
inline double j_exp(double x) { return std::exp(x); }
inline Jet2 j_exp(const Jet2& x) { return exp(x); }

template <typename S>
S jet_like();
template <>
inline double jet_like<double>() {
  return 0.0;
}
template <>
inline Jet2 jet_like<Jet2>() {
  return {};
}

template <typename S>
S jet_const_like(double c);
template <>
inline double jet_const_like<double>(double c) {
  return c;
}
template <>
inline Jet2 jet_const_like<Jet2>(double c) {
  return jet_const(c);
}

// ---------------------------------------------------------------------------
// Layer geometry and flat-parameter layout.

struct LayerShape {
  int in = 0, out = 0;
  std::size_t offset = 0;  // start of [W row-major | b] inside theta
};

std::vector<LayerShape> layer_shapes(const InrConfig& cfg) {
  std::vector<LayerShape> shapes;
  int in = encoding_dim(cfg);
  std::size_t offset = 0;
  for (int l = 0; l < cfg.hidden_layers; ++l) {
    shapes.push_back({in, cfg.hidden_width, offset});
    offset += static_cast<std::size_t>(cfg.hidden_width) * (in + 1);
    in = cfg.hidden_width;
  }
  shapes.push_back({in, cfg.output_dim, offset});
  return shapes;
}

std::size_t encoding_table_size(const InrConfig& cfg) {
  switch (cfg.variant) {
    case InrVariant::fourier:
      return static_cast<std::size_t>(cfg.fourier_features) * cfg.input_dim;
    case InrVariant::rbf:
      return static_cast<std::size_t>(cfg.rbf_centers) * cfg.input_dim;
    default:
      return 0;
  }
}

// Gaussian width shared by all rbf kernels: twice the grid spacing.
double rbf_width(const InrConfig& cfg) {
  const int per_axis = static_cast<int>(
      std::ceil(std::pow(static_cast<double>(cfg.rbf_centers), 1.0 / cfg.input_dim)));
  const double spacing = per_axis > 1 ? 2.0 / (per_axis - 1) : 2.0;
  return 2.0 * spacing;
}

void check_input(const InrModel& model, std::span<const double> x) {
  if (static_cast<int>(x.size()) != model.config.input_dim)
    throw std::invalid_argument("input has " + std::to_string(x.size()) +
                                " coordinates, expected " +
                                std::to_string(model.config.input_dim));
  for (double v : x)
    if (!std::isfinite(v)) throw std::invalid_argument("non-finite input coordinate");
}

// ---------------------------------------------------------------------------
// Encoding of a normalised input, templated over the scalar type.

template <typename S>
void encode(const InrModel& model, const S* x, std::vector<S>& enc) {
  const InrConfig& cfg = model.config;
  const int d = cfg.input_dim;
  enc.clear();
  switch (cfg.variant) {
    case InrVariant::siren:
      enc.assign(x, x + d);
      break;
    case InrVariant::mlp_posenc: {
      enc.assign(x, x + d);
      double freq = std::numbers::pi;  // 2^j * pi
      for (int j = 0; j < cfg.posenc_frequencies; ++j, freq *= 2.0) {
        for (int i = 0; i < d; ++i) {
          const S z = freq * x[i];
          enc.push_back(j_sin(z));
          enc.push_back(j_cos(z));
        }
      }
      break;
    }
    case InrVariant::fourier: {
      const double* B = model.theta.data() + trainable_parameter_count(cfg);
      const double two_pi = 2.0 * std::numbers::pi;
      enc.reserve(2 * cfg.fourier_features);
      for (int r = 0; r < cfg.fourier_features; ++r) {
        S z = jet_like<S>();
        for (int i = 0; i < d; ++i) z += (two_pi * B[r * d + i]) * x[i];
        enc.push_back(j_cos(z));
        enc.push_back(j_sin(z));
      }
      break;
    }
    case InrVariant::rbf: {
      const double* centers = model.theta.data() + trainable_parameter_count(cfg);
      const double w = rbf_width(cfg);
      const double inv = -1.0 / (2.0 * w * w);
      enc.reserve(cfg.rbf_centers);
      for (int r = 0; r < cfg.rbf_centers; ++r) {
        S s = jet_like<S>();
        for (int i = 0; i < d; ++i) {
          const S diff = x[i] - centers[r * d + i];
          s += diff * diff;
        }
        enc.push_back(j_exp(inv * s));
      }
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// Dense stack. The cache retains everything backward needs.

struct ForwardCache {
  std::vector<double> enc;
  std::vector<std::vector<double>> pre;   // z_l per dense layer
  std::vector<std::vector<double>> post;  // activation(z_l); last layer linear
};

template <typename S>
void dense_stack(const InrModel& model, const std::vector<S>& enc, std::vector<S>& out,
                 ForwardCache* cache, const std::vector<std::vector<std::uint8_t>>* masks,
                 double keep_scale) {
  const InrConfig& cfg = model.config;
  const auto shapes = layer_shapes(cfg);
  std::vector<S> cur = enc, next;
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto& sh = shapes[l];
    const double* W = model.theta.data() + sh.offset;
    const double* b = W + static_cast<std::size_t>(sh.out) * sh.in;
    next.assign(sh.out, jet_like<S>());
    for (int o = 0; o < sh.out; ++o) {
      S acc = jet_const_like<S>(b[o]);
      const double* row = W + static_cast<std::size_t>(o) * sh.in;
      for (int i = 0; i < sh.in; ++i) acc += row[i] * cur[i];
      next[o] = acc;
    }
    if (cache) {
      cache->pre.emplace_back();
      if constexpr (std::is_same_v<S, double>) cache->pre.back() = next;
    }
    const bool last = l + 1 == shapes.size();
    if (!last) {
      if (cfg.variant == InrVariant::siren) {
        // omega0 scales the first layer only; the 1/omega0 factor in the
        // hidden-weight init pairs with plain sin(z) after it.
        const double omega = l == 0 ? cfg.omega0 : 1.0;
        for (auto& z : next) z = j_sin(omega * z);
      } else
        for (auto& z : next) z = j_tanh(z);
      if (masks) {
        const auto& m = (*masks)[l];
        for (int o = 0; o < sh.out; ++o)
          next[o] = (m[o] ? keep_scale : 0.0) * next[o];
      }
    }
    if (cache) {
      cache->post.emplace_back();
      if constexpr (std::is_same_v<S, double>) cache->post.back() = next;
    }
    cur.swap(next);
  }
  out = cur;
}

template <typename S>
void eval_normalized(const InrModel& model, const S* x_norm, std::vector<S>& out,
                     ForwardCache* cache = nullptr,
                     const std::vector<std::vector<std::uint8_t>>* masks = nullptr,
                     double keep_scale = 1.0) {
  std::vector<S> enc;
  encode(model, x_norm, enc);
  if (cache) {
    cache->enc.clear();
    if constexpr (std::is_same_v<S, double>) cache->enc = enc;
  }
  dense_stack(model, enc, out, cache, masks, keep_scale);
}

// Backward pass for one sample: d_out = dL/d(output), gradient accumulated
// into grad (trainable prefix of theta layout).
void backward(const InrModel& model, const ForwardCache& cache, std::vector<double> d_out,
              std::vector<double>& grad) {
  const InrConfig& cfg = model.config;
  const auto shapes = layer_shapes(cfg);
  std::vector<double> d_in;
  for (int l = static_cast<int>(shapes.size()) - 1; l >= 0; --l) {
    const auto& sh = shapes[l];
    const bool last = l + 1 == static_cast<int>(shapes.size());
    // delta = dL/d(pre-activation of layer l)
    std::vector<double>& delta = d_out;
    if (!last) {
      const auto& z = cache.pre[l];
      if (cfg.variant == InrVariant::siren) {
        const double omega = l == 0 ? cfg.omega0 : 1.0;
        for (int o = 0; o < sh.out; ++o) delta[o] *= omega * std::cos(omega * z[o]);
      } else {
        const auto& a = cache.post[l];
        for (int o = 0; o < sh.out; ++o) delta[o] *= 1.0 - a[o] * a[o];
      }
    }
    const std::vector<double>& input = l == 0 ? cache.enc : cache.post[l - 1];
    double* gW = grad.data() + sh.offset;
    double* gb = gW + static_cast<std::size_t>(sh.out) * sh.in;
    const double* W = model.theta.data() + sh.offset;
    d_in.assign(sh.in, 0.0);
    for (int o = 0; o < sh.out; ++o) {
      const double del = delta[o];
      double* grow = gW + static_cast<std::size_t>(o) * sh.in;
      const double* wrow = W + static_cast<std::size_t>(o) * sh.in;
      for (int i = 0; i < sh.in; ++i) {
        grow[i] += del * input[i];
        d_in[i] += del * wrow[i];
      }
      gb[o] += del;
    }
    d_out.swap(d_in);
  }
}

// ---------------------------------------------------------------------------
// Normalisation helpers. norm = scale * raw + offset.

template <typename S>
void normalize_input(const InrModel& model, std::span<const S> raw, std::vector<S>& out) {
  const auto& nm = model.input_norm;
  out.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) out[i] = nm.scale[i] * raw[i] + nm.offset[i];
}

double denorm_output(const InrModel& model, double norm_y, int j) {
  return (norm_y - model.output_norm.offset[j]) / model.output_norm.scale[j];
}

void check_samples(const InrConfig& cfg, std::span<const TrainingSample> samples,
                   const char* which) {
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    if (static_cast<int>(s.x.size()) != cfg.input_dim ||
        static_cast<int>(s.y.size()) != cfg.output_dim)
      throw std::invalid_argument(std::string(which) + " sample " + std::to_string(i) +
                                  " has mismatched dimensions");
    for (double v : s.x)
      if (!std::isfinite(v))
        throw std::invalid_argument(std::string(which) + " sample " + std::to_string(i) +
                                    " has non-finite input");
    for (double v : s.y)
      if (!std::isfinite(v))
        throw std::invalid_argument(std::string(which) + " sample " + std::to_string(i) +
                                    " has non-finite target");
  }
}

// Mean squared error plus parameter gradient over pre-normalised samples.
// Also returns the per-output-dimension normalised SSE so callers can
// report de-normalised losses without a second pass.
double loss_and_grad(const InrModel& model, const std::vector<std::vector<double>>& xs,
                     const std::vector<std::vector<double>>& ys, std::vector<double>* grad,
                     std::vector<double>* sse_per_dim) {
  const int c = model.config.output_dim;
  const std::size_t n = xs.size();
  if (grad) std::fill(grad->begin(), grad->end(), 0.0);
  if (sse_per_dim) sse_per_dim->assign(c, 0.0);
  double sse = 0.0;
  const double inv = 1.0 / (static_cast<double>(n) * c);
  ForwardCache cache;
  std::vector<double> out, d_out(c);
  for (std::size_t s = 0; s < n; ++s) {
    cache.enc.clear();
    cache.pre.clear();
    cache.post.clear();
    eval_normalized(model, xs[s].data(), out, grad ? &cache : nullptr);
    for (int j = 0; j < c; ++j) {
      const double r = out[j] - ys[s][j];
      sse += r * r;
      if (sse_per_dim) (*sse_per_dim)[j] += r * r;
      d_out[j] = 2.0 * r * inv;
    }
    if (grad) backward(model, cache, d_out, *grad);
  }
  return sse * inv;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string to_string(InrVariant v) {
  switch (v) {
    case InrVariant::mlp_posenc: return "mlp_posenc";
    case InrVariant::siren: return "siren";
    case InrVariant::fourier: return "fourier";
    case InrVariant::rbf: return "rbf";
  }
  throw std::invalid_argument("bad variant enum");
}

InrVariant inr_variant_from_string(const std::string& name) {
  if (name == "mlp_posenc") return InrVariant::mlp_posenc;
  if (name == "siren") return InrVariant::siren;
  if (name == "fourier") return InrVariant::fourier;
  if (name == "rbf") return InrVariant::rbf;
  throw std::invalid_argument("unknown model variant: " + name);
}

void validate(const InrConfig& cfg) {
  if (cfg.input_dim < 1) throw std::invalid_argument("input_dim must be >= 1");
  if (cfg.output_dim < 1) throw std::invalid_argument("output_dim must be >= 1");
  if (cfg.hidden_layers < 1) throw std::invalid_argument("hidden_layers must be >= 1");
  if (cfg.hidden_width < 1) throw std::invalid_argument("hidden_width must be >= 1");
  if (cfg.posenc_frequencies < 1) throw std::invalid_argument("posenc_frequencies must be >= 1");
  if (cfg.fourier_features < 1) throw std::invalid_argument("fourier_features must be >= 1");
  if (cfg.fourier_scale <= 0) throw std::invalid_argument("fourier_scale must be > 0");
  if (cfg.rbf_centers < 1) throw std::invalid_argument("rbf_centers must be >= 1");
  if (cfg.omega0 <= 0) throw std::invalid_argument("omega0 must be > 0");
  if (!(cfg.dropout_p >= 0.0 && cfg.dropout_p < 1.0))
    throw std::invalid_argument("dropout_p must be in [0, 1)");
  if (cfg.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (!(cfg.learning_rate > 0)) throw std::invalid_argument("learning_rate must be > 0");
}

int encoding_dim(const InrConfig& cfg) {
  switch (cfg.variant) {
    case InrVariant::siren: return cfg.input_dim;
    case InrVariant::mlp_posenc:
      return cfg.input_dim + 2 * cfg.posenc_frequencies * cfg.input_dim;
    case InrVariant::fourier: return 2 * cfg.fourier_features;
    case InrVariant::rbf: return cfg.rbf_centers;
  }
  throw std::invalid_argument("bad variant enum");
}

std::size_t trainable_parameter_count(const InrConfig& cfg) {
  std::size_t n = 0;
  for (const auto& sh : layer_shapes(cfg)) n += static_cast<std::size_t>(sh.out) * (sh.in + 1);
  return n;
}

std::size_t total_parameter_count(const InrConfig& cfg) {
  return trainable_parameter_count(cfg) + encoding_table_size(cfg);
}

InrModel init_model(const InrConfig& cfg) {
  validate(cfg);
  InrModel model;
  model.config = cfg;
  model.theta.assign(total_parameter_count(cfg), 0.0);
  model.input_norm.scale.assign(cfg.input_dim, 1.0);
  model.input_norm.offset.assign(cfg.input_dim, 0.0);
  model.output_norm.scale.assign(cfg.output_dim, 1.0);
  model.output_norm.offset.assign(cfg.output_dim, 0.0);

  Rng rng(derive_seed(cfg.seed, 1));
  const auto shapes = layer_shapes(cfg);
  for (std::size_t l = 0; l < shapes.size(); ++l) {
    const auto& sh = shapes[l];
    double bound;
    if (cfg.variant == InrVariant::siren)
      bound = l == 0 ? 1.0 / sh.in : std::sqrt(6.0 / sh.in) / cfg.omega0;
    else
      bound = std::sqrt(6.0 / (sh.in + sh.out));
    double* W = model.theta.data() + sh.offset;
    const std::size_t nw = static_cast<std::size_t>(sh.out) * sh.in;
    for (std::size_t k = 0; k < nw; ++k) W[k] = rng.uniform(-bound, bound);
    // biases stay zero
  }

  if (cfg.variant == InrVariant::fourier) {
    Rng table_rng(derive_seed(cfg.seed, 2));
    double* B = model.theta.data() + trainable_parameter_count(cfg);
    const std::size_t n = encoding_table_size(cfg);
    for (std::size_t k = 0; k < n; ++k) B[k] = table_rng.normal(0.0, cfg.fourier_scale);
  } else if (cfg.variant == InrVariant::rbf) {
    // Lexicographic grid over [-1,1]^d with ceil(m^(1/d)) points per axis;
    // only the first rbf_centers grid points are used.
    const int d = cfg.input_dim;
    const int per_axis =
        static_cast<int>(std::ceil(std::pow(static_cast<double>(cfg.rbf_centers), 1.0 / d)));
    const double spacing = per_axis > 1 ? 2.0 / (per_axis - 1) : 2.0;
    double* centers = model.theta.data() + trainable_parameter_count(cfg);
    std::vector<int> idx(d, 0);
    for (int r = 0; r < cfg.rbf_centers; ++r) {
      for (int i = 0; i < d; ++i)
        centers[r * d + i] = per_axis > 1 ? -1.0 + idx[i] * spacing : 0.0;
      for (int i = d - 1; i >= 0; --i) {  // lexicographic increment, last axis fastest
        if (++idx[i] < per_axis) break;
        idx[i] = 0;
      }
    }
  }
  return model;
}

std::vector<double> forward(const InrModel& model, std::span<const double> x) {
  check_input(model, x);
  std::vector<double> xn, out;
  normalize_input<double>(model, x, xn);
  eval_normalized(model, xn.data(), out);
  for (int j = 0; j < model.config.output_dim; ++j) out[j] = denorm_output(model, out[j], j);
  return out;
}

double derivative(const InrModel& model, std::span<const double> x, int order, int wrt,
                  int out_index) {
  check_input(model, x);
  if (order != 1 && order != 2)
    throw std::invalid_argument("derivative order must be 1 or 2, got " + std::to_string(order));
  if (wrt < 0 || wrt >= model.config.input_dim)
    throw std::invalid_argument("derivative coordinate out of range");
  if (out_index < 0 || out_index >= model.config.output_dim)
    throw std::invalid_argument("derivative output index out of range");
  std::vector<Jet2> xj(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xj[i] = jet_const(x[i]);
    if (static_cast<int>(i) == wrt) xj[i].d1 = 1.0;
  }
  std::vector<Jet2> xn, out;
  normalize_input<Jet2>(model, xj, xn);
  eval_normalized(model, xn.data(), out);
  // De-normalise: y = (g - offset) / scale, so derivatives divide by scale.
  const double s = model.output_norm.scale[out_index];
  return (order == 1 ? out[out_index].d1 : out[out_index].d2) / s;
}

double training_loss(const InrModel& model, std::span<const TrainingSample> samples) {
  check_samples(model.config, samples, "loss");
  std::vector<std::vector<double>> xs, ys;
  for (const auto& s : samples) {
    xs.push_back(s.x);
    ys.push_back(s.y);
  }
  return loss_and_grad(model, xs, ys, nullptr, nullptr);
}

std::vector<double> training_gradient(const InrModel& model,
                                      std::span<const TrainingSample> samples) {
  check_samples(model.config, samples, "loss");
  std::vector<std::vector<double>> xs, ys;
  for (const auto& s : samples) {
    xs.push_back(s.x);
    ys.push_back(s.y);
  }
  std::vector<double> grad(trainable_parameter_count(model.config), 0.0);
  loss_and_grad(model, xs, ys, &grad, nullptr);
  return grad;
}

TrainingReport train(InrModel& model, std::span<const TrainingSample> train_set,
                     std::span<const TrainingSample> val_set, const TrainOptions& opts) {
  const InrConfig& cfg = model.config;
  validate(cfg);
  if (train_set.empty()) throw std::invalid_argument("training set is empty");
  check_samples(cfg, train_set, "training");
  check_samples(cfg, val_set, "validation");
  if (opts.input_range) {
    if (static_cast<int>(opts.input_range->size()) != cfg.input_dim)
      throw std::invalid_argument("input_range must list one (lo, hi) pair per input dimension");
    for (const auto& [lo, hi] : *opts.input_range)
      if (!(hi > lo)) throw std::invalid_argument("input_range pairs must satisfy hi > lo");
  }

  const int d = cfg.input_dim, c = cfg.output_dim;

  // Input normalisation to [-1, 1] from the training inputs (or a pinned
  // range); a spread-free dimension maps to the constant 0.
  for (int i = 0; i < d; ++i) {
    double lo, hi;
    if (opts.input_range) {
      lo = (*opts.input_range)[i].first;
      hi = (*opts.input_range)[i].second;
    } else {
      lo = std::numeric_limits<double>::infinity();
      hi = -lo;
      for (const auto& s : train_set) {
        lo = std::min(lo, s.x[i]);
        hi = std::max(hi, s.x[i]);
      }
    }
    if (hi - lo < 1e-300) {
      model.input_norm.scale[i] = 1.0;
      model.input_norm.offset[i] = -lo;
    } else {
      model.input_norm.scale[i] = 2.0 / (hi - lo);
      model.input_norm.offset[i] = -1.0 - 2.0 * lo / (hi - lo);
    }
  }

  // Target z-scoring from the training targets only.
  for (int j = 0; j < c; ++j) {
    double mean = 0.0;
    for (const auto& s : train_set) mean += s.y[j];
    mean /= static_cast<double>(train_set.size());
    double var = 0.0;
    for (const auto& s : train_set) var += (s.y[j] - mean) * (s.y[j] - mean);
    var /= static_cast<double>(train_set.size());
    const double sd = std::sqrt(var);
    const double scale = sd < 1e-12 ? 1.0 : 1.0 / sd;
    model.output_norm.scale[j] = scale;
    model.output_norm.offset[j] = -mean * scale;
  }

  auto normalize_set = [&](std::span<const TrainingSample> set,
                           std::vector<std::vector<double>>& xs,
                           std::vector<std::vector<double>>& ys) {
    xs.clear();
    ys.clear();
    std::vector<double> xn(d), yn(c);
    for (const auto& s : set) {
      for (int i = 0; i < d; ++i)
        xn[i] = model.input_norm.scale[i] * s.x[i] + model.input_norm.offset[i];
      for (int j = 0; j < c; ++j)
        yn[j] = model.output_norm.scale[j] * s.y[j] + model.output_norm.offset[j];
      xs.push_back(xn);
      ys.push_back(yn);
    }
  };
  std::vector<std::vector<double>> txs, tys, vxs, vys;
  normalize_set(train_set, txs, tys);
  normalize_set(val_set, vxs, vys);

  // Normalised residuals relate to raw ones through the per-dimension output
  // scale, so de-normalised losses come straight from the per-dim SSE.
  auto denorm_loss = [&](const std::vector<double>& sse, std::size_t n) {
    double total = 0.0;
    for (int j = 0; j < c; ++j)
      total += sse[j] / (model.output_norm.scale[j] * model.output_norm.scale[j]);
    return total / (static_cast<double>(n) * c);
  };

  const std::size_t n_train = trainable_parameter_count(cfg);
  std::vector<double> grad(n_train), m1(n_train, 0.0), m2(n_train, 0.0), sse(c);
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;

  TrainingReport report;
  report.seed = cfg.seed;
  const bool stopping = opts.early_stop_patience > 0 && !val_set.empty();
  double best_val = std::numeric_limits<double>::infinity();
  std::vector<double> best_theta;
  int since_best = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double loss_norm = loss_and_grad(model, txs, tys, &grad, &sse);
    if (!std::isfinite(loss_norm))
      throw numeric_error("non-finite training loss at epoch " + std::to_string(epoch));
    report.train_loss.push_back(denorm_loss(sse, txs.size()));

    if (!val_set.empty()) {
      loss_and_grad(model, vxs, vys, nullptr, &sse);
      const double vloss = denorm_loss(sse, vxs.size());
      report.val_loss.push_back(vloss);
      if (stopping) {
        if (vloss < best_val) {
          best_val = vloss;
          best_theta.assign(model.theta.begin(), model.theta.begin() + n_train);
          since_best = 0;
        } else if (++since_best >= opts.early_stop_patience) {
          report.final_epoch = epoch + 1;
          std::copy(best_theta.begin(), best_theta.end(), model.theta.begin());
          log_debug("early stop at epoch " + std::to_string(epoch + 1));
          return report;
        }
      }
    }

    const double t = epoch + 1;
    const double corr1 = 1.0 - std::pow(kBeta1, t), corr2 = 1.0 - std::pow(kBeta2, t);
    for (std::size_t k = 0; k < n_train; ++k) {
      m1[k] = kBeta1 * m1[k] + (1.0 - kBeta1) * grad[k];
      m2[k] = kBeta2 * m2[k] + (1.0 - kBeta2) * grad[k] * grad[k];
      model.theta[k] -=
          cfg.learning_rate * (m1[k] / corr1) / (std::sqrt(m2[k] / corr2) + kEps);
    }
    report.final_epoch = epoch + 1;
  }
  if (stopping && best_val < std::numeric_limits<double>::infinity()) {
    // Keep the best-validation parameters even when the epoch budget ran out.
    loss_and_grad(model, vxs, vys, nullptr, &sse);
    if (denorm_loss(sse, vxs.size()) > best_val)
      std::copy(best_theta.begin(), best_theta.end(), model.theta.begin());
  }
  return report;
}

UncertainOutput mc_dropout_predict(const InrModel& model, std::span<const double> x, int passes,
                                   std::uint64_t seed) {
  check_input(model, x);
  if (passes < 1) throw std::invalid_argument("passes must be >= 1");
  const InrConfig& cfg = model.config;
  const int c = cfg.output_dim;
  UncertainOutput result;
  if (cfg.dropout_p == 0.0) {
    // Dropout disabled: every pass is the plain deterministic forward pass.
    result.mean = forward(model, x);
    result.variance.assign(c, 0.0);
    return result;
  }
  std::vector<double> xn;
  normalize_input<double>(model, x, xn);
  const double keep = 1.0 - cfg.dropout_p;
  std::vector<std::vector<double>> outputs;
  std::vector<std::vector<std::uint8_t>> masks(cfg.hidden_layers,
                                               std::vector<std::uint8_t>(cfg.hidden_width));
  std::vector<double> out;
  for (int pass = 0; pass < passes; ++pass) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(pass)));
    for (auto& layer : masks)
      for (auto& unit : layer) unit = rng.uniform01() >= cfg.dropout_p ? 1 : 0;
    eval_normalized(model, xn.data(), out, nullptr, &masks, 1.0 / keep);
    for (int j = 0; j < c; ++j) out[j] = denorm_output(model, out[j], j);
    outputs.push_back(out);
  }
  result.mean.assign(c, 0.0);
  result.variance.assign(c, 0.0);
  for (const auto& o : outputs)
    for (int j = 0; j < c; ++j) result.mean[j] += o[j];
  for (int j = 0; j < c; ++j) result.mean[j] /= passes;
  for (const auto& o : outputs)
    for (int j = 0; j < c; ++j) {
      const double dev = o[j] - result.mean[j];
      result.variance[j] += dev * dev;
    }
  for (int j = 0; j < c; ++j) result.variance[j] /= passes;
  return result;
}

std::pair<std::vector<TrainingSample>, std::vector<TrainingSample>> split_train_val(
    std::span<const TrainingSample> samples, double val_fraction) {
  std::vector<TrainingSample> ordered(samples.begin(), samples.end());
  std::stable_sort(ordered.begin(), ordered.end(), [](const auto& a, const auto& b) {
    return a.x.empty() || b.x.empty() ? false : a.x[0] < b.x[0];
  });
  std::pair<std::vector<TrainingSample>, std::vector<TrainingSample>> out;
  if (val_fraction <= 0.0 || samples.size() < 2) {
    out.first = std::move(ordered);
    return out;
  }
  const int stride = std::max(2, static_cast<int>(std::lround(1.0 / val_fraction)));
  for (std::size_t i = 0; i < ordered.size(); ++i) {
    if (static_cast<int>(i % stride) == stride - 1)
      out.second.push_back(std::move(ordered[i]));
    else
      out.first.push_back(std::move(ordered[i]));
  }
  return out;
}

void save_model(const InrModel& model, const std::filesystem::path& path) {
  const InrConfig& cfg = model.config;
  nlohmann::json j;
  j["config"] = {{"variant", to_string(cfg.variant)},
                 {"input_dim", cfg.input_dim},
                 {"output_dim", cfg.output_dim},
                 {"hidden_layers", cfg.hidden_layers},
                 {"hidden_width", cfg.hidden_width},
                 {"omega0", cfg.omega0},
                 {"posenc_frequencies", cfg.posenc_frequencies},
                 {"fourier_features", cfg.fourier_features},
                 {"fourier_scale", cfg.fourier_scale},
                 {"rbf_centers", cfg.rbf_centers},
                 {"dropout_p", cfg.dropout_p},
                 {"epochs", cfg.epochs},
                 {"learning_rate", cfg.learning_rate},
                 {"seed", cfg.seed}};
  j["theta"] = model.theta;
  j["input_norm"] = {{"scale", model.input_norm.scale}, {"offset", model.input_norm.offset}};
  j["output_norm"] = {{"scale", model.output_norm.scale}, {"offset", model.output_norm.offset}};
  csv::write_text(path, j.dump(2) + "\n");
}

InrModel load_model(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open model file: " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("invalid model JSON in " + path.string() + ": " + e.what());
  }
  InrModel model;
  try {
    const auto& jc = j.at("config");
    InrConfig cfg;
    cfg.variant = inr_variant_from_string(jc.at("variant").get<std::string>());
    cfg.input_dim = jc.at("input_dim").get<int>();
    cfg.output_dim = jc.at("output_dim").get<int>();
    cfg.hidden_layers = jc.at("hidden_layers").get<int>();
    cfg.hidden_width = jc.at("hidden_width").get<int>();
    cfg.omega0 = jc.at("omega0").get<double>();
    cfg.posenc_frequencies = jc.at("posenc_frequencies").get<int>();
    cfg.fourier_features = jc.at("fourier_features").get<int>();
    cfg.fourier_scale = jc.at("fourier_scale").get<double>();
    cfg.rbf_centers = jc.at("rbf_centers").get<int>();
    cfg.dropout_p = jc.at("dropout_p").get<double>();
    cfg.epochs = jc.at("epochs").get<int>();
    cfg.learning_rate = jc.at("learning_rate").get<double>();
    cfg.seed = jc.at("seed").get<std::uint64_t>();
    model.config = cfg;
    model.theta = j.at("theta").get<std::vector<double>>();
    model.input_norm.scale = j.at("input_norm").at("scale").get<std::vector<double>>();
    model.input_norm.offset = j.at("input_norm").at("offset").get<std::vector<double>>();
    model.output_norm.scale = j.at("output_norm").at("scale").get<std::vector<double>>();
    model.output_norm.offset = j.at("output_norm").at("offset").get<std::vector<double>>();
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument("invalid model JSON in " + path.string() + ": " + e.what());
  }
  validate(model.config);
  if (model.theta.size() != total_parameter_count(model.config))
    throw std::invalid_argument(
        "model file parameter count " + std::to_string(model.theta.size()) +
        " does not match config (expected " +
        std::to_string(total_parameter_count(model.config)) + ")");
  const auto dim_ok = [](const std::vector<double>& v, int n) {
    return static_cast<int>(v.size()) == n;
  };
  if (!dim_ok(model.input_norm.scale, model.config.input_dim) ||
      !dim_ok(model.input_norm.offset, model.config.input_dim) ||
      !dim_ok(model.output_norm.scale, model.config.output_dim) ||
      !dim_ok(model.output_norm.offset, model.config.output_dim))
    throw std::invalid_argument("model file normalisation dimensions do not match config");
  for (double s : model.input_norm.scale)
    if (s == 0.0 || !std::isfinite(s))
      throw std::invalid_argument("model file has a non-invertible input normalisation");
  for (double s : model.output_norm.scale)
    if (s == 0.0 || !std::isfinite(s))
      throw std::invalid_argument("model file has a non-invertible output normalisation");
  return model;
}

}  // namespace kneesight
