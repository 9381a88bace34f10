#pragma once

// Token scoring network: (layer_count - 1) hidden blocks of
// linear -> batch norm -> ReLU, then linear -> sigmoid, giving one score in (0, 1)
// per embedding row. Forward and backward passes are written out by hand;
// in train mode the gradient flows through the batch mean and variance.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <string>
#include <vector>

#include "tokenmil/dataset.hpp"
#include "tokenmil/errors.hpp"
#include "tokenmil/matrix.hpp"
#include "tokenmil/rng.hpp"

namespace tokenmil {

enum class DetectorMode { train, inference };

/// Offsets of one layer's blocks inside DetectorParams::values.
struct LayerLayout {
  std::size_t in = 0;
  std::size_t out = 0;
  std::size_t weight = 0;  // in x out, row-major
  std::size_t bias = 0;
  std::size_t gamma = 0;   // normalised layers only
  std::size_t beta = 0;
  bool normalized = false;
};

struct DetectorParams {
  std::size_t input_dim = 0;
  std::size_t hidden_dim = 256;
  std::size_t layer_count = 2;
  double momentum = 0.1;
  double epsilon = 1e-5;

  std::vector<LayerLayout> layers;
  std::vector<double> values;  // every trainable parameter, in declaration order
  std::vector<std::vector<double>> running_mean;  // one per hidden layer
  std::vector<std::vector<double>> running_var;

  std::size_t parameter_count() const noexcept { return values.size(); }

  std::span<const double> block(std::size_t offset, std::size_t n) const {
    return std::span<const double>(values).subspan(offset, n);
  }
  std::span<double> block(std::size_t offset, std::size_t n) {
    return std::span<double>(values).subspan(offset, n);
  }
  std::span<const double> weight(std::size_t l) const {
    return block(layers[l].weight, layers[l].in * layers[l].out);
  }
  std::span<const double> bias(std::size_t l) const { return block(layers[l].bias, layers[l].out); }
  std::span<const double> gamma(std::size_t l) const { return block(layers[l].gamma, layers[l].out); }
  std::span<const double> beta(std::size_t l) const { return block(layers[l].beta, layers[l].out); }
};

/// Allocates a zero-initialised parameter set with the standard layout.
inline DetectorParams make_detector_shape(std::size_t input_dim, std::size_t hidden_dim,
                                          std::size_t layer_count) {
  if (input_dim == 0 || hidden_dim == 0 || layer_count == 0)
    throw DataError("detector dimensions must be positive");
  DetectorParams p;
  p.input_dim = input_dim;
  p.hidden_dim = hidden_dim;
  p.layer_count = layer_count;
  std::size_t offset = 0;
  std::size_t in = input_dim;
  for (std::size_t l = 0; l < layer_count; ++l) {
    LayerLayout lay;
    lay.in = in;
    lay.out = (l + 1 == layer_count) ? 1 : hidden_dim;
    lay.normalized = (l + 1 < layer_count);
    lay.weight = offset;
    offset += lay.in * lay.out;
    lay.bias = offset;
    offset += lay.out;
    if (lay.normalized) {
      lay.gamma = offset;
      offset += lay.out;
      lay.beta = offset;
      offset += lay.out;
      p.running_mean.emplace_back(lay.out, 0.0);
      p.running_var.emplace_back(lay.out, 1.0);
    }
    p.layers.push_back(lay);
    in = lay.out;
  }
  p.values.assign(offset, 0.0);
  for (const auto& lay : p.layers)
    if (lay.normalized) std::fill_n(p.values.begin() + static_cast<std::ptrdiff_t>(lay.gamma), lay.out, 1.0);
  return p;
}

/// Weights ~ U(-a, a) with a = sqrt(3 / fan_in), so a unit-variance input gives
/// unit-variance pre-activations. Biases and shifts zero, scales one.
inline DetectorParams init_params(std::size_t input_dim, std::size_t hidden_dim,
                                  std::size_t layer_count, std::uint64_t seed) {
  DetectorParams p = make_detector_shape(input_dim, hidden_dim, layer_count);
  Xoshiro256ss rng(seed);
  for (const auto& lay : p.layers) {
    const double a = std::sqrt(3.0 / static_cast<double>(lay.in));
    for (auto& w : p.block(lay.weight, lay.in * lay.out)) w = rng.uniform(-a, a);
  }
  return p;
}

inline double sigmoid(double x) noexcept {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

/// Intermediate values of one forward pass, consumed by backward().
struct ForwardCache {
  DetectorMode mode = DetectorMode::inference;
  std::vector<Matrix> inputs;   // input to each layer (inputs[0] is the batch)
  std::vector<Matrix> xhat;     // normalised pre-activations per hidden layer
  std::vector<Matrix> shifted;  // gamma * xhat + beta, pre-ReLU
  std::vector<std::vector<double>> batch_mean;
  std::vector<std::vector<double>> batch_var;  // biased
  std::vector<std::vector<double>> inv_std;
  std::vector<double> scores;
};

/// Gradients of sum_i upstream_i * score_i.
struct ScoreGrad {
  std::vector<double> scores;
  std::vector<double> params;  // mirrors DetectorParams::values
  Matrix input;                // n x input_dim
};

/// Forward pass without touching running statistics.
inline ForwardCache forward(const DetectorParams& p, const Matrix& batch, DetectorMode mode) {
  if (batch.cols != p.input_dim)
    throw DataError("batch width " + std::to_string(batch.cols) + " does not match detector input dim " +
                    std::to_string(p.input_dim));
  if (batch.rows == 0) throw DataError("empty batch");
  if (mode == DetectorMode::train && batch.rows < 2)
    throw DataError("train-mode scoring needs at least 2 rows for batch statistics");

  const std::size_t n = batch.rows;
  ForwardCache c;
  c.mode = mode;
  c.inputs.push_back(batch);
  std::size_t hidden = 0;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& lay = p.layers[l];
    Matrix z;
    affine(c.inputs.back(), p.weight(l), p.bias(l), lay.out, z);
    if (!lay.normalized) {
      c.scores.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        const double s = sigmoid(z.data[i]);
        if (!std::isfinite(z.data[i])) throw DataError("non-finite activation in detector output");
        c.scores[i] = s;
      }
      break;
    }
    std::vector<double> mean(lay.out, 0.0), var(lay.out, 0.0), inv(lay.out);
    if (mode == DetectorMode::train) {
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < lay.out; ++j) mean[j] += z(i, j);
      for (auto& m : mean) m /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < lay.out; ++j) {
          const double dz = z(i, j) - mean[j];
          var[j] += dz * dz;
        }
      for (auto& v : var) v /= static_cast<double>(n);
    } else {
      mean = p.running_mean[hidden];
      var = p.running_var[hidden];
    }
    for (std::size_t j = 0; j < lay.out; ++j) inv[j] = 1.0 / std::sqrt(var[j] + p.epsilon);

    const auto g = p.gamma(l);
    const auto b = p.beta(l);
    Matrix xhat(n, lay.out), y(n, lay.out), a(n, lay.out);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < lay.out; ++j) {
        const double xh = (z(i, j) - mean[j]) * inv[j];
        const double yy = g[j] * xh + b[j];
        if (!std::isfinite(yy)) throw DataError("non-finite activation in hidden layer");
        xhat(i, j) = xh;
        y(i, j) = yy;
        a(i, j) = yy > 0.0 ? yy : 0.0;
      }
    c.xhat.push_back(std::move(xhat));
    c.shifted.push_back(std::move(y));
    c.batch_mean.push_back(std::move(mean));
    c.batch_var.push_back(std::move(var));
    c.inv_std.push_back(std::move(inv));
    c.inputs.push_back(std::move(a));
    ++hidden;
  }
  return c;
}

/// Exponential moving update of running statistics from a train-mode pass.
/// Running variance uses the unbiased batch estimate.
inline void update_running_stats(DetectorParams& p, const ForwardCache& c) {
  if (c.mode != DetectorMode::train) return;
  const double n = static_cast<double>(c.inputs.front().rows);
  for (std::size_t h = 0; h < p.running_mean.size(); ++h) {
    for (std::size_t j = 0; j < p.running_mean[h].size(); ++j) {
      p.running_mean[h][j] = (1.0 - p.momentum) * p.running_mean[h][j] + p.momentum * c.batch_mean[h][j];
      p.running_var[h][j] =
          (1.0 - p.momentum) * p.running_var[h][j] + p.momentum * c.batch_var[h][j] * n / (n - 1.0);
    }
  }
}

/// Scores every row. Train mode uses batch statistics and advances the running
/// statistics; inference mode uses the running statistics and changes nothing.
inline std::vector<double> score_tokens(DetectorParams& p, const Matrix& batch, DetectorMode mode) {
  auto cache = forward(p, batch, mode);
  update_running_stats(p, cache);
  return std::move(cache.scores);
}

inline std::vector<double> score_tokens(const DetectorParams& p, const Matrix& batch) {
  return forward(p, batch, DetectorMode::inference).scores;
}

/// Reverse pass for the forward pass recorded in `cache`.
/// The input gradient is skipped when `want_input_grad` is false.
inline ScoreGrad backward(const DetectorParams& p, const ForwardCache& cache,
                          std::span<const double> upstream, bool want_input_grad = true) {
  const std::size_t n = cache.inputs.front().rows;
  if (upstream.size() != n)
    throw DataError("upstream gradient has " + std::to_string(upstream.size()) + " entries, batch has " +
                    std::to_string(n));
  ScoreGrad out;
  out.scores = cache.scores;
  out.params.assign(p.values.size(), 0.0);
  auto grad = [&](std::size_t offset, std::size_t len) {
    return std::span<double>(out.params).subspan(offset, len);
  };

  const std::size_t last = p.layers.size() - 1;
  Matrix d(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const double s = cache.scores[i];
    d.data[i] = upstream[i] * s * (1.0 - s);
  }
  for (std::size_t li = p.layers.size(); li-- > 0;) {
    const auto& lay = p.layers[li];
    if (li != last) {
      // d currently holds dL/d(ReLU output); turn it into dL/dz through ReLU and batch norm.
      const std::size_t h = li;  // hidden layers are exactly the first layer_count-1 layers
      const Matrix& xhat = cache.xhat[h];
      const Matrix& y = cache.shifted[h];
      const auto& inv = cache.inv_std[h];
      const auto g = p.gamma(li);
      auto dgamma = grad(lay.gamma, lay.out);
      auto dbeta = grad(lay.beta, lay.out);
      Matrix dxhat(n, lay.out);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < lay.out; ++j) {
          const double dy = y(i, j) > 0.0 ? d(i, j) : 0.0;
          dgamma[j] += dy * xhat(i, j);
          dbeta[j] += dy;
          dxhat(i, j) = dy * g[j];
        }
      Matrix dz(n, lay.out);
      if (cache.mode == DetectorMode::train) {
        const double nn = static_cast<double>(n);
        std::vector<double> sum_dx(lay.out, 0.0), sum_dx_xhat(lay.out, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < lay.out; ++j) {
            sum_dx[j] += dxhat(i, j);
            sum_dx_xhat[j] += dxhat(i, j) * xhat(i, j);
          }
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < lay.out; ++j)
            dz(i, j) = inv[j] / nn * (nn * dxhat(i, j) - sum_dx[j] - xhat(i, j) * sum_dx_xhat[j]);
      } else {
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < lay.out; ++j) dz(i, j) = dxhat(i, j) * inv[j];
      }
      d = std::move(dz);
    }
    accumulate_affine_grads(cache.inputs[li], d, grad(lay.weight, lay.in * lay.out), grad(lay.bias, lay.out));
    if (li == 0 && !want_input_grad) break;
    Matrix prev;
    backprop_input(d, p.weight(li), lay.in, prev);
    d = std::move(prev);
  }
  if (want_input_grad) out.input = std::move(d);
  return out;
}

/// Convenience overload: re-runs the forward pass (no running-stat update) and backpropagates.
inline ScoreGrad backward(const DetectorParams& p, const Matrix& batch, std::span<const double> upstream,
                          DetectorMode mode = DetectorMode::train) {
  return backward(p, forward(p, batch, mode), upstream);
}

// Checkpoint format (all little-endian):
//   char[4] "TMCK"; u32 format_version; u32 input_dim; u32 hidden_dim; u32 layer_count;
//   f32 momentum; f32 epsilon;
//   per layer: f32 weight[in*out], f32 bias[out];
//              hidden layers add f32 gamma[out], beta[out], running_mean[out], running_var[out].

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::ostream& out, std::uint32_t v) {
  char b[4];
  for (int k = 0; k < 4; ++k) b[k] = static_cast<char>((v >> (8 * k)) & 0xffu);
  out.write(b, 4);
}

inline std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4] = {};
  in.read(reinterpret_cast<char*>(b), 4);
  return std::uint32_t{b[0]} | (std::uint32_t{b[1]} << 8) | (std::uint32_t{b[2]} << 16) |
         (std::uint32_t{b[3]} << 24);
}

inline void put_f32s(std::ostream& out, std::span<const double> values) {
  for (double v : values) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
}

inline void get_f32s(std::istream& in, std::span<double> values) {
  for (auto& v : values) v = static_cast<double>(std::bit_cast<float>(get_u32(in)));
}

}  // namespace detail

inline void save_checkpoint(const DetectorParams& p, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  out.write("TMCK", 4);
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u32(out, static_cast<std::uint32_t>(p.input_dim));
  detail::put_u32(out, static_cast<std::uint32_t>(p.hidden_dim));
  detail::put_u32(out, static_cast<std::uint32_t>(p.layer_count));
  const double norm_consts[2] = {p.momentum, p.epsilon};
  detail::put_f32s(out, norm_consts);
  std::size_t h = 0;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& lay = p.layers[l];
    detail::put_f32s(out, p.weight(l));
    detail::put_f32s(out, p.bias(l));
    if (lay.normalized) {
      detail::put_f32s(out, p.gamma(l));
      detail::put_f32s(out, p.beta(l));
      detail::put_f32s(out, p.running_mean[h]);
      detail::put_f32s(out, p.running_var[h]);
      ++h;
    }
  }
  if (!out) throw DataError("write failed for checkpoint " + path.string());
}

/// Loads a checkpoint; a non-zero `expected_input_dim` must match the stored one.
inline DetectorParams load_checkpoint(const std::filesystem::path& path, std::size_t expected_input_dim = 0) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("checkpoint not found: " + path.string());
  char magic[4] = {};
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "TMCK", 4) != 0) throw DataError("not a detector checkpoint: " + path.string());
  const auto version = detail::get_u32(in);
  if (version != kCheckpointVersion)
    throw DataError("unsupported checkpoint format_version " + std::to_string(version));
  const auto d = detail::get_u32(in);
  const auto hidden = detail::get_u32(in);
  const auto layers = detail::get_u32(in);
  if (!in || d == 0 || hidden == 0 || layers == 0) throw DataError("corrupt checkpoint header");
  if (expected_input_dim != 0 && d != expected_input_dim)
    throw DataError("checkpoint shape mismatch: input dim " + std::to_string(d) + ", data dim " +
                    std::to_string(expected_input_dim));
  DetectorParams p = make_detector_shape(d, hidden, layers);
  double norm_consts[2] = {};
  detail::get_f32s(in, norm_consts);
  p.momentum = norm_consts[0];
  p.epsilon = norm_consts[1];
  std::size_t h = 0;
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& lay = p.layers[l];
    detail::get_f32s(in, p.block(lay.weight, lay.in * lay.out));
    detail::get_f32s(in, p.block(lay.bias, lay.out));
    if (lay.normalized) {
      detail::get_f32s(in, p.block(lay.gamma, lay.out));
      detail::get_f32s(in, p.block(lay.beta, lay.out));
      detail::get_f32s(in, p.running_mean[h]);
      detail::get_f32s(in, p.running_var[h]);
      ++h;
    }
  }
  if (!in) throw DataError("checkpoint truncated: " + path.string());
  if (in.peek() != std::char_traits<char>::eof()) throw DataError("checkpoint has trailing bytes: " + path.string());
  for (const auto& rv : p.running_var)
    for (double v : rv)
      if (!(v >= 0.0)) throw DataError("checkpoint has negative running variance");
  if (!(p.epsilon > 0.0)) throw DataError("checkpoint epsilon must be positive");
  for (double v : p.values)
    if (!std::isfinite(v)) throw DataError("checkpoint has non-finite parameters");
  return p;
}

/// Copies an n x d float embedding block into a double batch matrix.
inline Matrix to_matrix(const TokenBag& bag) {
  Matrix m(bag.token_count(), bag.dim);
  for (std::size_t k = 0; k < bag.embeddings.size(); ++k) m.data[k] = bag.embeddings[k];
  return m;
}

}  // namespace tokenmil
