#pragma once

// Small feed-forward network: stride-2 convolutions (im2col + GEMM) followed
// by dense layers, with hand-written backpropagation. Activations are stored
// as (features x batch) column-major matrices; within one sample a feature map
// is laid out channel-fastest, so the GEMM output of a convolution is already
// the next layer's activation matrix.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "fluxfit/errors.hpp"

namespace fluxfit::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

struct ConvGeometry {
  int in_c = 1, in_h = 0, in_w = 0;
  int out_c = 1, out_h = 0, out_w = 0;
  int kernel = 3, stride = 1, pad = 1;

  int in_size() const noexcept { return in_c * in_h * in_w; }
  int out_size() const noexcept { return out_c * out_h * out_w; }
  int patch() const noexcept { return in_c * kernel * kernel; }
  int pixels() const noexcept { return out_h * out_w; }
};

enum class LayerKind : std::uint32_t { conv = 0, dense = 1 };

struct LayerSpec {
  LayerKind kind = LayerKind::dense;
  ConvGeometry conv;  ///< conv layers only
  int in = 0;
  int out = 0;
  bool relu = true;
};

inline ConvGeometry conv_geometry(int in_c, int in_h, int in_w, int out_c, int kernel, int stride) {
  ConvGeometry g;
  g.in_c = in_c;
  g.in_h = in_h;
  g.in_w = in_w;
  g.out_c = out_c;
  g.kernel = kernel;
  g.stride = stride;
  g.pad = kernel / 2;
  g.out_h = (in_h + 2 * g.pad - kernel) / stride + 1;
  g.out_w = (in_w + 2 * g.pad - kernel) / stride + 1;
  return g;
}

/// Gathers k x k patches of every output pixel of every sample into columns.
/// Row index within a column: cin + in_c * (kx + kernel * ky).
template <typename T>
void im2col(const ConvGeometry& g, const T* x, Eigen::Index batch, Matrix<T>& cols) {
  const Eigen::Index patch = g.patch();
  cols.resize(patch, static_cast<Eigen::Index>(g.pixels()) * batch);
  T* out = cols.data();
  for (Eigen::Index b = 0; b < batch; ++b) {
    const T* xs = x + b * g.in_size();
    for (int oy = 0; oy < g.out_h; ++oy) {
      for (int ox = 0; ox < g.out_w; ++ox, out += patch) {
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            T* dst = out + g.in_c * (kx + g.kernel * ky);
            if (iy < 0 || iy >= g.in_h || ix < 0 || ix >= g.in_w) {
              std::fill(dst, dst + g.in_c, T(0));
            } else {
              const T* src = xs + g.in_c * (iy * g.in_w + ix);
              std::copy(src, src + g.in_c, dst);
            }
          }
        }
      }
    }
  }
}

/// Adjoint of im2col: scatters column gradients back onto the input map.
template <typename T>
void col2im(const ConvGeometry& g, const Matrix<T>& cols, Eigen::Index batch, T* dx) {
  std::fill(dx, dx + batch * g.in_size(), T(0));
  const Eigen::Index patch = g.patch();
  const T* in = cols.data();
  for (Eigen::Index b = 0; b < batch; ++b) {
    T* xs = dx + b * g.in_size();
    for (int oy = 0; oy < g.out_h; ++oy) {
      for (int ox = 0; ox < g.out_w; ++ox, in += patch) {
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.in_h) continue;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.in_w) continue;
            const T* src = in + g.in_c * (kx + g.kernel * ky);
            T* dst = xs + g.in_c * (iy * g.in_w + ix);
            for (int c = 0; c < g.in_c; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

template <typename T>
struct Params {
  std::vector<Matrix<T>> weights;
  std::vector<Vector<T>> biases;

  template <typename U>
  Params<U> cast() const {
    Params<U> out;
    for (const auto& w : weights) out.weights.push_back(w.template cast<U>());
    for (const auto& b : biases) out.biases.push_back(b.template cast<U>());
    return out;
  }

  bool all_finite() const {
    for (const auto& w : weights)
      if (!w.allFinite()) return false;
    for (const auto& b : biases)
      if (!b.allFinite()) return false;
    return true;
  }
};

template <typename T>
struct ForwardCache {
  std::vector<Matrix<T>> acts;  ///< acts[0] = input, acts[l + 1] = output of layer l
  std::vector<Matrix<T>> cols;  ///< im2col buffers of conv layers (empty for dense)
};

template <typename T>
class Network {
 public:
  Network() = default;
  explicit Network(std::vector<LayerSpec> layers) : layers_(std::move(layers)) {
    if (layers_.empty()) throw ConfigError("network needs at least one layer");
  }

  const std::vector<LayerSpec>& layers() const noexcept { return layers_; }
  std::size_t depth() const noexcept { return layers_.size(); }
  int input_size() const { return layers_.front().in; }
  int output_size() const { return layers_.back().out; }

  /// He-normal weights, zero biases.
  Params<T> initial_params(std::uint64_t seed) const {
    std::mt19937_64 rng(seed);
    Params<T> p;
    for (const auto& l : layers_) {
      const int fan_in = l.kind == LayerKind::conv ? l.conv.patch() : l.in;
      const int rows = l.kind == LayerKind::conv ? l.conv.out_c : l.out;
      std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
      Matrix<T> w(rows, fan_in);
      for (Eigen::Index j = 0; j < w.cols(); ++j)
        for (Eigen::Index i = 0; i < w.rows(); ++i) w(i, j) = static_cast<T>(dist(rng));
      p.weights.push_back(std::move(w));
      p.biases.push_back(Vector<T>::Zero(rows));
    }
    return p;
  }

  /// Output of every sample (columns of x). Fills `cache` when given.
  Matrix<T> forward(const Params<T>& p, const Matrix<T>& x, ForwardCache<T>* cache = nullptr,
                    std::size_t stop_before = static_cast<std::size_t>(-1)) const {
    if (x.rows() != input_size()) throw ShapeError("network input has wrong feature count");
    const Eigen::Index batch = x.cols();
    const std::size_t last = std::min(stop_before, layers_.size());
    Matrix<T> cur = x;
    Matrix<T> cols;
    if (cache) {
      cache->acts.assign(1, x);
      cache->cols.assign(layers_.size(), Matrix<T>());
    }
    for (std::size_t l = 0; l < last; ++l) {
      const auto& spec = layers_[l];
      Matrix<T> next(spec.out, batch);
      if (spec.kind == LayerKind::conv) {
        const auto& g = spec.conv;
        im2col(g, cur.data(), batch, cols);
        Eigen::Map<Matrix<T>> y(next.data(), g.out_c, static_cast<Eigen::Index>(g.pixels()) * batch);
        y.noalias() = p.weights[l] * cols;
        y.colwise() += p.biases[l];
        if (cache) cache->cols[l] = std::move(cols);
      } else {
        next.noalias() = p.weights[l] * cur;
        next.colwise() += p.biases[l];
      }
      if (spec.relu) next = next.cwiseMax(T(0));
      cur = std::move(next);
      if (cache) cache->acts.push_back(cur);
    }
    return cur;
  }

  /// Parameter gradients for layers [first_layer, depth) given dLoss/dOutput.
  Params<T> backward(const Params<T>& p, const ForwardCache<T>& cache, const Matrix<T>& d_out,
                     std::size_t first_layer = 0) const {
    Params<T> grads;
    grads.weights.resize(layers_.size());
    grads.biases.resize(layers_.size());
    const Eigen::Index batch = d_out.cols();
    Matrix<T> d = d_out;
    for (std::size_t l = layers_.size(); l-- > first_layer;) {
      const auto& spec = layers_[l];
      if (spec.relu) d = (cache.acts[l + 1].array() > T(0)).select(d, T(0));
      if (spec.kind == LayerKind::conv) {
        const auto& g = spec.conv;
        Eigen::Map<const Matrix<T>> dy(d.data(), g.out_c, static_cast<Eigen::Index>(g.pixels()) * batch);
        grads.weights[l].noalias() = dy * cache.cols[l].transpose();
        grads.biases[l] = dy.rowwise().sum();
        if (l > first_layer) {
          Matrix<T> dcols = p.weights[l].transpose() * dy;
          Matrix<T> dx(spec.in, batch);
          col2im(g, dcols, batch, dx.data());
          d = std::move(dx);
        }
      } else {
        grads.weights[l].noalias() = d * cache.acts[l].transpose();
        grads.biases[l] = d.rowwise().sum();
        if (l > first_layer) d = p.weights[l].transpose() * d;
      }
    }
    return grads;
  }

 private:
  std::vector<LayerSpec> layers_;
};

/// Adam moments for one parameter set.
template <typename T>
struct AdamState {
  Params<T> m, v;
  long step = 0;

  explicit AdamState(const Params<T>& like) {
    for (const auto& w : like.weights) {
      m.weights.push_back(Matrix<T>::Zero(w.rows(), w.cols()));
      v.weights.push_back(Matrix<T>::Zero(w.rows(), w.cols()));
    }
    for (const auto& b : like.biases) {
      m.biases.push_back(Vector<T>::Zero(b.size()));
      v.biases.push_back(Vector<T>::Zero(b.size()));
    }
  }

  /// Updates layers [first_layer, depth) of p in place.
  void apply(Params<T>& p, const Params<T>& g, double lr, std::size_t first_layer = 0) {
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    ++step;
    const T c1 = static_cast<T>(lr / (1.0 - std::pow(beta1, static_cast<double>(step))));
    const T c2 = static_cast<T>(1.0 / (1.0 - std::pow(beta2, static_cast<double>(step))));
    auto update = [&](auto& param, auto& mm, auto& vv, const auto& grad) {
      mm = T(beta1) * mm + T(1.0 - beta1) * grad;
      vv = T(beta2) * vv + T(1.0 - beta2) * grad.cwiseProduct(grad);
      param.array() -= c1 * mm.array() / ((c2 * vv.array()).sqrt() + T(eps));
    };
    for (std::size_t l = first_layer; l < p.weights.size(); ++l) {
      update(p.weights[l], m.weights[l], v.weights[l], g.weights[l]);
      update(p.biases[l], m.biases[l], v.biases[l], g.biases[l]);
    }
  }
};

}  // namespace fluxfit::nn
