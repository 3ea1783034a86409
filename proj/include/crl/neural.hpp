#pragma once

// Dense feed-forward networks with reverse-mode gradients, Xavier-uniform
// initialization and the Lion optimizer. Scalar is float for training and
// inference; double is used by gradient checks.

#include "crl/bytes.hpp"
#include "crl/rng.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <vector>

namespace crl::nn {

enum class Activation { Tanh, Identity };

struct NetworkSpec {
  std::vector<int> layer_sizes;
  Activation hidden = Activation::Tanh;
  Activation output = Activation::Tanh;

  static NetworkSpec actor(int input = 80, int hidden = 128, int output = 4);
  // 84 -> 256 x5 -> 1, seven layers counting input and output.
  static NetworkSpec critic(int input = 84, int hidden = 256, int hidden_layers = 5);

  int weight_layers() const { return static_cast<int>(layer_sizes.size()) - 1; }
  int input_size() const { return layer_sizes.front(); }
  int output_size() const { return layer_sizes.back(); }
  void validate() const;
};

class ShapeError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S>
using RowMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <class S>
struct Layer {
  RowMat<S> w;  // rows = fan_out, cols = fan_in
  Vec<S> b;
};

template <class S>
struct Gradients {
  std::vector<RowMat<S>> dw;
  std::vector<Vec<S>> db;

  void scale(S s) {
    for (auto& m : dw) m *= s;
    for (auto& v : db) v *= s;
  }
};

// Post-activation outputs of every layer for a batch (columns are samples);
// acts[0] is the input.
template <class S>
struct ForwardCache {
  std::vector<Mat<S>> acts;
};

template <class S>
class Network {
 public:
  Network() = default;
  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) {
    spec_.validate();
    for (int l = 0; l < spec_.weight_layers(); ++l) {
      Layer<S> layer;
      layer.w = RowMat<S>::Zero(spec_.layer_sizes[l + 1], spec_.layer_sizes[l]);
      layer.b = Vec<S>::Zero(spec_.layer_sizes[l + 1]);
      layers_.push_back(std::move(layer));
    }
  }

  const NetworkSpec& spec() const { return spec_; }
  std::vector<Layer<S>>& layers() { return layers_; }
  const std::vector<Layer<S>>& layers() const { return layers_; }

  Vec<S> forward(const Vec<S>& x) const {
    if (x.size() != spec_.input_size()) throw ShapeError("forward: input size mismatch");
    Vec<S> a = x;
    for (int l = 0; l < static_cast<int>(layers_.size()); ++l) {
      Vec<S> z = layers_[l].w * a + layers_[l].b;
      activate(z, act_of(l));
      a = std::move(z);
    }
    return a;
  }

  Mat<S> forward_batch(const Mat<S>& x, ForwardCache<S>* cache = nullptr) const {
    if (x.rows() != spec_.input_size()) throw ShapeError("forward_batch: input size mismatch");
    if (cache) {
      cache->acts.resize(layers_.size() + 1);
      cache->acts[0] = x;
    }
    Mat<S> a = x;
    for (int l = 0; l < static_cast<int>(layers_.size()); ++l) {
      Mat<S> z = layers_[l].w * a;
      z.colwise() += layers_[l].b;
      activate(z, act_of(l));
      a = std::move(z);
      if (cache) cache->acts[l + 1] = a;
    }
    return a;
  }

  // Gradients summed over the batch for d(loss)/d(output) = dy. When dx is
  // given it receives d(loss)/d(input), one column per sample.
  Gradients<S> backward(const ForwardCache<S>& cache, const Mat<S>& dy, Mat<S>* dx = nullptr) const {
    const int n = static_cast<int>(layers_.size());
    if (static_cast<int>(cache.acts.size()) != n + 1) throw ShapeError("backward: missing forward cache");
    if (dy.rows() != spec_.output_size() || dy.cols() != cache.acts[0].cols())
      throw ShapeError("backward: output gradient shape mismatch");
    Gradients<S> g;
    g.dw.resize(n);
    g.db.resize(n);
    Mat<S> delta = dy;
    for (int l = n - 1; l >= 0; --l) {
      if (act_of(l) == Activation::Tanh) delta.array() *= (S(1) - cache.acts[l + 1].array().square());
      g.dw[l].noalias() = delta * cache.acts[l].transpose();
      g.db[l] = delta.rowwise().sum();
      if (l > 0 || dx) {
        Mat<S> prev = layers_[l].w.transpose() * delta;
        delta = std::move(prev);
      }
    }
    if (dx) *dx = std::move(delta);
    return g;
  }

  Gradients<S> zero_gradients() const {
    Gradients<S> g;
    for (const auto& l : layers_) {
      g.dw.push_back(RowMat<S>::Zero(l.w.rows(), l.w.cols()));
      g.db.push_back(Vec<S>::Zero(l.b.size()));
    }
    return g;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers_) n += static_cast<std::size_t>(l.w.size() + l.b.size());
    return n;
  }

  // Flattened parameters, layer by layer: row-major weights then bias.
  std::vector<double> flatten() const {
    std::vector<double> out;
    out.reserve(parameter_count());
    for (const auto& l : layers_) {
      for (Eigen::Index i = 0; i < l.w.size(); ++i) out.push_back(static_cast<double>(l.w.data()[i]));
      for (Eigen::Index i = 0; i < l.b.size(); ++i) out.push_back(static_cast<double>(l.b[i]));
    }
    return out;
  }

  void unflatten(const std::vector<double>& p) {
    if (p.size() != parameter_count()) throw ShapeError("unflatten: parameter count mismatch");
    std::size_t k = 0;
    for (auto& l : layers_) {
      for (Eigen::Index i = 0; i < l.w.size(); ++i) l.w.data()[i] = static_cast<S>(p[k++]);
      for (Eigen::Index i = 0; i < l.b.size(); ++i) l.b[i] = static_cast<S>(p[k++]);
    }
  }

  template <class T>
  Network<T> cast() const {
    Network<T> out(spec_);
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      out.layers()[l].w = layers_[l].w.template cast<T>();
      out.layers()[l].b = layers_[l].b.template cast<T>();
    }
    return out;
  }

  bool all_finite() const {
    for (const auto& l : layers_)
      if (!l.w.allFinite() || !l.b.allFinite()) return false;
    return true;
  }

  bool operator==(const Network& o) const {
    if (layers_.size() != o.layers_.size()) return false;
    for (std::size_t l = 0; l < layers_.size(); ++l)
      if (layers_[l].w != o.layers_[l].w || layers_[l].b != o.layers_[l].b) return false;
    return true;
  }

  Activation act_of(int layer) const {
    return layer + 1 == static_cast<int>(layers_.size()) ? spec_.output : spec_.hidden;
  }

 private:
  template <class M>
  static void activate(M& z, Activation a) {
    if (a == Activation::Tanh) z = z.array().tanh();
  }

  NetworkSpec spec_;
  std::vector<Layer<S>> layers_;
};

using NetworkF = Network<float>;

// Weights ~ U(-a, a) with a = sqrt(6 / (fan_in + fan_out)), biases 0.
NetworkF init_xavier(const NetworkSpec& spec, std::uint64_t seed);

struct LionConfig {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double weight_decay = 0.0;
};

template <class S>
S sign_of(S x) {
  return static_cast<S>((x > S(0)) - (x < S(0)));
}

// c = b1*m + (1-b1)*g; p -= lr*(sign(c) + wd*p); m = b2*m + (1-b2)*g.
template <class S>
class Lion {
 public:
  Lion() = default;
  Lion(const Network<S>& net, LionConfig cfg) : cfg_(cfg), m_(net.zero_gradients()) {}

  const LionConfig& config() const { return cfg_; }
  const Gradients<S>& momentum() const { return m_; }

  void step(Network<S>& net, const Gradients<S>& g, double lr) {
    auto& layers = net.layers();
    if (g.dw.size() != layers.size() || m_.dw.size() != layers.size()) throw ShapeError("lion: shape mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      update(layers[l].w.data(), g.dw[l].data(), m_.dw[l].data(), layers[l].w.size(), lr);
      update(layers[l].b.data(), g.db[l].data(), m_.db[l].data(), layers[l].b.size(), lr);
    }
  }

 private:
  void update(S* p, const S* g, S* m, Eigen::Index n, double lr) const {
    const S b1 = static_cast<S>(cfg_.beta1), b2 = static_cast<S>(cfg_.beta2);
    const S wd = static_cast<S>(cfg_.weight_decay), r = static_cast<S>(lr);
    for (Eigen::Index i = 0; i < n; ++i) {
      const S c = b1 * m[i] + (S(1) - b1) * g[i];
      p[i] = p[i] - r * (sign_of(c) + wd * p[i]);
      m[i] = b2 * m[i] + (S(1) - b2) * g[i];
    }
  }

  LionConfig cfg_;
  Gradients<S> m_;
};

// Snapshot file: "CRLW", version u16, layer count u16, then per layer rows
// u32, cols u32, row-major f32 weights and the f32 bias vector. Little-endian.
inline constexpr std::uint16_t kSnapshotVersion = 1;

void encode_layers(ByteWriter& w, const NetworkF& net);
// Reads layer blocks into a network with the given activations.
NetworkF decode_layers(ByteReader& r, int layer_count, Activation hidden, Activation output);

std::vector<std::uint8_t> encode_snapshot(const NetworkF& net);
NetworkF decode_snapshot(const std::uint8_t* data, std::size_t size, Activation hidden = Activation::Tanh,
                         Activation output = Activation::Tanh);
void save_snapshot(const std::string& path, const NetworkF& net);
NetworkF load_snapshot(const std::string& path, Activation hidden = Activation::Tanh,
                       Activation output = Activation::Tanh);

}  // namespace crl::nn
