#pragma once

// Test-side reference implementations. Nothing here is used by the library.

#include "crl/neural.hpp"
#include "crl/plant.hpp"
#include "crl/rng.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace oracle {

namespace cp = crl::plant;

// Second evaluator of the flapping/torsion equations, written out with
// 1-based wing numbers and the offset terms spelled explicitly.
inline cp::Accel8 reference_accel(const cp::PlantState& s, const cp::Vec4& tm, const cp::LoadSet& l,
                                  const cp::InertiaParams& in, const cp::SpringBank& sp) {
  const double C = in.j_m_zz * in.j_w_yy + in.j_w_yy * in.j_w_zz - in.j_w_yz * in.j_w_yz;
  const double Jyy = in.j_w_yy, Jyz = in.j_w_yz, Jzz = in.j_w_zz, Jm = in.j_m_zz;
  cp::Accel8 a{};
  for (int w = 1; w <= 4; ++w) {
    const int i = w - 1;
    const double K = sp.k_a[i];
    double phi_dd = -(Jyy * K / C) * s.phi[i] + (Jyy / C) * tm[i] + (Jyy / C) * l.t_zw[i] - (Jyz / C) * l.t_yw[i] -
                    (Jyz / C) * l.t_vtm[i] - (Jyz / C) * l.t_yaw[i];
    double th_dd = (Jm / C) * l.t_vtm[i] + (Jm / C) * l.t_yw[i] + (Jyz / C) * K * s.phi[i] - (Jyz / C) * tm[i] -
                   (Jyz / C) * l.t_zw[i] + (Jzz / C) * l.t_vtm[i] + (Jzz / C) * l.t_yw[i] + (Jzz / C) * l.t_yaw[i];
    if (w == 2 || w == 3) {
      phi_dd -= M_PI * Jyy * K / C;
      th_dd += M_PI * Jyz * K / C;
    }
    a[i] = phi_dd;
    a[4 + i] = th_dd;
  }
  return a;
}

// Sum of absolute term magnitudes per component; the error of a floating
// point sum is bounded relative to this, not to the (possibly cancelling) sum.
inline cp::Accel8 term_magnitude(const cp::PlantState& s, const cp::Vec4& tm, const cp::LoadSet& l,
                                 const cp::InertiaParams& in, const cp::SpringBank& sp) {
  const double C = in.c_det();
  const double yy = in.j_w_yy / C, yz = std::abs(in.j_w_yz) / C, zz = in.j_w_zz / C, mz = in.j_m_zz / C;
  cp::Accel8 m{};
  for (int i = 0; i < 4; ++i) {
    const double K = sp.k_a[i];
    const double off = (i == 1 || i == 2) ? M_PI : 0.0;
    m[i] = yy * K * (std::abs(s.phi[i]) + off) + yy * (std::abs(tm[i]) + std::abs(l.t_zw[i])) +
           yz * (std::abs(l.t_yw[i]) + std::abs(l.t_vtm[i]) + std::abs(l.t_yaw[i]));
    m[4 + i] = (mz + zz) * (std::abs(l.t_vtm[i]) + std::abs(l.t_yw[i])) + zz * std::abs(l.t_yaw[i]) +
               yz * (K * (std::abs(s.phi[i]) + off) + std::abs(tm[i]) + std::abs(l.t_zw[i]));
  }
  return m;
}

// Plain double forward pass with explicit loops.
inline std::vector<double> forward(const crl::nn::NetworkF& net, const std::vector<double>& x) {
  std::vector<double> a = x;
  const int n = static_cast<int>(net.layers().size());
  for (int l = 0; l < n; ++l) {
    const auto& layer = net.layers()[l];
    std::vector<double> z(static_cast<std::size_t>(layer.w.rows()));
    for (int r = 0; r < layer.w.rows(); ++r) {
      double s = layer.b[r];
      for (int c = 0; c < layer.w.cols(); ++c) s += static_cast<double>(layer.w(r, c)) * a[c];
      const bool tanh = (l + 1 == n ? net.spec().output : net.spec().hidden) == crl::nn::Activation::Tanh;
      z[r] = tanh ? std::tanh(s) : s;
    }
    a = std::move(z);
  }
  return a;
}

// Published Lion rule, one coordinate at a time.
inline void lion_reference(std::vector<float>& p, const std::vector<float>& g, std::vector<float>& m, float lr,
                           float b1, float b2, float wd) {
  for (std::size_t i = 0; i < p.size(); ++i) {
    const float c = b1 * m[i] + (1.0f - b1) * g[i];
    const float s = c > 0.0f ? 1.0f : (c < 0.0f ? -1.0f : 0.0f);
    p[i] = p[i] - lr * (s + wd * p[i]);
    m[i] = b2 * m[i] + (1.0f - b2) * g[i];
  }
}

struct GradCheck {
  double max_rel_error = 0.0;
  int checked = 0;
};

// Central differences (h = 1e-3, double) of L = sum(coef .* f(x)) against
// backward(). Checks `per_layer` random weights per layer, every bias entry
// of the last layer, a sample of other biases and the input gradient.
inline GradCheck check_gradients(const crl::nn::NetworkF& net32, int batch, int per_layer, std::uint64_t seed) {
  using namespace crl::nn;
  crl::Rng rng(seed);
  Network<double> net = net32.cast<double>();
  // Biases start at zero after Xavier init; perturb them so their gradients are generic.
  for (auto& l : net.layers())
    for (Eigen::Index i = 0; i < l.b.size(); ++i) l.b[i] = rng.uniform(-0.1, 0.1);

  Mat<double> x(net.spec().input_size(), batch);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = rng.uniform(-1.0, 1.0);
  Mat<double> coef(net.spec().output_size(), batch);
  for (Eigen::Index i = 0; i < coef.size(); ++i) coef.data()[i] = rng.uniform(-1.0, 1.0);

  auto loss = [&](const Network<double>& n, const Mat<double>& in) {
    return (n.forward_batch(in).array() * coef.array()).sum();
  };

  ForwardCache<double> cache;
  net.forward_batch(x, &cache);
  Mat<double> dx;
  const Gradients<double> g = net.backward(cache, coef, &dx);

  const double h = 1e-3;
  GradCheck out;
  auto record = [&](double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    out.max_rel_error = std::max(out.max_rel_error, std::abs(analytic - numeric) / denom);
    ++out.checked;
  };

  for (std::size_t l = 0; l < net.layers().size(); ++l) {
    auto& layer = net.layers()[l];
    for (int k = 0; k < per_layer; ++k) {
      const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(layer.w.size())));
      const double saved = layer.w.data()[idx];
      layer.w.data()[idx] = saved + h;
      const double up = loss(net, x);
      layer.w.data()[idx] = saved - h;
      const double dn = loss(net, x);
      layer.w.data()[idx] = saved;
      record(g.dw[l].data()[idx], (up - dn) / (2 * h));
    }
    const int nb = std::min<int>(static_cast<int>(layer.b.size()), per_layer);
    for (int k = 0; k < nb; ++k) {
      const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(layer.b.size())));
      const double saved = layer.b[idx];
      layer.b[idx] = saved + h;
      const double up = loss(net, x);
      layer.b[idx] = saved - h;
      const double dn = loss(net, x);
      layer.b[idx] = saved;
      record(g.db[l][idx], (up - dn) / (2 * h));
    }
  }
  for (int k = 0; k < per_layer; ++k) {
    const auto idx = static_cast<Eigen::Index>(rng.below(static_cast<std::uint64_t>(x.size())));
    Mat<double> xp = x;
    xp.data()[idx] += h;
    const double up = loss(net, xp);
    xp.data()[idx] -= 2 * h;
    const double dn = loss(net, xp);
    record(dx.data()[idx], (up - dn) / (2 * h));
  }
  return out;
}

}  // namespace oracle
