#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace crl {

struct RadauOptions {
  double rtol = 1e-10;
  double atol = 1e-12;
  int max_newton_iters = 12;
  // Each failed attempt halves the substep; depth 8 allows 256 substeps.
  int max_halvings = 8;
};

struct RadauStats {
  long steps = 0;
  long substeps = 0;
  long newton_iters = 0;
  long jacobian_evals = 0;
  long rejected = 0;
};

class IntegratorError : public std::runtime_error {
 public:
  IntegratorError(const std::string& what, double t, double h, int iters)
      : std::runtime_error(what), t_(t), h_(h), iters_(iters) {}
  double time() const { return t_; }
  double substep() const { return h_; }
  int newton_iterations() const { return iters_; }

 private:
  double t_;
  double h_;
  int iters_;
};

// Three-stage Radau IIA (order 5, L-stable) with simplified Newton iterations
// on the stage increments. A step of size h is retried as two halves whenever
// Newton fails to converge, down to max_halvings levels.
template <int N>
class RadauIIA {
 public:
  using Vec = Eigen::Matrix<double, N, 1>;
  using Jac = Eigen::Matrix<double, N, N>;
  using BigVec = Eigen::Matrix<double, 3 * N, 1>;
  using BigMat = Eigen::Matrix<double, 3 * N, 3 * N>;

  explicit RadauIIA(RadauOptions opts = {}) : opts_(opts) {
    const double s6 = std::sqrt(6.0);
    c_ << (4.0 - s6) / 10.0, (4.0 + s6) / 10.0, 1.0;
    a_ << (88.0 - 7.0 * s6) / 360.0, (296.0 - 169.0 * s6) / 1800.0, (-2.0 + 3.0 * s6) / 225.0,
        (296.0 + 169.0 * s6) / 1800.0, (88.0 + 7.0 * s6) / 360.0, (-2.0 - 3.0 * s6) / 225.0,
        (16.0 - s6) / 36.0, (16.0 + s6) / 36.0, 1.0 / 9.0;
  }

  const RadauOptions& options() const { return opts_; }
  const RadauStats& stats() const { return stats_; }

  // f(t, y) -> dy/dt
  template <class F>
  Vec step(F&& f, double t, const Vec& y, double h) {
    ++stats_.steps;
    return advance(f, t, y, h, 0);
  }

 private:
  template <class F>
  Vec advance(F& f, double t, const Vec& y, double h, int depth) {
    Vec out;
    int iters = 0;
    if (try_substep(f, t, y, h, out, iters)) {
      ++stats_.substeps;
      return out;
    }
    ++stats_.rejected;
    if (depth >= opts_.max_halvings) {
      throw IntegratorError("Radau IIA: Newton iteration did not converge", t, h, iters);
    }
    const Vec mid = advance(f, t, y, 0.5 * h, depth + 1);
    return advance(f, t + 0.5 * h, mid, 0.5 * h, depth + 1);
  }

  template <class F>
  Jac jacobian(F& f, double t, const Vec& y, const Vec& fy) {
    ++stats_.jacobian_evals;
    Jac jac;
    Vec yp = y;
    for (int i = 0; i < N; ++i) {
      const double dy = std::sqrt(2.2e-16) * std::max(1e-5, std::abs(y[i]));
      yp[i] = y[i] + dy;
      jac.col(i) = (f(t, yp) - fy) / dy;
      yp[i] = y[i];
    }
    return jac;
  }

  template <class F>
  bool try_substep(F& f, double t, const Vec& y, double h, Vec& out, int& iters) {
    const Vec fy = f(t, y);
    const Jac jac = jacobian(f, t, y, fy);

    BigMat m = BigMat::Identity();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) m.template block<N, N>(i * N, j * N) -= h * a_(i, j) * jac;
    const Eigen::PartialPivLU<BigMat> lu(m);

    Vec scale;
    for (int i = 0; i < N; ++i) scale[i] = opts_.atol + opts_.rtol * std::abs(y[i]);

    BigVec z = BigVec::Zero();
    BigVec fz;
    double prev_norm = 0.0;
    for (iters = 1; iters <= opts_.max_newton_iters; ++iters) {
      ++stats_.newton_iters;
      for (int i = 0; i < 3; ++i) fz.template segment<N>(i * N) = f(t + c_[i] * h, y + z.template segment<N>(i * N));
      BigVec g = -z;
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) g.template segment<N>(i * N) += h * a_(i, j) * fz.template segment<N>(j * N);
      const BigVec dz = lu.solve(g);
      if (!dz.allFinite()) return false;
      z += dz;

      double norm = 0.0;
      for (int i = 0; i < 3; ++i)
        norm = std::max(norm, (dz.template segment<N>(i * N).cwiseAbs().cwiseQuotient(scale)).maxCoeff());
      if (norm <= 1.0) {
        out = y + z.template segment<N>(2 * N);
        return out.allFinite();
      }
      // Contraction check: give up early on a diverging iteration.
      if (iters > 2 && norm > 0.9 * prev_norm) return false;
      prev_norm = norm;
    }
    return false;
  }

  RadauOptions opts_;
  RadauStats stats_;
  Eigen::Vector3d c_;
  Eigen::Matrix3d a_;
};

}  // namespace crl
