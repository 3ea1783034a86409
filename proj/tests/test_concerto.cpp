#include <doctest.h>

#include "crl/concerto.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <sstream>

using namespace crl;
using namespace crl::concerto;

namespace {

GdsRecord record(long j, double a, double c, double qbar, std::vector<double> delta) {
  GdsRecord r;
  r.j = j;
  r.a = a;
  r.c = c;
  r.qbar = qbar;
  r.delta_theta = std::move(delta);
  return r;
}

}  // namespace

TEST_CASE("mode parity") {
  CHECK(select_mode(0) == Mode::Classical);
  CHECK(select_mode(1) == Mode::Learned);
  CHECK(select_mode(7) == Mode::Learned);
  for (std::uint64_t start : {0u, 3u, 1000u}) {
    int classical = 0;
    for (std::uint64_t k = start; k < start + 40; ++k) classical += select_mode(k) == Mode::Classical;
    CHECK(classical == 20);
  }
}

TEST_CASE("safety monitor") {
  SafetyMonitor m(1.0);
  m.set_pe_rl_max(2.0);
  CHECK(m.lambda() == 0.5);
  const double dt = 1e-3;
  auto v = m.monitor_pair(0.10, 0.1005, 0.0990, dt);
  CHECK(v.delta_er < 0);
  CHECK_FALSE(v.violation);
  CHECK(v.bound == doctest::Approx(0.5 * 2 * dt));

  // Capability equal to the learned growth rate: any increase flags.
  SafetyMonitor crit(2.0);
  crit.set_pe_rl_max(2.0);
  CHECK(crit.lambda() == 0.0);
  CHECK(crit.monitor_pair(0.1, 0.102, 0.1001, dt).violation);
  CHECK(crit.violations() == 1);

  // Running max never decreases.
  SafetyMonitor r(0.0);
  double last = -INFINITY;
  Rng rng(1);
  for (int i = 0; i < 200; ++i) {
    r.monitor_pair(rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1), dt);
    CHECK(r.pe_rl_max() >= last);
    last = r.pe_rl_max();
  }
}

TEST_CASE("required capability") {
  CHECK(required_pc(2, 0.001, 0.001) == doctest::Approx(1.0));
  CHECK(required_pc(2, 0, 0.001) == 2.0);
  CHECK(required_pc(2, 1e300, 0.001) < -1e300);
  CHECK_THROWS(required_pc(1, 1, 0));
}

TEST_CASE("segment line fit") {
  std::vector<double> q(500);
  for (int k = 0; k < 500; ++k) q[k] = -0.01 * k + 5;
  auto f = fit_gds(q);
  CHECK(f.a == doctest::Approx(-0.01).epsilon(1e-12));
  CHECK(f.b == doctest::Approx(5).epsilon(1e-12));
  CHECK(f.c < 1e-12);

  f = fit_gds(std::vector<double>(10, 3.0));
  CHECK(f.a == 0.0);
  CHECK(f.b == 3.0);
  CHECK(f.c == 0.0);
  CHECK_THROWS(fit_gds(std::vector<double>{1.0}));

  // Normal-equations oracle.
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const int n = 50 + 100 * trial;
    Eigen::MatrixXd X(n, 2);
    Eigen::VectorXd y(n);
    std::vector<double> s(n);
    for (int k = 0; k < n; ++k) {
      X(k, 0) = k;
      X(k, 1) = 1;
      y[k] = s[k] = 0.3 - 0.002 * k + rng.normal() * 0.05;
    }
    const Eigen::Vector2d beta = (X.transpose() * X).ldlt().solve(X.transpose() * y);
    const double rms = std::sqrt((y - X * beta).squaredNorm() / n);
    f = fit_gds(s);
    CHECK(std::abs(f.a - beta[0]) < 1e-10);
    CHECK(std::abs(f.b - beta[1]) < 1e-10);
    CHECK(std::abs(f.c - rms) < 1e-10);
    CHECK(f.c >= 0);
  }
}

TEST_CASE("composer branches") {
  ComposerConfig cfg;
  const std::vector<double> theta{0.5, -0.25, 0.0, 2.0};
  const std::vector<double> delta{0.01, 0.02, -0.03, 0.0};
  const std::vector<double> anchor{1.0, 1.0, 1.0, 1.0};
  auto fresh_ddp = [&] {
    DdpRecord d;
    d.theta_g0 = anchor;
    d.best_qbar = 1.0;
    return d;
  };
  const GdsRecord prev = record(2, -0.01, 0.5, 1.5, {});

  SUBCASE("(i) improvement accepts everything and moves the anchor") {
    DdpRecord d = fresh_ddp();
    Rng rng(1);
    const auto r = compose(theta, prev, record(3, 0, 0, 0.9, delta), d, cfg, rng);
    CHECK(r.branch == Branch::AcceptBest);
    CHECK(r.j_next == 0);
    for (std::size_t i = 0; i < theta.size(); ++i) CHECK(std::abs(r.theta_next[i] - (theta[i] + delta[i])) <= 1e-15);
    CHECK(d.theta_g0 == r.theta_next);
    CHECK(d.best_qbar == 0.9);
  }
  SUBCASE("literal inequality behind the switch") {
    ComposerConfig lit = cfg;
    lit.cost_semantics = false;
    DdpRecord d = fresh_ddp();
    Rng rng(1);
    CHECK(compose(theta, prev, record(3, 0, 0, 1.1, delta), d, lit, rng).branch == Branch::AcceptBest);
  }
  SUBCASE("(ii) too many segments resets to the anchor") {
    DdpRecord d = fresh_ddp();
    Rng rng(1);
    const auto r = compose(theta, prev, record(cfg.N + 1, 1, 1, 1.2, delta), d, cfg, rng);
    CHECK(r.branch == Branch::ResetToAnchor);
    CHECK(r.theta_next == anchor);
    CHECK(r.j_next == 0);
    CHECK(d.best_qbar == 1.0);
  }
  SUBCASE("(iii) slope and spread up") {
    DdpRecord d = fresh_ddp();
    Rng rng(1);
    const auto r = compose(theta, prev, record(3, 0.0, 0.6, 1.2, delta), d, cfg, rng);
    CHECK(r.branch == Branch::AcceptAll);
    CHECK(r.j_next == 4);
    for (std::size_t i = 0; i < theta.size(); ++i) CHECK(std::abs(r.theta_next[i] - (theta[i] + delta[i])) <= 1e-15);
    CHECK(d.theta_g0 == anchor);
  }
  SUBCASE("(iv) slope up, spread not") {
    DdpRecord d = fresh_ddp();
    Rng rng(1);
    const auto r = compose(theta, prev, record(3, 0.0, 0.4, 1.2, delta), d, cfg, rng);
    CHECK(r.branch == Branch::Partial);
    Rng replay(r.noise_seed);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double base = theta[i] + cfg.beta * delta[i];
      CHECK(r.theta_next[i] == base + cfg.sigma_partial * (std::abs(base) + cfg.noise_floor) * replay.normal());
    }
  }
  SUBCASE("(v) spread up, slope not") {
    DdpRecord d = fresh_ddp();
    Rng rng(1);
    const auto r = compose(theta, prev, record(3, -0.02, 0.6, 1.2, delta), d, cfg, rng);
    CHECK(r.branch == Branch::NoiseOnly);
    Rng replay(r.noise_seed);
    CHECK(r.theta_next == add_noise(theta, cfg.sigma_slow, cfg.noise_floor, replay));
  }
  SUBCASE("(vi) neither") {
    DdpRecord d = fresh_ddp();
    Rng rng(1);
    const auto r = compose(theta, prev, record(3, -0.02, 0.4, 1.2, delta), d, cfg, rng);
    CHECK(r.branch == Branch::ExploreAnchor);
    Rng replay(r.noise_seed);
    CHECK(r.theta_next == add_noise(anchor, cfg.sigma_reset, cfg.noise_floor, replay));
    // Zero-valued parameters still move.
    DdpRecord z = fresh_ddp();
    z.theta_g0.assign(4, 0.0);
    Rng rz(2);
    const auto rz_out = compose(theta, prev, record(3, -0.02, 0.4, 1.2, delta), z, cfg, rz);
    for (double v : rz_out.theta_next) CHECK(v != 0.0);
  }
  SUBCASE("same seed, same decisions") {
    DdpRecord d1 = fresh_ddp(), d2 = fresh_ddp();
    Rng r1(9), r2(9);
    const auto cur = record(3, -0.02, 0.4, 1.2, delta);
    CHECK(compose(theta, prev, cur, d1, cfg, r1).theta_next == compose(theta, prev, cur, d2, cfg, r2).theta_next);
  }
}

TEST_CASE("accumulator") {
  Accumulator acc(3);
  for (int k = 0; k < 5; ++k) acc.add(std::vector<double>(3, 0.0));
  CHECK(acc.close_segment() == std::vector<double>(3, 0.0));

  const std::uint64_t L = 500;
  const std::vector<double> d{1e-3, -2e-3, 0.5};
  for (std::uint64_t k = 0; k <= L; ++k) acc.add(d);
  const auto seg = acc.close_segment();
  for (int i = 0; i < 3; ++i) CHECK(seg[i] == doctest::Approx((L + 1) * d[i]).epsilon(1e-12));

  Accumulator b(2);
  Rng rng(3);
  std::vector<double> total(2, 0.0);
  for (int s = 0; s < 8; ++s) {
    for (int k = 0; k < 20; ++k) b.add(std::vector<double>{rng.normal(), rng.normal()});
    const auto sg = b.close_segment();
    total[0] += sg[0];
    total[1] += sg[1];
  }
  const auto phase = b.close_phase();
  CHECK(std::abs(phase[0] - total[0]) < 1e-12);
  CHECK(std::abs(phase[1] - total[1]) < 1e-12);
  CHECK(b.phase_sum() == std::vector<double>(2, 0.0));
}

TEST_CASE("convergence diagnostics") {
  CHECK(convergence_diagnostics(std::vector<double>{1.0}).empty());

  std::vector<double> geo;
  for (int g = 0; g < 8; ++g) geo.push_back(std::pow(0.5, g));
  auto rep = convergence_diagnostics(geo);
  for (double m : rep.m) CHECK(m == doctest::Approx(1.0).epsilon(1e-12));
  CHECK_FALSE(rep.diverging);
  // dQ = -Q/2 along this sequence: c = 0.5, alpha = 1.
  CHECK(rep.alpha == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(rep.c == doctest::Approx(0.5).epsilon(1e-9));

  rep = convergence_diagnostics(std::vector<double>(5, 2.0));
  for (double m : rep.m) CHECK(m == 0.0);
  CHECK_FALSE(rep.accelerating);
  CHECK_FALSE(rep.diverging);

  rep = convergence_diagnostics(std::vector<double>{1, 1.5, 2, 3});
  for (double m : rep.m) CHECK(m < 0.0);
  CHECK(rep.diverging);

  rep = convergence_diagnostics(std::vector<double>{1, 0.9, 0.6, 0.2});
  CHECK(rep.accelerating);
}

TEST_CASE("composer driver") {
  ComposerConfig cfg;
  cfg.L = 10;
  cfg.N = 2;
  std::vector<double> theta(6, 0.1);
  Composer comp(cfg, theta, 5);
  const std::vector<double> delta(6, 1e-3);

  // Improving costs: every segment takes the first branch.
  std::uint64_t k = 0;
  for (int seg = 0; seg < 3; ++seg) {
    for (std::uint64_t i = 0; i <= cfg.L; ++i, ++k) {
      for (double& t : theta) t += 1e-3;
      const auto out = comp.step(0.5 - 0.1 * seg, delta, k, [&] { return theta; });
      CHECK_FALSE(out.has_value());
    }
  }
  CHECK(comp.segments() == 3);
  for (const auto& e : comp.events()) CHECK(e.branch == Branch::AcceptBest);
  CHECK(comp.ddp().best_qbar == doctest::Approx(0.3 / 0.1));
  CHECK(comp.ddp().theta_g0 == theta);
  CHECK(comp.phase_qbars().size() == 3);

  // Flat cost afterwards: no improvement, eventually a reset to the anchor.
  bool reset = false;
  for (int seg = 0; seg < 6; ++seg) {
    std::optional<std::vector<double>> out;
    for (std::uint64_t i = 0; i <= cfg.L; ++i, ++k) out = comp.step(0.4, delta, k, [&] { return theta; });
    if (comp.events().back().branch == Branch::ResetToAnchor) {
      reset = true;
      REQUIRE(out.has_value());
      CHECK(*out == comp.ddp().theta_g0);
    }
  }
  CHECK(reset);

  double best = INFINITY;
  for (const auto& e : comp.events())
    if (e.branch == Branch::AcceptBest) {
      CHECK(e.qbar <= best);
      best = e.qbar;
    }

  std::ostringstream os;
  write_event_jsonl(os, comp.events().front());
  const auto j = nlohmann::json::parse(os.str());
  for (const char* key : {"g", "j", "branch", "qbar", "a", "b", "c", "noise_seed"}) CHECK(j.contains(key));
}
