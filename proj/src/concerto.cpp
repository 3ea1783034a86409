#include "crl/concerto.hpp"

#include "crl/rl_core.hpp"

#include <json.hpp>

#include <cmath>
#include <ostream>
#include <stdexcept>

namespace crl::concerto {

PairVerdict SafetyMonitor::monitor_pair(double er_t, double er_mid, double er_t2, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("monitor_pair: dt must be positive");
  PairVerdict v;
  v.pe_rl = (er_mid - er_t) / dt;
  v.pc = (er_mid - er_t2) / dt;
  pe_rl_max_ = std::max(pe_rl_max_, v.pe_rl);
  v.delta_er = er_t2 - er_t;
  v.bound = lambda() * (2.0 * dt);
  v.violation = v.delta_er >= v.bound;
  ++pairs_;
  if (v.violation) ++violations_;
  return v;
}

double required_pc(double pe_rl_max, double delta_er_max, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("required_pc: dt must be positive");
  return pe_rl_max - delta_er_max / dt;
}

LineFit fit_gds(std::span<const double> q) {
  const std::size_t n = q.size();
  if (n < 2) throw std::invalid_argument("fit_gds needs at least two points");
  // Centered form: slope = sum (k - kbar)(q - qbar) / sum (k - kbar)^2.
  const double kbar = 0.5 * static_cast<double>(n - 1);
  double qbar = 0.0;
  for (double v : q) qbar += v;
  qbar /= static_cast<double>(n);
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double dk = static_cast<double>(k) - kbar;
    sxy += dk * (q[k] - qbar);
    sxx += dk * dk;
  }
  LineFit f;
  f.a = sxy / sxx;
  f.b = qbar - f.a * kbar;
  double ss = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double r = q[k] - (f.a * static_cast<double>(k) + f.b);
    ss += r * r;
  }
  f.c = std::sqrt(ss / static_cast<double>(n));
  return f;
}

void ComposerConfig::validate() const {
  if (L < 2) throw std::invalid_argument("composer: L must be at least 2");
  if (N < 1) throw std::invalid_argument("composer: N must be at least 1");
  if (!(beta >= 0.0 && beta <= 1.0)) throw std::invalid_argument("composer: beta must lie in [0, 1]");
  if (sigma_partial < 0 || sigma_slow < 0 || sigma_reset < 0 || noise_floor < 0)
    throw std::invalid_argument("composer: negative noise scale");
  if (!(gamma_bar > 0.0 && gamma_bar < 1.0)) throw std::invalid_argument("composer: gamma_bar must lie in (0, 1)");
}

const char* to_string(Branch b) {
  switch (b) {
    case Branch::AcceptBest:
      return "accept_best";
    case Branch::ResetToAnchor:
      return "reset_to_anchor";
    case Branch::AcceptAll:
      return "accept_all";
    case Branch::Partial:
      return "partial";
    case Branch::NoiseOnly:
      return "noise_only";
    case Branch::ExploreAnchor:
      return "explore_anchor";
  }
  return "?";
}

std::vector<double> add_noise(const std::vector<double>& theta, double sigma, double floor, Rng& rng) {
  std::vector<double> out(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) out[i] = theta[i] + sigma * (std::abs(theta[i]) + floor) * rng.normal();
  return out;
}

ComposeResult compose(const std::vector<double>& theta_j, const GdsRecord& prev, const GdsRecord& cur, DdpRecord& ddp,
                      const ComposerConfig& cfg, Rng& rng, bool have_prev) {
  if (cur.delta_theta.size() != theta_j.size()) throw std::invalid_argument("compose: delta size mismatch");
  ComposeResult r;
  // Seed drawn for every decision so the log can replay any noise draw.
  r.noise_seed = rng.next();
  Rng noise(r.noise_seed);

  auto plus = [&](double scale) {
    std::vector<double> t(theta_j.size());
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = theta_j[i] + scale * cur.delta_theta[i];
    return t;
  };

  const bool improved = cfg.cost_semantics ? cur.qbar < ddp.best_qbar
                                           : (std::isinf(ddp.best_qbar) || cur.qbar > ddp.best_qbar);
  if (improved) {
    r.branch = Branch::AcceptBest;
    r.theta_next = plus(1.0);
    ddp.theta_g0 = r.theta_next;
    ddp.best_qbar = cur.qbar;
    r.j_next = 0;
    return r;
  }
  if (cur.j > cfg.N) {
    r.branch = Branch::ResetToAnchor;
    r.theta_next = ddp.theta_g0;
    r.j_next = 0;
    return r;
  }
  r.j_next = cur.j + 1;
  const bool a_up = have_prev && prev.a < cur.a;
  const bool c_up = have_prev && prev.c < cur.c;
  if (a_up && c_up) {
    r.branch = Branch::AcceptAll;
    r.theta_next = plus(1.0);
  } else if (a_up) {
    r.branch = Branch::Partial;
    r.theta_next = add_noise(plus(cfg.beta), cfg.sigma_partial, cfg.noise_floor, noise);
  } else if (c_up) {
    r.branch = Branch::NoiseOnly;
    r.theta_next = add_noise(theta_j, cfg.sigma_slow, cfg.noise_floor, noise);
  } else {
    r.branch = Branch::ExploreAnchor;
    r.theta_next = add_noise(ddp.theta_g0, cfg.sigma_reset, cfg.noise_floor, noise);
  }
  return r;
}

void Accumulator::add(std::span<const double> delta) {
  if (gds_.empty() && ddp_.empty()) {
    gds_.assign(delta.size(), 0.0);
    ddp_.assign(delta.size(), 0.0);
  }
  if (delta.size() != gds_.size()) throw std::invalid_argument("accumulator: size mismatch");
  for (std::size_t i = 0; i < delta.size(); ++i) gds_[i] += delta[i];
  ++updates_;
}

std::vector<double> Accumulator::close_segment() {
  std::vector<double> out = gds_;
  for (std::size_t i = 0; i < gds_.size(); ++i) {
    ddp_[i] += gds_[i];
    gds_[i] = 0.0;
  }
  return out;
}

std::vector<double> Accumulator::close_phase() {
  std::vector<double> out = ddp_;
  std::fill(ddp_.begin(), ddp_.end(), 0.0);
  return out;
}

ConvergenceReport convergence_diagnostics(std::span<const double> q, double tol) {
  ConvergenceReport rep;
  if (q.size() < 2) return rep;
  for (std::size_t g = 1; g < q.size(); ++g) {
    const double m = q[g] != 0.0 ? q[g - 1] / q[g] - 1.0 : (q[g - 1] > 0.0 ? INFINITY : 0.0);
    rep.m.push_back(m);
    rep.product *= 1.0 + m;
  }
  // Accelerating: the per-phase shrink ratio grows along the run; diverging: Q rose overall.
  double first = rep.m.front(), last = rep.m.back();
  rep.accelerating = rep.m.size() >= 2 && last > first + tol;
  rep.diverging = rep.product < 1.0 - tol;

  // log(-dQ) = log c + alpha log Q over decreasing steps.
  std::vector<double> xs, ys;
  for (std::size_t g = 1; g < q.size(); ++g) {
    const double dq = q[g] - q[g - 1];
    if (dq < 0.0 && q[g - 1] > 0.0) {
      xs.push_back(std::log(q[g - 1]));
      ys.push_back(std::log(-dq));
    }
  }
  if (xs.size() >= 2) {
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) mx += xs[i], my += ys[i];
    mx /= static_cast<double>(xs.size());
    my /= static_cast<double>(xs.size());
    double sxy = 0, sxx = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
      sxy += (xs[i] - mx) * (ys[i] - my);
      sxx += (xs[i] - mx) * (xs[i] - mx);
    }
    if (sxx > 0.0) {
      rep.alpha = sxy / sxx;
      rep.c = std::exp(my - rep.alpha * mx);
    }
  }
  return rep;
}

void write_event_jsonl(std::ostream& os, const ComposerEvent& e) {
  nlohmann::json j;
  j["g"] = e.g;
  j["j"] = e.j;
  j["branch"] = to_string(e.branch);
  j["qbar"] = e.qbar;
  j["a"] = e.a;
  j["b"] = e.b;
  j["c"] = e.c;
  j["noise_seed"] = e.noise_seed;
  j["step"] = e.step;
  os << j.dump() << '\n';
}

Composer::Composer(ComposerConfig cfg, std::vector<double> theta0, std::uint64_t seed)
    : cfg_(cfg), rng_(seed), acc_(theta0.size()), theta_start_(theta0) {
  cfg_.validate();
  ddp_.theta_g0 = std::move(theta0);
  rewards_.reserve(cfg_.L + 1);
}

std::optional<std::vector<double>> Composer::step(double reward, std::span<const double> delta_theta, std::uint64_t k,
                                                  const std::function<std::vector<double>()>& theta_now) {
  if (rewards_.empty()) theta_start_ = theta_now();
  if (!delta_theta.empty()) acc_.add(delta_theta);
  rewards_.push_back(reward);
  // A segment spans k = 0..L inclusive.
  if (rewards_.size() < cfg_.L + 1) return std::nullopt;

  GdsRecord cur;
  cur.j = j_;
  q_series_.resize(cfg_.L);
  for (std::size_t i = 0; i < cfg_.L; ++i) q_series_[i] = rewards_[i] / (1.0 - cfg_.gamma_bar);
  const LineFit fit = fit_gds(q_series_);
  cur.a = fit.a;
  cur.b = fit.b;
  cur.c = fit.c;
  cur.qbar = rl::estimate_qbar(rewards_, cfg_.gamma_bar);
  cur.delta_theta = acc_.close_segment();
  if (cur.delta_theta.size() != theta_start_.size()) cur.delta_theta.assign(theta_start_.size(), 0.0);

  ComposeResult r = compose(theta_start_, prev_, cur, ddp_, cfg_, rng_, have_prev_);
  ++segments_;
  phase_q_.push_back(cur.qbar);

  ComposerEvent ev{ddp_.g, cur.j, r.branch, cur.qbar, cur.a, cur.b, cur.c, r.noise_seed, k};
  events_.push_back(ev);

  if (r.branch == Branch::AcceptBest || r.branch == Branch::ResetToAnchor) {
    double s = 0.0;
    for (double v : phase_q_) s += v;
    phase_qbar_.push_back(s / static_cast<double>(phase_q_.size()));
    phase_q_.clear();
    acc_.close_phase();
    ++ddp_.g;
    const auto rep = convergence_diagnostics(phase_qbar_);
    if (!rep.m.empty()) ddp_.m_g = rep.m.back();
  }
  if (r.branch == Branch::AcceptBest) ddp_.theta_g0 = theta_now();

  prev_ = std::move(cur);
  prev_.delta_theta.clear();
  have_prev_ = true;
  j_ = r.j_next;
  rewards_.clear();

  // Accepting every update leaves the running weights as they are.
  if (r.branch == Branch::AcceptBest || r.branch == Branch::AcceptAll) return std::nullopt;
  return std::move(r.theta_next);
}

ConvergenceReport Composer::diagnostics() const { return convergence_diagnostics(phase_qbar_); }

}  // namespace crl::concerto
