#pragma once

// Decision layer: time interleaving of classical and learned actions, the
// pairwise Lipschitz monitor, gradient-descent-segment bookkeeping and the
// rule-based policy composer.

#include "crl/rng.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace crl::concerto {

enum class Mode { Classical = 1, Learned = 2 };

// Even steps run the classical controller (and take weight updates), odd steps the policy.
inline Mode select_mode(std::uint64_t k) { return k % 2 == 0 ? Mode::Classical : Mode::Learned; }

struct PairVerdict {
  bool violation = false;
  double delta_er = 0.0;  // Er(t + dt*) - Er(t)
  double bound = 0.0;     // lambda * dt*
  double pe_rl = 0.0;     // error growth rate of the learned half-step
  double pc = 0.0;        // error reduction rate of the classical half-step
};

// Tracks the learned policy's worst error growth rate and the classical
// controller's capability. Error rates are in rad/s on the scalar error
// Er = sum |e_i|.
class SafetyMonitor {
 public:
  explicit SafetyMonitor(double pc_class = 0.0, double delta_er_max = std::numeric_limits<double>::infinity())
      : pc_class_(pc_class), delta_er_max_(delta_er_max) {}

  // er_t before the learned step, er_mid after it, er_t2 after the following
  // classical step. dt is the control period; dt* = 2 dt.
  PairVerdict monitor_pair(double er_t, double er_mid, double er_t2, double dt);

  double lambda() const { return 0.5 * (-pc_class_ + pe_rl_max_); }
  double pc_class() const { return pc_class_; }
  void set_pc_class(double pc) { pc_class_ = pc; }
  double pe_rl_max() const { return pe_rl_max_; }
  void set_pe_rl_max(double v) { pe_rl_max_ = v; }
  double delta_er_max() const { return delta_er_max_; }
  long pairs() const { return pairs_; }
  long violations() const { return violations_; }

 private:
  double pc_class_;
  double delta_er_max_;
  double pe_rl_max_ = -std::numeric_limits<double>::infinity();
  long pairs_ = 0;
  long violations_ = 0;
};

// Minimum classical capability keeping the pair change below delta_er_max.
double required_pc(double pe_rl_max, double delta_er_max, double dt);

struct LineFit {
  double a = 0.0;  // slope per step
  double b = 0.0;  // intercept
  double c = 0.0;  // RMS residual
};

// Least-squares line over k = 0..n-1.
LineFit fit_gds(std::span<const double> q);

struct GdsRecord {
  long j = 0;
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  double qbar = 0.0;
  std::vector<double> delta_theta;
};

struct DdpRecord {
  long g = 0;
  std::vector<double> theta_g0;
  double best_qbar = std::numeric_limits<double>::infinity();
  double m_g = 0.0;
};

struct ComposerConfig {
  std::uint64_t L = 500;
  long N = 8;
  double beta = 0.5;
  double sigma_partial = 0.064;
  double sigma_slow = 0.04;
  double sigma_reset = 0.2;
  double noise_floor = 1e-3;
  // Lower Q is better. When false the improvement test uses ">" as written
  // in the original pseudocode.
  bool cost_semantics = true;
  double gamma_bar = 0.9;

  void validate() const;
};

enum class Branch { AcceptBest = 1, ResetToAnchor = 2, AcceptAll = 3, Partial = 4, NoiseOnly = 5, ExploreAnchor = 6 };
const char* to_string(Branch b);

struct ComposeResult {
  Branch branch = Branch::AcceptBest;
  std::vector<double> theta_next;
  long j_next = 0;
  std::uint64_t noise_seed = 0;
};

// theta_j: weights at the start of the finished segment; cur.delta_theta: the
// updates accumulated over it. prev is the segment before (absent for the
// first one). Updates ddp in place.
ComposeResult compose(const std::vector<double>& theta_j, const GdsRecord& prev, const GdsRecord& cur, DdpRecord& ddp,
                      const ComposerConfig& cfg, Rng& rng, bool have_prev = true);

// theta + N(0, sigma * (|theta_k| + floor)) per coordinate.
std::vector<double> add_noise(const std::vector<double>& theta, double sigma, double floor, Rng& rng);

// Running sums of policy updates per segment and per phase.
class Accumulator {
 public:
  explicit Accumulator(std::size_t n = 0) : gds_(n, 0.0), ddp_(n, 0.0) {}

  void add(std::span<const double> delta);
  // Returns the finished segment's sum and folds it into the phase sum.
  std::vector<double> close_segment();
  std::vector<double> close_phase();

  const std::vector<double>& segment_sum() const { return gds_; }
  const std::vector<double>& phase_sum() const { return ddp_; }
  std::uint64_t updates() const { return updates_; }

 private:
  std::vector<double> gds_;
  std::vector<double> ddp_;
  std::uint64_t updates_ = 0;
};

struct ConvergenceReport {
  std::vector<double> m;  // m_g for g = 1..G-1
  double product = 1.0;   // prod (1 + m_g)
  bool accelerating = false;
  bool diverging = false;
  // dQ/dg ~ -c Q^alpha fitted over phases with decreasing Q; zero when fewer than two points.
  double c = 0.0;
  double alpha = 0.0;
  bool empty() const { return m.empty(); }
};

// m_g = Qbar_{g-1} / Qbar_g - 1 on the per-phase mean Q.
ConvergenceReport convergence_diagnostics(std::span<const double> qbar_per_ddp, double tol = 1e-9);

// Segment and phase driver used by the cloud trainer: feeds per-step rewards
// and policy updates, runs compose() at every segment boundary.
struct ComposerEvent {
  long g = 0;
  long j = 0;
  Branch branch = Branch::AcceptBest;
  double qbar = 0.0;
  double a = 0.0;
  double b = 0.0;
  double c = 0.0;
  std::uint64_t noise_seed = 0;
  std::uint64_t step = 0;
};

void write_event_jsonl(std::ostream& os, const ComposerEvent& e);

class Composer {
 public:
  Composer(ComposerConfig cfg, std::vector<double> theta0, std::uint64_t seed);

  // One control step's cost and (optional) policy update. theta_now is only
  // called at segment boundaries. Returns the new policy weights when a
  // segment closed and the composer changed them.
  std::optional<std::vector<double>> step(double reward, std::span<const double> delta_theta, std::uint64_t k,
                                          const std::function<std::vector<double>()>& theta_now);

  const ComposerConfig& config() const { return cfg_; }
  const DdpRecord& ddp() const { return ddp_; }
  const std::vector<ComposerEvent>& events() const { return events_; }
  const std::vector<double>& phase_qbars() const { return phase_qbar_; }
  ConvergenceReport diagnostics() const;
  long segments() const { return segments_; }

 private:
  ComposerConfig cfg_;
  Rng rng_;
  DdpRecord ddp_;
  Accumulator acc_;
  std::vector<double> theta_start_;
  std::vector<double> rewards_;
  std::vector<double> q_series_;
  GdsRecord prev_;
  bool have_prev_ = false;
  long j_ = 0;
  long segments_ = 0;
  std::vector<double> phase_q_;  // segment Q values in the running phase
  std::vector<double> phase_qbar_;
  std::vector<ComposerEvent> events_;
};

}  // namespace crl::concerto
