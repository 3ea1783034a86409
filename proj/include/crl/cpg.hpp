#pragma once

// Sinusoidal desired-trajectory generator and the operating-condition table.

#include "crl/rng.hpp"

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace crl::cpg {

inline constexpr int kWings = 4;
using Vec4 = std::array<double, kWings>;

inline constexpr double deg(double d) { return d * 3.14159265358979323846 / 180.0; }

class ConditionError : public std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct WingCommandSpec {
  Vec4 amplitude{};  // rad
  double frequency = 20.0;  // Hz
  Vec4 phase{};  // rad
};

// Fore wings (1, 4) start at phase 0, hind wings (2, 3) in antiphase.
Vec4 default_phases();

// A_i * sin(2*pi*f*t + phase_i); wing is 0-based.
double desired_angle(const WingCommandSpec& spec, double t, int wing);

// Desired angles at t, t+dt, ..., t+(horizon-1)*dt.
std::vector<Vec4> command_window(const WingCommandSpec& spec, double t, double dt, int horizon);

// With probability 1/2 exactly 60 deg; otherwise a point of the 45..75 deg
// grid (2.5 deg spacing) drawn with weights from a N(60, 10) density.
class AmplitudeSampler {
 public:
  explicit AmplitudeSampler(std::uint64_t seed) : rng_(seed) {}

  double sample();

  static const std::array<double, 13>& grid_deg();
  static const std::array<double, 13>& grid_pmf();

 private:
  Rng rng_;
};

struct ConditionSpec {
  int load = 1;
  double frequency = 20.0;
  double amp_min = deg(45.0);
  double amp_max = deg(75.0);
  bool yaw_enabled = false;
  std::string label;
};

// load in {1, 2}, frequency in {20, 40, 60}; anything else throws ConditionError.
ConditionSpec make_condition(int load, double frequency);
ConditionSpec parse_condition(const std::string& label);
std::vector<ConditionSpec> all_conditions();

// Command source used by the control loop: amplitudes are re-drawn per wing
// at each full flapping period, so the command stays continuous (the switch
// happens at a zero crossing). The draw for the next period is made ahead so
// look-ahead windows are exact.
class CommandGenerator {
 public:
  CommandGenerator(double frequency, Vec4 phase, std::uint64_t seed, bool randomize = true,
                   double fixed_amplitude = deg(60.0));

  // Must be called with non-decreasing t.
  Vec4 at(double t);
  void window(double t, double dt, std::vector<Vec4>& out);

  double frequency() const { return frequency_; }
  const Vec4& phase() const { return phase_; }
  // Amplitude in force at time t for each wing (after advancing).
  Vec4 amplitude_at(double t);

 private:
  long cycle_index(double t, int wing) const;
  void advance_to(long cycle, int wing);
  double amplitude_for(double t, int wing);

  double frequency_;
  Vec4 phase_;
  bool randomize_;
  double fixed_;
  AmplitudeSampler sampler_;
  std::array<long, kWings> cycle_{};
  Vec4 current_{};
  Vec4 next_{};
};

}  // namespace crl::cpg
