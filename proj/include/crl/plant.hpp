#pragma once

// Eight-degree-of-freedom tandem-wing bench: four flapping angles driven by
// direct-drive motors through torsion springs, four passive torsion angles
// constrained by the wing membrane.

#include "crl/radau.hpp"

#include <array>
#include <iosfwd>
#include <stdexcept>
#include <string>

namespace crl::plant {

inline constexpr int kWings = 4;
using Vec4 = std::array<double, kWings>;
using Accel8 = std::array<double, 2 * kWings>;

class PlantError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

class SingularInertia : public PlantError {
  using PlantError::PlantError;
};

class StepFailure : public PlantError {
 public:
  StepFailure(const std::string& what, double t, double substep, int newton_iters)
      : PlantError(what), t_(t), substep_(substep), newton_iters_(newton_iters) {}
  double time() const { return t_; }
  double substep() const { return substep_; }
  int newton_iterations() const { return newton_iters_; }

 private:
  double t_;
  double substep_;
  int newton_iters_;
};

// kg*m^2. Defaults are placeholders chosen so that the coupling determinant is positive.
struct InertiaParams {
  double j_w_yy = 1e-6;
  double j_w_yz = 2e-7;
  double j_w_zz = 8e-7;
  double j_m_zz = 1e-6;

  double c_det() const { return j_m_zz * j_w_yy + j_w_yy * j_w_zz - j_w_yz * j_w_yz; }
  // Throws SingularInertia unless the diagonal terms and c_det are positive.
  void validate() const;
};

// N*m/rad
double spring_stiffness(double f_exp, double j_m_zz);

struct SpringBank {
  Vec4 k_a{};
  double f_exp = 0.0;

  static SpringBank for_frequency(double f_exp, double j_m_zz);
};

struct PlantState {
  Vec4 phi{};
  Vec4 phi_dot{};
  Vec4 theta{};
  Vec4 theta_dot{};
  double t = 0.0;
};

// Surrogate load sub-models. All coefficients per wing, SI units.
struct LoadModelConfig {
  double aero_drag_coeff = 2e-7;    // N*m*s^2/rad^2, flapping-axis drag
  double aero_couple_coeff = 1e-7;  // N*m*s^2/rad^2, torsion-axis aerodynamic couple
  double tandem_mean = 0.1;
  double tandem_amp = 0.1;
  double tandem_phase = 0.0;  // rad
  double flap_frequency = 20.0;  // Hz, drives the tandem interference period
  double membrane_stiffness = 0.02;  // N*m/rad
  double membrane_damping = 2e-4;    // N*m*s/rad
  double membrane_slack = 0.05;      // rad
  double yaw_amp = 0.05;             // N*m
  double yaw_period = 0.05;          // s
  bool yaw_enabled = false;

  static LoadModelConfig disabled();
  void validate() const;
};

struct LoadSet {
  Vec4 t_yw{};
  Vec4 t_zw{};
  Vec4 t_vtm{};
  Vec4 t_yaw{};
  Vec4 c_tandem{};
};

LoadSet compose_loads(const PlantState& state, const LoadModelConfig& cfg, double t);

struct MotorCommand {
  Vec4 action{};  // clamped to [-1, 1]
  double const_motor = 0.0;
  Vec4 t_m{};
  int clamped = 0;
};

MotorCommand motor_torques(const Vec4& action, double const_motor);

// Returns (phi_ddot_1..4, theta_ddot_1..4). With rest_offset the hind pair
// (wings 2 and 3) carries the -pi spring offset terms and rests at phi = -pi.
Accel8 accelerations(const PlantState& state, const Vec4& t_m, const LoadSet& loads, const InertiaParams& inertia,
                     const SpringBank& springs, bool rest_offset = true);

// Mechanical energy (kinetic + spring) of the unloaded system.
double mechanical_energy(const PlantState& state, const InertiaParams& inertia, const SpringBank& springs,
                         bool rest_offset = true);

struct SafetyVerdict {
  bool violation = false;
  int wing = -1;        // first offending wing, 0-based
  double error = 0.0;  // rad
};

inline constexpr double kSafetyBound = 1.5707963267948966;  // pi/2

// Violation iff some |phi - phi_exp| > pi/2 strictly.
SafetyVerdict check_safety(const Vec4& phi, const Vec4& phi_exp);

struct PlantParams {
  InertiaParams inertia;
  SpringBank springs = SpringBank::for_frequency(20.0, 1e-6);
  LoadModelConfig loads;
  double const_motor = 0.2;  // N*m
  bool zero_rest_offset = false;
  RadauOptions solver;
};

class Plant {
 public:
  explicit Plant(PlantParams params);

  const PlantParams& params() const { return params_; }

  // Spring-neutral flapping angle of wing i (0-based): -pi for the hind pair
  // unless zero_rest_offset is set.
  double rest_angle(int wing) const;

  // Advances by dt with torques held constant. Throws StepFailure on solver non-convergence.
  PlantState step(const PlantState& state, const Vec4& t_m, double dt);

  // Equilibrium with zero torques and loads.
  PlantState rest_state() const;

  const RadauStats& solver_stats() const { return solver_.stats(); }

 private:
  PlantParams params_;
  RadauIIA<16> solver_;
};

void write_trajectory_header(std::ostream& os);
void write_trajectory_row(std::ostream& os, const PlantState& s);

}  // namespace crl::plant
