#pragma once

// PID, MIT-rule adaptive PID and model-reference adaptive control, each acting
// on one wing's tracking error and producing a motor torque in N*m.

#include <Eigen/Dense>

#include <array>
#include <optional>

namespace crl::classical {

struct PidGains {
  double kp = 0.48;
  double ki = 2e-5;
  double kd = 7e-4;

  bool operator==(const PidGains&) const = default;
};

PidGains pid_table_gains();    // 0.48, 2e-5, 7e-4
PidGains apid_table_gains();   // PID x 1.2
PidGains mrac_table_gains();   // MRAC feedback gains (same values as APID)

struct PidOutput {
  double torque = 0.0;
  double integ = 0.0;
  std::optional<double> prev_error;
};

// u = kp*e + ki*(integ + e*dt) + kd*(e - prev)/dt. Without a previous error
// the derivative term is zero.
PidOutput pid_step(const PidGains& gains, double error, double integ, std::optional<double> prev_error, double dt);

class Pid {
 public:
  explicit Pid(PidGains gains = pid_table_gains(), double integ_limit = 1e3) : gains_(gains), integ_limit_(integ_limit) {}

  double step(double error, double dt);
  void reset();

  const PidGains& gains() const { return gains_; }
  void set_gains(const PidGains& g) { gains_ = g; }
  double integrator() const { return integ_; }

 private:
  PidGains gains_;
  double integ_limit_;
  double integ_ = 0.0;
  std::optional<double> prev_;
};

struct ApidConfig {
  PidGains initial = apid_table_gains();
  double mit_rate = 5e-6;
  bool adapt_kp = true;
  bool adapt_ki = true;
  bool adapt_kd = true;
};

struct ApidState {
  PidGains gains = apid_table_gains();
  double mit_rate = 5e-6;
  bool adapt_kp = true;
  bool adapt_ki = true;
  bool adapt_kd = true;
  double integ = 0.0;
  std::optional<double> prev_error;
  long floor_events = 0;

  static ApidState from(const ApidConfig& cfg);
};

struct ApidOutput {
  double torque = 0.0;
  ApidState state;
};

// MIT rule: dk = -mit_rate * e * s_k with sensitivities (e, integral of e,
// de/dt); gains are adapted first, then the PID law runs with the new gains.
ApidOutput apid_step(const ApidState& state, double error, double dt);

struct MracConfig {
  PidGains feedback = mrac_table_gains();
  double ref_natural_freq = 2.0 * 3.14159265358979323846 * 20.0;  // rad/s
  double ref_damping = 1.0;
  // Feed the command's rate and acceleration into the reference model. Off, a
  // critically damped model at the flapping frequency halves the amplitude
  // and lags a quarter cycle, and MRAC tracks that instead of the command.
  bool track_command = true;
  double forgetting = 0.995;
  double p0 = 1e4;
  double covariance_limit = 1e10;
  bool feedforward = true;
  double ff_limit = 0.2;  // N*m
  int ff_warmup = 50;     // samples before the inverse model is trusted
  double min_input_gain = 1e-9;
};

// Second-order reference model integrated with semi-implicit Euler. With
// track_command the second-order dynamics act on the model error y - command
// instead of on y, so the model settles onto a moving command rather than
// filtering it.
struct ReferenceModel {
  double y = 0.0;
  double v = 0.0;
  double e = 0.0, e_rate = 0.0;  // y - command and its rate (track_command)
  double prev_command = 0.0;
  bool started = false;
  double step(double command, double wn, double zeta, double dt, bool track_command = false);
};

struct MracState {
  MracConfig cfg;
  ReferenceModel ref;
  // ARX(3) model: y[k+1] = a1 y[k] + a2 y[k-1] + a3 y[k-2] + b0 u[k].
  Eigen::Vector4d ar_coeffs = Eigen::Vector4d::Zero();
  Eigen::Matrix4d covariance = Eigen::Matrix4d::Identity() * 1e4;
  std::array<double, 3> y_hist{};  // most recent first
  double last_u = 0.0;
  int samples = 0;
  double integ = 0.0;
  std::optional<double> prev_error;
  long covariance_resets = 0;
  double last_ref_output = 0.0;
  double last_feedforward = 0.0;

  static MracState from(const MracConfig& cfg);
};

struct MracOutput {
  double torque = 0.0;
  MracState state;
};

MracOutput mrac_step(const MracState& state, double desired, double measured, double dt);

struct TicpConfig {
  double epsilon = 0.05;
  int sign = +1;
};

// Scales all gains by (1 + sign*epsilon). |epsilon| must not exceed 0.2.
PidGains apply_ticp(const PidGains& gains, const TicpConfig& cfg);

enum class Kind { Pid, Apid, Mrac };

// Per-wing controller bank with a uniform interface for the control loop.
class ClassicalController {
 public:
  ClassicalController(Kind kind, double dt_hint, double ref_natural_freq);

  // Returns the torque for each wing, given desired and measured angles and
  // the time since this controller last ran.
  std::array<double, 4> act(const std::array<double, 4>& desired, const std::array<double, 4>& measured, double dt);

  // Gain multiplier (1 +/- eps); applied to whatever gains the controller currently holds.
  void set_gain_scale(double s) { gain_scale_ = s; }
  double gain_scale() const { return gain_scale_; }

  Kind kind() const { return kind_; }
  const ApidState& apid(int wing) const { return apid_[wing]; }
  const MracState& mrac(int wing) const { return mrac_[wing]; }

  void set_pid_gains(const PidGains& g);
  void set_apid_config(const ApidConfig& c);
  void set_mrac_config(const MracConfig& c);

 private:
  Kind kind_;
  double gain_scale_ = 1.0;
  std::array<Pid, 4> pid_;
  std::array<ApidState, 4> apid_;
  std::array<MracState, 4> mrac_;
};

}  // namespace crl::classical
