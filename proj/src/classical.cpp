#include "crl/classical.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace crl::classical {

PidGains pid_table_gains() { return {0.48, 2e-5, 7e-4}; }
PidGains apid_table_gains() { return {0.576, 2.4e-5, 8.4e-4}; }
PidGains mrac_table_gains() { return {0.576, 2.4e-5, 8.4e-4}; }

PidOutput pid_step(const PidGains& g, double error, double integ, std::optional<double> prev_error, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("pid_step: dt must be positive");
  const double prev = prev_error.value_or(error);
  PidOutput out;
  out.integ = integ + error * dt;
  out.torque = g.kp * error + g.ki * out.integ + g.kd * (error - prev) / dt;
  out.prev_error = error;
  return out;
}

double Pid::step(double error, double dt) {
  const PidOutput o = pid_step(gains_, error, integ_, prev_, dt);
  integ_ = std::clamp(o.integ, -integ_limit_, integ_limit_);
  prev_ = o.prev_error;
  return o.torque;
}

void Pid::reset() {
  integ_ = 0.0;
  prev_.reset();
}

ApidState ApidState::from(const ApidConfig& cfg) {
  ApidState s;
  s.gains = cfg.initial;
  s.mit_rate = cfg.mit_rate;
  s.adapt_kp = cfg.adapt_kp;
  s.adapt_ki = cfg.adapt_ki;
  s.adapt_kd = cfg.adapt_kd;
  return s;
}

ApidOutput apid_step(const ApidState& state, double error, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("apid_step: dt must be positive");
  ApidOutput out;
  out.state = state;
  ApidState& s = out.state;

  if (s.mit_rate != 0.0) {
    const double prev = s.prev_error.value_or(error);
    const double sens[3] = {error, s.integ + error * dt, (error - prev) / dt};
    double* k[3] = {&s.gains.kp, &s.gains.ki, &s.gains.kd};
    const bool on[3] = {s.adapt_kp, s.adapt_ki, s.adapt_kd};
    for (int j = 0; j < 3; ++j) {
      if (!on[j]) continue;
      *k[j] -= s.mit_rate * error * sens[j];
      if (*k[j] < 0.0) {
        *k[j] = 0.0;
        ++s.floor_events;
      }
    }
  }

  const PidOutput p = pid_step(s.gains, error, s.integ, s.prev_error, dt);
  s.integ = p.integ;
  s.prev_error = p.prev_error;
  out.torque = p.torque;
  return out;
}

double ReferenceModel::step(double command, double wn, double zeta, double dt, bool track_command) {
  if (track_command) {
    double rate = 0.0;
    if (started) {
      rate = (command - prev_command) / dt;
    } else {
      e = y - command;
      e_rate = v;
      started = true;
    }
    e_rate += (-wn * wn * e - 2.0 * zeta * wn * e_rate) * dt;
    e += e_rate * dt;
    prev_command = command;
    y = command + e;
    v = rate + e_rate;
    return y;
  }
  const double acc = wn * wn * (command - y) - 2.0 * zeta * wn * v;
  v += acc * dt;
  y += v * dt;
  return y;
}

MracState MracState::from(const MracConfig& cfg) {
  if (!(cfg.ref_damping > 0.0)) throw std::invalid_argument("MRAC reference damping must be positive");
  MracState s;
  s.cfg = cfg;
  s.covariance = Eigen::Matrix4d::Identity() * cfg.p0;
  return s;
}

MracOutput mrac_step(const MracState& state, double desired, double measured, double dt) {
  if (!(dt > 0.0)) throw std::invalid_argument("mrac_step: dt must be positive");
  MracOutput out;
  out.state = state;
  MracState& s = out.state;
  const MracConfig& cfg = s.cfg;

  // RLS update with the sample that just arrived: regressor is the history
  // and input that produced it.
  if (cfg.feedforward && s.samples >= 3) {
    const Eigen::Vector4d x(s.y_hist[0], s.y_hist[1], s.y_hist[2], s.last_u);
    const Eigen::Vector4d px = s.covariance * x;
    const double denom = cfg.forgetting + x.dot(px);
    const Eigen::Vector4d gain = px / denom;
    s.ar_coeffs += gain * (measured - x.dot(s.ar_coeffs));
    s.covariance = (s.covariance - gain * px.transpose()) / cfg.forgetting;
    s.covariance = 0.5 * (s.covariance + s.covariance.transpose());
    const double trace = s.covariance.trace();
    if (!std::isfinite(trace) || trace > cfg.covariance_limit || !s.ar_coeffs.allFinite()) {
      s.covariance = Eigen::Matrix4d::Identity() * cfg.p0;
      if (!s.ar_coeffs.allFinite()) s.ar_coeffs.setZero();
      ++s.covariance_resets;
    }
  }
  s.y_hist = {measured, s.y_hist[0], s.y_hist[1]};
  ++s.samples;

  const double ref_out = s.ref.step(desired, cfg.ref_natural_freq, cfg.ref_damping, dt, cfg.track_command);
  s.last_ref_output = ref_out;

  // Feedforward: the input that moves the identified model onto the
  // reference model's next output.
  double ff = 0.0;
  const double b0 = s.ar_coeffs[3];
  if (cfg.feedforward && s.samples > cfg.ff_warmup && std::abs(b0) > cfg.min_input_gain) {
    const double ref_next = ref_out + s.ref.v * dt;
    const double pred = s.ar_coeffs[0] * s.y_hist[0] + s.ar_coeffs[1] * s.y_hist[1] + s.ar_coeffs[2] * s.y_hist[2];
    ff = std::clamp((ref_next - pred) / b0, -cfg.ff_limit, cfg.ff_limit);
  }
  s.last_feedforward = ff;

  const PidOutput p = pid_step(cfg.feedback, ref_out - measured, s.integ, s.prev_error, dt);
  s.integ = p.integ;
  s.prev_error = p.prev_error;
  out.torque = ff + p.torque;
  s.last_u = out.torque;
  return out;
}

PidGains apply_ticp(const PidGains& g, const TicpConfig& cfg) {
  if (!(std::abs(cfg.epsilon) <= 0.2)) throw std::invalid_argument("apply_ticp: |epsilon| must not exceed 0.2");
  const double s = 1.0 + (cfg.sign >= 0 ? 1.0 : -1.0) * cfg.epsilon;
  return {g.kp * s, g.ki * s, g.kd * s};
}

ClassicalController::ClassicalController(Kind kind, double, double ref_natural_freq) : kind_(kind) {
  MracConfig mc;
  mc.ref_natural_freq = ref_natural_freq;
  for (int i = 0; i < 4; ++i) {
    pid_[i] = Pid(pid_table_gains());
    apid_[i] = ApidState::from(ApidConfig{});
    mrac_[i] = MracState::from(mc);
  }
}

void ClassicalController::set_pid_gains(const PidGains& g) {
  for (Pid& p : pid_) p.set_gains(g);
}

void ClassicalController::set_apid_config(const ApidConfig& c) {
  for (ApidState& a : apid_) a = ApidState::from(c);
}

void ClassicalController::set_mrac_config(const MracConfig& c) {
  for (MracState& m : mrac_) m = MracState::from(c);
}

std::array<double, 4> ClassicalController::act(const std::array<double, 4>& desired,
                                               const std::array<double, 4>& measured, double dt) {
  // All three laws are linear in their gains, so a uniform gain scale is a
  // scale on the PID part of the output.
  std::array<double, 4> u{};
  for (int i = 0; i < 4; ++i) {
    const double e = desired[i] - measured[i];
    switch (kind_) {
      case Kind::Pid:
        u[i] = gain_scale_ * pid_[i].step(e, dt);
        break;
      case Kind::Apid: {
        ApidOutput o = apid_step(apid_[i], e, dt);
        apid_[i] = o.state;
        u[i] = gain_scale_ * o.torque;
        break;
      }
      case Kind::Mrac: {
        MracOutput o = mrac_step(mrac_[i], desired[i], measured[i], dt);
        mrac_[i] = o.state;
        u[i] = o.state.last_feedforward + gain_scale_ * (o.torque - o.state.last_feedforward);
        break;
      }
    }
  }
  return u;
}

}  // namespace crl::classical
