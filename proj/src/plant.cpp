#include "crl/plant.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

namespace crl::plant {

namespace {

bool is_hind(int wing) { return wing == 1 || wing == 2; }

double sgn(double x) { return (x > 0.0) - (x < 0.0); }

}  // namespace

void InertiaParams::validate() const {
  if (!(j_w_yy > 0.0) || !(j_w_zz > 0.0) || !(j_m_zz > 0.0) || !std::isfinite(j_w_yz))
    throw SingularInertia("inertia diagonal terms must be positive and finite");
  if (!(c_det() > 0.0)) throw SingularInertia("coupling determinant c_det must be positive");
}

double spring_stiffness(double f_exp, double j_m_zz) {
  if (!std::isfinite(f_exp) || !std::isfinite(j_m_zz)) throw PlantError("spring_stiffness: non-finite input");
  if (f_exp < 0.0 || !(j_m_zz > 0.0)) throw PlantError("spring_stiffness: need f_exp >= 0 and j_m_zz > 0");
  return 4.0 * M_PI * M_PI * f_exp * f_exp * j_m_zz;
}

SpringBank SpringBank::for_frequency(double f_exp, double j_m_zz) {
  SpringBank bank;
  bank.f_exp = f_exp;
  bank.k_a.fill(spring_stiffness(f_exp, j_m_zz));
  return bank;
}

LoadModelConfig LoadModelConfig::disabled() {
  LoadModelConfig cfg;
  cfg.aero_drag_coeff = 0.0;
  cfg.aero_couple_coeff = 0.0;
  cfg.tandem_mean = 0.0;
  cfg.tandem_amp = 0.0;
  cfg.membrane_stiffness = 0.0;
  cfg.membrane_damping = 0.0;
  cfg.membrane_slack = 0.0;
  cfg.yaw_amp = 0.0;
  cfg.yaw_enabled = false;
  return cfg;
}

void LoadModelConfig::validate() const {
  const double mags[] = {aero_drag_coeff, aero_couple_coeff, tandem_amp, membrane_stiffness,
                         membrane_damping, yaw_amp, flap_frequency};
  for (double m : mags)
    if (!(m >= 0.0) || !std::isfinite(m)) throw PlantError("load model magnitudes must be finite and >= 0");
  if (!(membrane_slack >= 0.0 && membrane_slack <= M_PI / 4.0)) throw PlantError("membrane_slack must lie in [0, pi/4]");
  if (yaw_enabled && !(yaw_period > 0.0)) throw PlantError("yaw_period must be positive");
}

LoadSet compose_loads(const PlantState& state, const LoadModelConfig& cfg, double t) {
  LoadSet loads;
  const double c_tandem = cfg.tandem_mean + cfg.tandem_amp * std::sin(2.0 * M_PI * cfg.flap_frequency * t + cfg.tandem_phase);
  double yaw = 0.0;
  if (cfg.yaw_enabled && cfg.yaw_amp > 0.0) {
    const double phase = std::fmod(t, cfg.yaw_period);
    yaw = phase < 0.5 * cfg.yaw_period ? cfg.yaw_amp : -cfg.yaw_amp;
  }
  for (int i = 0; i < kWings; ++i) {
    const double w = state.phi_dot[i];
    const double t_y_wing = cfg.aero_couple_coeff * w * w;
    const double t_z_wing = -cfg.aero_drag_coeff * w * std::abs(w);
    loads.c_tandem[i] = c_tandem;
    loads.t_yw[i] = t_y_wing * (c_tandem + 1.0);
    loads.t_zw[i] = t_z_wing * (c_tandem + 1.0);

    const double th = state.theta[i];
    const double stretch = std::max(std::abs(th) - cfg.membrane_slack, 0.0);
    loads.t_vtm[i] = -cfg.membrane_stiffness * sgn(th) * stretch - cfg.membrane_damping * state.theta_dot[i];
    loads.t_yaw[i] = yaw;
  }
  return loads;
}

MotorCommand motor_torques(const Vec4& action, double const_motor) {
  MotorCommand cmd;
  cmd.const_motor = const_motor;
  for (int i = 0; i < kWings; ++i) {
    double a = action[i];
    if (std::isnan(a)) a = 0.0;
    const double c = std::clamp(a, -1.0, 1.0);
    if (c != a) ++cmd.clamped;
    cmd.action[i] = c;
    cmd.t_m[i] = const_motor * c;
  }
  return cmd;
}

Accel8 accelerations(const PlantState& s, const Vec4& t_m, const LoadSet& l, const InertiaParams& in,
                     const SpringBank& sp, bool rest_offset) {
  const double c = in.c_det();
  if (!(c > 0.0)) throw SingularInertia("accelerations: c_det <= 0");
  const double yy = in.j_w_yy / c;
  const double yz = in.j_w_yz / c;
  const double zz = in.j_w_zz / c;
  const double mz = in.j_m_zz / c;

  Accel8 acc{};
  for (int i = 0; i < kWings; ++i) {
    const double k = sp.k_a[i];
    const double offset = (rest_offset && is_hind(i)) ? M_PI : 0.0;
    acc[i] = -yy * k * s.phi[i] - offset * yy * k + yy * t_m[i] + yy * l.t_zw[i] - yz * l.t_yw[i] - yz * l.t_vtm[i] -
             yz * l.t_yaw[i];
    acc[kWings + i] = mz * l.t_vtm[i] + mz * l.t_yw[i] + yz * k * s.phi[i] + offset * yz * k - yz * t_m[i] -
                      yz * l.t_zw[i] + zz * l.t_vtm[i] + zz * l.t_yw[i] + zz * l.t_yaw[i];
  }
  return acc;
}

double mechanical_energy(const PlantState& s, const InertiaParams& in, const SpringBank& sp, bool rest_offset) {
  // Mass matrix per wing in (phi, theta): [[j_m_zz + j_w_zz, j_w_yz], [j_w_yz, j_w_yy]].
  double e = 0.0;
  for (int i = 0; i < kWings; ++i) {
    const double pd = s.phi_dot[i];
    const double td = s.theta_dot[i];
    e += 0.5 * ((in.j_m_zz + in.j_w_zz) * pd * pd + 2.0 * in.j_w_yz * pd * td + in.j_w_yy * td * td);
    const double q = s.phi[i] + ((rest_offset && is_hind(i)) ? M_PI : 0.0);
    e += 0.5 * sp.k_a[i] * q * q;
  }
  return e;
}

SafetyVerdict check_safety(const Vec4& phi, const Vec4& phi_exp) {
  SafetyVerdict v;
  for (int i = 0; i < kWings; ++i) {
    const double err = std::abs(phi[i] - phi_exp[i]);
    if (err > kSafetyBound || std::isnan(err)) {
      v.violation = true;
      v.wing = i;
      v.error = err;
      return v;
    }
  }
  return v;
}

Plant::Plant(PlantParams params) : params_(std::move(params)), solver_(params_.solver) {
  params_.inertia.validate();
  params_.loads.validate();
  if (!(params_.const_motor > 0.0)) throw PlantError("const_motor must be positive");
}

double Plant::rest_angle(int wing) const {
  return (!params_.zero_rest_offset && is_hind(wing)) ? -M_PI : 0.0;
}

PlantState Plant::rest_state() const {
  PlantState s;
  for (int i = 0; i < kWings; ++i) s.phi[i] = rest_angle(i);
  return s;
}

PlantState Plant::step(const PlantState& state, const Vec4& t_m, double dt) {
  using Vec = RadauIIA<16>::Vec;
  const bool offset = !params_.zero_rest_offset;
  auto unpack = [](double t, const Vec& y) {
    PlantState s;
    for (int i = 0; i < kWings; ++i) {
      s.phi[i] = y[i];
      s.theta[i] = y[4 + i];
      s.phi_dot[i] = y[8 + i];
      s.theta_dot[i] = y[12 + i];
    }
    s.t = t;
    return s;
  };
  auto rhs = [&](double t, const Vec& y) {
    const PlantState s = unpack(t, y);
    const LoadSet loads = compose_loads(s, params_.loads, t);
    const Accel8 acc = accelerations(s, t_m, loads, params_.inertia, params_.springs, offset);
    Vec dy;
    dy.segment<8>(0) = y.segment<8>(8);
    for (int i = 0; i < 8; ++i) dy[8 + i] = acc[i];
    return dy;
  };

  Vec y;
  for (int i = 0; i < kWings; ++i) {
    y[i] = state.phi[i];
    y[4 + i] = state.theta[i];
    y[8 + i] = state.phi_dot[i];
    y[12 + i] = state.theta_dot[i];
  }
  try {
    const Vec next = solver_.step(rhs, state.t, y, dt);
    return unpack(state.t + dt, next);
  } catch (const IntegratorError& e) {
    throw StepFailure(e.what(), e.time(), e.substep(), e.newton_iterations());
  }
}

void write_trajectory_header(std::ostream& os) {
  os << "t";
  for (const char* name : {"phi", "theta", "phi_dot", "theta_dot"})
    for (int i = 1; i <= kWings; ++i) os << ',' << name << i;
  os << '\n';
}

void write_trajectory_row(std::ostream& os, const PlantState& s) {
  os << s.t;
  for (const Vec4* v : {&s.phi, &s.theta, &s.phi_dot, &s.theta_dot})
    for (double x : *v) os << ',' << x;
  os << '\n';
}

}  // namespace crl::plant
