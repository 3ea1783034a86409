#include "crl/cpg.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>

namespace crl::cpg {

Vec4 default_phases() { return {0.0, M_PI, M_PI, 0.0}; }

double desired_angle(const WingCommandSpec& spec, double t, int wing) {
  return spec.amplitude[wing] * std::sin(2.0 * M_PI * spec.frequency * t + spec.phase[wing]);
}

std::vector<Vec4> command_window(const WingCommandSpec& spec, double t, double dt, int horizon) {
  std::vector<Vec4> out(static_cast<std::size_t>(std::max(horizon, 0)));
  for (int h = 0; h < horizon; ++h)
    for (int i = 0; i < kWings; ++i) out[h][i] = desired_angle(spec, t + h * dt, i);
  return out;
}

const std::array<double, 13>& AmplitudeSampler::grid_deg() {
  static const std::array<double, 13> grid = [] {
    std::array<double, 13> g{};
    for (int i = 0; i < 13; ++i) g[i] = 45.0 + 2.5 * i;
    return g;
  }();
  return grid;
}

const std::array<double, 13>& AmplitudeSampler::grid_pmf() {
  static const std::array<double, 13> pmf = [] {
    std::array<double, 13> p{};
    const auto& g = grid_deg();
    for (int i = 0; i < 13; ++i) {
      const double z = (g[i] - 60.0) / 10.0;
      p[i] = std::exp(-0.5 * z * z);
    }
    const double total = std::accumulate(p.begin(), p.end(), 0.0);
    for (double& x : p) x /= total;
    return p;
  }();
  return pmf;
}

double AmplitudeSampler::sample() {
  if (rng_.uniform() < 0.5) return deg(60.0);
  const auto& pmf = grid_pmf();
  const double u = rng_.uniform();
  double acc = 0.0;
  for (int i = 0; i < 13; ++i) {
    acc += pmf[i];
    if (u < acc) return deg(grid_deg()[i]);
  }
  return deg(grid_deg()[12]);
}

ConditionSpec make_condition(int load, double frequency) {
  if (load != 1 && load != 2) throw ConditionError("load must be 1 or 2");
  if (frequency != 20.0 && frequency != 40.0 && frequency != 60.0)
    throw ConditionError("frequency must be one of 20, 40, 60 Hz");
  ConditionSpec c;
  c.load = load;
  c.frequency = frequency;
  c.yaw_enabled = load == 2;
  c.label = "Load " + std::to_string(load) + ", " + std::to_string(static_cast<int>(frequency)) + " Hz configuration";
  return c;
}

ConditionSpec parse_condition(const std::string& label) {
  for (const ConditionSpec& c : all_conditions())
    if (c.label == label) return c;
  // Short form "L1-40" is accepted on the command line.
  int load = 0, freq = 0;
  if (std::sscanf(label.c_str(), "L%d-%d", &load, &freq) == 2) return make_condition(load, freq);
  throw ConditionError("unknown condition: " + label);
}

std::vector<ConditionSpec> all_conditions() {
  std::vector<ConditionSpec> out;
  for (int load : {1, 2})
    for (double f : {20.0, 40.0, 60.0}) out.push_back(make_condition(load, f));
  return out;
}

CommandGenerator::CommandGenerator(double frequency, Vec4 phase, std::uint64_t seed, bool randomize,
                                   double fixed_amplitude)
    : frequency_(frequency), phase_(phase), randomize_(randomize), fixed_(fixed_amplitude), sampler_(seed) {
  for (int i = 0; i < kWings; ++i) {
    cycle_[i] = cycle_index(0.0, i);
    current_[i] = randomize_ ? sampler_.sample() : fixed_;
    next_[i] = randomize_ ? sampler_.sample() : fixed_;
  }
}

long CommandGenerator::cycle_index(double t, int wing) const {
  return static_cast<long>(std::floor(frequency_ * t + phase_[wing] / (2.0 * M_PI)));
}

void CommandGenerator::advance_to(long cycle, int wing) {
  while (cycle_[wing] < cycle) {
    ++cycle_[wing];
    current_[wing] = next_[wing];
    next_[wing] = randomize_ ? sampler_.sample() : fixed_;
  }
}

double CommandGenerator::amplitude_for(double t, int wing) {
  const long c = cycle_index(t, wing);
  if (c <= cycle_[wing]) return current_[wing];
  if (c == cycle_[wing] + 1) return next_[wing];
  advance_to(c - 1, wing);
  return next_[wing];
}

Vec4 CommandGenerator::amplitude_at(double t) {
  Vec4 a{};
  for (int i = 0; i < kWings; ++i) {
    advance_to(cycle_index(t, i), i);
    a[i] = current_[i];
  }
  return a;
}

Vec4 CommandGenerator::at(double t) {
  Vec4 out{};
  for (int i = 0; i < kWings; ++i) {
    advance_to(cycle_index(t, i), i);
    out[i] = current_[i] * std::sin(2.0 * M_PI * frequency_ * t + phase_[i]);
  }
  return out;
}

void CommandGenerator::window(double t, double dt, std::vector<Vec4>& out) {
  for (std::size_t h = 0; h < out.size(); ++h) {
    const double th = t + static_cast<double>(h) * dt;
    for (int i = 0; i < kWings; ++i)
      out[h][i] = amplitude_for(th, i) * std::sin(2.0 * M_PI * frequency_ * th + phase_[i]);
  }
}

}  // namespace crl::cpg
