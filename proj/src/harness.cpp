#include "crl/harness.hpp"

#include "harness_loop.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace crl::harness {

const char* to_string(Algorithm a) {
  switch (a) {
    case Algorithm::Pid2000:
      return "PID2000";
    case Algorithm::Apid2000:
      return "APID2000";
    case Algorithm::Mrac2000:
      return "MRAC2000";
    case Algorithm::CrlPid:
      return "CRL2RT_PID";
    case Algorithm::CrlApid:
      return "CRL2RT_APID";
    case Algorithm::CrlMrac:
      return "CRL2RT_MRAC";
  }
  return "?";
}

std::vector<Algorithm> all_algorithms() {
  return {Algorithm::Pid2000, Algorithm::Apid2000, Algorithm::Mrac2000,
          Algorithm::CrlPid,  Algorithm::CrlApid,  Algorithm::CrlMrac};
}

Algorithm parse_algorithm(const std::string& s) {
  for (Algorithm a : all_algorithms())
    if (s == to_string(a)) return a;
  throw std::invalid_argument("unknown algorithm: " + s);
}

bool is_crl(Algorithm a) { return a == Algorithm::CrlPid || a == Algorithm::CrlApid || a == Algorithm::CrlMrac; }

classical::Kind classical_kind(Algorithm a) {
  switch (a) {
    case Algorithm::Pid2000:
    case Algorithm::CrlPid:
      return classical::Kind::Pid;
    case Algorithm::Apid2000:
    case Algorithm::CrlApid:
      return classical::Kind::Apid;
    default:
      return classical::Kind::Mrac;
  }
}

void StateBuilder::reset() {
  ring_ = {};
  head_ = 0;
  count_ = 0;
}

void StateBuilder::push(const Vec4& obs, const Vec4& action) {
  auto& slot = ring_[head_];
  for (int i = 0; i < 4; ++i) {
    slot[i] = static_cast<float>(obs[i]);
    slot[4 + i] = static_cast<float>(action[i]);
  }
  head_ = (head_ + 1) % kDepth;
  count_ = std::min(count_ + 1, kDepth);
}

void StateBuilder::build(const std::vector<Vec4>& window, rl::StateVec& out) const {
  if (static_cast<int>(window.size()) != rl::kLookahead) throw std::invalid_argument("command window must hold 4 vectors");
  float* p = out.data();
  const int pad = kDepth - count_;
  std::fill(p, p + pad * 8, 0.0f);
  // Oldest stored pair sits at head_ - count_.
  for (int i = 0; i < count_; ++i) {
    const auto& slot = ring_[(head_ - count_ + i + kDepth) % kDepth];
    std::copy(slot.begin(), slot.end(), p + (pad + i) * 8);
  }
  p += kDepth * 8;
  for (const Vec4& e : window)
    for (int i = 0; i < 4; ++i) *p++ = static_cast<float>(e[i]);
}

rl::StateVec build_state(const std::vector<std::pair<Vec4, Vec4>>& history, const std::vector<Vec4>& window) {
  StateBuilder b;
  for (const auto& [o, a] : history) b.push(o, a);
  rl::StateVec s;
  b.build(window, s);
  return s;
}

plant::PlantParams ExperimentConfig::plant_for_condition() const {
  plant::PlantParams p = plant;
  p.springs = plant::SpringBank::for_frequency(condition.frequency, p.inertia.j_m_zz);
  p.loads.flap_frequency = condition.frequency;
  p.loads.yaw_enabled = condition.yaw_enabled;
  return p;
}

nlohmann::json to_json(const ExperimentConfig& c) {
  const auto& h = c.trainer.hyper;
  const auto& cc = c.trainer.composer;
  const auto& l = c.plant.loads;
  return {
      {"condition", c.condition.label},
      {"algorithm", to_string(c.algorithm)},
      {"seed", c.seed},
      {"total_steps", c.total_steps},
      {"control_dt", c.control_dt},
      {"ship_batch", c.ship_batch},
      {"record_timing", c.record_timing},
      {"randomize_amplitude", c.randomize_amplitude},
      {"host", c.host},
      {"plant_port", c.plant_port},
      {"cloud_port", c.cloud_port},
      {"plant",
       {{"j_w_yy", c.plant.inertia.j_w_yy},
        {"j_w_yz", c.plant.inertia.j_w_yz},
        {"j_w_zz", c.plant.inertia.j_w_zz},
        {"j_m_zz", c.plant.inertia.j_m_zz},
        {"const_motor", c.plant.const_motor},
        {"zero_rest_offset", c.plant.zero_rest_offset},
        {"aero_drag_coeff", l.aero_drag_coeff},
        {"aero_couple_coeff", l.aero_couple_coeff},
        {"tandem_mean", l.tandem_mean},
        {"tandem_amp", l.tandem_amp},
        {"tandem_phase", l.tandem_phase},
        {"membrane_stiffness", l.membrane_stiffness},
        {"membrane_damping", l.membrane_damping},
        {"membrane_slack", l.membrane_slack},
        {"yaw_amp", l.yaw_amp},
        {"yaw_period", l.yaw_period}}},
      {"trainer",
       {{"gamma", h.gamma},
        {"alpha_actor", h.alpha_actor},
        {"alpha_critic", h.alpha_critic},
        {"critic_batch", h.critic_batch},
        {"policy_batch", h.policy_batch},
        {"warmup", h.warmup},
        {"critic_interval", h.critic_interval},
        {"actor_interval", h.actor_interval},
        {"action_offset_slot", h.action_offset_slot},
        {"lion_beta1", h.actor_opt.beta1},
        {"lion_beta2", h.actor_opt.beta2},
        {"actor_hidden", c.trainer.actor_hidden},
        {"critic_hidden", c.trainer.critic_hidden},
        {"critic_hidden_layers", c.trainer.critic_hidden_layers},
        {"replay_capacity", c.trainer.replay_capacity},
        {"publish_interval", c.trainer.publish_interval},
        {"ticp_epsilon", c.trainer.ticp_epsilon},
        {"composer_enabled", c.trainer.composer_enabled},
        {"actor_output_gain", c.trainer.actor_output_gain}}},
      {"composer",
       {{"L", cc.L},
        {"N", cc.N},
        {"beta", cc.beta},
        {"sigma_partial", cc.sigma_partial},
        {"sigma_slow", cc.sigma_slow},
        {"sigma_reset", cc.sigma_reset},
        {"noise_floor", cc.noise_floor},
        {"cost_semantics", cc.cost_semantics},
        {"gamma_bar", cc.gamma_bar}}},
  };
}

namespace {

template <class T>
void take(const nlohmann::json& j, const char* key, T& dst) {
  if (j.contains(key)) dst = j.at(key).get<T>();
}

}  // namespace

ExperimentConfig config_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  if (j.contains("condition")) c.condition = cpg::parse_condition(j.at("condition").get<std::string>());
  if (j.contains("algorithm")) c.algorithm = parse_algorithm(j.at("algorithm").get<std::string>());
  take(j, "seed", c.seed);
  take(j, "total_steps", c.total_steps);
  take(j, "control_dt", c.control_dt);
  take(j, "ship_batch", c.ship_batch);
  take(j, "record_timing", c.record_timing);
  take(j, "randomize_amplitude", c.randomize_amplitude);
  take(j, "host", c.host);
  take(j, "plant_port", c.plant_port);
  take(j, "cloud_port", c.cloud_port);
  if (j.contains("plant")) {
    const auto& p = j.at("plant");
    take(p, "j_w_yy", c.plant.inertia.j_w_yy);
    take(p, "j_w_yz", c.plant.inertia.j_w_yz);
    take(p, "j_w_zz", c.plant.inertia.j_w_zz);
    take(p, "j_m_zz", c.plant.inertia.j_m_zz);
    take(p, "const_motor", c.plant.const_motor);
    take(p, "zero_rest_offset", c.plant.zero_rest_offset);
    auto& l = c.plant.loads;
    take(p, "aero_drag_coeff", l.aero_drag_coeff);
    take(p, "aero_couple_coeff", l.aero_couple_coeff);
    take(p, "tandem_mean", l.tandem_mean);
    take(p, "tandem_amp", l.tandem_amp);
    take(p, "tandem_phase", l.tandem_phase);
    take(p, "membrane_stiffness", l.membrane_stiffness);
    take(p, "membrane_damping", l.membrane_damping);
    take(p, "membrane_slack", l.membrane_slack);
    take(p, "yaw_amp", l.yaw_amp);
    take(p, "yaw_period", l.yaw_period);
  }
  if (j.contains("trainer")) {
    const auto& t = j.at("trainer");
    auto& h = c.trainer.hyper;
    take(t, "gamma", h.gamma);
    take(t, "alpha_actor", h.alpha_actor);
    take(t, "alpha_critic", h.alpha_critic);
    take(t, "critic_batch", h.critic_batch);
    take(t, "policy_batch", h.policy_batch);
    take(t, "warmup", h.warmup);
    take(t, "critic_interval", h.critic_interval);
    take(t, "actor_interval", h.actor_interval);
    take(t, "action_offset_slot", h.action_offset_slot);
    take(t, "lion_beta1", h.actor_opt.beta1);
    take(t, "lion_beta2", h.actor_opt.beta2);
    h.critic_opt.beta1 = h.actor_opt.beta1;
    h.critic_opt.beta2 = h.actor_opt.beta2;
    take(t, "actor_hidden", c.trainer.actor_hidden);
    take(t, "critic_hidden", c.trainer.critic_hidden);
    take(t, "critic_hidden_layers", c.trainer.critic_hidden_layers);
    take(t, "replay_capacity", c.trainer.replay_capacity);
    take(t, "publish_interval", c.trainer.publish_interval);
    take(t, "ticp_epsilon", c.trainer.ticp_epsilon);
    take(t, "composer_enabled", c.trainer.composer_enabled);
    take(t, "actor_output_gain", c.trainer.actor_output_gain);
  }
  if (j.contains("composer")) {
    const auto& p = j.at("composer");
    auto& cc = c.trainer.composer;
    take(p, "L", cc.L);
    take(p, "N", cc.N);
    take(p, "beta", cc.beta);
    take(p, "sigma_partial", cc.sigma_partial);
    take(p, "sigma_slow", cc.sigma_slow);
    take(p, "sigma_reset", cc.sigma_reset);
    take(p, "noise_floor", cc.noise_floor);
    take(p, "cost_semantics", cc.cost_semantics);
    take(p, "gamma_bar", cc.gamma_bar);
  }
  c.plant.loads.validate();
  c.plant.inertia.validate();
  c.trainer.composer.validate();
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config " + path);
  return config_from_json(nlohmann::json::parse(f));
}

void MetricsLog::write_csv(std::ostream& os) const {
  os << "# condition=" << condition << ";algorithm=" << algorithm << ";seed=" << seed << ";failed=" << failed
     << ";fail_step=" << fail_step << '\n';
  os << "step,t,e1,e2,e3,e4,reward,mode,source,safety,amplitude\n";
  char buf[512];
  for (const StepRecord& r : records) {
    std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%d,%s,%d,%.17g\n",
                  static_cast<unsigned long long>(r.step), r.t, r.error[0], r.error[1], r.error[2], r.error[3],
                  r.reward, r.mode, rl::to_string(r.source), r.safety ? 1 : 0, r.amplitude);
    os << buf;
  }
}

MetricsLog MetricsLog::read_csv(std::istream& is) {
  MetricsLog log;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#' || line.rfind("step,", 0) == 0) continue;
    std::stringstream ss(line);
    std::string cell;
    std::vector<std::string> cells;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (cells.size() < 11) throw std::runtime_error("bad metrics row: " + line);
    StepRecord r;
    r.step = std::stoull(cells[0]);
    r.t = std::stod(cells[1]);
    for (int i = 0; i < 4; ++i) r.error[i] = std::stod(cells[2 + i]);
    r.reward = std::stod(cells[6]);
    r.mode = std::stoi(cells[7]);
    r.source = cells[8] == "rl" ? rl::Source::Rl : cells[8] == "composer" ? rl::Source::Composer : rl::Source::Classical;
    r.safety = cells[9] == "1";
    r.amplitude = std::stod(cells[10]);
    log.records.push_back(r);
  }
  return log;
}

LipschitzReport measure_lipschitz(const PairLog& p, double dt) {
  LipschitzReport rep;
  rep.pairs = p.size();
  if (rep.pairs == 0) return rep;
  rep.pe_rl_max = -INFINITY;
  double pc_sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    rep.pe_rl_max = std::max(rep.pe_rl_max, (p.er_mid[i] - p.er_t[i]) / dt);
    pc_sum += (p.er_mid[i] - p.er_t2[i]) / dt;
  }
  rep.pc_class = pc_sum / static_cast<double>(p.size());
  concerto::SafetyMonitor mon(rep.pc_class);
  mon.set_pe_rl_max(rep.pe_rl_max);
  rep.lambda = mon.lambda();
  for (std::size_t i = 0; i < p.size(); ++i)
    if (mon.monitor_pair(p.er_t[i], p.er_mid[i], p.er_t2[i], dt).violation) {
      if (rep.violations == 0) rep.first_violation = static_cast<std::int64_t>(i);
      rep.last_violation = static_cast<std::int64_t>(i);
      ++rep.violations;
    }
  return rep;
}

nn::NetworkF initial_actor(const TrainerSettings& s, std::uint64_t seed) {
  nn::NetworkF net = nn::init_xavier(nn::NetworkSpec::actor(rl::kStateDim, s.actor_hidden, rl::kActionDim), seed * 2 + 1);
  net.layers().back().w *= static_cast<float>(s.actor_output_gain);
  return net;
}

Trainer::Trainer(const TrainerSettings& s, std::uint64_t seed)
    : s_(s),
      rng_(seed * 7919 + 3),
      actor_(initial_actor(s, seed)),
      critic_(nn::init_xavier(nn::NetworkSpec::critic(rl::kCriticInput, s.critic_hidden, s.critic_hidden_layers),
                              seed * 2 + 2)),
      actor_opt_(actor_, s.hyper.actor_opt),
      critic_opt_(critic_, s.hyper.critic_opt),
      buffer_(s.replay_capacity),
      composer_(s.composer, actor_.flatten(), seed * 104729 + 5) {}

std::vector<std::uint8_t> Trainer::publish() {
  dirty_ = false;
  return edge::encode_weights({++seq_, actor_});
}

std::vector<std::vector<std::uint8_t>> Trainer::on_transition(const rl::Transition& t) {
  std::vector<std::vector<std::uint8_t>> out;
  buffer_.push(t);
  const std::uint64_t k = t.step;
  const auto& h = s_.hyper;
  std::vector<double> delta;
  if (k >= h.warmup) {
    const std::uint64_t since = k - h.warmup;
    if (since % h.critic_interval == 0) {
      rl::critic_update(critic_, critic_opt_, buffer_.sample(h.critic_batch, rng_), h);
      ++critic_updates_;
    }
    if (since % h.actor_interval == 0) {
      delta = rl::actor_update(actor_, actor_opt_, critic_, buffer_.sample(h.policy_batch, rng_), h);
      ++actor_updates_;
      dirty_ = true;
    }
  }
  if (s_.composer_enabled) {
    auto next = composer_.step(t.reward, delta, k, [this] { return actor_.flatten(); });
    if (next) {
      actor_.unflatten(*next);
      out.push_back(publish());
      last_publish_ = k;
    }
  }
  if (dirty_ && k >= last_publish_ + s_.publish_interval) {
    out.push_back(publish());
    last_publish_ = k;
  }
  return out;
}

namespace {

class InprocPlant : public PlantIO {
 public:
  explicit InprocPlant(const plant::PlantParams& p) : plant_(p), state_(plant_.rest_state()) {
    for (int i = 0; i < 4; ++i) rest_[i] = plant_.rest_angle(i);
  }
  Vec4 observe() override {
    Vec4 o;
    for (int i = 0; i < 4; ++i) o[i] = state_.phi[i] - rest_[i];
    return o;
  }
  void apply(const Vec4& torque) override { torque_ = torque; }
  void advance(double dt) override { state_ = plant_.step(state_, torque_, dt); }

 private:
  plant::Plant plant_;
  plant::PlantState state_;
  Vec4 rest_{};
  Vec4 torque_{};
};

// Transitions go through the wire codec, then straight into the trainer.
class InprocCloud : public CloudIO {
 public:
  InprocCloud(const TrainerSettings& s, std::uint64_t seed) : trainer_(s, seed) {}
  void ship(std::vector<std::uint8_t> bytes) override { pending_.push_back(std::move(bytes)); }
  void process(edge::HotSwap& swap, RunResult& r) override {
    for (const auto& b : pending_) {
      const edge::BufferPacket p = edge::decode_buffer(b.data(), b.size());
      for (const rl::Transition& t : p.transitions)
        for (const auto& w : trainer_.on_transition(t)) {
          ++r.weight_packets;
          swap.receive(w);
        }
    }
    pending_.clear();
  }
  void finish(RunResult& r) override {
    r.composer_events = trainer_.composer().events();
    r.convergence = trainer_.composer().diagnostics();
    r.critic_updates = trainer_.critic_updates();
    r.actor_updates = trainer_.actor_updates();
  }

 private:
  Trainer trainer_;
  std::vector<std::vector<std::uint8_t>> pending_;
};

}  // namespace

RunResult run_loop(const ExperimentConfig& cfg, PlantIO& plant_io, CloudIO* cloud) {
  const auto t_start = std::chrono::steady_clock::now();
  RunResult res;
  MetricsLog& log = res.log;
  log.condition = cfg.condition.label;
  log.algorithm = to_string(cfg.algorithm);
  log.seed = cfg.seed;

  const bool crl = is_crl(cfg.algorithm);
  const double dt = cfg.control_dt;
  const double const_motor = cfg.plant.const_motor;
  const std::uint64_t seg_len = cfg.trainer.composer.L + 1;

  cpg::CommandGenerator gen(cfg.condition.frequency, cpg::default_phases(), cfg.seed, cfg.randomize_amplitude);
  classical::ClassicalController ctrl(classical_kind(cfg.algorithm), crl ? 2 * dt : dt,
                                      2 * M_PI * cfg.condition.frequency);
  edge::EdgePolicy policy(initial_actor(cfg.trainer, cfg.seed));
  edge::HotSwap swap(policy);
  if (cloud) cloud->attach(swap);
  StateBuilder hist;

  std::vector<Vec4> window;
  window.resize(rl::kLookahead);
  rl::StateVec state{}, prev_state{};
  Vec4 prev_action{};
  Vec4 last_action{};
  int prev_mode = 1;
  rl::Source prev_source = rl::Source::Classical;
  std::vector<rl::Transition> outgoing;
  outgoing.reserve(cfg.ship_batch);

  // Error-sum history for the pair monitor.
  std::vector<double> er(cfg.total_steps + 1, 0.0);
  concerto::SafetyMonitor online;
  double seg_reduction = 0.0;
  long seg_classical = 0;

  edge::StageClock clock;
  if (cfg.record_timing) res.timing.reserve(cfg.total_steps);

  auto fail = [&](std::int64_t step, const std::string& why) {
    log.failed = true;
    log.fail_step = step;
    log.fail_reason = why;
  };

  for (std::uint64_t k = 0; k <= cfg.total_steps; ++k) {
    edge::StepTiming timing;
    clock.begin();
    const double t = static_cast<double>(k) * dt;
    const Vec4 obs = plant_io.observe();
    clock.mark(timing, edge::Stage::SensorUnpack);

    const Vec4 desired = gen.at(t);
    Vec4 err;
    for (int i = 0; i < 4; ++i) err[i] = desired[i] - obs[i];
    double er_k = 0.0;
    for (double e : err) er_k += std::abs(e);
    er[k] = er_k;

    // Close out step k-1: its action produced this observation.
    if (k > 0) {
      StepRecord rec;
      rec.step = k - 1;
      rec.t = t;
      rec.error = err;
      rec.reward = rl::reward(err);
      rec.mode = prev_mode;
      rec.source = prev_source;
      const auto verdict = plant::check_safety(obs, desired);
      rec.safety = verdict.violation;
      const Vec4 amp = gen.amplitude_at(t);
      rec.amplitude = (amp[0] + amp[1] + amp[2] + amp[3]) / 4.0;
      log.records.push_back(rec);
      if (crl) {
        if (prev_mode == 1) {
          seg_reduction += (er[k - 1] - er_k) / dt;
          ++seg_classical;
        }
        // Pair: learned step k-2, classical step k-1.
        if (k >= 2 && concerto::select_mode(k - 2) == concerto::Mode::Learned) {
          res.pairs.er_t.push_back(er[k - 2]);
          res.pairs.er_mid.push_back(er[k - 1]);
          res.pairs.er_t2.push_back(er_k);
          if (online.monitor_pair(er[k - 2], er[k - 1], er_k, dt).violation) ++res.online_violations;
        }
      }
      if (verdict.violation) {
        fail(static_cast<std::int64_t>(k - 1),
             std::string("safety: |error| > 90 deg on wing ") + std::to_string(verdict.wing + 1) + " after " +
                 rl::to_string(prev_source) + " action");
        break;
      }
    }
    if (k == cfg.total_steps) break;

    hist.push(obs, last_action);
    gen.window(t, dt, window);
    hist.build(window, state);
    clock.mark(timing, edge::Stage::Shared);

    const concerto::Mode mode = crl ? concerto::select_mode(k) : concerto::Mode::Classical;
    if (crl && k % seg_len == 0) {
      // Perturb the classical capability once per segment, alternating sign.
      const int sign = (k / seg_len) % 2 == 0 ? 1 : -1;
      ctrl.set_gain_scale(1.0 + sign * cfg.trainer.ticp_epsilon);
      if (seg_classical > 0) online.set_pc_class(seg_reduction / static_cast<double>(seg_classical));
      seg_reduction = 0.0;
      seg_classical = 0;
    }

    Vec4 action{};
    rl::Source source = rl::Source::Classical;
    if (mode == concerto::Mode::Classical) {
      if (crl && swap.maintain(mode)) ++res.swaps;
      clock.mark(timing, edge::Stage::WeightLoading);
      const Vec4 torque = ctrl.act(desired, obs, crl ? 2 * dt : dt);
      for (int i = 0; i < 4; ++i) action[i] = std::clamp(torque[i] / const_motor, -1.0, 1.0);
      clock.mark(timing, edge::Stage::Classical);
    } else {
      clock.mark(timing, edge::Stage::StateTensorization);
      float mu[rl::kActionDim];
      policy.infer(state.data(), mu);
      clock.mark(timing, edge::Stage::Inference);
      const rl::Action a = rl::policy_action(state, mu, cfg.trainer.hyper.action_offset_slot);
      for (int i = 0; i < 4; ++i) action[i] = a[i];
      source = rl::Source::Rl;
    }
    const plant::MotorCommand cmd = plant::motor_torques(action, const_motor);
    clock.mark(timing, edge::Stage::ActionDetensorization);

    if (crl) {
      if (k > 0) {
        rl::Transition tr;
        tr.state = prev_state;
        for (int i = 0; i < 4; ++i) {
          tr.action[i] = static_cast<float>(prev_action[i]);
          tr.next_action[i] = static_cast<float>(action[i]);
        }
        tr.reward = static_cast<float>(log.records.back().reward);
        tr.next_state = state;
        tr.source = prev_source;
        tr.step = k - 1;
        outgoing.push_back(tr);
      }
      if (outgoing.size() >= cfg.ship_batch) {
        edge::BufferPacket pkt;
        pkt.step = k;
        pkt.transitions.swap(outgoing);
        cloud->ship(edge::encode_buffer(pkt));
        outgoing.clear();
      }
      clock.mark(timing, edge::Stage::BufferTransmission);
    }

    plant_io.apply(cmd.t_m);
    clock.mark(timing, edge::Stage::ActionTransmission);
    try {
      plant_io.advance(dt);
    } catch (const plant::StepFailure& e) {
      fail(static_cast<std::int64_t>(k), std::string("integrator: ") + e.what());
      break;
    }
    clock.mark(timing, edge::Stage::PlantSimulation);
    if (cfg.record_timing) res.timing.push_back(timing);

    if (crl) cloud->process(swap, res);

    prev_state = state;
    prev_action = action;
    last_action = action;
    prev_mode = static_cast<int>(mode);
    prev_source = source;
  }
  if (crl) cloud->finish(res);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
  return res;
}

RunResult run_experiment(const ExperimentConfig& cfg) {
  InprocPlant plant_io(cfg.plant_for_condition());
  if (!is_crl(cfg.algorithm)) return run_loop(cfg, plant_io, nullptr);
  InprocCloud cloud(cfg.trainer, cfg.seed);
  return run_loop(cfg, plant_io, &cloud);
}

double last_quarter_error(const MetricsLog& log) {
  const std::size_t n = log.records.size();
  if (n == 0) throw std::invalid_argument("last_quarter_error: empty log");
  const std::size_t start = n - std::max<std::size_t>(1, n / 4);
  double s = 0.0;
  for (std::size_t i = start; i < n; ++i) {
    const auto& e = log.records[i].error;
    s += (std::abs(e[0]) + std::abs(e[1]) + std::abs(e[2]) + std::abs(e[3])) / 4.0;
  }
  return s / static_cast<double>(n - start);
}

double compare(double baseline, double crl) {
  if (!(baseline > 0.0)) throw std::invalid_argument("compare: baseline must be positive");
  return 100.0 * (baseline - crl) / baseline;
}

nlohmann::json summary_json(const ExperimentConfig& cfg, const RunResult& r) {
  nlohmann::json j;
  j["config"] = to_json(cfg);
  j["failed"] = r.log.failed;
  j["fail_step"] = r.log.fail_step;
  j["fail_reason"] = r.log.fail_reason;
  j["steps"] = r.log.records.size();
  if (!r.log.records.empty()) {
    const double lq = last_quarter_error(r.log);
    double amp = 0.0;
    const std::size_t n = r.log.records.size(), start = n - std::max<std::size_t>(1, n / 4);
    for (std::size_t i = start; i < n; ++i) amp += r.log.records[i].amplitude;
    amp /= static_cast<double>(n - start);
    j["last_quarter_error_rad"] = lq;
    j["last_quarter_error_fraction_of_amplitude"] = amp > 0 ? lq / amp : 0.0;
  }
  if (is_crl(cfg.algorithm)) {
    const auto lip = measure_lipschitz(r.pairs, cfg.control_dt);
    j["lipschitz"] = {{"pairs", lip.pairs},
                      {"pe_rl_max", lip.pe_rl_max},
                      {"pc_class", lip.pc_class},
                      {"lambda", lip.lambda},
                      {"violations", lip.violations},
                      {"first_violation_step", lip.first_violation < 0 ? -1 : 2 * lip.first_violation + 1},
                      {"last_violation_step", lip.last_violation < 0 ? -1 : 2 * lip.last_violation + 1},
                      {"online_violations", r.online_violations}};
    j["composer_segments"] = r.composer_events.size();
    j["convergence"] = {{"m", r.convergence.m},
                        {"product", r.convergence.product},
                        {"accelerating", r.convergence.accelerating},
                        {"diverging", r.convergence.diverging},
                        {"c", r.convergence.c},
                        {"alpha", r.convergence.alpha}};
    j["weight_packets"] = r.weight_packets;
    j["swaps"] = r.swaps;
    j["critic_updates"] = r.critic_updates;
    j["actor_updates"] = r.actor_updates;
  }
  j["wall_seconds"] = r.seconds;
  return j;
}

void write_outputs(const std::string& dir, const ExperimentConfig& cfg, const RunResult& r) {
  std::filesystem::create_directories(dir);
  const std::filesystem::path d(dir);
  {
    std::ofstream f(d / "metrics.csv");
    r.log.write_csv(f);
  }
  if (!r.composer_events.empty()) {
    std::ofstream f(d / "composer.jsonl");
    for (const auto& e : r.composer_events) concerto::write_event_jsonl(f, e);
  }
  if (!r.timing.empty()) {
    std::ofstream f(d / "timing.csv");
    edge::write_timing_csv(f, edge::summarize(r.timing));
  }
  std::ofstream f(d / "summary.json");
  f << summary_json(cfg, r).dump(2) << '\n';
}

}  // namespace crl::harness
