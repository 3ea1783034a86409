#pragma once

// Experiment orchestration: the closed control loop (in one process or split
// across plant / edge / cloud processes), metrics, last-quarter comparison
// and the timing benchmark.

#include "crl/classical.hpp"
#include "crl/concerto.hpp"
#include "crl/cpg.hpp"
#include "crl/edgelink.hpp"
#include "crl/neural.hpp"
#include "crl/plant.hpp"
#include "crl/rl_core.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <deque>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

namespace crl::harness {

using Vec4 = std::array<double, 4>;

enum class Algorithm { Pid2000, Apid2000, Mrac2000, CrlPid, CrlApid, CrlMrac };
const char* to_string(Algorithm a);
Algorithm parse_algorithm(const std::string& s);
bool is_crl(Algorithm a);
classical::Kind classical_kind(Algorithm a);
std::vector<Algorithm> all_algorithms();

// Rolling (observation, action) history feeding the 80-slot state.
class StateBuilder {
 public:
  static constexpr int kDepth = rl::kHistory;

  void reset();
  // Newest pair: observation at this step and the action in force while it was measured.
  void push(const Vec4& obs, const Vec4& action);
  // window must hold exactly kLookahead command vectors.
  void build(const std::vector<Vec4>& window, rl::StateVec& out) const;
  int depth() const { return count_; }

 private:
  std::array<std::array<float, 8>, kDepth> ring_{};
  int head_ = 0;  // next write slot
  int count_ = 0;
};

// history oldest first (at most 8 pairs are used, the newest ones).
rl::StateVec build_state(const std::vector<std::pair<Vec4, Vec4>>& history, const std::vector<Vec4>& window);

// Learning rates, update cadence and action form used by the experiments.
// The plain rl::TrainerHyper defaults are the reference values; at those
// Lion rates the critic does not fit the cost.
inline rl::TrainerHyper experiment_hyper() {
  rl::TrainerHyper h;
  h.alpha_actor = 5e-6;
  h.alpha_critic = 3e-5;
  h.critic_interval = 4;
  h.actor_interval = 4;
  h.action_offset_slot = rl::kPrevActionSlot;
  return h;
}

struct TrainerSettings {
  rl::TrainerHyper hyper = experiment_hyper();
  concerto::ComposerConfig composer;
  int actor_hidden = 128;
  int critic_hidden = 256;
  int critic_hidden_layers = 5;
  std::size_t replay_capacity = 2000;
  // Actor weights are published to the edge at most this often (steps), and
  // always after a composer decision that changed them.
  std::uint64_t publish_interval = 20;
  double ticp_epsilon = 0.05;
  bool composer_enabled = true;
  // Scales the Xavier draw of the actor's output layer.
  double actor_output_gain = 0.1;
};

struct ExperimentConfig {
  cpg::ConditionSpec condition = cpg::make_condition(1, 20.0);
  Algorithm algorithm = Algorithm::Pid2000;
  std::uint64_t seed = 1;
  std::uint64_t total_steps = 100000;
  double control_dt = 5e-4;
  plant::PlantParams plant;
  TrainerSettings trainer;
  // Transitions are shipped to the trainer in batches of this size.
  std::size_t ship_batch = 16;
  bool record_timing = false;
  bool randomize_amplitude = true;
  std::string out_dir;  // empty: no files written
  // Split mode endpoints.
  std::string host = "127.0.0.1";
  int plant_port = 0;
  int cloud_port = 0;

  // Applies the condition to the plant: spring bank, load frequency, yaw.
  plant::PlantParams plant_for_condition() const;
};

nlohmann::json to_json(const ExperimentConfig& cfg);
// Starts from defaults; every key present overrides.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::string& path);

struct StepRecord {
  std::uint64_t step = 0;
  double t = 0.0;
  Vec4 error{};  // rad, after the step's action was applied
  double reward = 0.0;
  int mode = 1;
  rl::Source source = rl::Source::Classical;
  bool safety = false;
  double amplitude = 0.0;  // mean commanded amplitude, rad
};

struct MetricsLog {
  std::string condition;
  std::string algorithm;
  std::uint64_t seed = 0;
  bool failed = false;
  std::int64_t fail_step = -1;
  std::string fail_reason;
  std::vector<StepRecord> records;

  void write_csv(std::ostream& os) const;
  static MetricsLog read_csv(std::istream& is);
};

// Per-pair Lipschitz bookkeeping: learned step followed by a classical step.
struct PairLog {
  std::vector<double> er_t, er_mid, er_t2;
  std::size_t size() const { return er_t.size(); }
};

struct LipschitzReport {
  std::size_t pairs = 0;
  double pe_rl_max = 0.0;
  double pc_class = 0.0;
  double lambda = 0.0;
  std::size_t violations = 0;
  // Pair indices; pair i starts at learned step 2i + 1. -1 when clean.
  std::int64_t first_violation = -1;
  std::int64_t last_violation = -1;
};

// lambda measured post hoc from the run: PE_rl,max over learned half-steps and
// the mean classical reduction rate over classical half-steps.
LipschitzReport measure_lipschitz(const PairLog& pairs, double dt);

struct RunResult {
  MetricsLog log;
  std::vector<concerto::ComposerEvent> composer_events;
  concerto::ConvergenceReport convergence;
  PairLog pairs;
  long online_violations = 0;  // online monitor, capability = mean Mode-1 reduction over the last segment
  std::vector<edge::StepTiming> timing;
  std::uint64_t weight_packets = 0;
  std::uint64_t swaps = 0;
  std::uint64_t critic_updates = 0;
  std::uint64_t actor_updates = 0;
  double seconds = 0.0;
};

// Cloud side: replay buffer, critic/actor training, composer. Fed one
// transition at a time in step order; returns encoded weight packets to send.
class Trainer {
 public:
  Trainer(const TrainerSettings& s, std::uint64_t seed);

  std::vector<std::vector<std::uint8_t>> on_transition(const rl::Transition& t);
  // Segment count changes at every composer decision; the edge uses it for TICP.
  long segments() const { return composer_.segments(); }
  const concerto::Composer& composer() const { return composer_; }
  const nn::NetworkF& actor() const { return actor_; }
  const nn::NetworkF& critic() const { return critic_; }
  std::uint64_t critic_updates() const { return critic_updates_; }
  std::uint64_t actor_updates() const { return actor_updates_; }
  std::vector<std::uint8_t> publish();

 private:
  TrainerSettings s_;
  Rng rng_;
  nn::NetworkF actor_, critic_;
  nn::Lion<float> actor_opt_, critic_opt_;
  rl::ReplayBuffer buffer_;
  concerto::Composer composer_;
  std::uint32_t seq_ = 0;
  std::uint64_t last_publish_ = 0;
  bool dirty_ = false;
  std::uint64_t critic_updates_ = 0, actor_updates_ = 0;
};

// Initial actor for a given seed (the edge and the trainer must agree).
nn::NetworkF initial_actor(const TrainerSettings& s, std::uint64_t seed);

// Single process, single thread, deterministic.
RunResult run_experiment(const ExperimentConfig& cfg);

// Writes metrics.csv, composer.jsonl, timing.csv (if recorded) and summary.json into dir.
void write_outputs(const std::string& dir, const ExperimentConfig& cfg, const RunResult& r);
nlohmann::json summary_json(const ExperimentConfig& cfg, const RunResult& r);

// Mean over the final 25% of steps of the per-step mean |error|.
double last_quarter_error(const MetricsLog& log);
// 100 * (baseline - crl) / baseline.
double compare(double baseline, double crl);

struct BenchConfig {
  std::uint64_t steps = 20000;
  std::uint64_t warmup = 1000;
  std::uint64_t seed = 1;
  // A new weight packet arrives every this many steps.
  std::uint64_t packet_interval = 100;
  // Send actions and buffers over loopback TCP instead of encoding only.
  bool split = false;
  std::size_t ship_batch = 16;
  int offset_slot = experiment_hyper().action_offset_slot;
};

struct BenchResult {
  edge::TimingSummary matrix;
  edge::TimingSummary naive;
  double ratio = 0.0;  // naive mean / matrix mean, algorithm totals
};

// Edge loop against a scripted sensor source, matrix path and naive path on identical inputs.
BenchResult bench_timing(const BenchConfig& cfg);
void write_bench_report(std::ostream& os, const BenchResult& r);

// Split deployment. Each function is the body of one process.
// on_listen receives the bound port before the server blocks in accept.
using ListenCallback = std::function<void(int)>;
int serve_plant(const ExperimentConfig& cfg, int port, const ListenCallback& on_listen = {});
int serve_cloud(const ExperimentConfig& cfg, int port, const ListenCallback& on_listen = {});
RunResult run_edge(const ExperimentConfig& cfg);

}  // namespace crl::harness
