#pragma once

// Reward, replay buffer, Sarsa critic / deterministic actor updates and the
// averaged-reward Q estimator used by the composer.

#include "crl/neural.hpp"
#include "crl/rng.hpp"

#include <array>
#include <cstdint>
#include <iosfwd>
#include <mutex>
#include <span>
#include <vector>

namespace crl::rl {

inline constexpr int kHistory = 8;  // M + 1 past (observation, action) pairs
inline constexpr int kLookahead = 4;  // H + 1 command vectors
inline constexpr int kActionDim = 4;
inline constexpr int kStateDim = kHistory * 8 + kLookahead * 4;  // 80
inline constexpr int kCriticInput = kStateDim + kActionDim;  // 84
// Newest history slot's action entries: the action applied on the previous step.
inline constexpr int kPrevActionSlot = (kHistory - 1) * 8 + 4;  // 60

using StateVec = std::array<float, kStateDim>;
using Action = std::array<float, kActionDim>;

struct RewardSpec {
  double lambda = 1.0 / (2.0 * 3.14159265358979323846);  // 1/rad
};

// lambda * sum |e_i|, clamped to [0, 1]; a cost, lower is better.
double reward(const std::array<double, 4>& errors, const RewardSpec& spec = {});

enum class Source : std::uint8_t { Classical = 0, Rl = 1, Composer = 2 };
const char* to_string(Source s);

struct Transition {
  StateVec state{};
  Action action{};
  float reward = 0.0f;
  StateVec next_state{};
  Action next_action{};
  Source source = Source::Classical;
  std::uint64_t step = 0;
};

// Fixed-capacity FIFO ring. push() and sample() are mutually excluded so one
// ingestion thread and one trainer thread can share it.
class ReplayBuffer {
 public:
  explicit ReplayBuffer(std::size_t capacity = 2000);

  void push(const Transition& t);
  // Uniform without replacement; returns min(n, size()) transitions.
  std::vector<Transition> sample(std::size_t n, Rng& rng) const;
  std::size_t size() const;
  std::size_t capacity() const { return capacity_; }
  std::uint64_t inserted() const;
  // Oldest first.
  std::vector<Transition> snapshot() const;
  void export_jsonl(std::ostream& os) const;

 private:
  std::size_t capacity_;
  mutable std::mutex mu_;
  std::vector<Transition> ring_;
  std::size_t head_ = 0;
  std::uint64_t inserted_ = 0;
};

struct TrainerHyper {
  double gamma = 0.9;
  double alpha_actor = 0.015;
  double alpha_critic = 0.0015;
  std::size_t critic_batch = 512;
  std::size_t policy_batch = 16;
  std::uint64_t warmup = 10;
  // Updates run on steps where (step - warmup) % interval == 0.
  std::uint64_t critic_interval = 1;
  std::uint64_t actor_interval = 1;
  nn::LionConfig actor_opt{};
  nn::LionConfig critic_opt{};
  // When >= 0 the policy acts relative to the state entries at this offset:
  // action = clip(s[slot..slot+3] + mu(s), -1, 1).
  int action_offset_slot = -1;
};

// The action a policy with the given offset slot emits for state s and network output mu.
Action policy_action(const StateVec& s, const float* mu, int offset_slot);

// r + gamma * q_next - q
inline double td_error(double r, double gamma, double q_next, double q) { return r + gamma * q_next - q; }

struct CriticStats {
  double mean_sq_td = 0.0;
  std::size_t batch = 0;
};

// Critic input column: state followed by action.
nn::Mat<float> critic_inputs(const std::vector<Transition>& batch, bool next);

// Semi-gradient Sarsa step w += alpha * mean(delta * grad Q), realised through
// Lion (the optimizer receives -mean(delta * grad Q)).
CriticStats critic_update(nn::NetworkF& critic, nn::Lion<float>& opt, const std::vector<Transition>& batch,
                          const TrainerHyper& hyper);

// Mean squared TD error of the batch under the current critic.
double mean_sq_td(const nn::NetworkF& critic, const std::vector<Transition>& batch, double gamma);

// Descends Q(s, mu(s)) in the actor parameters; returns the applied change
// (flattened, same layout as Network::flatten).
std::vector<double> actor_update(nn::NetworkF& actor, nn::Lion<float>& opt, const nn::NetworkF& critic,
                                 const std::vector<Transition>& batch, const TrainerHyper& hyper);

// Gradient of mean_b Q(s_b, mu(s_b)) with respect to the actor parameters.
nn::Gradients<float> actor_gradient(const nn::NetworkF& actor, const nn::NetworkF& critic,
                                    const std::vector<Transition>& batch, int offset_slot = -1);

// mean(rewards) / (1 - gamma_bar)
double estimate_qbar(std::span<const double> rewards, double gamma_bar);
// (rbar_after - rbar_before) / (1 - gamma_bar)
double estimate_delta_q(double rbar_before, double rbar_after, double gamma_bar);

}  // namespace crl::rl
