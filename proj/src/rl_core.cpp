#include "crl/rl_core.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>
#include <stdexcept>

namespace crl::rl {

double reward(const std::array<double, 4>& errors, const RewardSpec& spec) {
  // Summed in ascending order so the result does not depend on wing order.
  std::array<double, 4> a;
  for (int i = 0; i < 4; ++i) a[i] = std::abs(errors[i]);
  std::sort(a.begin(), a.end());
  const double s = ((a[0] + a[1]) + a[2]) + a[3];
  return std::clamp(spec.lambda * s, 0.0, 1.0);
}

const char* to_string(Source s) {
  switch (s) {
    case Source::Classical:
      return "classical";
    case Source::Rl:
      return "rl";
    case Source::Composer:
      return "composer";
  }
  return "?";
}

ReplayBuffer::ReplayBuffer(std::size_t capacity) : capacity_(capacity) {
  if (capacity_ == 0) throw std::invalid_argument("replay capacity must be positive");
  ring_.reserve(capacity_);
}

void ReplayBuffer::push(const Transition& t) {
  std::lock_guard lock(mu_);
  if (ring_.size() < capacity_) {
    ring_.push_back(t);
  } else {
    ring_[head_] = t;
    head_ = (head_ + 1) % capacity_;
  }
  ++inserted_;
}

std::vector<Transition> ReplayBuffer::sample(std::size_t n, Rng& rng) const {
  std::lock_guard lock(mu_);
  const std::size_t size = ring_.size();
  n = std::min(n, size);
  std::vector<std::size_t> idx(size);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::vector<Transition> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(rng.below(size - i));
    std::swap(idx[i], idx[j]);
    out.push_back(ring_[idx[i]]);
  }
  return out;
}

std::size_t ReplayBuffer::size() const {
  std::lock_guard lock(mu_);
  return ring_.size();
}

std::uint64_t ReplayBuffer::inserted() const {
  std::lock_guard lock(mu_);
  return inserted_;
}

std::vector<Transition> ReplayBuffer::snapshot() const {
  std::lock_guard lock(mu_);
  std::vector<Transition> out;
  out.reserve(ring_.size());
  for (std::size_t i = 0; i < ring_.size(); ++i) out.push_back(ring_[(head_ + i) % ring_.size()]);
  return out;
}

void ReplayBuffer::export_jsonl(std::ostream& os) const {
  for (const Transition& t : snapshot()) {
    nlohmann::json j;
    j["step"] = t.step;
    j["source"] = to_string(t.source);
    j["reward"] = t.reward;
    j["state"] = t.state;
    j["action"] = t.action;
    j["next_state"] = t.next_state;
    j["next_action"] = t.next_action;
    os << j.dump() << '\n';
  }
}

nn::Mat<float> critic_inputs(const std::vector<Transition>& batch, bool next) {
  nn::Mat<float> x(kCriticInput, static_cast<Eigen::Index>(batch.size()));
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const StateVec& s = next ? batch[b].next_state : batch[b].state;
    const Action& a = next ? batch[b].next_action : batch[b].action;
    float* col = x.col(static_cast<Eigen::Index>(b)).data();
    std::copy(s.begin(), s.end(), col);
    std::copy(a.begin(), a.end(), col + kStateDim);
  }
  return x;
}

namespace {

Eigen::RowVectorXf td_errors(const nn::NetworkF& critic, const std::vector<Transition>& batch, double gamma,
                             nn::ForwardCache<float>* cache) {
  const nn::Mat<float> q_next = critic.forward_batch(critic_inputs(batch, true));
  const nn::Mat<float> q = critic.forward_batch(critic_inputs(batch, false), cache);
  Eigen::RowVectorXf delta(static_cast<Eigen::Index>(batch.size()));
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto i = static_cast<Eigen::Index>(b);
    delta[i] = static_cast<float>(td_error(batch[b].reward, gamma, q_next(0, i), q(0, i)));
  }
  return delta;
}

}  // namespace

double mean_sq_td(const nn::NetworkF& critic, const std::vector<Transition>& batch, double gamma) {
  if (batch.empty()) return 0.0;
  const Eigen::RowVectorXf d = td_errors(critic, batch, gamma, nullptr);
  return static_cast<double>(d.squaredNorm()) / static_cast<double>(batch.size());
}

CriticStats critic_update(nn::NetworkF& critic, nn::Lion<float>& opt, const std::vector<Transition>& batch,
                          const TrainerHyper& hyper) {
  CriticStats stats;
  stats.batch = batch.size();
  if (batch.empty()) return stats;
  nn::ForwardCache<float> cache;
  const Eigen::RowVectorXf delta = td_errors(critic, batch, hyper.gamma, &cache);
  stats.mean_sq_td = static_cast<double>(delta.squaredNorm()) / static_cast<double>(batch.size());
  // d(0.5 delta^2)/dQ = -delta with the bootstrap target held fixed.
  const nn::Mat<float> dy = -delta / static_cast<float>(batch.size());
  const nn::Gradients<float> g = critic.backward(cache, dy);
  opt.step(critic, g, hyper.alpha_critic);
  return stats;
}

Action policy_action(const StateVec& s, const float* mu, int offset_slot) {
  Action a;
  for (int i = 0; i < kActionDim; ++i)
    a[i] = offset_slot < 0 ? mu[i] : std::clamp(s[offset_slot + i] + mu[i], -1.0f, 1.0f);
  return a;
}

nn::Gradients<float> actor_gradient(const nn::NetworkF& actor, const nn::NetworkF& critic,
                                    const std::vector<Transition>& batch, int offset_slot) {
  const auto n = static_cast<Eigen::Index>(batch.size());
  nn::Mat<float> s(kStateDim, n);
  for (Eigen::Index b = 0; b < n; ++b)
    std::copy(batch[b].state.begin(), batch[b].state.end(), s.col(b).data());

  nn::ForwardCache<float> actor_cache;
  const nn::Mat<float> mu = actor.forward_batch(s, &actor_cache);
  nn::Mat<float> x(kCriticInput, n);
  x.topRows(kStateDim) = s;
  // Offset policies pass no gradient through coordinates held at the clip.
  nn::Mat<float> pass = nn::Mat<float>::Ones(kActionDim, n);
  for (Eigen::Index b = 0; b < n; ++b) {
    const Action a = policy_action(batch[b].state, mu.col(b).data(), offset_slot);
    for (int i = 0; i < kActionDim; ++i) {
      x(kStateDim + i, b) = a[i];
      if (offset_slot >= 0 && std::abs(a[i]) >= 1.0f) pass(i, b) = 0.0f;
    }
  }

  nn::ForwardCache<float> critic_cache;
  critic.forward_batch(x, &critic_cache);
  nn::Mat<float> dx;
  critic.backward(critic_cache, nn::Mat<float>::Constant(1, n, 1.0f / static_cast<float>(n)), &dx);
  const nn::Mat<float> da = dx.bottomRows(kActionDim).cwiseProduct(pass);
  return actor.backward(actor_cache, da);
}

std::vector<double> actor_update(nn::NetworkF& actor, nn::Lion<float>& opt, const nn::NetworkF& critic,
                                 const std::vector<Transition>& batch, const TrainerHyper& hyper) {
  std::vector<double> before = actor.flatten();
  if (batch.empty() || hyper.alpha_actor == 0.0) return std::vector<double>(before.size(), 0.0);
  const nn::Gradients<float> g = actor_gradient(actor, critic, batch, hyper.action_offset_slot);
  opt.step(actor, g, hyper.alpha_actor);
  const std::vector<double> after = actor.flatten();
  for (std::size_t i = 0; i < before.size(); ++i) before[i] = after[i] - before[i];
  return before;
}

double estimate_qbar(std::span<const double> rewards, double gamma_bar) {
  if (!(gamma_bar > 0.0 && gamma_bar < 1.0)) throw std::invalid_argument("gamma_bar must lie in (0, 1)");
  if (rewards.empty()) throw std::invalid_argument("estimate_qbar: empty window");
  double s = 0.0;
  for (double r : rewards) s += r;
  return (s / static_cast<double>(rewards.size())) / (1.0 - gamma_bar);
}

double estimate_delta_q(double rbar_before, double rbar_after, double gamma_bar) {
  if (!(gamma_bar > 0.0 && gamma_bar < 1.0)) throw std::invalid_argument("gamma_bar must lie in (0, 1)");
  // Same rounding as two estimate_qbar calls, so the difference matches bit for bit.
  return rbar_after / (1.0 - gamma_bar) - rbar_before / (1.0 - gamma_bar);
}

}  // namespace crl::rl
