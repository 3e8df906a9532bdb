#pragma once

// Actor-critic trained in latent imagination on top of a world model.

#include <cstdint>
#include <string>
#include <vector>

#include "rama/rssm.hpp"

namespace rama {

struct AgentConfig {
  int action_dim = 1;
  int feature_dim = 80;
  int hidden = 128;
  int horizon = 15;
  double gamma = 0.99;
  double lambda = 0.95;
  double actor_lr = 8e-5;
  double critic_lr = 8e-5;
  double grad_clip = 100.0;
  double explore_std = 0.3;
  double min_std = 1e-4;
  double mean_scale = 5.0;
};

/// G_t = r_t + gamma * ((1 - lambda) * v_{t+1} + lambda * G_{t+1}), G_H = v_H.
inline std::vector<double> lambda_returns(const std::vector<double>& rewards, const std::vector<double>& values,
                                          double gamma, double lambda) {
  if (values.size() != rewards.size() + 1) throw UsageError("lambda_returns: need one more value than rewards");
  if (gamma < 0 || gamma > 1 || lambda < 0 || lambda > 1) throw UsageError("lambda_returns: gamma and lambda must lie in [0,1]");
  const std::size_t H = rewards.size();
  std::vector<double> out(H);
  double next = values[H];
  for (std::size_t k = H; k-- > 0;) {
    next = rewards[k] + gamma * ((1.0 - lambda) * values[k + 1] + lambda * next);
    out[k] = next;
  }
  return out;
}

/// Batched form over Vars (each n x 1).
template <class T>
std::vector<Var<T>> lambda_returns(const std::vector<Var<T>>& rewards, const std::vector<Var<T>>& values, double gamma,
                                   double lambda) {
  if (values.size() != rewards.size() + 1) throw UsageError("lambda_returns: need one more value than rewards");
  if (gamma < 0 || gamma > 1 || lambda < 0 || lambda > 1) throw UsageError("lambda_returns: gamma and lambda must lie in [0,1]");
  const std::size_t H = rewards.size();
  std::vector<Var<T>> out(H);
  Var<T> next = values[H];
  const T g = static_cast<T>(gamma), l = static_cast<T>(lambda);
  for (std::size_t k = H; k-- > 0;) {
    const Var<T> mix = ad::add(ad::scale(values[k + 1], (T(1) - l)), ad::scale(next, l));
    next = ad::add(rewards[k], ad::scale(mix, g));
    out[k] = next;
  }
  return out;
}

template <class T>
struct ImaginedRollout {
  std::vector<LatentState<T>> states;  // h + 1
  std::vector<Var<T>> actions;         // h
  std::vector<Var<T>> rewards;         // h, each n x 1
  std::vector<Var<T>> values;          // h + 1, each n x 1
  std::vector<Var<T>> returns;         // h, each n x 1

  int horizon() const { return static_cast<int>(actions.size()); }
};

struct ActorCriticReport {
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double mean_return = 0.0;
};

template <class T>
class ActorCritic {
 public:
  ActorCritic(const AgentConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed, 0xAC7);
    const int H = cfg.hidden;
    policy_ = nn::Mlp<T>(actor_params_, "actor.policy", cfg.feature_dim, {H, H}, 2 * cfg.action_dim, rng);
    value_ = nn::Mlp<T>(value_params_, "critic.value", cfg.feature_dim, {H, H}, 1, rng);
  }

  ActorCritic(const ActorCritic&) = delete;
  ActorCritic& operator=(const ActorCritic&) = delete;
  ActorCritic(ActorCritic&&) = default;
  ActorCritic& operator=(ActorCritic&&) = default;

  const AgentConfig& config() const { return cfg_; }
  nn::ParameterStore<T>& actor_parameters() { return actor_params_; }
  nn::ParameterStore<T>& value_parameters() { return value_params_; }
  const nn::ParameterStore<T>& actor_parameters() const { return actor_params_; }
  const nn::ParameterStore<T>& value_parameters() const { return value_params_; }

  /// Reparameterized tanh-squashed Gaussian sample; always inside [-1, 1].
  Var<T> sample_action(const Var<T>& features, Rng& rng) const {
    auto [mean, std] = policy_stats(features);
    const Var<T> eps = Var<T>::constant(rng.normal_matrix<T>(mean.rows(), mean.cols()));
    return ad::tanh(ad::add(mean, ad::mul(std, eps)));
  }

  Var<T> mode_action(const Var<T>& features) const { return ad::tanh(policy_stats(features).first); }

  Var<T> value(const Var<T>& features) const { return value_(features); }

  ImaginedRollout<T> imagine(const WorldModel<T>& world, const LatentState<T>& start, int horizon, Rng& rng) const {
    if (horizon < 1) throw UsageError("imagine: horizon must be >= 1");
    if (!start.finite()) throw NumericError("imagine: non-finite start state");
    ImaginedRollout<T> r;
    r.states.push_back(start);
    r.values.push_back(value_(start.features()));
    for (int t = 0; t < horizon; ++t) {
      const LatentState<T>& s = r.states.back();
      Var<T> action = sample_action(ad::detach(s.features()), rng);
      LatentState<T> next;
      try {
        next = world.prior_step(s, action, rng);
      } catch (const NumericError& e) {
        throw NumericError("imagine: step " + std::to_string(t) + ": " + e.what());
      }
      r.actions.push_back(action);
      r.rewards.push_back(world.predict_reward(next));
      r.values.push_back(value_(next.features()));
      r.states.push_back(std::move(next));
      if (!r.rewards.back().value().allFinite() || !r.values.back().value().allFinite())
        throw NumericError("imagine: non-finite reward or value at step " + std::to_string(t));
    }
    r.returns = lambda_returns(r.rewards, r.values, cfg_.gamma, cfg_.lambda);
    return r;
  }

  /// -mean over batch and steps of the lambda-returns.
  static Var<T> actor_loss(const ImaginedRollout<T>& r) {
    return ad::neg(ad::mean(ad::concat_rows(r.returns)));
  }

  /// Sum over imagination steps of the lambda-returns, averaged over the batch, negated.
  static Var<T> summed_return_loss(const ImaginedRollout<T>& r) {
    const Var<T> all = ad::concat_rows(r.returns);
    const auto n = r.returns.front().rows();
    return ad::scale(ad::sum(all), static_cast<T>(-1) / static_cast<T>(n));
  }

  /// Mean squared error of value predictions on detached states against detached returns.
  Var<T> critic_loss(const ImaginedRollout<T>& r) const {
    std::vector<Var<T>> feats;
    for (int t = 0; t < r.horizon(); ++t) feats.push_back(ad::detach(r.states[t].features()));
    const Var<T> pred = value_(ad::concat_rows(feats));
    const Var<T> target = ad::detach(ad::concat_rows(r.returns));
    return ad::mean(ad::square(ad::sub(pred, target)));
  }

  /// Posterior update then a policy sample with additive exploration noise, clamped to [-1, 1].
  std::pair<Matrix<T>, LatentState<T>> act(const WorldModel<T>& world, const LatentState<T>& carry,
                                           const Matrix<T>& prev_action, const Matrix<T>& obs, double explore_std,
                                           Rng& rng, bool greedy = false) const {
    ad::NoGradGuard guard;
    LatentState<T> next = world.posterior_step(carry, Var<T>::constant(prev_action), Var<T>::constant(obs), rng);
    Matrix<T> a = greedy ? mode_action(next.features()).value() : sample_action(next.features(), rng).value();
    if (explore_std > 0) a += static_cast<T>(explore_std) * rng.normal_matrix<T>(a.rows(), a.cols());
    a = a.cwiseMax(T(-1)).cwiseMin(T(1));
    return {a, next};
  }

 private:
  std::pair<Var<T>, Var<T>> policy_stats(const Var<T>& features) const {
    const Var<T> raw = policy_(features);
    const int A = cfg_.action_dim;
    const T ms = static_cast<T>(cfg_.mean_scale);
    Var<T> mean = ad::scale(ad::tanh(ad::scale(ad::slice_cols(raw, 0, A), T(1) / ms)), ms);
    Var<T> std = ad::add_scalar(ad::softplus(ad::slice_cols(raw, A, A)), static_cast<T>(cfg_.min_std));
    return {mean, std};
  }

  AgentConfig cfg_;
  nn::ParameterStore<T> actor_params_, value_params_;
  nn::Mlp<T> policy_, value_;
};

/// Optimizers for actor and critic; each stage freezes everything it must not update.
template <class T>
class ActorCriticTrainer {
 public:
  ActorCriticTrainer(WorldModel<T>& world, ActorCritic<T>& ac)
      : world_(world),
        ac_(ac),
        actor_opt_(ac.actor_parameters().vars(), {ac.config().actor_lr, 0.9, 0.999, 1e-8, ac.config().grad_clip}),
        critic_opt_(ac.value_parameters().vars(), {ac.config().critic_lr, 0.9, 0.999, 1e-8, ac.config().grad_clip}) {}

  ActorCriticReport step(const LatentState<T>& start, Rng& rng) {
    ActorCriticReport rep;
    const LatentState<T> s0 = start.detached();
    ImaginedRollout<T> roll;
    {
      nn::FreezeGuard<T> fw(world_.parameters());
      nn::FreezeGuard<T> fv(ac_.value_parameters());
      ac_.actor_parameters().zero_grad();
      roll = ac_.imagine(world_, s0, ac_.config().horizon, rng);
      const Var<T> loss = ActorCritic<T>::actor_loss(roll);
      rep.actor_loss = static_cast<double>(loss.item());
      rep.mean_return = -rep.actor_loss;
      if (!std::isfinite(rep.actor_loss)) throw NumericError("actor loss is not finite");
      loss.backward();
      actor_opt_.step();
    }
    {
      nn::FreezeGuard<T> fw(world_.parameters());
      nn::FreezeGuard<T> fa(ac_.actor_parameters());
      ac_.value_parameters().zero_grad();
      const Var<T> loss = ac_.critic_loss(roll);
      rep.critic_loss = static_cast<double>(loss.item());
      if (!std::isfinite(rep.critic_loss)) throw NumericError("critic loss is not finite");
      loss.backward();
      critic_opt_.step();
    }
    return rep;
  }

  nn::Adam<T>& actor_optimizer() { return actor_opt_; }
  nn::Adam<T>& critic_optimizer() { return critic_opt_; }

 private:
  WorldModel<T>& world_;
  ActorCritic<T>& ac_;
  nn::Adam<T> actor_opt_, critic_opt_;
};

}  // namespace rama
