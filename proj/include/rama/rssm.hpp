#pragma once

// Recurrent state-space world model: a shared recurrent core feeding a prior
// (transition) head and a posterior (representation) head, plus observation and
// reward decoders. Trained on action-conditioned chunks by the sequence ELBO.

#include <cstdint>
#include <string>
#include <vector>

#include "rama/autodiff.hpp"
#include "rama/envs.hpp"
#include "rama/episode_store.hpp"
#include "rama/nn.hpp"
#include "rama/rng.hpp"

namespace rama {

using ad::Matrix;
using ad::Var;

struct WorldModelConfig {
  int action_dim = 1;
  ObsSpec obs = ObsSpec::vector(2);
  int deter = 64;
  int stoch = 16;
  int hidden = 128;
  std::pair<int, int> conv_depths{16, 32};
  double min_std = 1e-4;
  double free_nats = 3.0;
  double kl_scale = 1.0;
};

/// Markovian latent state for a batch (one row per sequence).
template <class T>
struct LatentState {
  Var<T> deter;  // recurrent carry
  Var<T> stoch;  // sample
  Var<T> mean;
  Var<T> std;

  Eigen::Index batch() const { return deter.rows(); }
  Var<T> features() const { return ad::concat_cols<T>({deter, stoch}); }

  LatentState detached() const { return {ad::detach(deter), ad::detach(stoch), ad::detach(mean), ad::detach(std)}; }

  bool finite() const {
    return deter.value().allFinite() && stoch.value().allFinite() && mean.value().allFinite() && std.value().allFinite();
  }
};

/// Row-wise concatenation of several batched states.
template <class T>
LatentState<T> stack_states(const std::vector<LatentState<T>>& states) {
  std::vector<Var<T>> d, s, m, sd;
  for (const auto& st : states) {
    d.push_back(st.deter);
    s.push_back(st.stoch);
    m.push_back(st.mean);
    sd.push_back(st.std);
  }
  return {ad::concat_rows(d), ad::concat_rows(s), ad::concat_rows(m), ad::concat_rows(sd)};
}

/// L time steps for a batch of n sequences.
template <class T>
struct SequenceBatch {
  std::vector<Var<T>> actions;       // per step: n x action_dim
  std::vector<Var<T>> observations;  // per step: n x obs_dim
  Matrix<T> rewards;                 // n x L

  int length() const { return static_cast<int>(actions.size()); }
  Eigen::Index batch() const { return rewards.rows(); }

  static SequenceBatch from_chunks(const std::vector<Chunk>& chunks) {
    if (chunks.empty()) throw UsageError("empty chunk batch");
    const int L = chunks.front().length;
    const auto n = static_cast<Eigen::Index>(chunks.size());
    const int A = chunks.front().episode->action_dim();
    const int O = chunks.front().episode->obs_dim();
    SequenceBatch b;
    b.rewards.resize(n, L);
    std::vector<Matrix<T>> acts(static_cast<std::size_t>(L), Matrix<T>(n, A));
    std::vector<Matrix<T>> obs(static_cast<std::size_t>(L), Matrix<T>(n, O));
    for (Eigen::Index i = 0; i < n; ++i) {
      const Chunk& c = chunks[static_cast<std::size_t>(i)];
      if (c.length != L) throw UsageError("chunks in a batch must share one length");
      if (c.episode->action_dim() != A || c.episode->obs_dim() != O) throw UsageError("chunks in a batch must share shapes");
      for (int t = 0; t < L; ++t) {
        acts[t].row(i) = c.episode->actions.row(c.start + t).template cast<T>();
        obs[t].row(i) = c.episode->observations.row(c.start + t).template cast<T>();
        b.rewards(i, t) = static_cast<T>(c.episode->rewards(c.start + t));
      }
    }
    for (int t = 0; t < L; ++t) {
      b.actions.push_back(Var<T>::constant(std::move(acts[t])));
      b.observations.push_back(Var<T>::constant(std::move(obs[t])));
    }
    return b;
  }

  /// Builds a batch from flattened rows (n x L*A, n x L*O) such as a differentiable
  /// selection of stacked chunks.
  static SequenceBatch from_flat(const Var<T>& actions, const Var<T>& observations, Matrix<T> rewards, int L) {
    SequenceBatch b;
    const auto A = actions.cols() / L;
    const auto O = observations.cols() / L;
    for (int t = 0; t < L; ++t) {
      b.actions.push_back(ad::slice_cols(actions, t * A, A));
      b.observations.push_back(ad::slice_cols(observations, t * O, O));
    }
    b.rewards = std::move(rewards);
    return b;
  }
};

/// Chunks flattened row-wise: actions (n x L*A), observations (n x L*O), rewards (n x L).
template <class T>
struct FlatChunks {
  Matrix<T> actions, observations, rewards;
  int length = 0;

  static FlatChunks from_chunks(const std::vector<Chunk>& chunks) {
    if (chunks.empty()) throw UsageError("empty chunk batch");
    FlatChunks f;
    f.length = chunks.front().length;
    const int L = f.length;
    const auto n = static_cast<Eigen::Index>(chunks.size());
    const int A = chunks.front().episode->action_dim();
    const int O = chunks.front().episode->obs_dim();
    f.actions.resize(n, L * A);
    f.observations.resize(n, L * O);
    f.rewards.resize(n, L);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Chunk& c = chunks[static_cast<std::size_t>(i)];
      if (c.length != L) throw UsageError("chunks in a batch must share one length");
      for (int t = 0; t < L; ++t) {
        f.actions.row(i).segment(t * A, A) = c.episode->actions.row(c.start + t).template cast<T>();
        f.observations.row(i).segment(t * O, O) = c.episode->observations.row(c.start + t).template cast<T>();
        f.rewards(i, t) = static_cast<T>(c.episode->rewards(c.start + t));
      }
    }
    return f;
  }
};

struct StepLoss {
  double reconstruction = 0.0;
  double reward_nll = 0.0;
  double kl = 0.0;
};

struct SequenceLossReport {
  double total = 0.0;
  double reconstruction = 0.0;
  double reward_nll = 0.0;
  double kl = 0.0;      // KL term as it enters the loss (after the free-nats floor)
  double kl_raw = 0.0;  // mean KL before the floor
  std::vector<StepLoss> per_step;
};

template <class T>
struct ObserveResult {
  std::vector<LatentState<T>> states;  // posterior state per step
  Var<T> loss;
  SequenceLossReport report;
};

template <class T>
struct PosteriorRollout {
  std::vector<LatentState<T>> posterior;
  std::vector<Var<T>> prior_mean, prior_std;
};

template <class T>
class WorldModel {
 public:
  WorldModel(const WorldModelConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed, 0x3011D);
    const int H = cfg.hidden;
    if (cfg.obs.mode == ObsMode::Pixels) {
      conv_ = nn::ConvEncoder<T>(params_, "world.encoder", cfg.obs.channels, cfg.obs.height, cfg.obs.width,
                                 cfg.conv_depths, rng);
      embed_dim_ = conv_.out();
    } else {
      mlp_encoder_ = nn::Mlp<T>(params_, "world.encoder", cfg.obs.dim, {H}, H, rng);
      embed_dim_ = H;
    }
    core_in_ = nn::Linear<T>(params_, "world.core_in", cfg.stoch + cfg.action_dim, H, rng);
    gru_ = nn::GruCell<T>(params_, "world.gru", H, cfg.deter, rng);
    prior_ = nn::Mlp<T>(params_, "world.prior", cfg.deter, {H}, 2 * cfg.stoch, rng);
    posterior_ = nn::Mlp<T>(params_, "world.posterior", cfg.deter + embed_dim_, {H}, 2 * cfg.stoch, rng);
    decoder_ = nn::Mlp<T>(params_, "world.decoder", feature_dim(), {H, H}, cfg.obs.dim, rng);
    reward_ = nn::Mlp<T>(params_, "world.reward", feature_dim(), {H}, 1, rng);
  }

  WorldModel(const WorldModel&) = delete;
  WorldModel& operator=(const WorldModel&) = delete;
  WorldModel(WorldModel&&) = default;
  WorldModel& operator=(WorldModel&&) = default;

  const WorldModelConfig& config() const { return cfg_; }
  int feature_dim() const { return cfg_.deter + cfg_.stoch; }
  nn::ParameterStore<T>& parameters() { return params_; }
  const nn::ParameterStore<T>& parameters() const { return params_; }
  std::vector<Var<T>> reward_head_parameters() const { return params_.vars_with_prefix("world.reward"); }

  /// Test hook: when set, the posterior head reports the prior's statistics.
  void tie_posterior_to_prior(bool on) { tie_posterior_ = on; }

  LatentState<T> initial_state(Eigen::Index batch) const {
    if (batch < 1) throw UsageError("initial_state needs batch >= 1");
    return {Var<T>::constant(Matrix<T>::Zero(batch, cfg_.deter)), Var<T>::constant(Matrix<T>::Zero(batch, cfg_.stoch)),
            Var<T>::constant(Matrix<T>::Zero(batch, cfg_.stoch)), Var<T>::constant(Matrix<T>::Ones(batch, cfg_.stoch))};
  }

  Var<T> encode(const Var<T>& obs) const {
    if (cfg_.obs.mode == ObsMode::Pixels) return conv_(obs);
    return ad::elu(mlp_encoder_(obs));
  }

  /// Shared recurrent core: next deterministic carry from (previous state, action).
  Var<T> core(const LatentState<T>& prev, const Var<T>& prev_action) const {
    const Var<T> in = ad::elu(core_in_(ad::concat_cols<T>({prev.stoch, prev_action})));
    return gru_(in, prev.deter);
  }

  std::pair<Var<T>, Var<T>> prior_stats(const Var<T>& deter) const { return split_stats(prior_(deter)); }

  std::pair<Var<T>, Var<T>> posterior_stats(const Var<T>& deter, const Var<T>& embed) const {
    if (tie_posterior_) return prior_stats(deter);
    return split_stats(posterior_(ad::concat_cols<T>({deter, embed})));
  }

  LatentState<T> prior_step(const LatentState<T>& prev, const Var<T>& prev_action, Rng& rng) const {
    check_inputs(prev, prev_action);
    const Var<T> deter = core(prev, prev_action);
    auto [mean, std] = prior_stats(deter);
    return sample(deter, mean, std, rng);
  }

  LatentState<T> posterior_step(const LatentState<T>& prev, const Var<T>& prev_action, const Var<T>& obs, Rng& rng) const {
    check_inputs(prev, prev_action);
    if (!obs.value().allFinite()) throw NumericError("posterior_step: non-finite observation");
    if (obs.cols() != cfg_.obs.dim || obs.rows() != prev.batch()) throw UsageError("posterior_step: observation shape");
    const Var<T> deter = core(prev, prev_action);
    auto [mean, std] = posterior_stats(deter, encode(obs));
    return sample(deter, mean, std, rng);
  }

  Var<T> decode_observation(const LatentState<T>& s) const { return decoder_(s.features()); }
  Var<T> predict_reward(const LatentState<T>& s) const { return reward_(s.features()); }
  Var<T> predict_reward_features(const Var<T>& features) const { return reward_(features); }

  /// Posterior filtering over a batch of sequences, starting from the zero state.
  PosteriorRollout<T> rollout_posterior(const SequenceBatch<T>& batch, Rng& rng) const {
    const int L = batch.length();
    const auto n = batch.batch();
    // Encode every step in one pass.
    const Var<T> embed_all = encode(ad::concat_rows(batch.observations));
    PosteriorRollout<T> out;
    LatentState<T> state = initial_state(n);
    for (int t = 0; t < L; ++t) {
      check_inputs(state, batch.actions[t]);
      const Var<T> deter = core(state, batch.actions[t]);
      auto [pm, ps] = prior_stats(deter);
      auto [qm, qs] = posterior_stats(deter, ad::slice_rows(embed_all, t * n, n));
      state = sample(deter, qm, qs, rng);
      out.posterior.push_back(state);
      out.prior_mean.push_back(pm);
      out.prior_std.push_back(ps);
    }
    return out;
  }

  /// Sequence ELBO. `reward_mask[i]` false drops chunk i from the reward term;
  /// `loss_mask[i]` false (optional) drops chunk i from every term.
  ObserveResult<T> observe_sequence(const SequenceBatch<T>& batch, const std::vector<bool>& reward_mask, Rng& rng,
                                    const std::vector<bool>* loss_mask = nullptr) const {
    const auto n = batch.batch();
    const int L = batch.length();
    if (static_cast<Eigen::Index>(reward_mask.size()) != n) throw UsageError("reward_mask length differs from batch size");
    if (loss_mask && static_cast<Eigen::Index>(loss_mask->size()) != n) throw UsageError("loss_mask length differs from batch size");

    PosteriorRollout<T> roll = rollout_posterior(batch, rng);
    const LatentState<T> all = stack_states(roll.posterior);  // row t*n + i
    const Var<T> feats = all.features();
    const Var<T> obs_all = ad::concat_rows(batch.observations);
    Matrix<T> rew_all(n * L, 1), w(n * L, 1), wr(n * L, 1);
    for (int t = 0; t < L; ++t)
      for (Eigen::Index i = 0; i < n; ++i) {
        const bool keep = !loss_mask || (*loss_mask)[static_cast<std::size_t>(i)];
        rew_all(t * n + i, 0) = batch.rewards(i, t);
        w(t * n + i, 0) = keep ? T(1) : T(0);
        wr(t * n + i, 0) = (keep && reward_mask[static_cast<std::size_t>(i)]) ? T(1) : T(0);
      }

    const Var<T> recon_each = ad::scale(ad::row_sum(ad::square(ad::sub(decoder_(feats), obs_all))), T(0.5));
    const Var<T> reward_each = ad::scale(ad::square(ad::sub(reward_(feats), Var<T>::constant(rew_all))), T(0.5));
    const Var<T> kl_each =
        gaussian_kl(all.mean, all.std, ad::concat_rows(roll.prior_mean), ad::concat_rows(roll.prior_std));

    const T norm = T(1) / static_cast<T>(n * L);
    const Var<T> recon = ad::scale(ad::sum(ad::mul(recon_each, Var<T>::constant(w))), norm);
    const Var<T> reward_nll = ad::scale(ad::sum(ad::mul(reward_each, Var<T>::constant(wr))), norm);
    const Var<T> kl_raw = ad::scale(ad::sum(ad::mul(kl_each, Var<T>::constant(w))), norm);
    const Var<T> kl = ad::clamp_min(kl_raw, static_cast<T>(cfg_.free_nats));
    const Var<T> total = ad::add(ad::add(recon, reward_nll), ad::scale(kl, static_cast<T>(cfg_.kl_scale)));

    ObserveResult<T> out;
    out.states = std::move(roll.posterior);
    out.loss = total;
    auto& r = out.report;
    r.total = static_cast<double>(total.item());
    r.reconstruction = static_cast<double>(recon.item());
    r.reward_nll = static_cast<double>(reward_nll.item());
    r.kl = static_cast<double>(kl.item());
    r.kl_raw = static_cast<double>(kl_raw.item());
    r.per_step.resize(static_cast<std::size_t>(L));
    for (int t = 0; t < L; ++t) {
      auto& s = r.per_step[static_cast<std::size_t>(t)];
      for (Eigen::Index i = 0; i < n; ++i) {
        const auto row = t * n + i;
        s.reconstruction += static_cast<double>(recon_each.value()(row, 0) * w(row, 0));
        s.reward_nll += static_cast<double>(reward_each.value()(row, 0) * wr(row, 0));
        s.kl += static_cast<double>(kl_each.value()(row, 0) * w(row, 0));
      }
      s.reconstruction /= static_cast<double>(n);
      s.reward_nll /= static_cast<double>(n);
      s.kl /= static_cast<double>(n);
    }
    return out;
  }

  /// Sum over dimensions of KL(N(qm, qs) || N(pm, ps)) per row.
  static Var<T> gaussian_kl(const Var<T>& qm, const Var<T>& qs, const Var<T>& pm, const Var<T>& ps) {
    const Var<T> ratio = ad::div(qs, ps);
    const Var<T> diff = ad::div(ad::sub(qm, pm), ps);
    const Var<T> per_dim = ad::add_scalar(
        ad::sub(ad::scale(ad::add(ad::square(ratio), ad::square(diff)), T(0.5)), ad::log(ratio)), T(-0.5));
    return ad::row_sum(per_dim);
  }

 private:
  std::pair<Var<T>, Var<T>> split_stats(const Var<T>& raw) const {
    const int S = cfg_.stoch;
    Var<T> mean = ad::slice_cols(raw, 0, S);
    Var<T> std = ad::add_scalar(ad::softplus(ad::slice_cols(raw, S, S)), static_cast<T>(cfg_.min_std));
    return {mean, std};
  }

  LatentState<T> sample(const Var<T>& deter, const Var<T>& mean, const Var<T>& std, Rng& rng) const {
    const Var<T> eps = Var<T>::constant(rng.normal_matrix<T>(mean.rows(), mean.cols()));
    LatentState<T> s{deter, ad::add(mean, ad::mul(std, eps)), mean, std};
    if (!s.finite()) throw NumericError("non-finite latent state");
    return s;
  }

  void check_inputs(const LatentState<T>& prev, const Var<T>& action) const {
    if (action.rows() != prev.batch() || action.cols() != cfg_.action_dim) throw UsageError("action shape mismatch");
    if (!action.value().allFinite() || !prev.finite()) throw NumericError("non-finite input to the recurrent core");
  }

  WorldModelConfig cfg_;
  nn::ParameterStore<T> params_;
  nn::ConvEncoder<T> conv_;
  nn::Mlp<T> mlp_encoder_;
  int embed_dim_ = 0;
  nn::Linear<T> core_in_;
  nn::GruCell<T> gru_;
  nn::Mlp<T> prior_, posterior_, decoder_, reward_;
  bool tie_posterior_ = false;
};

/// Optimizer state for the world model.
template <class T>
class WorldTrainer {
 public:
  WorldTrainer(WorldModel<T>& model, nn::AdamOptions opts) : model_(model), adam_(model.parameters().vars(), opts) {}

  /// One Adam update of the world model. Throws NumericError (with the loss report in
  /// the message) when the loss is not finite.
  ObserveResult<T> step(const SequenceBatch<T>& batch, const std::vector<bool>& reward_mask, Rng& rng,
                        const std::vector<bool>* loss_mask = nullptr) {
    model_.parameters().zero_grad();
    ObserveResult<T> res = model_.observe_sequence(batch, reward_mask, rng, loss_mask);
    if (!std::isfinite(res.report.total)) {
      const auto& r = res.report;
      throw NumericError("world-model loss is not finite: total=" + std::to_string(r.total) +
                         " recon=" + std::to_string(r.reconstruction) + " reward=" + std::to_string(r.reward_nll) +
                         " kl=" + std::to_string(r.kl_raw));
    }
    res.loss.backward();
    adam_.step();
    return res;
  }

  nn::Adam<T>& optimizer() { return adam_; }

 private:
  WorldModel<T>& model_;
  nn::Adam<T> adam_;
};

}  // namespace rama
