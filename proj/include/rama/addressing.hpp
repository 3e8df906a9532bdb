#pragma once

// Retrospective addressing: a recurrent chunk embedder whose query-anchored
// dot-product softmax chooses chunks of the multitask buffer, and the three
// objectives that train it (value backprop through a straight-through sample,
// REINFORCE on predicted reward sums, REINFORCE with a query baseline).

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rama/agent.hpp"

namespace rama {

enum class Objective { None, VRAMa, RRAMa, RbRAMa };

inline std::string to_string(Objective o) {
  switch (o) {
    case Objective::None: return "none";
    case Objective::VRAMa: return "vrama";
    case Objective::RRAMa: return "rrama";
    case Objective::RbRAMa: return "rbrama";
  }
  return "?";
}

inline Objective parse_objective(const std::string& s) {
  if (s == "none") return Objective::None;
  if (s == "vrama") return Objective::VRAMa;
  if (s == "rrama") return Objective::RRAMa;
  if (s == "rbrama") return Objective::RbRAMa;
  throw ConfigError("unknown addressing objective '" + s + "' (expected none, vrama, rrama or rbrama)");
}

struct AddressingConfig {
  Objective objective = Objective::None;
  int action_dim = 1;
  ObsSpec obs = ObsSpec::vector(2);
  int embed_dim = 64;
  int hidden = 128;
  std::pair<int, int> conv_depths{16, 32};
  double lr = 1e-3;
  double grad_clip = 100.0;
  bool detach_query = true;
  bool exact = false;  // enumerate all candidates instead of sampling (REINFORCE objectives)
};

template <class T>
class AddressingNet {
 public:
  AddressingNet(const AddressingConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    Rng rng(seed, 0xADD);
    int e = 0;
    if (cfg.obs.mode == ObsMode::Pixels) {
      conv_ = nn::ConvEncoder<T>(params_, "addr.encoder", cfg.obs.channels, cfg.obs.height, cfg.obs.width,
                                 cfg.conv_depths, rng);
      e = conv_.out();
    } else {
      mlp_ = nn::Mlp<T>(params_, "addr.encoder", cfg.obs.dim, {cfg.hidden}, cfg.hidden, rng);
      e = cfg.hidden;
    }
    gru_ = nn::GruCell<T>(params_, "addr.gru", cfg.action_dim + e, cfg.embed_dim, rng);
  }

  AddressingNet(const AddressingNet&) = delete;
  AddressingNet& operator=(const AddressingNet&) = delete;
  AddressingNet(AddressingNet&&) = default;
  AddressingNet& operator=(AddressingNet&&) = default;

  const AddressingConfig& config() const { return cfg_; }
  nn::ParameterStore<T>& parameters() { return params_; }
  const nn::ParameterStore<T>& parameters() const { return params_; }
  int embed_dim() const { return cfg_.embed_dim; }

  /// Final recurrent output over a batch of sequences (one row per chunk).
  Var<T> embed(const SequenceBatch<T>& batch) const {
    const auto n = batch.batch();
    const Var<T> obs_emb = encode(ad::concat_rows(batch.observations));
    Var<T> h = Var<T>::constant(Matrix<T>::Zero(n, cfg_.embed_dim));
    for (int t = 0; t < batch.length(); ++t)
      h = gru_(ad::concat_cols<T>({batch.actions[t], ad::slice_rows(obs_emb, t * n, n)}), h);
    return h;
  }

  Var<T> embed(const std::vector<Chunk>& chunks) const { return embed(SequenceBatch<T>::from_chunks(chunks)); }

 private:
  Var<T> encode(const Var<T>& obs) const {
    if (cfg_.obs.mode == ObsMode::Pixels) return conv_(obs);
    return ad::elu(mlp_(obs));
  }

  AddressingConfig cfg_;
  nn::ParameterStore<T> params_;
  nn::ConvEncoder<T> conv_;
  nn::Mlp<T> mlp_;
  nn::GruCell<T> gru_;
};

/// logits(i, j) = <query_i, candidate_j>.
template <class T>
Var<T> address_logits(const Var<T>& query, const Var<T>& candidates) {
  if (candidates.rows() < 1) throw UsageError("addressing needs at least one candidate");
  if (query.cols() != candidates.cols()) throw UsageError("query and candidate embeddings differ in width");
  return ad::matmul(query, ad::transpose(candidates));
}

template <class T>
struct AddressDistribution {
  Var<T> logits;  // n x m
  Var<T> probs;   // n x m
};

template <class T>
AddressDistribution<T> address_distribution(const AddressingNet<T>& net, const std::vector<Chunk>& x,
                                            const std::vector<Chunk>& M, bool detach_query) {
  if (M.empty()) throw UsageError("address_distribution: empty candidate set");
  Var<T> q = net.embed(x);
  if (detach_query) q = ad::detach(q);
  const Var<T> logits = address_logits(q, net.embed(M));
  return {logits, ad::softmax_rows(logits)};
}

/// One categorical index per row of `probs`.
template <class T>
std::vector<int> sample_rows(const Matrix<T>& probs, Rng& rng) {
  std::vector<int> out(static_cast<std::size_t>(probs.rows()));
  std::vector<T> row(static_cast<std::size_t>(probs.cols()));
  for (Eigen::Index i = 0; i < probs.rows(); ++i) {
    for (Eigen::Index j = 0; j < probs.cols(); ++j) row[static_cast<std::size_t>(j)] = probs(i, j);
    out[static_cast<std::size_t>(i)] = static_cast<int>(rng.categorical(std::span<const T>(row)));
  }
  return out;
}

template <class T>
Matrix<T> one_hot(const std::vector<int>& index, Eigen::Index width) {
  Matrix<T> m = Matrix<T>::Zero(static_cast<Eigen::Index>(index.size()), width);
  for (std::size_t i = 0; i < index.size(); ++i) m(static_cast<Eigen::Index>(i), index[i]) = T(1);
  return m;
}

/// Straight-through categorical sample: exact one-hot forward, gradient into `probs`.
template <class T>
Var<T> sample_straight_through(const Var<T>& probs, Rng& rng, std::vector<int>* picks = nullptr) {
  const std::vector<int> idx = sample_rows(probs.value(), rng);
  if (picks) *picks = idx;
  return ad::straight_through(probs, one_hot<T>(idx, probs.cols()));
}

/// Differentiable selection: weights (n x m) times stacked candidate rows (m x D).
template <class T>
Var<T> select(const Var<T>& weights, const Var<T>& stacked) {
  if (weights.cols() != stacked.rows()) throw UsageError("select: weight width differs from candidate count");
  return ad::matmul(weights, stacked);
}

/// Mean row entropy of a probability matrix.
template <class T>
double mean_entropy(const Matrix<T>& probs) {
  double h = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i)
    for (Eigen::Index j = 0; j < probs.cols(); ++j) {
      const double p = static_cast<double>(probs(i, j));
      if (p > 0) h -= p * std::log(p);
    }
  return probs.rows() ? h / static_cast<double>(probs.rows()) : 0.0;
}

/// Sum over steps of reward-head predictions along the posterior encoding of each chunk.
/// No gradient.
template <class T>
Matrix<T> predicted_reward_sums(const WorldModel<T>& world, const std::vector<Chunk>& chunks, Rng& rng) {
  ad::NoGradGuard guard;
  const auto roll = world.rollout_posterior(SequenceBatch<T>::from_chunks(chunks), rng);
  Matrix<T> total = Matrix<T>::Zero(static_cast<Eigen::Index>(chunks.size()), 1);
  for (const auto& s : roll.posterior) total += world.predict_reward(s).value();
  return total;
}

/// Score-function loss. `advantage(i, j)` is the (detached) payoff of picking
/// candidate j for query i. Sampled: -(1/n) sum_i A(i, j_i) log q(j_i | i).
/// Exact: -(1/n) sum_i sum_j q(j | i) A(i, j).
template <class T>
Var<T> reinforce_loss(const Var<T>& logits, const Matrix<T>& advantage, bool exact, Rng& rng,
                      std::vector<int>* picks = nullptr) {
  const auto n = logits.rows(), m = logits.cols();
  if (advantage.rows() != n || advantage.cols() != m) throw UsageError("reinforce_loss: advantage shape");
  const T scale = static_cast<T>(-1) / static_cast<T>(n);
  if (exact) {
    const Var<T> q = ad::softmax_rows(logits);
    return ad::scale(ad::sum(ad::mul(q, Var<T>::constant(advantage))), scale);
  }
  const Var<T> logp = ad::log_softmax_rows(logits);
  const std::vector<int> idx = sample_rows(Matrix<T>(logp.value().array().exp().matrix()), rng);
  Matrix<T> w = Matrix<T>::Zero(n, m);
  for (Eigen::Index i = 0; i < n; ++i) w(i, idx[static_cast<std::size_t>(i)]) = advantage(i, idx[static_cast<std::size_t>(i)]);
  if (picks) *picks = idx;
  return ad::scale(ad::sum(ad::mul(logp, Var<T>::constant(w))), scale);
}

/// Value objective given address probabilities: straight-through pick, posterior
/// encoding of the picked chunk, imagination from every posterior state,
/// loss = -(1/(n L)) sum over starts of sum_t V_lambda.
template <class T>
Var<T> vrama_loss(const Var<T>& probs, const std::vector<Chunk>& M, const WorldModel<T>& world,
                  const ActorCritic<T>& ac, Rng& rng, std::vector<int>* picks = nullptr) {
  const FlatChunks<T> flat = FlatChunks<T>::from_chunks(M);
  const Var<T> sel = sample_straight_through(probs, rng, picks);
  const Var<T> acts = select(sel, Var<T>::constant(flat.actions));
  const Var<T> obs = select(sel, Var<T>::constant(flat.observations));
  const Matrix<T> rewards = sel.value() * flat.rewards;
  const SequenceBatch<T> batch = SequenceBatch<T>::from_flat(acts, obs, rewards, flat.length);
  const auto roll = world.rollout_posterior(batch, rng);
  const auto imagined = ac.imagine(world, stack_states(roll.posterior), ac.config().horizon, rng);
  return ActorCritic<T>::summed_return_loss(imagined);
}

struct AddressingReport {
  double loss = 0.0;
  double entropy = 0.0;
  double selected_reward = 0.0;  // mean predicted reward sum (REINFORCE) or imagined return (value) of picks
};

/// Loss of one addressing step for any objective; world model and agent must be frozen by the caller.
template <class T>
std::pair<Var<T>, AddressingReport> addressing_loss(const AddressingNet<T>& net, const std::vector<Chunk>& x,
                                                    const std::vector<Chunk>& M, const WorldModel<T>& world,
                                                    const ActorCritic<T>* ac, Rng& rng) {
  const AddressingConfig& cfg = net.config();
  const AddressDistribution<T> dist = address_distribution(net, x, M, cfg.detach_query);
  AddressingReport rep;
  rep.entropy = mean_entropy(dist.probs.value());
  const auto n = static_cast<Eigen::Index>(x.size());
  const auto m = static_cast<Eigen::Index>(M.size());
  Var<T> loss;
  switch (cfg.objective) {
    case Objective::None:
      throw UsageError("addressing_loss called with objective none");
    case Objective::RRAMa:
    case Objective::RbRAMa: {
      const Matrix<T> R = predicted_reward_sums(world, M, rng);  // m x 1
      Matrix<T> adv = R.transpose().replicate(n, 1);
      if (cfg.objective == Objective::RbRAMa) adv -= predicted_reward_sums(world, x, rng).replicate(1, m);
      std::vector<int> picks;
      loss = reinforce_loss(dist.logits, adv, cfg.exact, rng, &picks);
      if (cfg.exact) {
        rep.selected_reward = static_cast<double>((dist.probs.value() * R).mean());
      } else {
        double s = 0.0;
        for (int j : picks) s += static_cast<double>(R(j, 0));
        rep.selected_reward = s / static_cast<double>(n);
      }
      break;
    }
    case Objective::VRAMa: {
      if (!ac) throw UsageError("value addressing needs an actor-critic");
      loss = vrama_loss(dist.probs, M, world, *ac, rng);
      rep.selected_reward = -static_cast<double>(loss.item());
      break;
    }
  }
  rep.loss = static_cast<double>(loss.item());
  return {loss, rep};
}

template <class T>
class AddressingTrainer {
 public:
  explicit AddressingTrainer(AddressingNet<T>& net)
      : net_(net), adam_(net.parameters().vars(), {net.config().lr, 0.9, 0.999, 1e-8, net.config().grad_clip}) {}

  /// One Adam step on the addressing parameters with the world model and agent frozen.
  AddressingReport step(const std::vector<Chunk>& x, const std::vector<Chunk>& M, WorldModel<T>& world,
                        ActorCritic<T>* ac, Rng& rng) {
    nn::FreezeGuard<T> fw(world.parameters());
    std::optional<nn::FreezeGuard<T>> fa, fv;
    if (ac) {
      fa.emplace(ac->actor_parameters());
      fv.emplace(ac->value_parameters());
    }
    net_.parameters().zero_grad();
    auto [loss, rep] = addressing_loss(net_, x, M, world, ac, rng);
    if (!std::isfinite(rep.loss)) throw NumericError("addressing loss is not finite");
    loss.backward();
    adam_.step();
    return rep;
  }

  nn::Adam<T>& optimizer() { return adam_; }

 private:
  AddressingNet<T>& net_;
  nn::Adam<T> adam_;
};

/// Cached embeddings of the deterministic stride-L chunking of a buffer.
template <class T>
struct EmbeddingMatrix {
  Matrix<T> rows;               // one embedding per chunk
  std::vector<ChunkRef> index;  // row -> (episode id, start)
  int length = 0;
  std::int64_t stamp = -1;      // training step of the last refresh

  std::size_t size() const { return index.size(); }
  bool empty() const { return index.empty(); }
};

template <class T>
EmbeddingMatrix<T> refresh_embedding_matrix(const AddressingNet<T>& net, const MultitaskBuffer& buffer, int length,
                                            std::int64_t stamp, std::size_t block = 256) {
  EmbeddingMatrix<T> D;
  D.length = length;
  D.stamp = stamp;
  D.index = buffer.stride_chunks(length);
  if (D.index.empty()) throw EmptySourceError("no chunk of length " + std::to_string(length) + " to index");
  D.rows.resize(static_cast<Eigen::Index>(D.index.size()), net.embed_dim());
  ad::NoGradGuard guard;
  for (std::size_t s = 0; s < D.index.size(); s += block) {
    const std::size_t e = std::min(D.index.size(), s + block);
    std::vector<Chunk> chunks;
    for (std::size_t k = s; k < e; ++k) chunks.push_back(buffer.resolve(D.index[k], length));
    D.rows.middleRows(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(e - s)) = net.embed(chunks).value();
  }
  return D;
}

/// Samples one chunk reference per query from softmax(<e_x, D_j>).
template <class T>
std::vector<ChunkRef> address_with_matrix(const AddressingNet<T>& net, const std::vector<Chunk>& x,
                                          const EmbeddingMatrix<T>& D, Rng& rng) {
  if (D.empty()) throw EmptySourceError("embedding matrix is empty");
  ad::NoGradGuard guard;
  const Matrix<T> probs = ad::softmax_rows_value<T>(net.embed(x).value() * D.rows.transpose());
  std::vector<ChunkRef> out;
  for (int j : sample_rows(probs, rng)) out.push_back(D.index[static_cast<std::size_t>(j)]);
  return out;
}

}  // namespace rama
