#pragma once

// MLP embedding trained episodically with the prototypical loss.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "fewshot/adapt.hpp"
#include "fewshot/common.hpp"
#include "fewshot/rng.hpp"
#include "fewshot/synthdata.hpp"
#include "fewshot/task.hpp"

namespace fewshot {

/// Fully connected layer, weight is out x in.
struct DenseLayer {
  Matrix weight;
  RowVector bias;
};

using Parameters = std::vector<DenseLayer>;

/// Running class-prototype average over training episodes, kept as a sum so
/// the mean is reproducible exactly from the per-episode prototypes.
struct GlobalPrototypes {
  Matrix sum;
  std::int64_t episodes = 0;

  [[nodiscard]] bool empty() const { return episodes == 0; }

  [[nodiscard]] PrototypeSet prototypes() const {
    if (episodes == 0) throw AdaptationError("global prototypes not available");
    PrototypeSet p;
    p.means = sum / static_cast<double>(episodes);
    for (Eigen::Index c = 0; c < sum.rows(); ++c) p.classes.push_back(static_cast<ClassId>(c));
    return p;
  }

  void accumulate(const Matrix& episode_protos) {
    if (episodes == 0) {
      sum = episode_protos;
    } else {
      if (episode_protos.rows() != sum.rows() || episode_protos.cols() != sum.cols())
        throw ShapeError("global prototypes: shape changed between episodes");
      sum += episode_protos;
    }
    ++episodes;
  }
};

struct EmbeddingModel {
  /// Layer widths including input and output, e.g. {2, 40, 40, 40}.
  std::vector<int> sizes;
  Parameters layers;
  GlobalPrototypes global;

  [[nodiscard]] int input_dim() const { return sizes.empty() ? 0 : sizes.front(); }
  [[nodiscard]] int embedding_dim() const { return sizes.empty() ? 0 : sizes.back(); }

  static EmbeddingModel zeros(std::vector<int> sizes) {
    if (sizes.size() < 2) throw ConfigError("model needs at least input and output sizes");
    EmbeddingModel m;
    m.sizes = std::move(sizes);
    for (std::size_t l = 0; l + 1 < m.sizes.size(); ++l)
      m.layers.push_back({Matrix::Zero(m.sizes[l + 1], m.sizes[l]), RowVector::Zero(m.sizes[l + 1])});
    return m;
  }

  /// Glorot-uniform weights, zero biases.
  static EmbeddingModel glorot(std::vector<int> sizes, std::uint64_t seed) {
    EmbeddingModel m = zeros(std::move(sizes));
    Rng rng(seed);
    for (DenseLayer& layer : m.layers) {
      const double limit = std::sqrt(6.0 / static_cast<double>(layer.weight.rows() + layer.weight.cols()));
      for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
        for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = rng.uniform(-limit, limit);
    }
    return m;
  }
};

// --------------------------------------------------------------------------
// Forward / backward

/// Activations of every layer; acts[0] is the input, acts.back() the embedding.
struct ForwardCache {
  std::vector<Matrix> pre;
  std::vector<Matrix> acts;
};

inline ForwardCache mlp_forward_cached(const Parameters& layers, const Matrix& inputs) {
  if (layers.empty()) throw ShapeError("mlp_forward: model has no layers");
  if (inputs.cols() != layers.front().weight.cols())
    throw ShapeError("mlp_forward: input dimension " + std::to_string(inputs.cols()) + " != model input " +
                     std::to_string(layers.front().weight.cols()));
  ForwardCache cache;
  cache.acts.push_back(inputs);
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Matrix h = cache.acts.back() * layers[l].weight.transpose();
    h.rowwise() += layers[l].bias;
    cache.pre.push_back(h);
    const bool hidden = l + 1 < layers.size();
    cache.acts.push_back(hidden ? Matrix(h.cwiseMax(0.0)) : h);
  }
  return cache;
}

/// z = g(x, theta) for each row of `inputs`. ReLU after hidden layers only.
inline Matrix mlp_forward(const EmbeddingModel& model, const Matrix& inputs) {
  return mlp_forward_cached(model.layers, inputs).acts.back();
}

/// Gradients w.r.t. every parameter given dLoss/dEmbedding.
inline Parameters mlp_backward(const Parameters& layers, const ForwardCache& cache, Matrix grad_out) {
  Parameters grads(layers.size());
  for (std::size_t l = layers.size(); l-- > 0;) {
    if (l + 1 < layers.size()) grad_out = grad_out.cwiseProduct((cache.pre[l].array() > 0.0).cast<double>().matrix());
    grads[l].weight = grad_out.transpose() * cache.acts[l];
    grads[l].bias = grad_out.colwise().sum();
    if (l > 0) grad_out = grad_out * layers[l].weight;
  }
  return grads;
}

struct LossAndGrad {
  double loss = 0.0;
  Parameters grads;
  /// Support prototypes of this episode (rows = classes 0..way-1).
  Matrix prototypes;
};

/// Mean negative log-likelihood of the query labels under the softmax over
/// negative squared distances to the support prototypes, with exact gradients.
inline LossAndGrad episode_loss_and_grad(const Parameters& layers, const LabeledSet& support, const LabeledSet& query,
                                         int way) {
  if (query.empty()) throw AdaptationError("episode loss: empty query set");
  const Matrix inputs = vstack({&support.x, &query.x});
  const ForwardCache cache = mlp_forward_cached(layers, inputs);
  const Matrix& z = cache.acts.back();
  const auto ns = static_cast<Eigen::Index>(support.size());
  const auto nq = static_cast<Eigen::Index>(query.size());
  const Matrix zs = z.topRows(ns);
  const Matrix zq = z.bottomRows(nq);

  const PrototypeSet protos = compute_prototypes(zs, support.y, way);
  const Matrix& m = protos.means;

  // logits(j, c) = -|zq_j - m_c|^2
  const Vector zq_sq = zq.rowwise().squaredNorm();
  const RowVector m_sq = m.rowwise().squaredNorm().transpose();
  Matrix logits = 2.0 * zq * m.transpose();
  logits.colwise() -= zq_sq;
  logits.rowwise() -= m_sq;

  Matrix prob(nq, way);
  double loss = 0.0;
  for (Eigen::Index j = 0; j < nq; ++j) {
    const double top = logits.row(j).maxCoeff();
    const RowVector e = (logits.row(j).array() - top).exp().matrix();
    const double total = e.sum();
    prob.row(j) = e / total;
    const ClassId y = query.y[static_cast<std::size_t>(j)];
    if (y < 0 || y >= way) throw AdaptationError("episode loss: query label outside [0, way)");
    loss -= logits(j, y) - top - std::log(total);
  }
  loss /= static_cast<double>(nq);

  Matrix g = prob;  // dLoss/dlogits
  for (Eigen::Index j = 0; j < nq; ++j) g(j, query.y[static_cast<std::size_t>(j)]) -= 1.0;
  g /= static_cast<double>(nq);

  // Rows of g sum to zero, which removes the zq term from dLoss/dzq.
  Matrix dz(ns + nq, z.cols());
  dz.bottomRows(nq) = 2.0 * g * m;
  const RowVector gsum = g.colwise().sum();
  const Matrix dm = 2.0 * (g.transpose() * zq - gsum.transpose().asDiagonal() * m);
  std::vector<int> counts(static_cast<std::size_t>(way), 0);
  for (ClassId c : support.y) ++counts[static_cast<std::size_t>(c)];
  for (Eigen::Index i = 0; i < ns; ++i) {
    const ClassId c = support.y[static_cast<std::size_t>(i)];
    dz.row(i) = dm.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
  }

  return {loss, mlp_backward(layers, cache, std::move(dz)), m};
}

inline LossAndGrad episode_loss_and_grad(const EmbeddingModel& model, const Task& task) {
  return episode_loss_and_grad(model.layers, task.support, task.query, task.way);
}

// --------------------------------------------------------------------------
// Optimizer

struct ShotRange {
  int lo = 5;
  int hi = 5;
};

struct EarlyStopping {
  bool enabled = true;
  int validation_tasks = 100;
  int check_every = 500;
  int patience = 3;
  int eval_shot = 10;
  int eval_query = 200;
};

struct TrainConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  int episodes = 20000;
  ShotRange train_shot{5, 5};
  int query_per_class = 10;
  int train_tasks = 100;
  std::vector<int> hidden{40, 40};
  int embedding_dim = 40;
  EarlyStopping early_stop;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (episodes < 0) throw ConfigError("episodes must be >= 0");
    if (train_shot.lo < 1 || train_shot.hi < train_shot.lo) throw ConfigError("train_shot must satisfy 1 <= lo <= hi");
    if (query_per_class < 1) throw ConfigError("query_per_class must be >= 1");
    if (train_tasks < 1) throw ConfigError("train_tasks must be >= 1");
    if (embedding_dim < 1) throw ConfigError("embedding_dim must be >= 1");
    if (early_stop.enabled && (early_stop.check_every < 1 || early_stop.patience < 1 || early_stop.validation_tasks < 1))
      throw ConfigError("early stopping settings must be positive");
  }

  [[nodiscard]] std::vector<int> layer_sizes(int input_dim) const {
    std::vector<int> s{input_dim};
    s.insert(s.end(), hidden.begin(), hidden.end());
    s.push_back(embedding_dim);
    return s;
  }
};

struct AdamState {
  Parameters m;
  Parameters v;
  std::int64_t step = 0;

  static AdamState like(const Parameters& p) {
    AdamState s;
    for (const DenseLayer& l : p) {
      s.m.push_back({Matrix::Zero(l.weight.rows(), l.weight.cols()), RowVector::Zero(l.bias.size())});
      s.v.push_back(s.m.back());
    }
    return s;
  }
};

inline bool all_finite(const Parameters& p) {
  for (const DenseLayer& l : p)
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  return true;
}

/// One bias-corrected Adam step; `state.step` is advanced to `step`.
inline void adam_update(Parameters& params, const Parameters& grads, AdamState& state, const TrainConfig& cfg,
                        std::int64_t step) {
  if (step < 1) throw ConfigError("adam_update: step must be >= 1");
  if (grads.size() != params.size() || state.m.size() != params.size())
    throw ShapeError("adam_update: parameter/gradient shape mismatch");
  if (!all_finite(grads)) throw TrainingError("adam_update: non-finite gradient at step " + std::to_string(step));
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  auto apply = [&](auto& p, const auto& g, auto& m, auto& v) {
    if (p.rows() != g.rows() || p.cols() != g.cols()) throw ShapeError("adam_update: parameter/gradient shape mismatch");
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    p.array() -= cfg.learning_rate * (m.array() / c1) / ((v.array() / c2).sqrt() + cfg.epsilon);
  };
  for (std::size_t l = 0; l < params.size(); ++l) {
    apply(params[l].weight, grads[l].weight, state.m[l].weight, state.v[l].weight);
    apply(params[l].bias, grads[l].bias, state.m[l].bias, state.v[l].bias);
  }
  state.step = step;
}

// --------------------------------------------------------------------------
// Training

/// Copy of a task with every set replaced by its embedding.
inline Task embed_task(const EmbeddingModel& model, const Task& t) {
  if (t.input_dim() != model.input_dim())
    throw ShapeError("embed: task input dimension " + std::to_string(t.input_dim()) + " != model input " +
                     std::to_string(model.input_dim()));
  Task e = t;
  for (Role role : {Role::Support, Role::Unlabeled, Role::Query}) {
    LabeledSet& s = e.set(role);
    s.x = s.size() > 0 ? mlp_forward(model, s.x) : Matrix(0, model.embedding_dim());
  }
  return e;
}

/// Mean per-task supervised error (fraction) of a model on a set of tasks.
inline double supervised_error(const EmbeddingModel& model, const std::vector<Task>& tasks) {
  double total = 0.0;
  for (const Task& t : tasks) {
    const PrototypeSet protos = compute_prototypes(mlp_forward(model, t.support.x), t.support.y, t.way);
    const Matrix zq = mlp_forward(model, t.query.x);
    int wrong = 0;
    for (Eigen::Index j = 0; j < zq.rows(); ++j) wrong += predict(zq.row(j), protos) != t.query.y[static_cast<std::size_t>(j)];
    total += static_cast<double>(wrong) / static_cast<double>(t.query.size());
  }
  return tasks.empty() ? 0.0 : total / static_cast<double>(tasks.size());
}

struct TrainLog {
  std::vector<double> losses;
  std::vector<int> shots;
  std::vector<std::pair<int, double>> validation;  // (episode, error)
  int best_episode = 0;
  int episodes_run = 0;
  bool stopped_early = false;
  /// Per-episode prototypes, filled only when requested.
  std::vector<Matrix> episode_prototypes;
};

struct TrainOptions {
  bool record_prototypes = false;
};

namespace detail {
inline constexpr std::uint64_t kInitTag = 0x1A17;
inline constexpr std::uint64_t kEpisodeTag = 0xE915;
}  // namespace detail

/// One training episode drawn from the training pool.
inline Task training_episode(const TrainConfig& cfg, const SineGenConfig& train_gen,
                             const std::vector<SineParams>& pool, int episode) {
  Rng rng(derive_seed(cfg.seed, {detail::kEpisodeTag, static_cast<std::uint64_t>(episode)}));
  const auto pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(pool.size()) - 1));
  const int k = static_cast<int>(rng.uniform_int(cfg.train_shot.lo, cfg.train_shot.hi));
  SineGenConfig episode_gen = train_gen;
  episode_gen.seed = rng();
  Task t;
  t.way = 2;
  t.shot = k;
  t.task_id = static_cast<std::int64_t>(pick);
  t.support = sample_sine_set(episode_gen, pool[pick], t.task_id, Role::Support, k);
  t.query = sample_sine_set(episode_gen, pool[pick], t.task_id, Role::Query, cfg.query_per_class);
  return t;
}

inline EmbeddingModel train_with_log(const TrainConfig& cfg, const SineGenConfig& gen, TrainLog* log = nullptr,
                                     const TrainOptions& opts = {}) {
  cfg.validate();
  gen.validate();
  const SineGenConfig train_gen = for_split(gen, Split::Train);
  std::vector<SineParams> pool;
  for (int i = 0; i < cfg.train_tasks; ++i) pool.push_back(sample_sine_params(train_gen, i));

  EmbeddingModel model = EmbeddingModel::glorot(cfg.layer_sizes(2), derive_seed(cfg.seed, {detail::kInitTag}));
  AdamState adam = AdamState::like(model.layers);

  std::vector<Task> validation;
  if (cfg.early_stop.enabled && cfg.episodes > 0)
    validation = sample_sine_tasks(for_split(gen, Split::Validation),
                                   {cfg.early_stop.eval_shot, 0, cfg.early_stop.eval_query},
                                   cfg.early_stop.validation_tasks);

  TrainLog local;
  TrainLog& out = log ? *log : local;
  out = TrainLog{};

  std::optional<EmbeddingModel> best;
  double best_error = std::numeric_limits<double>::infinity();
  int bad_checks = 0;

  for (int e = 0; e < cfg.episodes; ++e) {
    const Task t = training_episode(cfg, train_gen, pool, e);
    LossAndGrad lg = episode_loss_and_grad(model.layers, t.support, t.query, t.way);
    if (!std::isfinite(lg.loss)) throw TrainingError("training: non-finite loss at episode " + std::to_string(e));
    adam_update(model.layers, lg.grads, adam, cfg, e + 1);
    model.global.accumulate(lg.prototypes);
    out.losses.push_back(lg.loss);
    out.shots.push_back(t.shot);
    if (opts.record_prototypes) out.episode_prototypes.push_back(lg.prototypes);
    out.episodes_run = e + 1;

    const bool last = e + 1 == cfg.episodes;
    if (cfg.early_stop.enabled && ((e + 1) % cfg.early_stop.check_every == 0 || last)) {
      const double err = supervised_error(model, validation);
      out.validation.emplace_back(e + 1, err);
      if (err < best_error) {
        best_error = err;
        best = model;
        out.best_episode = e + 1;
        bad_checks = 0;
      } else if (++bad_checks >= cfg.early_stop.patience) {
        out.stopped_early = !last;
        break;
      }
    }
  }
  if (best) return *best;
  out.best_episode = out.episodes_run;
  return model;
}

inline EmbeddingModel train(const TrainConfig& cfg, const SineGenConfig& gen) { return train_with_log(cfg, gen); }

}  // namespace fewshot
