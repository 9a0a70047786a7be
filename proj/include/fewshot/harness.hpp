#pragma once

// Experiment runner for the sine benchmark and for precomputed embeddings.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "fewshot/active.hpp"
#include "fewshot/adapt.hpp"
#include "fewshot/embednet.hpp"
#include "fewshot/synthdata.hpp"
#include "fewshot/task.hpp"

namespace fewshot {

struct MeanCI {
  double mean = 0.0;
  double half_width = 0.0;

  [[nodiscard]] double lower() const { return mean - half_width; }
  [[nodiscard]] double upper() const { return mean + half_width; }
};

/// Mean with a normal-approximation 95% half-width (sample sd, T-1 denominator).
inline MeanCI ci95(std::span<const double> values) {
  if (values.empty()) throw DomainError("ci95: no values");
  const auto t = static_cast<double>(values.size());
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= t;
  if (values.size() == 1) return {mean, 0.0};
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / (t - 1.0));
  return {mean, 1.96 * sd / std::sqrt(t)};
}

/// CI of the per-task differences a_i - b_i.
inline MeanCI paired_ci95(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DomainError("paired_ci95: length mismatch");
  std::vector<double> d(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
  return ci95(d);
}

enum class Strategy { Supervised, SemiSupervised, Unsupervised, Active };

inline std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::Supervised: return "supervised";
    case Strategy::SemiSupervised: return "semi";
    case Strategy::Unsupervised: return "unsupervised";
    case Strategy::Active: return "active";
  }
  return "?";
}

inline Strategy parse_strategy(std::string_view s) {
  for (Strategy v : {Strategy::Supervised, Strategy::SemiSupervised, Strategy::Unsupervised, Strategy::Active})
    if (to_string(v) == s) return v;
  if (s == "semi-supervised" || s == "semisupervised") return Strategy::SemiSupervised;
  throw ConfigError("unknown strategy '" + std::string(s) + "'");
}

inline std::string_view to_string(KMeansVariant v) {
  switch (v) {
    case KMeansVariant::SeededHard: return "seeded";
    case KMeansVariant::ConstrainedHard: return "constrained";
    case KMeansVariant::Soft: return "soft";
  }
  return "?";
}

inline KMeansVariant parse_kmeans_variant(std::string_view s) {
  for (KMeansVariant v : {KMeansVariant::SeededHard, KMeansVariant::ConstrainedHard, KMeansVariant::Soft})
    if (to_string(v) == s) return v;
  throw ConfigError("unknown K-means mode '" + std::string(s) + "'");
}

/// Hard variants iterate up to 10 times; soft runs a single iteration.
inline KMeansMode default_kmeans_mode(KMeansVariant v) {
  return v == KMeansVariant::Soft ? KMeansMode::soft() : KMeansMode{v, 10};
}

struct ExperimentConfig {
  Strategy strategy = Strategy::Supervised;
  KMeansMode kmeans{};
  AcquisitionKind acquisition = AcquisitionKind::Margin;
  /// Labeled samples per class (a 2-way task with shot 5 has 10 labels).
  int shot = 5;
  /// Extra unlabeled samples per task, split evenly over classes.
  int unlabeled = 0;
  /// Extra labeled samples per task added to the support set.
  int extra_labeled = 0;
  int query_per_class = 200;
  int tasks = 1000;
  bool transductive = false;
  bool active_seeded = false;
  std::uint64_t seed = 0;
  std::string label;

  void validate() const {
    if (tasks < 1) throw ConfigError("task count must be >= 1");
    if (unlabeled < 0 || extra_labeled < 0) throw ConfigError("sample counts must be >= 0");
    if (shot < 0 || (shot == 0 && extra_labeled == 0 && strategy != Strategy::Unsupervised))
      throw ConfigError("labeled strategies need at least one labeled sample per class");
    if (query_per_class < 1) throw ConfigError("query_per_class must be >= 1");
    if (kmeans.max_iters < 0) throw ConfigError("iterations must be >= 0");
  }
};

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"strategy", std::string(to_string(c.strategy))},
          {"mode", std::string(to_string(c.kmeans.variant))},
          {"iters", c.kmeans.max_iters},
          {"acquisition", std::string(to_string(c.acquisition))},
          {"kshot", c.shot},
          {"unlabeled", c.unlabeled},
          {"extra_labeled", c.extra_labeled},
          {"query_per_class", c.query_per_class},
          {"tasks", c.tasks},
          {"transductive", c.transductive},
          {"active_seeded", c.active_seeded},
          {"seed", c.seed},
          {"label", c.label}};
}

inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  c.strategy = parse_strategy(j.value("strategy", std::string("supervised")));
  c.kmeans = default_kmeans_mode(parse_kmeans_variant(j.value("mode", std::string("seeded"))));
  c.kmeans.max_iters = j.value("iters", c.kmeans.max_iters);
  c.acquisition = parse_acquisition(j.value("acquisition", std::string("margin")));
  c.shot = j.value("kshot", c.shot);
  c.unlabeled = j.value("unlabeled", c.unlabeled);
  c.extra_labeled = j.value("extra_labeled", c.extra_labeled);
  c.query_per_class = j.value("query_per_class", c.query_per_class);
  c.tasks = j.value("tasks", c.tasks);
  c.transductive = j.value("transductive", c.transductive);
  c.active_seeded = j.value("active_seeded", c.active_seeded);
  c.seed = j.value("seed", c.seed);
  c.label = j.value("label", std::string{});
  return c;
}

/// Sine test tasks for a config. The extra labeled samples are the same draws
/// that the unlabeled column would see, moved into the support set.
inline std::vector<Task> make_eval_tasks(const SineGenConfig& gen, const ExperimentConfig& cfg) {
  cfg.validate();
  SineGenConfig base = gen;
  base.seed = cfg.seed;
  const SineGenConfig test = for_split(base, Split::Test);
  constexpr int kWay = 2;
  std::vector<Task> tasks;
  tasks.reserve(static_cast<std::size_t>(cfg.tasks));
  for (int i = 0; i < cfg.tasks; ++i) {
    const SineParams p = sample_sine_params(test, i);
    Task t;
    t.way = kWay;
    t.task_id = i;
    t.support = sample_sine_set(test, p, i, Role::Support, cfg.shot);
    if (cfg.extra_labeled > 0) {
      LabeledSet extra = sample_sine_set(test, p, i, Role::Unlabeled, cfg.extra_labeled / kWay);
      t.support.x = vstack({&t.support.x, &extra.x});
      t.support.y.insert(t.support.y.end(), extra.y.begin(), extra.y.end());
    }
    t.shot = cfg.shot + cfg.extra_labeled / kWay;
    t.unlabeled = sample_sine_set(test, p, i, Role::Unlabeled, cfg.unlabeled / kWay);
    t.query = sample_sine_set(test, p, i, Role::Query, cfg.query_per_class);
    tasks.push_back(std::move(t));
  }
  return tasks;
}

struct TaskOutcome {
  std::vector<ClassId> query_predictions;
  ClusterState state;
  double error_pct = 0.0;
};

inline double error_percent(std::span<const ClassId> pred, std::span<const ClassId> truth) {
  if (pred.size() != truth.size()) throw ShapeError("error_percent: size mismatch");
  if (truth.empty()) return 0.0;
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (truth[i] == kMaskedLabel) throw LabelsUnavailable("query labels are masked; cannot score");
    wrong += pred[i] != truth[i];
  }
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(truth.size());
}

/// Runs the configured strategy on one task whose inputs are already embedded.
inline TaskOutcome adapt_embedded_task(const Task& t, const ExperimentConfig& cfg, const PrototypeSet* global_protos) {
  TaskOutcome out;
  const Matrix& zq = t.query.x;
  switch (cfg.strategy) {
    case Strategy::Supervised: {
      const PrototypeSet protos = compute_prototypes(t.support.x, t.support.y, t.way);
      out.state.means = protos.means;
      out.state.cluster_class = protos.classes;
      out.query_predictions = predict_all(zq, protos);
      break;
    }
    case Strategy::SemiSupervised: {
      const Matrix pool = cfg.transductive ? vstack({&t.unlabeled.x, &zq}) : t.unlabeled.x;
      out.state = seeded_kmeans(t.support.x, t.support.y, pool, cfg.kmeans, t.way);
      out.query_predictions = predict_with_state(out.state, zq);
      break;
    }
    case Strategy::Unsupervised: {
      if (!global_protos) throw AdaptationError("unsupervised strategy needs global prototypes");
      const Matrix pool = cfg.transductive ? vstack({&t.unlabeled.x, &zq}) : t.unlabeled.x;
      out.state = unsupervised_cluster(pool, *global_protos, cfg.kmeans.max_iters);
      out.query_predictions = predict_with_state(out.state, zq);
      break;
    }
    case Strategy::Active: {
      ActiveInput in;
      in.way = t.way;
      in.labeled_rows = static_cast<int>(t.support.size());
      in.points = cfg.transductive ? vstack({&t.support.x, &t.unlabeled.x, &zq}) : vstack({&t.support.x, &t.unlabeled.x});
      in.hidden_labels = t.support.y;
      in.hidden_labels.insert(in.hidden_labels.end(), t.unlabeled.y.begin(), t.unlabeled.y.end());
      if (cfg.transductive) in.hidden_labels.insert(in.hidden_labels.end(), t.query.y.begin(), t.query.y.end());
      ActiveOptions opts;
      opts.kind = cfg.acquisition;
      opts.kmeans = {cfg.kmeans.variant == KMeansVariant::Soft ? KMeansVariant::SeededHard : cfg.kmeans.variant,
                     cfg.kmeans.max_iters};
      opts.seeded = cfg.active_seeded;
      opts.seed = derive_seed(cfg.seed, {0xAC71ULL, static_cast<std::uint64_t>(t.task_id)});
      OracleProvider oracle(in.hidden_labels);
      ActiveResult r = active_adapt(in, opts, oracle);
      out.query_predictions = predict_with_state(r.state, zq);
      out.state = std::move(r.state);
      break;
    }
  }
  out.error_pct = error_percent(out.query_predictions, t.query.y);
  return out;
}

struct EvalSummary {
  double mean_error = 0.0;
  double ci95 = 0.0;
  std::vector<double> per_task_errors;
  std::vector<std::int64_t> task_ids;
  ExperimentConfig config;
  double wall_time_s = 0.0;

  [[nodiscard]] double mean_accuracy() const { return 100.0 - mean_error; }
};

inline nlohmann::json to_json(const EvalSummary& s) {
  return {{"config", to_json(s.config)},       {"mean_error", s.mean_error},
          {"ci95", s.ci95},                    {"per_task_errors", s.per_task_errors},
          {"task_ids", s.task_ids},            {"wall_time_s", s.wall_time_s}};
}

/// Calls fn(i) for i in [0, n) on `threads` workers over disjoint index ranges.
inline void parallel_for(std::size_t n, unsigned threads, const std::function<void(std::size_t)>& fn) {
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n, 1))));
  if (threads == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::jthread> pool;
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  pool.clear();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

/// Per-task error on already-embedded tasks, aggregated in task-id order.
inline EvalSummary evaluate_embedded(const std::vector<Task>& embedded, const ExperimentConfig& cfg,
                                     const PrototypeSet* global_protos, unsigned threads = default_threads()) {
  cfg.validate();
  if (cfg.strategy == Strategy::Active)
    for (const Task& t : embedded)
      if (t.unlabeled.has_masked_labels())
        throw LabelsUnavailable(cfg.acquisition == AcquisitionKind::Oracle
                                    ? "oracle acquisition needs ground-truth labels, but the unlabeled set is masked"
                                    : "simulated answers need ground-truth labels, but the unlabeled set is masked");
  const auto start = std::chrono::steady_clock::now();
  std::vector<double> errors(embedded.size());
  parallel_for(embedded.size(), threads,
               [&](std::size_t i) { errors[i] = adapt_embedded_task(embedded[i], cfg, global_protos).error_pct; });
  std::vector<std::size_t> order(embedded.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return embedded[a].task_id < embedded[b].task_id; });
  EvalSummary s;
  s.config = cfg;
  for (std::size_t i : order) {
    s.per_task_errors.push_back(errors[i]);
    s.task_ids.push_back(embedded[i].task_id);
  }
  if (s.per_task_errors.empty()) throw DomainError("evaluate: no tasks");
  const MeanCI ci = ci95(s.per_task_errors);
  s.mean_error = ci.mean;
  s.ci95 = ci.half_width;
  s.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return s;
}

inline EvalSummary evaluate_strategy(const EmbeddingModel& model, const ExperimentConfig& cfg,
                                     const std::vector<Task>& tasks, unsigned threads = default_threads()) {
  const auto start = std::chrono::steady_clock::now();
  std::vector<Task> embedded(tasks.size());
  parallel_for(tasks.size(), threads, [&](std::size_t i) { embedded[i] = embed_task(model, tasks[i]); });
  std::optional<PrototypeSet> global;
  if (cfg.strategy == Strategy::Unsupervised) {
    if (model.global.empty()) throw AdaptationError("unsupervised strategy needs a model with global prototypes");
    global = model.global.prototypes();
  }
  EvalSummary s = evaluate_embedded(embedded, cfg, global ? &*global : nullptr, threads);
  s.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return s;
}

/// Sine-benchmark convenience: generate the tasks for `cfg` and evaluate.
inline EvalSummary evaluate_sine(const EmbeddingModel& model, const ExperimentConfig& cfg, const SineGenConfig& gen = {},
                                 unsigned threads = default_threads()) {
  return evaluate_strategy(model, cfg, make_eval_tasks(gen, cfg), threads);
}

// --------------------------------------------------------------------------
// Grids and reports

struct Report {
  std::vector<EvalSummary> rows;
  nlohmann::json meta = nlohmann::json::object();
};

inline nlohmann::json to_json(const Report& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const EvalSummary& s : r.rows) rows.push_back(to_json(s));
  return {{"meta", r.meta}, {"rows", rows}};
}

inline std::string format_table(const Report& r) {
  std::string out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-26s %-12s %-11s %5s %5s %6s %6s %5s %10s %8s\n", "label", "strategy", "mode/acq",
                "iters", "kshot", "unlab", "extra", "tasks", "error(%)", "ci95");
  out += buf;
  for (const EvalSummary& s : r.rows) {
    const ExperimentConfig& c = s.config;
    const std::string variant = std::string(c.strategy == Strategy::Active ? to_string(c.acquisition)
                                                                           : to_string(c.kmeans.variant));
    std::snprintf(buf, sizeof buf, "%-26s %-12s %-11s %5d %5d %6d %6d %5d %10.2f %8.2f\n", c.label.c_str(),
                  std::string(to_string(c.strategy)).c_str(), variant.c_str(), c.kmeans.max_iters, c.shot,
                  c.unlabeled, c.extra_labeled, c.tasks, s.mean_error, s.ci95);
    out += buf;
  }
  return out;
}

inline Report run_experiment(const EmbeddingModel& model, const std::vector<ExperimentConfig>& grid,
                             const SineGenConfig& gen = {}, unsigned threads = default_threads()) {
  Report r;
  for (const ExperimentConfig& c : grid) r.rows.push_back(evaluate_sine(model, c, gen, threads));
  return r;
}

/// Labeled vs unlabeled extra samples, n in {0, 10, 100, 1000}.
inline std::vector<ExperimentConfig> semi_supervised_grid(const ExperimentConfig& base) {
  std::vector<ExperimentConfig> g;
  for (int n : {0, 10, 100, 1000}) {
    ExperimentConfig lab = base;
    lab.strategy = Strategy::Supervised;
    lab.extra_labeled = n;
    lab.unlabeled = 0;
    lab.label = "labeled n=" + std::to_string(n);
    g.push_back(lab);
    ExperimentConfig unl = base;
    unl.strategy = Strategy::SemiSupervised;
    unl.unlabeled = n;
    unl.extra_labeled = 0;
    unl.label = "unlabeled n=" + std::to_string(n);
    g.push_back(unl);
  }
  return g;
}

/// n labeled samples (supervised) vs n unlabeled samples (unsupervised).
inline std::vector<ExperimentConfig> unsupervised_grid(const ExperimentConfig& base) {
  std::vector<ExperimentConfig> g;
  for (int n : {10, 100, 1000}) {
    ExperimentConfig sup = base;
    sup.strategy = Strategy::Supervised;
    sup.shot = n / 2;
    sup.unlabeled = 0;
    sup.extra_labeled = 0;
    sup.label = "supervised n=" + std::to_string(n);
    g.push_back(sup);
    ExperimentConfig uns = base;
    uns.strategy = Strategy::Unsupervised;
    uns.shot = 0;
    uns.unlabeled = n;
    uns.extra_labeled = 0;
    uns.label = "unsupervised n=" + std::to_string(n);
    g.push_back(uns);
  }
  return g;
}

/// Hard vs soft K-means for 0, 1, 2 and 10 iterations.
inline std::vector<ExperimentConfig> iteration_grid(const ExperimentConfig& base) {
  std::vector<ExperimentConfig> g;
  for (int it : {0, 1, 2, 10}) {
    for (KMeansVariant v : {KMeansVariant::SeededHard, KMeansVariant::Soft}) {
      ExperimentConfig c = base;
      c.strategy = Strategy::SemiSupervised;
      c.kmeans = {v, it};
      c.label = std::string(v == KMeansVariant::Soft ? "soft" : "hard") + " iters=" + std::to_string(it);
      g.push_back(c);
    }
  }
  return g;
}

/// Every acquisition function on the same tasks.
inline std::vector<ExperimentConfig> active_grid(const ExperimentConfig& base) {
  std::vector<ExperimentConfig> g;
  for (AcquisitionKind k : kAllAcquisitionKinds) {
    ExperimentConfig c = base;
    c.strategy = Strategy::Active;
    c.acquisition = k;
    c.label = "active " + std::string(to_string(k));
    g.push_back(c);
  }
  return g;
}

}  // namespace fewshot
