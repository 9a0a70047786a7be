#pragma once

// Active adaptation: cluster, ask for one label per cluster, label clusters.

#include <chrono>
#include <cmath>
#include <condition_variable>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "fewshot/adapt.hpp"
#include "fewshot/common.hpp"
#include "fewshot/rng.hpp"

namespace fewshot {

enum class AcquisitionKind { Random, Nearest, Entropy, Margin, Oracle };

inline constexpr AcquisitionKind kAllAcquisitionKinds[] = {AcquisitionKind::Random, AcquisitionKind::Nearest,
                                                          AcquisitionKind::Entropy, AcquisitionKind::Margin,
                                                          AcquisitionKind::Oracle};

inline std::string_view to_string(AcquisitionKind k) {
  switch (k) {
    case AcquisitionKind::Random: return "random";
    case AcquisitionKind::Nearest: return "nearest";
    case AcquisitionKind::Entropy: return "entropy";
    case AcquisitionKind::Margin: return "margin";
    case AcquisitionKind::Oracle: return "oracle";
  }
  return "?";
}

inline AcquisitionKind parse_acquisition(std::string_view s) {
  for (AcquisitionKind k : kAllAcquisitionKinds)
    if (to_string(k) == s) return k;
  throw ConfigError("unknown acquisition function '" + std::string(s) + "'");
}

/// Uniform draw used by Random acquisition; keyed by (seed, sample) so that it
/// does not depend on visiting order.
inline double random_acquisition_draw(std::uint64_t seed, int sample_id) {
  return Rng(derive_seed(seed, {0xACC0ULL, static_cast<std::uint64_t>(sample_id)})).uniform();
}

/// Score of candidate `z` for cluster `cluster`; the query is the argmax.
/// Posteriors use the cluster means as prototypes.
template <typename Row>
inline double acquisition_score(const Eigen::MatrixBase<Row>& z, int cluster, const ClusterState& state,
                                AcquisitionKind kind, std::uint64_t seed = 0, int sample_id = 0) {
  switch (kind) {
    case AcquisitionKind::Random: return random_acquisition_draw(seed, sample_id);
    case AcquisitionKind::Nearest: return -squared_distance(z, state.means.row(cluster));
    case AcquisitionKind::Entropy: {
      const Vector p = softmax_neg_sqdist(z, state.means);
      double s = 0.0;
      for (Eigen::Index c = 0; c < p.size(); ++c)
        if (p[c] > 0.0) s += p[c] * std::log(p[c]);
      return s;
    }
    case AcquisitionKind::Margin: {
      const Vector p = softmax_neg_sqdist(z, state.means);
      double first = 0.0;
      double second = 0.0;
      for (Eigen::Index c = 0; c < p.size(); ++c) {
        if (p[c] > first) {
          second = first;
          first = p[c];
        } else if (p[c] > second) {
          second = p[c];
        }
      }
      return first - second;
    }
    case AcquisitionKind::Oracle: break;
  }
  throw ContractError("acquisition_score: Oracle is not a per-sample score; use oracle_label_clusters");
}

struct QuerySelection {
  /// Selected sample per cluster, -1 for empty clusters.
  std::vector<int> query_of_cluster;
  std::vector<int> empty_clusters;

  [[nodiscard]] int cluster_of_query(int sample_id) const {
    for (std::size_t c = 0; c < query_of_cluster.size(); ++c)
      if (query_of_cluster[c] == sample_id) return static_cast<int>(c);
    return -1;
  }
  [[nodiscard]] int pending_count() const {
    int n = 0;
    for (int q : query_of_cluster) n += q >= 0;
    return n;
  }
};

/// Argmax of the acquisition score within each cluster, ties to the lowest id.
inline QuerySelection select_queries(const ClusterState& state, const Matrix& points, AcquisitionKind kind,
                                     std::uint64_t seed) {
  if (kind == AcquisitionKind::Oracle)
    throw ContractError("select_queries: Oracle labels whole clusters and selects no queries");
  if (state.hard_assign.size() != static_cast<std::size_t>(points.rows()))
    throw ShapeError("select_queries: assignment size differs from point count");
  const auto k = static_cast<std::size_t>(state.num_clusters());
  QuerySelection sel;
  sel.query_of_cluster.assign(k, -1);
  std::vector<double> best(k, -std::numeric_limits<double>::infinity());
  for (Eigen::Index i = 0; i < points.rows(); ++i) {
    const int c = state.hard_assign[static_cast<std::size_t>(i)];
    const double a = acquisition_score(points.row(i), c, state, kind, seed, static_cast<int>(i));
    auto& q = sel.query_of_cluster[static_cast<std::size_t>(c)];
    if (q < 0 || a > best[static_cast<std::size_t>(c)]) {
      q = static_cast<int>(i);
      best[static_cast<std::size_t>(c)] = a;
    }
  }
  for (std::size_t c = 0; c < k; ++c)
    if (sel.query_of_cluster[c] < 0) sel.empty_clusters.push_back(static_cast<int>(c));
  return sel;
}

/// Gives every non-empty cluster the class answered for its query sample.
/// Several clusters may end up with the same class.
inline ClusterState label_clusters(ClusterState state, const QuerySelection& sel, const std::map<int, ClassId>& answers) {
  std::vector<int> missing;
  for (std::size_t c = 0; c < sel.query_of_cluster.size(); ++c) {
    const int q = sel.query_of_cluster[c];
    if (q < 0) continue;
    const auto it = answers.find(q);
    if (it == answers.end() || it->second < 0) {
      missing.push_back(static_cast<int>(c));
      continue;
    }
    state.cluster_class[c] = it->second;
  }
  if (!missing.empty()) {
    std::string list;
    for (int c : missing) list += (list.empty() ? "" : ", ") + std::to_string(c);
    throw IncompleteLabeling("label_clusters: no answer for cluster(s) " + list, missing);
  }
  return state;
}

/// Labels each cluster with the class whose ground-truth prototype (over all
/// clustered samples) is nearest to the cluster mean.
inline ClusterState oracle_label_clusters(ClusterState state, const Matrix& points, std::span<const ClassId> true_labels,
                                          int way = 0) {
  for (ClassId c : true_labels)
    if (c == kMaskedLabel) throw LabelsUnavailable("oracle labeling needs ground-truth labels, but labels are masked");
  const PrototypeSet truth = compute_prototypes(points, true_labels, way);
  for (int c = 0; c < state.num_clusters(); ++c) state.cluster_class[static_cast<std::size_t>(c)] = predict(state.means.row(c), truth);
  return state;
}

// --------------------------------------------------------------------------
// Label providers

class LabelProvider {
 public:
  virtual ~LabelProvider() = default;
  /// Class for the sample, or nullopt on timeout/abort.
  virtual std::optional<ClassId> answer(int sample_id) = 0;
};

/// Answers from hidden ground truth.
class OracleProvider final : public LabelProvider {
 public:
  explicit OracleProvider(std::vector<ClassId> truth) : truth_(std::move(truth)) {}
  std::optional<ClassId> answer(int sample_id) override {
    const ClassId c = truth_.at(static_cast<std::size_t>(sample_id));
    if (c == kMaskedLabel) throw LabelsUnavailable("oracle provider: label of sample " + std::to_string(sample_id) + " is masked");
    return c;
  }

 private:
  std::vector<ClassId> truth_;
};

/// Preset answers; unknown samples count as unanswered.
class ScriptedProvider final : public LabelProvider {
 public:
  explicit ScriptedProvider(std::map<int, ClassId> answers) : answers_(std::move(answers)) {}
  std::optional<ClassId> answer(int sample_id) override {
    const auto it = answers_.find(sample_id);
    if (it == answers_.end()) return std::nullopt;
    return it->second;
  }

 private:
  std::map<int, ClassId> answers_;
};

/// Answers pushed from another thread (e.g. a web session). answer() blocks
/// until the requested sample is answered, the provider is aborted, or the
/// timeout expires. Answers may arrive in any order; the last one wins.
class InteractiveProvider final : public LabelProvider {
 public:
  explicit InteractiveProvider(std::chrono::milliseconds timeout = std::chrono::minutes(10)) : timeout_(timeout) {}

  void submit(int sample_id, ClassId cls) {
    {
      std::lock_guard lock(mu_);
      answers_[sample_id] = cls;
    }
    cv_.notify_all();
  }

  void abort() {
    {
      std::lock_guard lock(mu_);
      aborted_ = true;
    }
    cv_.notify_all();
  }

  std::optional<ClassId> answer(int sample_id) override {
    std::unique_lock lock(mu_);
    const bool ready = cv_.wait_for(lock, timeout_, [&] { return aborted_ || answers_.count(sample_id) > 0; });
    if (!ready || answers_.count(sample_id) == 0) return std::nullopt;
    return answers_[sample_id];
  }

 private:
  std::chrono::milliseconds timeout_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::map<int, ClassId> answers_;
  bool aborted_ = false;
};

// --------------------------------------------------------------------------
// Active loop

struct ActiveOptions {
  AcquisitionKind kind = AcquisitionKind::Margin;
  KMeansMode kmeans{KMeansVariant::SeededHard, 10};
  /// Seed the clustering with the leading labeled rows instead of k-means++.
  bool seeded = false;
  std::uint64_t seed = 0;
};

/// Points to cluster. The first `labeled_rows` rows are the support set and
/// `labels` gives their classes; `hidden_labels` holds ground truth for every
/// row (kMaskedLabel where unknown) and is only read by oracle paths.
struct ActiveInput {
  Matrix points;
  std::vector<ClassId> hidden_labels;
  int way = 2;
  int labeled_rows = 0;
};

struct QueryRecord {
  int cluster = 0;
  int sample = 0;
};

struct AnswerRecord {
  int sample = 0;
  int cluster = 0;
  ClassId cls = kUnassigned;
};

struct Transcript {
  AcquisitionKind kind = AcquisitionKind::Margin;
  std::uint64_t seed = 0;
  std::vector<QueryRecord> queries;
  std::vector<AnswerRecord> answers;
  std::vector<ClassId> mapping;
  std::vector<int> unlabeled_clusters;
  std::vector<int> empty_clusters;
  bool complete = false;

  [[nodiscard]] std::map<int, ClassId> answer_map() const {
    std::map<int, ClassId> m;
    for (const AnswerRecord& a : answers) m[a.sample] = a.cls;
    return m;
  }
};

inline void to_json(nlohmann::json& j, const Transcript& t) {
  j = nlohmann::json{{"acquisition", std::string(to_string(t.kind))}, {"seed", t.seed}, {"complete", t.complete}};
  j["queries"] = nlohmann::json::array();
  for (const auto& q : t.queries) j["queries"].push_back({{"cluster", q.cluster}, {"sample", q.sample}});
  j["answers"] = nlohmann::json::array();
  for (const auto& a : t.answers) j["answers"].push_back({{"sample", a.sample}, {"cluster", a.cluster}, {"class", a.cls}});
  j["mapping"] = t.mapping;
  j["unlabeled_clusters"] = t.unlabeled_clusters;
  j["empty_clusters"] = t.empty_clusters;
}

inline void from_json(const nlohmann::json& j, Transcript& t) {
  t.kind = parse_acquisition(j.at("acquisition").get<std::string>());
  t.seed = j.at("seed").get<std::uint64_t>();
  t.complete = j.value("complete", false);
  t.queries.clear();
  for (const auto& q : j.at("queries")) t.queries.push_back({q.at("cluster").get<int>(), q.at("sample").get<int>()});
  t.answers.clear();
  for (const auto& a : j.at("answers"))
    t.answers.push_back({a.at("sample").get<int>(), a.at("cluster").get<int>(), a.at("class").get<ClassId>()});
  t.mapping = j.value("mapping", std::vector<ClassId>{});
  t.unlabeled_clusters = j.value("unlabeled_clusters", std::vector<int>{});
  t.empty_clusters = j.value("empty_clusters", std::vector<int>{});
}

/// Clustering plus query selection, before any answers.
struct ActivePlan {
  ClusterState state;
  QuerySelection selection;
  ActiveOptions options;
};

inline ActivePlan plan_active(const ActiveInput& in, const ActiveOptions& opts) {
  if (in.way < 1) throw ConfigError("active: way must be >= 1");
  if (opts.kmeans.variant == KMeansVariant::Soft) throw ConfigError("active: clustering must be a hard K-means variant");
  ActivePlan plan;
  plan.options = opts;
  if (opts.seeded) {
    const auto n = static_cast<Eigen::Index>(in.labeled_rows);
    const Matrix labeled = in.points.topRows(n);
    const Matrix rest = in.points.bottomRows(in.points.rows() - n);
    const std::span<const ClassId> labels(in.hidden_labels.data(), static_cast<std::size_t>(n));
    plan.state = seeded_kmeans(labeled, labels, rest, opts.kmeans, in.way);
    std::fill(plan.state.cluster_class.begin(), plan.state.cluster_class.end(), kUnassigned);
  } else {
    Rng rng(derive_seed(opts.seed, {0x6B2B2ULL}));
    plan.state = lloyd(in.points, kmeanspp_init(in.points, in.way, rng), {}, opts.kmeans.max_iters);
  }
  if (opts.kind != AcquisitionKind::Oracle) plan.selection = select_queries(plan.state, in.points, opts.kind, opts.seed);
  else plan.selection.query_of_cluster.assign(static_cast<std::size_t>(plan.state.num_clusters()), -1);
  return plan;
}

inline Transcript initial_transcript(const ActivePlan& plan) {
  Transcript t;
  t.kind = plan.options.kind;
  t.seed = plan.options.seed;
  for (std::size_t c = 0; c < plan.selection.query_of_cluster.size(); ++c)
    if (plan.selection.query_of_cluster[c] >= 0)
      t.queries.push_back({static_cast<int>(c), plan.selection.query_of_cluster[c]});
  t.empty_clusters = plan.selection.empty_clusters;
  return t;
}

struct ActiveResult {
  ClusterState state;
  QuerySelection selection;
  Transcript transcript;
  /// Class per clustered point; kUnassigned only if no cluster got a label.
  std::vector<ClassId> predictions;
};

/// Applies whatever answers are available. Clusters without an answer are
/// listed in the transcript and their members fall back to the nearest
/// labeled cluster.
inline ActiveResult finish_active(const ActivePlan& plan, const std::map<int, ClassId>& answers) {
  ActiveResult r;
  r.selection = plan.selection;
  r.transcript = initial_transcript(plan);
  r.state = plan.state;
  for (const QueryRecord& q : r.transcript.queries) {
    const auto it = answers.find(q.sample);
    if (it != answers.end() && it->second >= 0) {
      r.transcript.answers.push_back({q.sample, q.cluster, it->second});
      r.state.cluster_class[static_cast<std::size_t>(q.cluster)] = it->second;
    } else {
      r.transcript.unlabeled_clusters.push_back(q.cluster);
    }
  }
  r.transcript.complete = r.transcript.unlabeled_clusters.empty();
  r.transcript.mapping = r.state.cluster_class;
  r.predictions = sample_classes(r.state);
  return r;
}

inline ActiveResult active_adapt(const ActiveInput& in, const ActiveOptions& opts, LabelProvider& provider) {
  const ActivePlan plan = plan_active(in, opts);
  if (opts.kind == AcquisitionKind::Oracle) {
    ActiveResult r;
    r.selection = plan.selection;
    r.state = oracle_label_clusters(plan.state, in.points, in.hidden_labels, in.way);
    r.transcript = initial_transcript(plan);
    r.transcript.mapping = r.state.cluster_class;
    r.transcript.complete = true;
    r.predictions = sample_classes(r.state);
    return r;
  }
  std::map<int, ClassId> answers;
  for (int q : plan.selection.query_of_cluster) {
    if (q < 0) continue;
    if (const auto a = provider.answer(q)) answers[q] = *a;
  }
  return finish_active(plan, answers);
}

}  // namespace fewshot
