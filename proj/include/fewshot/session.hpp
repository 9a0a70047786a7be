#pragma once

// Interactive active-adaptation sessions and their JSON handlers. The HTTP
// wiring lives in service.hpp; everything here is transport independent.

#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <shared_mutex>
#include <string>
#include <vector>

#include <Eigen/SVD>
#include <nlohmann/json.hpp>

#include "fewshot/active.hpp"
#include "fewshot/embedio.hpp"
#include "fewshot/embednet.hpp"
#include "fewshot/synthdata.hpp"

namespace fewshot {

struct Projection {
  Matrix coords;       // N x 2
  Matrix mean_coords;  // K x 2
  Matrix basis;        // D x 2, orthonormal columns
  RowVector center;
  bool fallback = false;
};

namespace detail {

inline void fix_sign(Eigen::Ref<Vector> v) {
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (std::abs(v[i]) > 1e-12) {
      if (v[i] < 0) v = -v;
      return;
    }
  }
}

/// Top right-singular vectors of `m` whose singular value exceeds tol * the largest.
inline std::vector<Vector> principal_directions(const Matrix& m, int max_count, double rel_tol = 1e-9) {
  std::vector<Vector> out;
  if (m.rows() == 0 || m.cols() == 0) return out;
  Eigen::JacobiSVD<Matrix> svd(m, Eigen::ComputeThinV);
  const auto& s = svd.singularValues();
  if (s.size() == 0 || s[0] <= 0.0) return out;
  for (Eigen::Index i = 0; i < s.size() && static_cast<int>(out.size()) < max_count; ++i)
    if (s[i] > rel_tol * s[0]) out.emplace_back(svd.matrixV().col(i));
  return out;
}

}  // namespace detail

/// 2-D view: center at the mean of the means and project onto the top two
/// principal directions of the means. With fewer than two independent mean
/// directions the basis is completed from the data residual, then from the
/// coordinate axes. Identical means fall back to the first two raw dimensions.
inline Projection project_to_prototype_subspace(const Matrix& embeddings, const Matrix& means) {
  if (means.rows() < 2) throw DomainError("projection: need at least two means");
  if (embeddings.rows() > 0 && embeddings.cols() != means.cols()) throw ShapeError("projection: dimension mismatch");
  const Eigen::Index d = means.cols();
  Projection p;
  p.center = means.colwise().mean();
  const Matrix centered_means = means.rowwise() - p.center;
  const double scale = std::max(1.0, means.cwiseAbs().maxCoeff());
  if (centered_means.cwiseAbs().maxCoeff() <= 1e-12 * scale) {
    p.fallback = true;
    p.center = RowVector::Zero(d);
    p.basis = Matrix::Zero(d, 2);
    for (Eigen::Index j = 0; j < std::min<Eigen::Index>(d, 2); ++j) p.basis(j, j) = 1.0;
  } else {
    std::vector<Vector> dirs = detail::principal_directions(centered_means, 2);
    if (dirs.size() < 2 && d >= 2) {
      Matrix residual = embeddings.rowwise() - p.center;
      for (const Vector& v : dirs) residual -= (residual * v) * v.transpose();
      for (Vector& v : detail::principal_directions(residual, 1)) dirs.push_back(std::move(v));
    }
    for (Eigen::Index j = 0; dirs.size() < 2 && j < d; ++j) {
      Vector e = Vector::Zero(d);
      e[j] = 1.0;
      for (const Vector& v : dirs) e -= v.dot(e) * v;
      if (e.norm() > 1e-6) dirs.push_back(e / e.norm());
    }
    p.basis = Matrix::Zero(d, 2);
    for (std::size_t k = 0; k < dirs.size() && k < 2; ++k) {
      Vector v = dirs[k];
      detail::fix_sign(v);
      p.basis.col(static_cast<Eigen::Index>(k)) = v;
    }
  }
  p.coords = (embeddings.rowwise() - p.center) * p.basis;
  p.mean_coords = (means.rowwise() - p.center) * p.basis;
  return p;
}

// --------------------------------------------------------------------------
// Sessions

enum class SessionStatus { AwaitingLabels, Complete };

inline std::string_view to_string(SessionStatus s) {
  return s == SessionStatus::Complete ? "Complete" : "AwaitingLabels";
}

/// Error carrying the HTTP status it maps to.
struct ApiError : std::runtime_error {
  int status;
  ApiError(int status_code, const std::string& what) : std::runtime_error(what), status(status_code) {}
};

struct Session {
  std::string id;
  ActiveInput input;
  ActiveOptions options;
  std::vector<Role> roles;
  std::vector<std::string> class_names;
  ActivePlan plan;
  Projection projection;
  /// Every submission in arrival order.
  std::vector<AnswerRecord> history;
  std::map<int, ClassId> answers;
  ActiveResult current;

  mutable std::shared_mutex mu;

  [[nodiscard]] SessionStatus status() const {
    return current.transcript.complete ? SessionStatus::Complete : SessionStatus::AwaitingLabels;
  }
  [[nodiscard]] bool is_pending_query(int sample) const {
    for (int q : plan.selection.query_of_cluster)
      if (q == sample) return true;
    return false;
  }
};

inline nlohmann::json view_json(const Session& s) {
  using nlohmann::json;
  const ClusterState& st = s.current.state;
  std::map<int, int> cluster_of_query;
  for (std::size_t c = 0; c < s.plan.selection.query_of_cluster.size(); ++c)
    if (const int q = s.plan.selection.query_of_cluster[c]; q >= 0) cluster_of_query[q] = static_cast<int>(c);

  json samples = json::array();
  for (std::size_t i = 0; i < st.hard_assign.size(); ++i) {
    const int c = st.hard_assign[i];
    const ClassId cls = st.cluster_class[static_cast<std::size_t>(c)];
    const auto row = static_cast<Eigen::Index>(i);
    const bool is_query = cluster_of_query.count(static_cast<int>(i)) > 0;
    samples.push_back({{"id", i},
                       {"x", s.projection.coords(row, 0)},
                       {"y", s.projection.coords(row, 1)},
                       {"cluster", c},
                       {"predicted", cls == kUnassigned ? json(nullptr) : json(cls)},
                       {"is_query", is_query},
                       {"is_support", static_cast<int>(i) < s.input.labeled_rows},
                       {"role", std::string(1, static_cast<char>(s.roles[i]))}});
  }
  const std::vector<int> sizes = st.cluster_sizes();
  json clusters = json::array();
  for (int c = 0; c < st.num_clusters(); ++c) {
    const auto cu = static_cast<std::size_t>(c);
    const int q = s.plan.selection.query_of_cluster[cu];
    const ClassId cls = st.cluster_class[cu];
    clusters.push_back({{"id", c},
                        {"x", s.projection.mean_coords(c, 0)},
                        {"y", s.projection.mean_coords(c, 1)},
                        {"size", sizes[cu]},
                        {"query", q < 0 ? json(nullptr) : json(q)},
                        {"class", cls == kUnassigned ? json(nullptr) : json(cls)}});
  }
  json pending = json::array();
  for (int q : s.plan.selection.query_of_cluster)
    if (q >= 0 && !s.answers.count(q)) pending.push_back(q);
  json history = json::array();
  for (const AnswerRecord& a : s.history) history.push_back({{"sample", a.sample}, {"cluster", a.cluster}, {"class", a.cls}});
  return {{"session", s.id},
          {"status", std::string(to_string(s.status()))},
          {"way", s.input.way},
          {"acquisition", std::string(to_string(s.options.kind))},
          {"seed", s.options.seed},
          {"class_names", s.class_names},
          {"projection_fallback", s.projection.fallback},
          {"samples", samples},
          {"clusters", clusters},
          {"pending_queries", pending},
          {"transcript", s.current.transcript},
          {"history", history}};
}

/// Full state for a snapshot file: the view plus the clustered embeddings.
inline nlohmann::json snapshot_json(const Session& s) {
  nlohmann::json j = view_json(s);
  nlohmann::json pts = nlohmann::json::array();
  for (Eigen::Index i = 0; i < s.input.points.rows(); ++i) {
    std::vector<double> row(s.input.points.row(i).begin(), s.input.points.row(i).end());
    pts.push_back(row);
  }
  j["embeddings"] = pts;
  j["labeled_rows"] = s.input.labeled_rows;
  j["support_labels"] = std::vector<ClassId>(s.input.hidden_labels.begin(),
                                             s.input.hidden_labels.begin() + s.input.labeled_rows);
  j["options"] = {{"seeded", s.options.seeded},
                  {"mode", s.options.kmeans.variant == KMeansVariant::ConstrainedHard ? "constrained" : "seeded"},
                  {"iters", s.options.kmeans.max_iters}};
  return j;
}

namespace detail {

inline Matrix matrix_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_array()) throw ApiError(400, std::string(what) + " must be an array of rows");
  if (j.empty()) return Matrix(0, 0);
  const std::size_t cols = j.front().is_array() ? j.front().size() : 0;
  if (cols == 0) throw ApiError(400, std::string(what) + " rows must be non-empty arrays");
  Matrix m(static_cast<Eigen::Index>(j.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t i = 0; i < j.size(); ++i) {
    const auto& row = j[i];
    if (!row.is_array() || row.size() != cols) throw ApiError(400, std::string(what) + ": ragged rows");
    for (std::size_t k = 0; k < cols; ++k) {
      if (!row[k].is_number()) throw ApiError(400, std::string(what) + ": non-numeric value");
      m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = row[k].get<double>();
    }
  }
  return m;
}

inline LabeledSet set_from_json(const nlohmann::json& task, const char* key, bool labels_required) {
  LabeledSet s;
  if (!task.contains(key)) return s;
  const auto& js = task.at(key);
  if (!js.is_object()) throw ApiError(400, std::string(key) + " must be an object");
  s.x = matrix_from_json(js.value("x", nlohmann::json::array()), key);
  if (js.contains("y")) {
    if (!js.at("y").is_array()) throw ApiError(400, std::string(key) + ".y must be an array");
    for (const auto& v : js.at("y")) {
      if (!v.is_number_integer()) throw ApiError(400, std::string(key) + ".y must hold integers");
      s.y.push_back(v.get<ClassId>());
    }
  } else if (!labels_required) {
    s.y.assign(static_cast<std::size_t>(s.x.rows()), kMaskedLabel);
  }
  if (s.y.size() != static_cast<std::size_t>(s.x.rows()))
    throw ApiError(400, std::string(key) + ": label count differs from row count");
  return s;
}

inline std::string random_token() {
  static std::mutex mu;
  static std::mt19937_64 gen{std::random_device{}()};
  std::lock_guard lock(mu);
  char buf[33];
  std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(gen()),
                static_cast<unsigned long long>(gen()));
  return buf;
}

}  // namespace detail

struct HandlerResult {
  int status = 200;
  nlohmann::json body;
};

/// In-memory session store plus the request handlers.
class SessionService {
 public:
  explicit SessionService(EmbeddingModel model, std::optional<std::filesystem::path> snapshot_dir = std::nullopt)
      : model_(std::move(model)), snapshot_dir_(std::move(snapshot_dir)) {
    if (snapshot_dir_) std::filesystem::create_directories(*snapshot_dir_);
  }

  [[nodiscard]] const EmbeddingModel& model() const { return model_; }

  /// Request fields: acquisition, seed, seeded, mode, iters, class_names, and
  /// one task source: "task" (inline sets of raw inputs, or embeddings when
  /// "embedded" is true), "task_file" + "task_index", or "sine".
  HandlerResult create(const std::string& body) {
    return guarded([&] {
      const nlohmann::json req = parse_body(body);
      auto s = build_session(req);
      const std::string id = s->id;
      {
        std::unique_lock lock(s->mu);
        snapshot(*s);
      }
      nlohmann::json view;
      {
        std::shared_lock lock(s->mu);
        view = view_json(*s);
      }
      {
        std::unique_lock lock(store_mu_);
        sessions_[id] = std::move(s);
      }
      return HandlerResult{200, view};
    });
  }

  HandlerResult view(const std::string& id) {
    return guarded([&] {
      auto s = find(id);
      std::shared_lock lock(s->mu);
      return HandlerResult{200, view_json(*s)};
    });
  }

  /// Body: {"sample": id, "class": c}. Resubmitting overwrites the answer.
  HandlerResult submit(const std::string& id, const std::string& body) {
    return guarded([&] {
      auto s = find(id);
      const nlohmann::json req = parse_body(body);
      if (!req.contains("sample") || !req["sample"].is_number_integer())
        throw ApiError(400, "field 'sample' (integer) is required");
      if (!req.contains("class") || !req["class"].is_number_integer())
        throw ApiError(400, "field 'class' (integer) is required");
      const int sample = req["sample"].get<int>();
      const ClassId cls = req["class"].get<ClassId>();
      std::unique_lock lock(s->mu);
      if (!s->is_pending_query(sample))
        throw ApiError(409, "sample " + std::to_string(sample) + " is not a pending query of this session");
      if (cls < 0 || cls >= s->input.way)
        throw ApiError(400, "class must be in [0, " + std::to_string(s->input.way) + ")");
      s->history.push_back({sample, s->plan.state.hard_assign[static_cast<std::size_t>(sample)], cls});
      s->answers[sample] = cls;
      s->current = finish_active(s->plan, s->answers);
      snapshot(*s);
      return HandlerResult{200, view_json(*s)};
    });
  }

  static HandlerResult healthz() { return {200, {{"status", "ok"}}}; }

  [[nodiscard]] std::size_t session_count() const {
    std::shared_lock lock(store_mu_);
    return sessions_.size();
  }

  /// Direct access for tests and tools.
  [[nodiscard]] std::shared_ptr<const Session> session(const std::string& id) const {
    std::shared_lock lock(store_mu_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) return nullptr;
    return it->second;
  }

 private:
  template <class F>
  static HandlerResult guarded(F&& f) {
    try {
      return f();
    } catch (const ApiError& e) {
      return {e.status, {{"error", e.what()}}};
    } catch (const nlohmann::json::exception& e) {
      return {400, {{"error", std::string("malformed request: ") + e.what()}}};
    } catch (const ShapeError& e) {
      return {422, {{"error", e.what()}}};
    } catch (const ConfigError& e) {
      return {400, {{"error", e.what()}}};
    } catch (const ParseError& e) {
      return {400, {{"error", e.what()}}};
    } catch (const FormatError& e) {
      return {400, {{"error", e.what()}}};
    } catch (const IoError& e) {
      return {400, {{"error", e.what()}}};
    } catch (const std::exception& e) {
      return {500, {{"error", e.what()}}};
    }
  }

  static nlohmann::json parse_body(const std::string& body) {
    nlohmann::json j = nlohmann::json::parse(body, nullptr, false);
    if (j.is_discarded()) throw ApiError(400, "request body is not valid JSON");
    if (!j.is_object()) throw ApiError(400, "request body must be a JSON object");
    return j;
  }

  std::shared_ptr<Session> find(const std::string& id) const {
    std::shared_lock lock(store_mu_);
    const auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ApiError(404, "unknown session '" + id + "'");
    return it->second;
  }

  Task task_from_request(const nlohmann::json& req, bool& embedded) const {
    embedded = req.value("embedded", false);
    if (req.contains("task")) {
      const auto& jt = req.at("task");
      if (!jt.is_object()) throw ApiError(400, "'task' must be an object");
      Task t;
      t.way = jt.value("way", 2);
      t.support = detail::set_from_json(jt, "support", true);
      t.unlabeled = detail::set_from_json(jt, "unlabeled", false);
      t.query = detail::set_from_json(jt, "query", false);
      Eigen::Index dim = -1;
      for (const LabeledSet* set : {&t.support, &t.unlabeled, &t.query}) {
        if (set->size() == 0) continue;
        if (dim >= 0 && set->x.cols() != dim) throw ApiError(400, "task sets have different dimensions");
        dim = set->x.cols();
      }
      return t;
    }
    if (req.contains("task_file")) {
      const TaskFile tf = read_task_file(req.at("task_file").get<std::string>());
      const auto idx = req.value("task_index", std::int64_t{0});
      if (idx < 0 || idx >= static_cast<std::int64_t>(tf.tasks.size()))
        throw ApiError(400, "task_index out of range");
      return tf.tasks[static_cast<std::size_t>(idx)];
    }
    if (req.contains("sine")) {
      const auto& js = req.at("sine");
      if (!js.is_object()) throw ApiError(400, "'sine' must be an object");
      SineGenConfig gen;
      gen.seed = js.value("seed", std::uint64_t{0});
      const TaskSizes sizes{js.value("kshot", 1), js.value("unlabeled", 20), js.value("query", 0)};
      if (sizes.shot < 0 || sizes.unlabeled < 0 || sizes.query < 0) throw ApiError(400, "sine sizes must be >= 0");
      const SineGenConfig test = for_split(gen, Split::Test);
      const auto index = js.value("task_index", std::int64_t{0});
      const SineParams params = sample_sine_params(test, index);
      Task t;
      t.way = 2;
      t.shot = sizes.shot;
      t.task_id = index;
      t.support = sample_sine_set(test, params, index, Role::Support, sizes.shot);
      t.unlabeled = sample_sine_set(test, params, index, Role::Unlabeled, sizes.unlabeled);
      t.query = sample_sine_set(test, params, index, Role::Query, sizes.query);
      return t;
    }
    throw ApiError(400, "request needs one of 'task', 'task_file' or 'sine'");
  }

  std::shared_ptr<Session> build_session(const nlohmann::json& req) const {
    auto s = std::make_shared<Session>();
    bool embedded = false;
    const Task task = task_from_request(req, embedded);
    if (task.way < 1) throw ApiError(400, "way must be >= 1");
    for (ClassId c : task.support.y)
      if (c < 0 || c >= task.way) throw ApiError(400, "support labels must be in [0, way)");
    const Eigen::Index expected = embedded ? model_.embedding_dim() : model_.input_dim();
    if (task.input_dim() != expected)
      throw ApiError(422, "task dimension " + std::to_string(task.input_dim()) + " does not match the model (" +
                              std::to_string(expected) + ")");
    const Task z = embedded ? task : embed_task(model_, task);

    s->options.kind = parse_acquisition(req.value("acquisition", std::string("margin")));
    if (s->options.kind == AcquisitionKind::Oracle)
      throw ApiError(400, "oracle acquisition needs no human labels; use active-sim instead");
    s->options.seed = req.value("seed", std::uint64_t{0});
    s->options.seeded = req.value("seeded", false);
    const std::string mode = req.value("mode", std::string("seeded"));
    if (mode != "seeded" && mode != "constrained") throw ApiError(400, "mode must be 'seeded' or 'constrained'");
    s->options.kmeans = {mode == "constrained" ? KMeansVariant::ConstrainedHard : KMeansVariant::SeededHard,
                         req.value("iters", 10)};
    if (s->options.kmeans.max_iters < 0) throw ApiError(400, "iters must be >= 0");

    s->input.way = task.way;
    s->input.labeled_rows = static_cast<int>(z.support.size());
    s->input.points = vstack({&z.support.x, &z.unlabeled.x, &z.query.x});
    if (s->input.points.rows() < task.way) throw ApiError(400, "task has fewer samples than classes");
    for (Role role : {Role::Support, Role::Unlabeled, Role::Query}) {
      const LabeledSet& set = z.set(role);
      s->input.hidden_labels.insert(s->input.hidden_labels.end(), set.y.begin(), set.y.end());
      s->roles.insert(s->roles.end(), set.size(), role);
    }
    if (s->options.seeded) {
      if (z.support.empty()) throw ApiError(400, "seeded clustering needs labeled support samples");
      std::vector<bool> seen(static_cast<std::size_t>(task.way), false);
      for (ClassId c : z.support.y) seen[static_cast<std::size_t>(c)] = true;
      for (bool b : seen)
        if (!b) throw ApiError(400, "seeded clustering needs a support sample for every class");
    }

    if (req.contains("class_names")) {
      s->class_names = req.at("class_names").get<std::vector<std::string>>();
      if (s->class_names.size() != static_cast<std::size_t>(task.way))
        throw ApiError(400, "class_names must have one entry per class");
    } else {
      for (int c = 0; c < task.way; ++c) s->class_names.push_back("class " + std::to_string(c));
    }

    s->plan = plan_active(s->input, s->options);
    s->current = finish_active(s->plan, {});
    s->projection = s->plan.state.num_clusters() >= 2
                        ? project_to_prototype_subspace(s->input.points, s->plan.state.means)
                        : project_to_prototype_subspace(s->input.points, vstack({&s->plan.state.means, &s->plan.state.means}));
    s->id = detail::random_token();
    return s;
  }

  void snapshot(const Session& s) const {
    if (!snapshot_dir_) return;
    const auto path = *snapshot_dir_ / (s.id + ".json");
    const auto tmp = path.string() + ".tmp";
    {
      std::ofstream out(tmp, std::ios::trunc);
      if (!out) throw IoError("cannot write snapshot " + tmp);
      out << snapshot_json(s).dump(1);
      if (!out) throw IoError("failed writing snapshot " + tmp);
    }
    std::filesystem::rename(tmp, path);
  }

  EmbeddingModel model_;
  std::optional<std::filesystem::path> snapshot_dir_;
  mutable std::shared_mutex store_mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
};

}  // namespace fewshot
