#include <filesystem>
#include <fstream>
#include <random>
#include <thread>

#include <gtest/gtest.h>

#include "fewshot/service.hpp"

using namespace fewshot;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const EmbeddingModel& model() {
  static const EmbeddingModel m = EmbeddingModel::glorot({2, 40, 40, 40}, 21);
  return m;
}

json sine_request(std::uint64_t seed = 4, const std::string& acquisition = "margin") {
  return {{"sine", {{"seed", 2}, {"task_index", 3}, {"kshot", 1}, {"unlabeled", 15}}},
          {"acquisition", acquisition},
          {"seed", seed}};
}

std::vector<int> query_ids(const json& view) {
  std::vector<int> q;
  for (const auto& c : view["clusters"])
    if (!c["query"].is_null()) q.push_back(c["query"].get<int>());
  return q;
}

double dist2(const Matrix& m, Eigen::Index a, Eigen::Index b) { return (m.row(a) - m.row(b)).squaredNorm(); }

}  // namespace

TEST(Projection, TwoDimensionalIsAnIsometry) {
  Rng rng(1);
  Matrix means(3, 2);
  means << 0, 0, 3, 1, -1, 4;
  Matrix pts(20, 2);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = rng.uniform(-5, 5);
  const Projection p = project_to_prototype_subspace(pts, means);
  EXPECT_FALSE(p.fallback);
  for (Eigen::Index a = 0; a < pts.rows(); ++a)
    for (Eigen::Index b = 0; b < pts.rows(); ++b) EXPECT_NEAR(dist2(p.coords, a, b), dist2(pts, a, b), 1e-9);
  for (Eigen::Index a = 0; a < 3; ++a)
    for (Eigen::Index b = 0; b < 3; ++b) EXPECT_NEAR(dist2(p.mean_coords, a, b), dist2(means, a, b), 1e-9);
  // Centered at the mean of the means.
  EXPECT_NEAR(p.mean_coords.colwise().sum().norm(), 0.0, 1e-12);
}

TEST(Projection, IdenticalMeansFallBack) {
  Matrix means(3, 4);
  means.rowwise() = RowVector::LinSpaced(4, 1, 4);
  Matrix pts(2, 4);
  pts << 1, 2, 3, 4, 5, 6, 7, 8;
  const Projection p = project_to_prototype_subspace(pts, means);
  EXPECT_TRUE(p.fallback);
  EXPECT_EQ(p.coords(1, 0), 5.0);
  EXPECT_EQ(p.coords(1, 1), 6.0);
}

TEST(Projection, ContractsInterMeanDistancesInTenDimensions) {
  std::mt19937_64 gen(8);
  std::normal_distribution<double> n01;
  for (int trial = 0; trial < 50; ++trial) {
    const int k = 2 + trial % 5;
    Matrix means(k, 10), pts(30, 10);
    for (Eigen::Index i = 0; i < means.size(); ++i) means.data()[i] = n01(gen);
    for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = n01(gen);
    const Projection p = project_to_prototype_subspace(pts, means);
    for (Eigen::Index a = 0; a < k; ++a)
      for (Eigen::Index b = 0; b < k; ++b)
        EXPECT_LE(dist2(p.mean_coords, a, b), dist2(means, a, b) * (1 + 1e-12) + 1e-12);
    // Orthonormal basis.
    EXPECT_NEAR((p.basis.transpose() * p.basis - Eigen::Matrix2d::Identity()).norm(), 0.0, 1e-10);
    // With two means the line between them is preserved exactly.
    if (k == 2) {
      EXPECT_NEAR(dist2(p.mean_coords, 0, 1), dist2(means, 0, 1), 1e-9);
    }
  }
}

TEST(Projection, SignConventionAndDeterminism) {
  std::mt19937_64 gen(3);
  std::normal_distribution<double> n01;
  Matrix means(4, 6), pts(10, 6);
  for (Eigen::Index i = 0; i < means.size(); ++i) means.data()[i] = n01(gen);
  for (Eigen::Index i = 0; i < pts.size(); ++i) pts.data()[i] = n01(gen);
  const Projection p = project_to_prototype_subspace(pts, means);
  for (Eigen::Index c = 0; c < 2; ++c) {
    Eigen::Index first = 0;
    while (std::abs(p.basis(first, c)) <= 1e-12) ++first;
    EXPECT_GT(p.basis(first, c), 0.0);
  }
  const Projection again = project_to_prototype_subspace(pts, means);
  EXPECT_TRUE((p.coords.array() == again.coords.array()).all());
  // Flipping every mean's sign around the center keeps the sign convention.
  const Projection flipped = project_to_prototype_subspace(-pts, -means);
  for (Eigen::Index c = 0; c < 2; ++c) EXPECT_NEAR((flipped.basis.col(c) - p.basis.col(c)).norm(), 0.0, 1e-9);
}

TEST(Projection, CollinearMeansUseTheDataForTheSecondAxis) {
  Matrix means(2, 3);
  means << 0, 0, 0, 2, 0, 0;
  Matrix pts(4, 3);
  pts << 0, 0, 1, 2, 0, -1, 1, 0, 3, 1, 0, -3;
  const Projection p = project_to_prototype_subspace(pts, means);
  EXPECT_FALSE(p.fallback);
  EXPECT_NEAR(std::abs(p.basis(0, 0)), 1.0, 1e-12);
  EXPECT_NEAR(std::abs(p.basis(2, 1)), 1.0, 1e-12);
}

TEST(Projection, RejectsBadInput) {
  EXPECT_THROW(project_to_prototype_subspace(Matrix::Zero(3, 2), Matrix::Zero(1, 2)), DomainError);
  EXPECT_THROW(project_to_prototype_subspace(Matrix::Zero(3, 3), Matrix::Zero(2, 2)), ShapeError);
}

TEST(SessionService, CreateReturnsOneQueryPerCluster) {
  SessionService svc(model());
  const HandlerResult r = svc.create(sine_request().dump());
  ASSERT_EQ(r.status, 200) << r.body.dump();
  const json& v = r.body;
  EXPECT_EQ(v["status"], "AwaitingLabels");
  EXPECT_EQ(v["way"], 2);
  EXPECT_EQ(v["session"].get<std::string>().size(), 32u);
  EXPECT_EQ(v["samples"].size(), 32u);
  EXPECT_EQ(v["clusters"].size(), 2u);
  EXPECT_EQ(v["pending_queries"].size(), 2u);
  int flagged = 0, support = 0;
  for (const auto& s : v["samples"]) {
    flagged += s["is_query"].get<bool>();
    support += s["is_support"].get<bool>();
    EXPECT_TRUE(s["predicted"].is_null());
    EXPECT_TRUE(s["x"].is_number() && s["y"].is_number());
  }
  EXPECT_EQ(flagged, 2);
  EXPECT_EQ(support, 2);
  EXPECT_EQ(v["class_names"], json({"class 0", "class 1"}));
  EXPECT_EQ(svc.session_count(), 1u);
}

TEST(SessionService, SameSeedAndTaskGiveIdenticalQueries) {
  SessionService svc(model());
  const auto a = svc.create(sine_request(9, "entropy").dump());
  const auto b = svc.create(sine_request(9, "entropy").dump());
  ASSERT_EQ(a.status, 200);
  EXPECT_NE(a.body["session"], b.body["session"]);
  EXPECT_EQ(query_ids(a.body), query_ids(b.body));
  EXPECT_EQ(a.body["samples"], b.body["samples"]);
}

TEST(SessionService, MalformedRequestsAre400) {
  SessionService svc(model());
  EXPECT_EQ(svc.create("{not json").status, 400);
  EXPECT_EQ(svc.create("[1,2]").status, 400);
  EXPECT_EQ(svc.create("{}").status, 400);
  EXPECT_EQ(svc.create(R"({"sine": {}, "acquisition": "best"})").status, 400);
  EXPECT_EQ(svc.create(R"({"sine": {}, "acquisition": "oracle"})").status, 400);
  EXPECT_EQ(svc.create(R"({"sine": {}, "mode": "soft"})").status, 400);
  EXPECT_EQ(svc.create(R"({"sine": {"kshot": "one"}})").status, 400);
  EXPECT_EQ(svc.create(R"({"task": {"support": {"x": [[0, 0], [1]], "y": [0, 1]}}})").status, 400);
  EXPECT_EQ(svc.create(R"({"task": {"support": {"x": [[0, 0], [1, 1]], "y": [0, 5]}}})").status, 400);
  EXPECT_EQ(svc.create(R"({"task_file": "/nonexistent/tasks.tsv"})").status, 400);
  const HandlerResult r = svc.create("{not json");
  EXPECT_TRUE(r.body.contains("error"));
  EXPECT_EQ(svc.session_count(), 0u);
}

TEST(SessionService, DimensionMismatchIs422) {
  SessionService svc(model());
  const json req = {{"task", {{"support", {{"x", {{0, 0, 0}, {1, 1, 1}}}, {"y", {0, 1}}}}}}};
  EXPECT_EQ(svc.create(req.dump()).status, 422);
  json embedded = req;
  embedded["embedded"] = true;
  EXPECT_EQ(svc.create(embedded.dump()).status, 422);
}

TEST(SessionService, InlineEmbeddedTaskAndTaskFile) {
  SessionService svc(model());
  json x = json::array();
  for (int i = 0; i < 6; ++i) {
    std::vector<double> row(40, 0.0);
    row[0] = i < 3 ? 0.1 * i : 10 + 0.1 * i;
    x.push_back(row);
  }
  const json req = {{"task", {{"way", 2}, {"unlabeled", {{"x", x}}}}}, {"embedded", true}, {"acquisition", "nearest"},
                    {"class_names", {"cat", "dog"}}};
  const HandlerResult r = svc.create(req.dump());
  ASSERT_EQ(r.status, 200) << r.body.dump();
  EXPECT_EQ(r.body["class_names"], json({"cat", "dog"}));
  EXPECT_EQ(r.body["samples"][0]["role"], "U");

  const fs::path p = fs::temp_directory_path() / "fewshot_session_tasks.tsv";
  write_task_file(sample_sine_tasks(SineGenConfig{}, {1, 5, 2}, 3), p);
  const HandlerResult f = svc.create(json{{"task_file", p.string()}, {"task_index", 2}}.dump());
  ASSERT_EQ(f.status, 200) << f.body.dump();
  EXPECT_EQ(f.body["samples"].size(), 16u);
  EXPECT_EQ(svc.create(json{{"task_file", p.string()}, {"task_index", 3}}.dump()).status, 400);
}

TEST(SessionService, UnknownSessionIs404AndNonQueryIs409) {
  SessionService svc(model());
  EXPECT_EQ(svc.view("nope").status, 404);
  EXPECT_EQ(svc.submit("nope", R"({"sample": 0, "class": 0})").status, 404);
  const auto created = svc.create(sine_request().dump());
  const std::string id = created.body["session"];
  const auto q = query_ids(created.body);
  int other = 0;
  while (std::find(q.begin(), q.end(), other) != q.end()) ++other;
  EXPECT_EQ(svc.submit(id, json{{"sample", other}, {"class", 0}}.dump()).status, 409);
  EXPECT_EQ(svc.submit(id, json{{"sample", q[0]}, {"class", 2}}.dump()).status, 400);
  EXPECT_EQ(svc.submit(id, json{{"sample", q[0]}}.dump()).status, 400);
  EXPECT_EQ(svc.submit(id, "nonsense").status, 400);
  EXPECT_TRUE(svc.view(id).body["history"].empty());
}

TEST(SessionService, CompletionResubmissionAndSharedClasses) {
  SessionService svc(model());
  const auto created = svc.create(sine_request().dump());
  const std::string id = created.body["session"];
  const auto q = query_ids(created.body);
  ASSERT_EQ(q.size(), 2u);

  auto partial = svc.submit(id, json{{"sample", q[0]}, {"class", 1}}.dump());
  ASSERT_EQ(partial.status, 200);
  EXPECT_EQ(partial.body["status"], "AwaitingLabels");
  EXPECT_EQ(partial.body["pending_queries"], json({q[1]}));

  auto done = svc.submit(id, json{{"sample", q[1]}, {"class", 0}}.dump());
  EXPECT_EQ(done.body["status"], "Complete");
  EXPECT_TRUE(done.body["pending_queries"].empty());
  for (const auto& s : done.body["samples"]) {
    ASSERT_FALSE(s["predicted"].is_null());
    const int c = s["cluster"];
    EXPECT_EQ(s["predicted"], c == 0 ? 1 : 0);
  }

  // Same class for both clusters.
  auto same = svc.submit(id, json{{"sample", q[1]}, {"class", 1}}.dump());
  EXPECT_EQ(same.body["status"], "Complete");
  for (const auto& s : same.body["samples"]) EXPECT_EQ(s["predicted"], 1);
  EXPECT_EQ(same.body["history"].size(), 3u);
  EXPECT_EQ(same.body["transcript"]["mapping"], json({1, 1}));
}

TEST(SessionService, PredictionsMatchScriptedReplay) {
  for (const char* acq : {"random", "nearest", "entropy", "margin"}) {
    SessionService svc(model());
    const auto created = svc.create(sine_request(17, acq).dump());
    const std::string id = created.body["session"];
    const auto q = query_ids(created.body);
    std::map<int, ClassId> answers;
    for (std::size_t i = 0; i < q.size(); ++i) {
      answers[q[i]] = static_cast<ClassId>(i % 2);
      svc.submit(id, json{{"sample", q[i]}, {"class", i % 2}}.dump());
    }
    const json v = svc.view(id).body;
    ASSERT_EQ(v["status"], "Complete");

    // Offline replay from the view's transcript through active_adapt.
    const auto s = svc.session(id);
    ASSERT_TRUE(s);
    const Transcript t = v["transcript"].get<Transcript>();
    ScriptedProvider provider(t.answer_map());
    const ActiveResult replay = active_adapt(s->input, s->options, provider);
    ASSERT_EQ(replay.predictions.size(), v["samples"].size());
    for (std::size_t i = 0; i < replay.predictions.size(); ++i)
      EXPECT_EQ(v["samples"][i]["predicted"].get<ClassId>(), replay.predictions[i]) << acq;
    EXPECT_EQ(json(replay.transcript), v["transcript"]);

    // Independent rebuild from the raw sine task and the model.
    SineGenConfig gen;
    gen.seed = 2;
    const SineGenConfig test = for_split(gen, Split::Test);
    const SineParams params = sample_sine_params(test, 3);
    const LabeledSet sup = sample_sine_set(test, params, 3, Role::Support, 1);
    const LabeledSet unl = sample_sine_set(test, params, 3, Role::Unlabeled, 15);
    ActiveInput in;
    in.way = 2;
    in.labeled_rows = 2;
    in.points = vstack({&sup.x, &unl.x});
    in.points = mlp_forward(model(), in.points);
    in.hidden_labels = sup.y;
    in.hidden_labels.insert(in.hidden_labels.end(), unl.y.begin(), unl.y.end());
    ActiveOptions opts;
    opts.kind = parse_acquisition(acq);
    opts.seed = 17;
    ScriptedProvider again(answers);
    EXPECT_EQ(active_adapt(in, opts, again).predictions, replay.predictions) << acq;
  }
}

TEST(SessionService, ConcurrentSubmissionsAreSerialized) {
  SessionService svc(model());
  std::vector<std::string> ids;
  std::vector<std::vector<int>> queries;
  for (int i = 0; i < 4; ++i) {
    const auto r = svc.create(sine_request(static_cast<std::uint64_t>(i)).dump());
    ids.push_back(r.body["session"]);
    queries.push_back(query_ids(r.body));
  }
  {
    std::vector<std::jthread> workers;
    for (int w = 0; w < 8; ++w) {
      workers.emplace_back([&, w] {
        for (int rep = 0; rep < 25; ++rep) {
          const auto k = static_cast<std::size_t>((w + rep) % 4);
          for (int q : queries[k]) svc.submit(ids[k], json{{"sample", q}, {"class", (w + rep) % 2}}.dump());
          svc.view(ids[k]);
        }
      });
    }
  }
  for (std::size_t k = 0; k < 4; ++k) {
    const json v = svc.view(ids[k]).body;
    EXPECT_EQ(v["status"], "Complete");
    // Final mapping follows the last recorded answer per query.
    std::map<int, ClassId> last;
    for (const auto& h : v["history"]) last[h["sample"].get<int>()] = h["class"].get<ClassId>();
    for (const auto& c : v["clusters"]) EXPECT_EQ(c["class"], last.at(c["query"].get<int>()));
    EXPECT_EQ(v["history"].size(), 2u * 50u);
  }
}

TEST(SessionService, SnapshotIsWrittenOnEveryMutation) {
  const fs::path dir = fs::temp_directory_path() / "fewshot_session_snapshots";
  fs::remove_all(dir);
  SessionService svc(model(), dir);
  const auto created = svc.create(sine_request().dump());
  const std::string id = created.body["session"];
  const fs::path file = dir / (id + ".json");
  ASSERT_TRUE(fs::exists(file));
  auto load = [&] {
    std::ifstream in(file);
    return json::parse(in);
  };
  EXPECT_EQ(load()["status"], "AwaitingLabels");
  EXPECT_EQ(load()["embeddings"].size(), 32u);
  EXPECT_EQ(load()["embeddings"][0].size(), 40u);
  const auto q = query_ids(created.body);
  for (int s : q) svc.submit(id, json{{"sample", s}, {"class", 0}}.dump());
  const json snap = load();
  EXPECT_EQ(snap["status"], "Complete");
  EXPECT_EQ(snap["history"].size(), 2u);
  EXPECT_EQ(snap["support_labels"].size(), 2u);
  EXPECT_FALSE(fs::exists(fs::path(file) += ".tmp"));
}

TEST(HttpService, RoundTripOverLoopback) {
  SessionService svc(model());
  httplib::Server server;
  install_routes(server, svc, "http://localhost:5173");
  const int port = server.bind_to_any_port("127.0.0.1");
  ASSERT_GT(port, 0);
  std::jthread loop([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  httplib::Client client("127.0.0.1", port);
  const auto health = client.Get("/healthz");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  EXPECT_EQ(json::parse(health->body)["status"], "ok");
  EXPECT_EQ(health->get_header_value("Access-Control-Allow-Origin"), "http://localhost:5173");

  const auto created = client.Post("/sessions", sine_request().dump(), "application/json");
  ASSERT_TRUE(created);
  ASSERT_EQ(created->status, 200) << created->body;
  const json v = json::parse(created->body);
  const std::string id = v["session"];
  EXPECT_EQ(created->get_header_value("Content-Type"), "application/json");

  for (int q : query_ids(v)) {
    const auto r = client.Post("/sessions/" + id + "/labels", json{{"sample", q}, {"class", 1}}.dump(),
                               "application/json");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
  }
  const auto view = client.Get("/sessions/" + id + "/view");
  ASSERT_TRUE(view);
  EXPECT_EQ(json::parse(view->body)["status"], "Complete");

  EXPECT_EQ(client.Get("/sessions/unknown/view")->status, 404);
  EXPECT_EQ(client.Post("/sessions", "{", "application/json")->status, 400);
  const auto pre = client.Options("/sessions");
  ASSERT_TRUE(pre);
  EXPECT_EQ(pre->status, 204);
  EXPECT_EQ(pre->get_header_value("Access-Control-Allow-Methods"), "GET, POST, OPTIONS");
  server.stop();
}
