#include <filesystem>
#include <fstream>

#include <gtest/gtest.h>

#include "fewshot/active.hpp"
#include "fewshot/adapt.hpp"
#include "fewshot/embedio.hpp"
#include "fewshot/synthdata.hpp"

using namespace fewshot;
namespace fs = std::filesystem;

namespace {

const fs::path kData = FEWSHOT_TEST_DATA;

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "fewshot_embedio_test";
  fs::create_directories(dir);
  return dir / name;
}

bool same_set(const LabeledSet& a, const LabeledSet& b) {
  return a.y == b.y && a.x.rows() == b.x.rows() && a.x.cols() == b.x.cols() && (a.x.array() == b.x.array()).all();
}

bool same_task(const Task& a, const Task& b) {
  return a.task_id == b.task_id && a.way == b.way && same_set(a.support, b.support) &&
         same_set(a.unlabeled, b.unlabeled) && same_set(a.query, b.query);
}

std::vector<Task> sine_tasks(int count, std::uint64_t seed) {
  SineGenConfig g;
  g.seed = seed;
  return sample_sine_tasks(g, {3, 7, 5}, count);
}

std::string golden_text() { return detail::read_all(kData / "golden_tasks.tsv"); }

void expect_parse_error_at(const std::string& text, std::size_t line) {
  try {
    parse_task_file(text);
    FAIL() << "expected ParseError";
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line, line) << e.what();
    EXPECT_NE(std::string(e.what()).find("line " + std::to_string(line)), std::string::npos);
  }
}

}  // namespace

TEST(TaskFile, GoldenFixtureValues) {
  const TaskFile tf = read_task_file(kData / "golden_tasks.tsv");
  EXPECT_EQ(tf.header.input_dim, 2);
  EXPECT_EQ(tf.header.way, 2);
  EXPECT_EQ(tf.header.shot, 1);
  EXPECT_EQ(tf.header.task_count, 2);
  EXPECT_EQ(tf.header.seed, 7u);
  ASSERT_EQ(tf.tasks.size(), 2u);
  const Task& a = tf.tasks[0];
  EXPECT_EQ(a.task_id, 3);
  EXPECT_EQ(a.support.y, (std::vector<ClassId>{0, 1}));
  EXPECT_EQ(a.support.x(0, 0), -1.5);
  EXPECT_EQ(a.support.x(0, 1), 2.25);
  EXPECT_EQ(a.support.x(1, 0), 0.5);
  EXPECT_EQ(a.support.x(1, 1), -2.0);
  EXPECT_EQ(a.unlabeled.x(0, 0), 4.125);
  EXPECT_EQ(a.unlabeled.x(1, 1), 0.1);
  EXPECT_EQ(a.query.x(1, 0), 0.0625);
  EXPECT_EQ(a.query.x(1, 1), -1.75);
  const Task& b = tf.tasks[1];
  EXPECT_EQ(b.task_id, 9);
  EXPECT_EQ(b.query.y, (std::vector<ClassId>{0, 1}));
  EXPECT_EQ(b.query.x(0, 1), 4.5);
  EXPECT_EQ(b.query.x(1, 0), -4.0);
}

TEST(TaskFile, GoldenFixtureRewritesByteIdentically) {
  const TaskFile tf = parse_task_file(golden_text());
  EXPECT_EQ(format_task_file(tf.tasks, {false, 7}), golden_text());
}

TEST(TaskFile, RoundTripIsValueExact) {
  const auto tasks = sine_tasks(12, 5);
  const fs::path p = temp_path("roundtrip.tsv");
  write_task_file(tasks, p, {false, 5});
  const TaskFile back = read_task_file(p);
  ASSERT_EQ(back.tasks.size(), tasks.size());
  for (std::size_t i = 0; i < tasks.size(); ++i) EXPECT_TRUE(same_task(tasks[i], back.tasks[i])) << i;
  EXPECT_EQ(back.header.shot, 3);
  EXPECT_EQ(back.header.unlabeled, 7);
  EXPECT_EQ(back.header.query, 5);
  EXPECT_FALSE(fs::exists(fs::path(p) += ".tmp"));
}

TEST(TaskFile, EmptyListIsAnError) {
  EXPECT_THROW(format_task_file({}), FormatError);
}

TEST(TaskFile, HeterogeneousTasksAreAnError) {
  auto tasks = sine_tasks(2, 1);
  tasks.push_back(sample_sine_task(SineGenConfig{}, {2, 7, 5}, 9));
  EXPECT_THROW(format_task_file(tasks), FormatError);
}

TEST(TaskFile, MaskedExportThenOracleFails) {
  const auto tasks = sine_tasks(1, 2);
  const TaskFile tf = parse_task_file(format_task_file(tasks, {true, 0}));
  const Task& t = tf.tasks[0];
  EXPECT_TRUE(t.unlabeled.has_masked_labels());
  EXPECT_EQ(t.support.y, tasks[0].support.y);
  EXPECT_EQ(t.query.y, tasks[0].query.y);
  EXPECT_TRUE((t.unlabeled.x.array() == tasks[0].unlabeled.x.array()).all());
  const ClusterState s = seeded_kmeans(t.support.x, t.support.y, t.unlabeled.x, {KMeansVariant::SeededHard, 10}, 2);
  EXPECT_THROW(oracle_label_clusters(s, t.unlabeled.x, t.unlabeled.y, 2), LabelsUnavailable);
  OracleProvider oracle(t.unlabeled.y);
  EXPECT_THROW(oracle.answer(0), LabelsUnavailable);
}

TEST(TaskFile, TruncatedFileNamesTheLine) {
  std::string text = golden_text();
  // Drop the last two sample lines.
  for (int i = 0; i < 2; ++i) text.erase(text.rfind('\n', text.size() - 2) + 1);
  try {
    parse_task_file(text);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line, 12u);
    EXPECT_NE(std::string(e.what()).find("unexpected end of file"), std::string::npos);
  }
}

TEST(TaskFile, FeatureCountMismatchNamesTheLine) {
  std::string text = golden_text();
  const auto pos = text.find("3\tU\t0\t4.125\t1\n");
  text.replace(pos, 14, "3\tU\t0\t4.125\n");
  expect_parse_error_at(text, 4);
}

TEST(TaskFile, BadHeaderIsRejected) {
  const std::string text = golden_text();
  std::string bad_magic = text;
  bad_magic.replace(0, 6, "XADAPT");
  expect_parse_error_at(bad_magic, 1);
  std::string future = text;
  future.replace(future.find("version=1"), 9, "version=2");
  expect_parse_error_at(future, 1);
  std::string no_version = text;
  no_version.erase(no_version.find("\tversion=1"), 10);
  expect_parse_error_at(no_version, 1);
  std::string unknown = text;
  unknown.insert(unknown.find('\n'), "\tcolor=red");
  expect_parse_error_at(unknown, 1);
  expect_parse_error_at("", 1);
}

TEST(TaskFile, BadSampleLinesAreRejected) {
  const std::string text = golden_text();
  std::string role = text;
  role.replace(role.find("3\tU\t0"), 5, "3\tQ\t0");
  expect_parse_error_at(role, 4);
  std::string label = text;
  label.replace(label.find("3\tQ\t0\t0"), 7, "3\tQ\t5\t0");
  expect_parse_error_at(label, 6);
  std::string masked_support = text;
  masked_support.replace(masked_support.find("3\tS\t1"), 5, "3\tS\t-1");
  expect_parse_error_at(masked_support, 3);
  std::string number = text;
  number.replace(number.find("4.125"), 5, "4.1x5");
  expect_parse_error_at(number, 4);
  std::string id = text;
  id.replace(id.find("3\tQ\t1"), 1, "4");
  expect_parse_error_at(id, 7);
  expect_parse_error_at(text + "9\tQ\t1\t0\t0\n", 14);
}

TEST(TaskFile, CarriageReturnsAreTolerated) {
  std::string text = golden_text();
  for (std::size_t p = text.find('\n'); p != std::string::npos; p = text.find('\n', p + 2)) text.insert(p, "\r");
  const TaskFile tf = parse_task_file(text);
  const TaskFile ref = parse_task_file(golden_text());
  for (std::size_t i = 0; i < 2; ++i) EXPECT_TRUE(same_task(tf.tasks[i], ref.tasks[i]));
}

TEST(ExportEmbeddings, ZeroModelGivesZeroFeatures) {
  const EmbeddingModel m = EmbeddingModel::zeros({2, 4, 3});
  const auto tasks = sine_tasks(3, 4);
  const fs::path p = temp_path("zero.tsv");
  export_embeddings(m, tasks, p);
  const TaskFile tf = read_task_file(p);
  EXPECT_EQ(tf.header.input_dim, 3);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const Task& t = tf.tasks[i];
    EXPECT_EQ(t.task_id, tasks[i].task_id);
    EXPECT_EQ(t.support.y, tasks[i].support.y);
    EXPECT_EQ(t.unlabeled.y, tasks[i].unlabeled.y);
    EXPECT_EQ(t.query.y, tasks[i].query.y);
    for (const LabeledSet* s : {&t.support, &t.unlabeled, &t.query}) EXPECT_TRUE((s->x.array() == 0.0).all());
  }
}

TEST(ExportEmbeddings, DimensionMismatchIsAnError) {
  const EmbeddingModel m = EmbeddingModel::zeros({3, 4});
  EXPECT_THROW(embed_tasks(m, sine_tasks(1, 0)), ShapeError);
}

TEST(ExportEmbeddings, FileAndMemoryPipelinesAgreeExactly) {
  const EmbeddingModel m = EmbeddingModel::glorot({2, 40, 40, 40}, 11);
  const auto tasks = sine_tasks(10, 8);
  const fs::path p = temp_path("embedded.tsv");
  export_embeddings(m, tasks, p);
  const TaskFile tf = read_task_file(p);
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    // In-memory path computed independently of embed_task.
    const Matrix zs = mlp_forward(m, tasks[i].support.x);
    const Matrix zu = mlp_forward(m, tasks[i].unlabeled.x);
    const Matrix zq = mlp_forward(m, tasks[i].query.x);
    const Task& f = tf.tasks[i];
    EXPECT_TRUE((f.support.x.array() == zs.array()).all());
    for (KMeansMode mode : {KMeansMode{KMeansVariant::SeededHard, 10}, KMeansMode{KMeansVariant::ConstrainedHard, 10},
                            KMeansMode::soft()}) {
      const ClusterState mem = seeded_kmeans(zs, tasks[i].support.y, zu, mode, 2);
      const ClusterState file = seeded_kmeans(f.support.x, f.support.y, f.unlabeled.x, mode, 2);
      EXPECT_TRUE((mem.means.array() == file.means.array()).all());
      EXPECT_EQ(predict_with_state(mem, zq), predict_with_state(file, f.query.x));
    }
  }
}

TEST(ModelFile, RoundTripIsExact) {
  EmbeddingModel m = EmbeddingModel::glorot({2, 5, 3}, 4);
  m.layers[0].bias[1] = -0.125;
  Matrix protos(2, 3);
  protos << 1, 2, 3, 4, 5, 6.5;
  m.global.accumulate(protos);
  m.global.accumulate(protos * 0.5);
  const fs::path p = temp_path("model.bin");
  save_model(m, p, R"({"episodes":3})", 99);
  const ModelFile back = load_model(p);
  EXPECT_EQ(back.model.sizes, m.sizes);
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    EXPECT_TRUE((back.model.layers[l].weight.array() == m.layers[l].weight.array()).all());
    EXPECT_TRUE((back.model.layers[l].bias.array() == m.layers[l].bias.array()).all());
  }
  EXPECT_EQ(back.model.global.episodes, 2);
  EXPECT_TRUE((back.model.global.sum.array() == m.global.sum.array()).all());
  EXPECT_EQ(back.config_json, R"({"episodes":3})");
  EXPECT_EQ(back.seed, 99u);
}

TEST(ModelFile, ModelWithoutPrototypes) {
  const EmbeddingModel m = EmbeddingModel::zeros({2, 2});
  const ModelFile back = deserialize_model(serialize_model(m));
  EXPECT_TRUE(back.model.global.empty());
  EXPECT_EQ(back.config_json, "{}");
}

TEST(ModelFile, CorruptFilesAreRejected) {
  const std::string good = serialize_model(EmbeddingModel::glorot({2, 3}, 1));
  EXPECT_THROW(deserialize_model(good.substr(0, good.size() - 3)), FormatError);
  EXPECT_THROW(deserialize_model(good + "x"), FormatError);
  std::string magic = good;
  magic[0] = 'Q';
  EXPECT_THROW(deserialize_model(magic), FormatError);
  std::string version = good;
  version[kModelMagic.size()] = 7;
  EXPECT_THROW(deserialize_model(version), FormatError);
  EXPECT_THROW(load_model(temp_path("does_not_exist.bin")), IoError);
}
