// padapt: data generation, training, evaluation and the labeling service.

#include <csignal>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "fewshot/config.hpp"
#include "fewshot/embedio.hpp"
#include "fewshot/harness.hpp"
#include "fewshot/service.hpp"

using namespace fewshot;
using nlohmann::json;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError(path + ": not valid JSON");
  return j;
}

void write_json_file(const std::string& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path);
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "validation") return Split::Validation;
  if (s == "test") return Split::Test;
  throw ConfigError("unknown split '" + s + "'");
}

struct GenArgs {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> laplace_scale;
  std::string split = "test";
  int tasks = 100;
  int kshot = 5;
  int unlabeled = 50;
  int query = 200;
  bool mask_unlabeled = false;
  std::string out;
};

int run_gen_data(const GenArgs& a) {
  SineGenConfig gen = a.config.empty() ? SineGenConfig{} : sine_config_from_json(read_json_file(a.config));
  if (a.seed) gen.seed = *a.seed;
  if (a.laplace_scale) gen.laplace_scale = *a.laplace_scale;
  gen.validate();
  const auto tasks = sample_sine_tasks(for_split(gen, parse_split(a.split)), {a.kshot, a.unlabeled, a.query}, a.tasks);
  write_task_file(tasks, a.out, {a.mask_unlabeled, gen.seed});
  std::printf("wrote %d tasks to %s\n", a.tasks, a.out.c_str());
  return 0;
}

struct TrainArgs {
  std::string config;
  std::string gen_config;
  std::optional<int> episodes;
  std::optional<std::uint64_t> seed;
  bool no_early_stop = false;
  std::string out;
  std::string log;
};

int run_train(const TrainArgs& a) {
  TrainConfig cfg = a.config.empty() ? TrainConfig{} : train_config_from_json(read_json_file(a.config));
  SineGenConfig gen = a.gen_config.empty() ? SineGenConfig{} : sine_config_from_json(read_json_file(a.gen_config));
  if (a.episodes) cfg.episodes = *a.episodes;
  if (a.seed) {
    cfg.seed = *a.seed;
    gen.seed = *a.seed;
  }
  if (a.no_early_stop) cfg.early_stop.enabled = false;
  TrainLog log;
  const EmbeddingModel model = train_with_log(cfg, gen, &log);
  const json echo = {{"train", to_json(cfg)}, {"generator", to_json(gen)}};
  save_model(model, a.out, echo.dump(), cfg.seed);
  std::printf("trained %d episodes (best at %d%s); model written to %s\n", log.episodes_run, log.best_episode,
              log.stopped_early ? ", stopped early" : "", a.out.c_str());
  if (!a.log.empty()) {
    json v = json::array();
    for (const auto& [e, err] : log.validation) v.push_back({{"episode", e}, {"error", err}});
    write_json_file(a.log, {{"losses", log.losses},
                            {"validation", v},
                            {"best_episode", log.best_episode},
                            {"episodes_run", log.episodes_run},
                            {"stopped_early", log.stopped_early}});
  }
  return 0;
}

struct EvalArgs {
  std::string model;
  std::string strategy = "supervised";
  int kshot = 5;
  int unlabeled = 0;
  int extra_labeled = 0;
  int tasks = 1000;
  int query = 200;
  std::optional<int> iters;
  std::string mode = "seeded";
  std::string acquisition = "margin";
  bool transductive = false;
  bool active_seeded = false;
  std::uint64_t seed = 0;
  std::string grid;
  std::string task_file;
  bool embedded = false;
  unsigned threads = default_threads();
  std::string out;
};

ExperimentConfig experiment_from_args(const EvalArgs& a) {
  ExperimentConfig c;
  c.strategy = parse_strategy(a.strategy);
  c.kmeans = default_kmeans_mode(parse_kmeans_variant(a.mode));
  if (a.iters) c.kmeans.max_iters = *a.iters;
  c.acquisition = parse_acquisition(a.acquisition);
  c.shot = a.kshot;
  c.unlabeled = a.unlabeled;
  c.extra_labeled = a.extra_labeled;
  c.tasks = a.tasks;
  c.query_per_class = a.query;
  c.transductive = a.transductive;
  c.active_seeded = a.active_seeded;
  c.seed = a.seed;
  c.label = std::string(to_string(c.strategy));
  return c;
}

std::vector<ExperimentConfig> grid_from_name(const std::string& name, const ExperimentConfig& base) {
  if (name == "semi") return semi_supervised_grid(base);
  if (name == "unsupervised") return unsupervised_grid(base);
  if (name == "iterations") return iteration_grid(base);
  if (name == "active") return active_grid(base);
  throw ConfigError("unknown grid '" + name + "' (semi, unsupervised, iterations, active)");
}

/// Tasks from a file, embedded with the model unless already embedded.
std::vector<Task> load_embedded_tasks(const EmbeddingModel& model, const std::string& path, bool embedded) {
  TaskFile tf = read_task_file(path);
  if (embedded) {
    if (tf.header.input_dim != model.embedding_dim())
      throw ShapeError("task file dimension " + std::to_string(tf.header.input_dim) + " != embedding dimension " +
                       std::to_string(model.embedding_dim()));
    return std::move(tf.tasks);
  }
  return embed_tasks(model, tf.tasks);
}

void emit(const Report& r, const std::string& out) {
  std::fputs(format_table(r).c_str(), stdout);
  if (!out.empty()) {
    write_json_file(out, to_json(r));
    std::printf("report written to %s\n", out.c_str());
  }
}

int run_eval(const EvalArgs& a) {
  const ModelFile mf = load_model(a.model);
  const ExperimentConfig base = experiment_from_args(a);
  const std::vector<ExperimentConfig> grid = a.grid.empty() ? std::vector{base} : grid_from_name(a.grid, base);
  Report r;
  if (a.task_file.empty()) {
    r = run_experiment(mf.model, grid, {}, a.threads);
  } else {
    r.meta["task_file"] = a.task_file;
    const auto tasks = load_embedded_tasks(mf.model, a.task_file, a.embedded);
    const PrototypeSet global = mf.model.global.empty() ? PrototypeSet{} : mf.model.global.prototypes();
    for (ExperimentConfig c : grid) {
      if (!tasks.empty()) {
        const Task& t = tasks.front();
        c.shot = t.shot;
        c.unlabeled = static_cast<int>(t.unlabeled.x.rows());
        c.query_per_class = t.way > 0 ? static_cast<int>(t.query.x.rows()) / t.way : 0;
        c.tasks = static_cast<int>(tasks.size());
      }
      r.rows.push_back(evaluate_embedded(tasks, c, mf.model.global.empty() ? nullptr : &global, a.threads));
    }
  }
  r.meta["model"] = a.model;
  r.meta["model_seed"] = mf.seed;
  r.meta["threads"] = a.threads;
  emit(r, a.out);
  return 0;
}

struct ActiveSimArgs {
  std::string model;
  std::string task_file;
  bool embedded = false;
  int iters = 10;
  std::string mode = "seeded";
  bool seeded = false;
  bool transductive = false;
  std::uint64_t seed = 0;
  std::string out;
};

int run_active_sim(const ActiveSimArgs& a) {
  const ModelFile mf = load_model(a.model);
  const auto tasks = load_embedded_tasks(mf.model, a.task_file, a.embedded);
  ExperimentConfig base;
  base.kmeans = {parse_kmeans_variant(a.mode), a.iters};
  base.transductive = a.transductive;
  base.active_seeded = a.seeded;
  base.seed = a.seed;
  base.tasks = static_cast<int>(tasks.size());
  Report r;
  r.meta = {{"model", a.model}, {"task_file", a.task_file}, {"skipped", json::array()}};
  for (const ExperimentConfig& c : active_grid(base)) {
    try {
      r.rows.push_back(evaluate_embedded(tasks, c, nullptr));
    } catch (const LabelsUnavailable& e) {
      std::fprintf(stderr, "skipping %s: %s\n", c.label.c_str(), e.what());
      r.meta["skipped"].push_back({{"label", c.label}, {"reason", e.what()}});
    }
  }
  emit(r, a.out);
  return 0;
}

int run_export(const std::string& model_path, const std::string& task_file, const std::string& out) {
  const ModelFile mf = load_model(model_path);
  const TaskFile tf = read_task_file(task_file);
  export_embeddings(mf.model, tf.tasks, out, {false, tf.header.seed});
  std::printf("wrote %zu embedded tasks to %s\n", tf.tasks.size(), out.c_str());
  return 0;
}

struct ServeArgs {
  std::string model;
  std::string host = "127.0.0.1";
  int port = 8080;
  std::string snapshot_dir;
  std::string allow_origin = "*";
};

httplib::Server* g_server = nullptr;

int run_serve(const ServeArgs& a) {
  ModelFile mf = load_model(a.model);
  std::optional<std::filesystem::path> snaps;
  if (!a.snapshot_dir.empty()) snaps = a.snapshot_dir;
  SessionService service(std::move(mf.model), snaps);
  httplib::Server server;
  install_routes(server, service, a.allow_origin);
  g_server = &server;
  std::signal(SIGINT, [](int) {
    if (g_server) g_server->stop();
  });
  std::signal(SIGTERM, [](int) {
    if (g_server) g_server->stop();
  });
  std::printf("serving on http://%s:%d\n", a.host.c_str(), a.port);
  std::fflush(stdout);
  if (!server.listen(a.host, a.port)) {
    std::fprintf(stderr, "error: cannot listen on %s:%d\n", a.host.c_str(), a.port);
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Few-shot adaptation toolkit: prototypical embeddings with K-means and active adaptation"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Write a file of synthetic sine tasks");
  gen_cmd->add_option("--config", gen.config, "generator config (JSON)");
  gen_cmd->add_option("--seed", gen.seed, "generator seed");
  gen_cmd->add_option("--laplace-scale", gen.laplace_scale, "noise scale");
  gen_cmd->add_option("--split", gen.split, "train | validation | test")->capture_default_str();
  gen_cmd->add_option("--tasks", gen.tasks, "number of tasks")->capture_default_str()->check(CLI::PositiveNumber);
  gen_cmd->add_option("--kshot", gen.kshot, "support samples per class")->capture_default_str()->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--unlabeled", gen.unlabeled, "unlabeled samples per class")->capture_default_str()->check(CLI::NonNegativeNumber);
  gen_cmd->add_option("--query", gen.query, "query samples per class")->capture_default_str()->check(CLI::NonNegativeNumber);
  gen_cmd->add_flag("--mask-unlabeled", gen.mask_unlabeled, "write -1 instead of the unlabeled labels");
  gen_cmd->add_option("--out", gen.out, "output task file")->required();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train the embedding network on episodic sine tasks");
  train_cmd->add_option("--config", tr.config, "training config (JSON)");
  train_cmd->add_option("--gen-config", tr.gen_config, "generator config (JSON)");
  train_cmd->add_option("--episodes", tr.episodes, "maximum training episodes");
  train_cmd->add_option("--seed", tr.seed, "seed for initialization, episodes and training tasks");
  train_cmd->add_flag("--no-early-stop", tr.no_early_stop, "train for the full episode budget");
  train_cmd->add_option("--out", tr.out, "output model file")->required();
  train_cmd->add_option("--log", tr.log, "training log (JSON)");

  EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate an adaptation strategy");
  eval_cmd->add_option("--model", ev.model, "model file")->required();
  eval_cmd->add_option("--strategy", ev.strategy, "supervised | semi | unsupervised | active")->capture_default_str();
  eval_cmd->add_option("--kshot", ev.kshot, "labeled samples per class")->capture_default_str();
  eval_cmd->add_option("--unlabeled", ev.unlabeled, "unlabeled samples per task")->capture_default_str();
  eval_cmd->add_option("--extra-labeled", ev.extra_labeled, "extra labeled samples per task")->capture_default_str();
  eval_cmd->add_option("--tasks", ev.tasks, "number of test tasks")->capture_default_str();
  eval_cmd->add_option("--query", ev.query, "query samples per class")->capture_default_str();
  eval_cmd->add_option("--iters", ev.iters, "K-means iterations (default 10, soft 1)");
  eval_cmd->add_option("--mode", ev.mode, "seeded | constrained | soft")->capture_default_str();
  eval_cmd->add_option("--acquisition", ev.acquisition, "random | nearest | entropy | margin | oracle")->capture_default_str();
  eval_cmd->add_flag("--transductive", ev.transductive, "cluster the query samples too");
  eval_cmd->add_flag("--active-seeded", ev.active_seeded, "seed active clustering with the labeled samples");
  eval_cmd->add_option("--seed", ev.seed, "evaluation seed")->capture_default_str();
  eval_cmd->add_option("--grid", ev.grid, "semi | unsupervised | iterations | active");
  eval_cmd->add_option("--task-file", ev.task_file, "evaluate tasks from a file instead of fresh sine tasks");
  eval_cmd->add_flag("--embedded", ev.embedded, "the task file already holds embeddings");
  eval_cmd->add_option("--threads", ev.threads, "worker threads")->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "report (JSON)");

  ActiveSimArgs as;
  auto* active_cmd = app.add_subcommand("active-sim", "Compare acquisition functions with simulated answers");
  active_cmd->add_option("--model", as.model, "model file")->required();
  active_cmd->add_option("--task-file", as.task_file, "task file")->required();
  active_cmd->add_flag("--embedded", as.embedded, "the task file already holds embeddings");
  active_cmd->add_option("--iters", as.iters, "K-means iterations")->capture_default_str();
  active_cmd->add_option("--mode", as.mode, "seeded | constrained")->capture_default_str();
  active_cmd->add_flag("--seeded", as.seeded, "seed clustering with the support samples");
  active_cmd->add_flag("--transductive", as.transductive, "cluster the query samples too");
  active_cmd->add_option("--seed", as.seed, "seed")->capture_default_str();
  active_cmd->add_option("--out", as.out, "report (JSON)");

  std::string ex_model, ex_tasks, ex_out;
  auto* export_cmd = app.add_subcommand("export-embeddings", "Write a task file with embedded inputs");
  export_cmd->add_option("--model", ex_model, "model file")->required();
  export_cmd->add_option("--task-file", ex_tasks, "input task file")->required();
  export_cmd->add_option("--out", ex_out, "output task file")->required();

  ServeArgs sv;
  auto* serve_cmd = app.add_subcommand("serve", "Serve interactive labeling sessions over HTTP");
  serve_cmd->add_option("--model", sv.model, "model file")->required();
  serve_cmd->add_option("--host", sv.host, "bind address")->capture_default_str();
  serve_cmd->add_option("--port", sv.port, "port")->capture_default_str();
  serve_cmd->add_option("--snapshot-dir", sv.snapshot_dir, "write a JSON snapshot per session on every change");
  serve_cmd->add_option("--allow-origin", sv.allow_origin, "CORS origin")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return run_gen_data(gen);
    if (*train_cmd) return run_train(tr);
    if (*eval_cmd) return run_eval(ev);
    if (*active_cmd) return run_active_sim(as);
    if (*export_cmd) return run_export(ex_model, ex_tasks, ex_out);
    if (*serve_cmd) return run_serve(sv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
