#pragma once

// JSON forms of TrainConfig and SineGenConfig. Unknown keys are rejected.

#include <initializer_list>
#include <string>

#include <nlohmann/json.hpp>

#include "fewshot/embednet.hpp"
#include "fewshot/synthdata.hpp"

namespace fewshot {

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, std::initializer_list<const char*> known, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
  }
}

template <class T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline nlohmann::json interval_json(const Interval& i) { return nlohmann::json::array({i.lo, i.hi}); }

inline void read_interval(const nlohmann::json& j, const char* key, Interval& out) {
  if (!j.contains(key)) return;
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw ConfigError(std::string(key) + ": expected [low, high]");
  out = {v[0].get<double>(), v[1].get<double>()};
}

}  // namespace detail

inline nlohmann::json to_json(const SineGenConfig& c) {
  return {{"amplitude_range", detail::interval_json(c.amplitude_range)},
          {"phase_range", detail::interval_json(c.phase_range)},
          {"x1_range", detail::interval_json(c.x1_range)},
          {"class_offsets", {c.class_offsets.first, c.class_offsets.second}},
          {"laplace_scale", c.laplace_scale},
          {"seed", c.seed}};
}

inline SineGenConfig sine_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j, {"amplitude_range", "phase_range", "x1_range", "class_offsets", "laplace_scale", "seed"},
                              "generator config");
  SineGenConfig c;
  try {
    detail::read_interval(j, "amplitude_range", c.amplitude_range);
    detail::read_interval(j, "phase_range", c.phase_range);
    detail::read_interval(j, "x1_range", c.x1_range);
    if (j.contains("class_offsets")) {
      const auto& v = j.at("class_offsets");
      if (!v.is_array() || v.size() != 2) throw ConfigError("class_offsets: expected two numbers");
      c.class_offsets = {v[0].get<double>(), v[1].get<double>()};
    }
    detail::read_if(j, "laplace_scale", c.laplace_scale);
    detail::read_if(j, "seed", c.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("generator config: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"epsilon", c.epsilon},
          {"episodes", c.episodes},
          {"train_shot", {c.train_shot.lo, c.train_shot.hi}},
          {"query_per_class", c.query_per_class},
          {"train_tasks", c.train_tasks},
          {"hidden", c.hidden},
          {"embedding_dim", c.embedding_dim},
          {"early_stop",
           {{"enabled", c.early_stop.enabled},
            {"validation_tasks", c.early_stop.validation_tasks},
            {"check_every", c.early_stop.check_every},
            {"patience", c.early_stop.patience},
            {"eval_shot", c.early_stop.eval_shot},
            {"eval_query", c.early_stop.eval_query}}},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  detail::reject_unknown_keys(j,
                              {"learning_rate", "beta1", "beta2", "epsilon", "episodes", "train_shot", "query_per_class",
                               "train_tasks", "hidden", "embedding_dim", "early_stop", "seed"},
                              "train config");
  TrainConfig c;
  try {
    detail::read_if(j, "learning_rate", c.learning_rate);
    detail::read_if(j, "beta1", c.beta1);
    detail::read_if(j, "beta2", c.beta2);
    detail::read_if(j, "epsilon", c.epsilon);
    detail::read_if(j, "episodes", c.episodes);
    if (j.contains("train_shot")) {
      const auto& v = j.at("train_shot");
      if (v.is_number_integer()) c.train_shot = {v.get<int>(), v.get<int>()};
      else if (v.is_array() && v.size() == 2) c.train_shot = {v[0].get<int>(), v[1].get<int>()};
      else throw ConfigError("train_shot: expected an integer or [low, high]");
    }
    detail::read_if(j, "query_per_class", c.query_per_class);
    detail::read_if(j, "train_tasks", c.train_tasks);
    detail::read_if(j, "hidden", c.hidden);
    detail::read_if(j, "embedding_dim", c.embedding_dim);
    detail::read_if(j, "seed", c.seed);
    if (j.contains("early_stop")) {
      const auto& e = j.at("early_stop");
      detail::reject_unknown_keys(e, {"enabled", "validation_tasks", "check_every", "patience", "eval_shot", "eval_query"},
                                  "early_stop");
      detail::read_if(e, "enabled", c.early_stop.enabled);
      detail::read_if(e, "validation_tasks", c.early_stop.validation_tasks);
      detail::read_if(e, "check_every", c.early_stop.check_every);
      detail::read_if(e, "patience", c.early_stop.patience);
      detail::read_if(e, "eval_shot", c.early_stop.eval_shot);
      detail::read_if(e, "eval_query", c.early_stop.eval_query);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

}  // namespace fewshot
