#pragma once

// Two-class sine-boundary episodes. Class 0 lies above the curve
// x2 = A sin(x1 + phi), class 1 below, with Laplace-distributed offsets.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <utility>

#include "fewshot/common.hpp"
#include "fewshot/rng.hpp"
#include "fewshot/task.hpp"

namespace fewshot {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
};

struct SineGenConfig {
  Interval amplitude_range{0.1, 5.0};
  Interval phase_range{0.0, std::numbers::pi};
  Interval x1_range{-5.0, 5.0};
  std::pair<double, double> class_offsets{2.0, -2.0};
  double laplace_scale = 0.5;
  std::uint64_t seed = 0;

  void validate() const {
    auto check = [](const Interval& i, const char* name) {
      if (!(i.lo <= i.hi)) throw ConfigError(std::string(name) + ": low must not exceed high");
    };
    check(amplitude_range, "amplitude_range");
    check(phase_range, "phase_range");
    check(x1_range, "x1_range");
    if (!(amplitude_range.lo > 0.0)) throw ConfigError("amplitude_range must be positive");
    // Zero scale is accepted as the noiseless degenerate generator.
    if (!(laplace_scale >= 0.0)) throw ConfigError("laplace_scale must be non-negative");
  }
};

/// Per-class counts of one episode.
struct TaskSizes {
  int shot = 1;
  int unlabeled = 0;
  int query = 1;
};

struct SineParams {
  double amplitude = 0.0;
  double phase = 0.0;
};

enum class Split : std::uint64_t { Train = 1, Validation = 2, Test = 3 };

/// The three task pools are drawn from disjoint substreams of one master seed.
inline SineGenConfig for_split(SineGenConfig cfg, Split split) {
  cfg.seed = derive_seed(cfg.seed, {0x5EED5EEDULL, static_cast<std::uint64_t>(split)});
  return cfg;
}

/// Inverse-CDF draw from Laplace(location, scale).
inline double laplace_sample(double location, double scale, double u) {
  if (!(u > 0.0 && u < 1.0)) throw DomainError("laplace_sample: u must lie in (0, 1)");
  if (!(scale > 0.0)) throw DomainError("laplace_sample: scale must be positive");
  const double d = u - 0.5;
  const double sgn = (d > 0.0) - (d < 0.0);
  return location - scale * sgn * std::log(1.0 - 2.0 * std::abs(d));
}

namespace detail {

inline constexpr std::uint64_t kParamTag = 0;

inline Eigen::RowVector2d sine_point(const SineGenConfig& cfg, const SineParams& p, ClassId label,
                                     std::uint64_t key) {
  Rng rng(key);
  const double x1 = rng.uniform(cfg.x1_range.lo, cfg.x1_range.hi);
  const double u = rng.uniform_open();
  const double loc = label == 0 ? cfg.class_offsets.first : cfg.class_offsets.second;
  const double eps = cfg.laplace_scale > 0.0 ? laplace_sample(loc, cfg.laplace_scale, u) : loc;
  return {x1, p.amplitude * std::sin(x1 + p.phase) + eps};
}

}  // namespace detail

inline SineParams sample_sine_params(const SineGenConfig& cfg, std::int64_t task_index) {
  Rng rng(derive_seed(cfg.seed, {static_cast<std::uint64_t>(task_index), detail::kParamTag}));
  SineParams p;
  p.amplitude = rng.uniform(cfg.amplitude_range.lo, cfg.amplitude_range.hi);
  p.phase = rng.uniform(cfg.phase_range.lo, cfg.phase_range.hi);
  return p;
}

/// Draws `per_class` class-balanced points of one role. Every point comes from
/// its own substream keyed by (task, role, class, index), so sets of different
/// sizes are nested prefixes of each other and support/query do not depend on
/// how many unlabeled points were requested.
inline LabeledSet sample_sine_set(const SineGenConfig& cfg, const SineParams& params, std::int64_t task_index,
                                  Role role, int per_class, std::uint64_t stream_offset = 0) {
  constexpr int kWay = 2;
  LabeledSet out;
  out.x.resize(static_cast<Eigen::Index>(kWay) * per_class, 2);
  out.y.reserve(static_cast<std::size_t>(kWay) * per_class);
  Eigen::Index row = 0;
  for (ClassId c = 0; c < kWay; ++c) {
    for (int i = 0; i < per_class; ++i) {
      const std::uint64_t key =
          derive_seed(cfg.seed, {static_cast<std::uint64_t>(task_index), static_cast<std::uint64_t>(role),
                                 static_cast<std::uint64_t>(c), stream_offset + static_cast<std::uint64_t>(i)});
      out.x.row(row++) = detail::sine_point(cfg, params, c, key);
      out.y.push_back(c);
    }
  }
  return out;
}

inline Task sample_sine_task(const SineGenConfig& cfg, const TaskSizes& sizes, std::int64_t task_index) {
  cfg.validate();
  if (sizes.shot < 1 || sizes.query < 1 || sizes.unlabeled < 0)
    throw ConfigError("sample_sine_task: need shot >= 1, query >= 1, unlabeled >= 0");
  const SineParams params = sample_sine_params(cfg, task_index);
  Task t;
  t.way = 2;
  t.shot = sizes.shot;
  t.task_id = task_index;
  t.support = sample_sine_set(cfg, params, task_index, Role::Support, sizes.shot);
  t.unlabeled = sample_sine_set(cfg, params, task_index, Role::Unlabeled, sizes.unlabeled);
  t.query = sample_sine_set(cfg, params, task_index, Role::Query, sizes.query);
  return t;
}

inline std::vector<Task> sample_sine_tasks(const SineGenConfig& cfg, const TaskSizes& sizes, std::int64_t count,
                                           std::int64_t first_index = 0) {
  std::vector<Task> tasks;
  tasks.reserve(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) tasks.push_back(sample_sine_task(cfg, sizes, first_index + i));
  return tasks;
}

}  // namespace fewshot
