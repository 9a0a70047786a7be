#pragma once

// File formats.
//
// Task file (text, tab separated):
//   PADAPT-TASKS  version=1  input_dim=D  way=N  shot=k  unlabeled=M  query=m  tasks=T  seed=S
//   <task_id> <S|U|Q> <label> <f_1> ... <f_D>      one line per sample
// Counts are per class. Labels of masked unlabeled samples are -1. Reals are
// written with 17 significant digits so doubles round-trip exactly.
//
// Model file (binary, little endian):
//   "PADAPT-MODEL" u32 version u32 n_sizes u64[n_sizes] sizes
//   per layer: f64 weight[out*in] (row-major) f64 bias[out]
//   u32 n_classes u64 episodes f64 prototype_sum[n_classes*dim]
//   u64 config_len char config_json[config_len] u64 seed

#include <algorithm>
#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "fewshot/common.hpp"
#include "fewshot/embednet.hpp"
#include "fewshot/task.hpp"

namespace fewshot {

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline constexpr std::string_view kTaskMagic = "PADAPT-TASKS";
inline constexpr int kTaskFormatVersion = 1;
inline constexpr std::string_view kModelMagic = "PADAPT-MODEL";
inline constexpr std::uint32_t kModelFormatVersion = 1;

struct TaskFileHeader {
  int version = kTaskFormatVersion;
  int input_dim = 0;
  int way = 0;
  int shot = 0;
  int unlabeled = 0;
  int query = 0;
  std::int64_t task_count = 0;
  std::uint64_t seed = 0;
};

struct TaskFile {
  TaskFileHeader header;
  std::vector<Task> tasks;
};

struct WriteOptions {
  /// Replace unlabeled-set labels with -1.
  bool mask_unlabeled = false;
  std::uint64_t seed = 0;
};

namespace detail {

inline void write_atomically(const std::filesystem::path& path, const std::string& bytes) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open " + tmp.string() + " for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("cannot move " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

inline std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void append_real(std::string& out, double v) {
  std::array<char, 40> buf{};
  const int n = std::snprintf(buf.data(), buf.size(), "%.17g", v);
  out.append(buf.data(), static_cast<std::size_t>(n));
}

inline std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return out;
}

template <typename T>
T parse_number(std::string_view s, std::size_t line, const char* what) {
  T v{};
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size())
    throw ParseError(std::string("invalid ") + what + " '" + std::string(s) + "'", line);
  return v;
}

inline void check_uniform(const std::vector<Task>& tasks, TaskFileHeader& h) {
  if (tasks.empty()) throw FormatError("task file: no tasks to write");
  const Task& first = tasks.front();
  h.input_dim = static_cast<int>(first.input_dim());
  h.way = first.way;
  h.shot = first.way > 0 ? static_cast<int>(first.support.size()) / first.way : 0;
  h.unlabeled = first.way > 0 ? static_cast<int>(first.unlabeled.size()) / first.way : 0;
  h.query = first.way > 0 ? static_cast<int>(first.query.size()) / first.way : 0;
  h.task_count = static_cast<std::int64_t>(tasks.size());
  for (const Task& t : tasks) {
    if (t.way != h.way || t.input_dim() != h.input_dim ||
        t.support.size() != static_cast<std::size_t>(h.way * h.shot) ||
        t.unlabeled.size() != static_cast<std::size_t>(h.way * h.unlabeled) ||
        t.query.size() != static_cast<std::size_t>(h.way * h.query))
      throw FormatError("task file: tasks differ in dimension, way or set sizes (task " + std::to_string(t.task_id) + ")");
    for (const LabeledSet* s : {&t.support, &t.unlabeled, &t.query})
      if (s->size() > 0 && s->x.cols() != h.input_dim)
        throw FormatError("task file: inconsistent feature dimension in task " + std::to_string(t.task_id));
  }
}

}  // namespace detail

inline std::string format_task_file(const std::vector<Task>& tasks, const WriteOptions& opts = {}) {
  TaskFileHeader h;
  detail::check_uniform(tasks, h);
  h.seed = opts.seed;
  std::string out;
  out += kTaskMagic;
  out += "\tversion=" + std::to_string(h.version) + "\tinput_dim=" + std::to_string(h.input_dim) +
         "\tway=" + std::to_string(h.way) + "\tshot=" + std::to_string(h.shot) +
         "\tunlabeled=" + std::to_string(h.unlabeled) + "\tquery=" + std::to_string(h.query) +
         "\ttasks=" + std::to_string(h.task_count) + "\tseed=" + std::to_string(h.seed) + "\n";
  for (const Task& t : tasks) {
    for (Role role : {Role::Support, Role::Unlabeled, Role::Query}) {
      const LabeledSet& s = t.set(role);
      for (std::size_t i = 0; i < s.size(); ++i) {
        out += std::to_string(t.task_id);
        out += '\t';
        out += static_cast<char>(role);
        out += '\t';
        const ClassId label = (role == Role::Unlabeled && opts.mask_unlabeled) ? kMaskedLabel : s.y[i];
        out += std::to_string(label);
        for (Eigen::Index d = 0; d < s.x.cols(); ++d) {
          out += '\t';
          detail::append_real(out, s.x(static_cast<Eigen::Index>(i), d));
        }
        out += '\n';
      }
    }
  }
  return out;
}

inline void write_task_file(const std::vector<Task>& tasks, const std::filesystem::path& path,
                            const WriteOptions& opts = {}) {
  detail::write_atomically(path, format_task_file(tasks, opts));
}

inline TaskFile parse_task_file(std::string_view text) {
  TaskFile tf;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  auto next_line = [&](std::string_view& line) {
    if (pos >= text.size()) return false;
    std::size_t nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    line = text.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    pos = nl + 1;
    ++line_no;
    return true;
  };

  std::string_view line;
  if (!next_line(line)) throw ParseError("empty file", 1);
  const auto head = detail::split_tabs(line);
  if (head.empty() || head[0] != kTaskMagic) throw ParseError("bad magic, expected " + std::string(kTaskMagic), line_no);
  TaskFileHeader& h = tf.header;
  bool seen_version = false;
  for (std::size_t i = 1; i < head.size(); ++i) {
    const auto eq = head[i].find('=');
    if (eq == std::string_view::npos) throw ParseError("malformed header field '" + std::string(head[i]) + "'", line_no);
    const std::string_view key = head[i].substr(0, eq);
    const std::string_view val = head[i].substr(eq + 1);
    if (key == "version") {
      h.version = detail::parse_number<int>(val, line_no, "version");
      seen_version = true;
    } else if (key == "input_dim") h.input_dim = detail::parse_number<int>(val, line_no, "input_dim");
    else if (key == "way") h.way = detail::parse_number<int>(val, line_no, "way");
    else if (key == "shot") h.shot = detail::parse_number<int>(val, line_no, "shot");
    else if (key == "unlabeled") h.unlabeled = detail::parse_number<int>(val, line_no, "unlabeled");
    else if (key == "query") h.query = detail::parse_number<int>(val, line_no, "query");
    else if (key == "tasks") h.task_count = detail::parse_number<std::int64_t>(val, line_no, "tasks");
    else if (key == "seed") h.seed = detail::parse_number<std::uint64_t>(val, line_no, "seed");
    else throw ParseError("unknown header field '" + std::string(key) + "'", line_no);
  }
  if (!seen_version) throw ParseError("missing version", line_no);
  if (h.version != kTaskFormatVersion)
    throw ParseError("unsupported format version " + std::to_string(h.version), line_no);
  if (h.input_dim < 1 || h.way < 1 || h.shot < 0 || h.unlabeled < 0 || h.query < 0 || h.task_count < 1)
    throw ParseError("header counts out of range", line_no);

  tf.tasks.reserve(static_cast<std::size_t>(h.task_count));
  for (std::int64_t t = 0; t < h.task_count; ++t) {
    Task task;
    task.way = h.way;
    task.shot = h.shot;
    for (Role role : {Role::Support, Role::Unlabeled, Role::Query}) {
      const int per_class = role == Role::Support ? h.shot : role == Role::Unlabeled ? h.unlabeled : h.query;
      LabeledSet& s = task.set(role);
      s.x.resize(static_cast<Eigen::Index>(h.way) * per_class, h.input_dim);
      s.y.reserve(static_cast<std::size_t>(h.way * per_class));
      for (int i = 0; i < h.way * per_class; ++i) {
        if (!next_line(line))
          throw ParseError("unexpected end of file (task " + std::to_string(t + 1) + " of " +
                               std::to_string(h.task_count) + " incomplete)",
                           line_no + 1);
        const auto cols = detail::split_tabs(line);
        if (cols.size() != static_cast<std::size_t>(3 + h.input_dim))
          throw ParseError("expected " + std::to_string(h.input_dim) + " features, found " +
                               std::to_string(cols.size() < 3 ? 0 : cols.size() - 3),
                           line_no);
        const auto id = detail::parse_number<std::int64_t>(cols[0], line_no, "task id");
        if (i == 0 && role == Role::Support) task.task_id = id;
        else if (id != task.task_id) throw ParseError("task id changed inside a task block", line_no);
        if (cols[1].size() != 1 || cols[1][0] != static_cast<char>(role))
          throw ParseError("expected role " + std::string(1, static_cast<char>(role)) + ", found '" +
                               std::string(cols[1]) + "'",
                           line_no);
        const auto label = detail::parse_number<int>(cols[2], line_no, "label");
        if (label < kMaskedLabel || label >= h.way) throw ParseError("label out of range", line_no);
        if (label == kMaskedLabel && role != Role::Unlabeled) throw ParseError("only unlabeled samples may be masked", line_no);
        s.y.push_back(label);
        for (int d = 0; d < h.input_dim; ++d)
          s.x(i, d) = detail::parse_number<double>(cols[static_cast<std::size_t>(3 + d)], line_no, "feature");
      }
    }
    tf.tasks.push_back(std::move(task));
  }
  while (next_line(line))
    if (!line.empty()) throw ParseError("trailing data after " + std::to_string(h.task_count) + " tasks", line_no);
  return tf;
}

inline TaskFile read_task_file(const std::filesystem::path& path) { return parse_task_file(detail::read_all(path)); }

/// Tasks with inputs replaced by their embeddings.
inline std::vector<Task> embed_tasks(const EmbeddingModel& model, const std::vector<Task>& tasks) {
  std::vector<Task> out;
  out.reserve(tasks.size());
  for (const Task& t : tasks) out.push_back(embed_task(model, t));
  return out;
}

inline void export_embeddings(const EmbeddingModel& model, const std::vector<Task>& tasks,
                              const std::filesystem::path& path, const WriteOptions& opts = {}) {
  write_task_file(embed_tasks(model, tasks), path, opts);
}

// --------------------------------------------------------------------------
// Model file

namespace detail {

class ByteWriter {
 public:
  template <typename T>
  void put(T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    std::array<char, sizeof(T)> raw{};
    std::memcpy(raw.data(), &v, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    bytes_.append(raw.data(), raw.size());
  }
  void put_bytes(std::string_view s) { bytes_.append(s); }
  [[nodiscard]] const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view data) : data_(data) {}
  template <typename T>
  T get(const char* what) {
    if (pos_ + sizeof(T) > data_.size()) throw FormatError(std::string("model file truncated while reading ") + what);
    std::array<char, sizeof(T)> raw{};
    std::memcpy(raw.data(), data_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(raw.begin(), raw.end());
    pos_ += sizeof(T);
    T v;
    std::memcpy(&v, raw.data(), sizeof(T));
    return v;
  }
  std::string_view get_bytes(std::size_t n, const char* what) {
    if (pos_ + n > data_.size()) throw FormatError(std::string("model file truncated while reading ") + what);
    const auto s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  [[nodiscard]] bool done() const { return pos_ == data_.size(); }

 private:
  std::string_view data_;
  std::size_t pos_ = 0;
};

}  // namespace detail

struct ModelFile {
  EmbeddingModel model;
  std::string config_json;
  std::uint64_t seed = 0;
};

inline std::string serialize_model(const EmbeddingModel& model, std::string_view config_json = "{}",
                                   std::uint64_t seed = 0) {
  detail::ByteWriter w;
  w.put_bytes(kModelMagic);
  w.put<std::uint32_t>(kModelFormatVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.sizes.size()));
  for (int s : model.sizes) w.put<std::uint64_t>(static_cast<std::uint64_t>(s));
  for (const DenseLayer& l : model.layers) {
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) w.put<double>(l.weight(r, c));
    for (Eigen::Index c = 0; c < l.bias.size(); ++c) w.put<double>(l.bias[c]);
  }
  const auto n_classes = static_cast<std::uint32_t>(model.global.empty() ? 0 : model.global.sum.rows());
  w.put<std::uint32_t>(n_classes);
  w.put<std::uint64_t>(static_cast<std::uint64_t>(model.global.episodes));
  for (std::uint32_t c = 0; c < n_classes; ++c)
    for (Eigen::Index d = 0; d < model.global.sum.cols(); ++d) w.put<double>(model.global.sum(c, d));
  w.put<std::uint64_t>(config_json.size());
  w.put_bytes(config_json);
  w.put<std::uint64_t>(seed);
  return w.bytes();
}

inline ModelFile deserialize_model(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (r.get_bytes(kModelMagic.size(), "magic") != kModelMagic) throw FormatError("not a model file (bad magic)");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kModelFormatVersion) throw FormatError("unsupported model format version " + std::to_string(version));
  const auto n_sizes = r.get<std::uint32_t>("layer count");
  if (n_sizes < 2 || n_sizes > 64) throw FormatError("model file: implausible layer count");
  std::vector<int> sizes;
  for (std::uint32_t i = 0; i < n_sizes; ++i) {
    const auto s = r.get<std::uint64_t>("layer size");
    if (s < 1 || s > (1u << 20)) throw FormatError("model file: implausible layer size");
    sizes.push_back(static_cast<int>(s));
  }
  ModelFile mf;
  mf.model = EmbeddingModel::zeros(sizes);
  for (DenseLayer& l : mf.model.layers) {
    for (Eigen::Index rr = 0; rr < l.weight.rows(); ++rr)
      for (Eigen::Index c = 0; c < l.weight.cols(); ++c) l.weight(rr, c) = r.get<double>("weights");
    for (Eigen::Index c = 0; c < l.bias.size(); ++c) l.bias[c] = r.get<double>("bias");
  }
  const auto n_classes = r.get<std::uint32_t>("prototype count");
  const auto episodes = r.get<std::uint64_t>("episode count");
  if (n_classes > 0) {
    mf.model.global.sum.resize(n_classes, mf.model.embedding_dim());
    for (std::uint32_t c = 0; c < n_classes; ++c)
      for (int d = 0; d < mf.model.embedding_dim(); ++d) mf.model.global.sum(c, d) = r.get<double>("prototypes");
    mf.model.global.episodes = static_cast<std::int64_t>(episodes);
  }
  const auto cfg_len = r.get<std::uint64_t>("config length");
  mf.config_json = std::string(r.get_bytes(cfg_len, "config"));
  mf.seed = r.get<std::uint64_t>("seed");
  if (!r.done()) throw FormatError("model file: trailing bytes");
  if (!all_finite(mf.model.layers)) throw FormatError("model file: non-finite parameters");
  return mf;
}

inline void save_model(const EmbeddingModel& model, const std::filesystem::path& path,
                       std::string_view config_json = "{}", std::uint64_t seed = 0) {
  detail::write_atomically(path, serialize_model(model, config_json, seed));
}

inline ModelFile load_model(const std::filesystem::path& path) { return deserialize_model(detail::read_all(path)); }

}  // namespace fewshot
