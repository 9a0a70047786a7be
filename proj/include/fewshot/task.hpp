#pragma once

#include <cstdint>
#include <vector>

#include "fewshot/common.hpp"

namespace fewshot {

/// Inputs (one per row) with their class labels. For unlabeled sets the labels
/// are hidden ground truth, or kMaskedLabel when unavailable.
struct LabeledSet {
  Matrix x;
  std::vector<ClassId> y;

  [[nodiscard]] std::size_t size() const { return y.size(); }
  [[nodiscard]] bool empty() const { return y.empty(); }
  [[nodiscard]] bool has_masked_labels() const {
    for (ClassId c : y)
      if (c == kMaskedLabel) return true;
    return false;
  }
};

enum class Role : char { Support = 'S', Unlabeled = 'U', Query = 'Q' };

/// One episode: labeled support, unlabeled pool and evaluation queries.
struct Task {
  int way = 0;
  int shot = 0;
  LabeledSet support;
  LabeledSet unlabeled;
  LabeledSet query;
  std::int64_t task_id = 0;

  [[nodiscard]] Eigen::Index input_dim() const {
    if (support.x.cols() > 0) return support.x.cols();
    if (unlabeled.x.cols() > 0) return unlabeled.x.cols();
    return query.x.cols();
  }

  LabeledSet& set(Role r) {
    switch (r) {
      case Role::Support: return support;
      case Role::Unlabeled: return unlabeled;
      default: return query;
    }
  }
  [[nodiscard]] const LabeledSet& set(Role r) const { return const_cast<Task*>(this)->set(r); }
};

}  // namespace fewshot
