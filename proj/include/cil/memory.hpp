#pragma once

// Replay buffer of old-class images under a fixed-total or per-class budget.
// Exemplars are kept in herding order, so shrinking a class quota is a prefix
// truncation.

#include <Eigen/Dense>

#include <string>
#include <vector>

#include "cil/dataset.hpp"

namespace cil {

// Greedy herding: step k picks the candidate whose inclusion brings the
// running mean closest (L2) to the full class mean; ties go to the lowest
// index. Returned in selection order.
std::vector<Eigen::Index> herding_select(const Eigen::MatrixXd& features, int m);

struct MemoryPolicy {
  enum class Kind { fixed_total, per_class };
  Kind kind = Kind::fixed_total;
  int budget = 2000;     // fixed_total: cap on total stored images
  int per_class = 20;    // per_class: exemplars stored per new class
};

MemoryPolicy::Kind parse_memory_policy(const std::string& s);
std::string to_string(MemoryPolicy::Kind k);

// Selection inputs for one new class: features row-aligned with images.
struct CandidateSet {
  int class_id = -1;
  Eigen::MatrixXd features;           // n x d
  std::vector<const float*> images;   // n pointers, each sample_size() floats
};

class ExemplarMemory {
 public:
  ExemplarMemory() = default;
  ExemplarMemory(MemoryPolicy policy, int channels, int height, int width);

  // Adds exemplars for classes never stored before. `learned_class_ids` is
  // the full set of classes learned so far (old and new); under the fixed
  // budget it determines the per-class quota and triggers prefix truncation
  // of existing classes.
  void update(const std::vector<CandidateSet>& new_classes,
              const std::vector<int>& learned_class_ids);

  Eigen::Index total_count() const;
  int num_classes() const { return static_cast<int>(classes_.size()); }
  std::vector<int> stored_class_ids() const;
  Eigen::Index class_count(int class_id) const;

  // Flat view over all stored samples, class-major in insertion order.
  const float* sample(Eigen::Index flat_index, int& label_out) const;

  // Copies the whole buffer into a dataset (split tag "train").
  LabeledDataset as_dataset() const;

  const MemoryPolicy& policy() const { return policy_; }
  int channels() const { return channels_; }
  int height() const { return height_; }
  int width() const { return width_; }
  Eigen::Index sample_size() const {
    return static_cast<Eigen::Index>(channels_) * height_ * width_;
  }

  struct StoredClass {
    int class_id;
    Eigen::Index count;
    std::vector<float> images;  // count * sample_size, herding order
  };
  const std::vector<StoredClass>& stored() const { return classes_; }
  void restore(MemoryPolicy policy, int channels, int height, int width,
               std::vector<StoredClass> classes);

 private:
  MemoryPolicy policy_;
  int channels_ = 0, height_ = 0, width_ = 0;
  std::vector<StoredClass> classes_;
};

}  // namespace cil
