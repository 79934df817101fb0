#include "cil/memory.hpp"

#include <algorithm>
#include <limits>
#include <set>

namespace cil {

std::vector<Eigen::Index> herding_select(const Eigen::MatrixXd& features, int m) {
  const Eigen::Index n = features.rows();
  if (m < 1 || m > n)
    throw InputError("herding_select: m = " + std::to_string(m) + " outside [1, " +
                     std::to_string(n) + "]");
  if (!features.allFinite()) throw InputError("herding_select: features must be finite");
  const Eigen::VectorXd mu = features.colwise().mean();
  Eigen::VectorXd running_sum = Eigen::VectorXd::Zero(features.cols());
  std::vector<char> used(n, 0);
  std::vector<Eigen::Index> selected;
  selected.reserve(m);
  for (int k = 0; k < m; ++k) {
    Eigen::Index best = -1;
    double best_dist = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (used[i]) continue;
      const double d =
          (mu - (running_sum + features.row(i).transpose()) / double(k + 1)).squaredNorm();
      if (d < best_dist) {
        best_dist = d;
        best = i;
      }
    }
    used[best] = 1;
    selected.push_back(best);
    running_sum += features.row(best).transpose();
  }
  return selected;
}

MemoryPolicy::Kind parse_memory_policy(const std::string& s) {
  if (s == "fixed_total") return MemoryPolicy::Kind::fixed_total;
  if (s == "per_class") return MemoryPolicy::Kind::per_class;
  throw ConfigError("unknown memory.policy '" + s + "' (expected fixed_total|per_class)");
}

std::string to_string(MemoryPolicy::Kind k) {
  return k == MemoryPolicy::Kind::fixed_total ? "fixed_total" : "per_class";
}

ExemplarMemory::ExemplarMemory(MemoryPolicy policy, int channels, int height, int width)
    : policy_(policy), channels_(channels), height_(height), width_(width) {
  if (policy_.kind == MemoryPolicy::Kind::fixed_total && policy_.budget < 1)
    throw ConfigError("memory.budget must be positive");
  if (policy_.kind == MemoryPolicy::Kind::per_class && policy_.per_class < 1)
    throw ConfigError("memory.per_class must be positive");
}

void ExemplarMemory::update(const std::vector<CandidateSet>& new_classes,
                            const std::vector<int>& learned_class_ids) {
  std::set<int> learned(learned_class_ids.begin(), learned_class_ids.end());
  for (const auto& sc : classes_)
    if (!learned.count(sc.class_id))
      throw StateError("memory update: stored class " + std::to_string(sc.class_id) +
                       " missing from learned set");
  for (const auto& nc : new_classes) {
    if (!learned.count(nc.class_id))
      throw StateError("memory update: new class " + std::to_string(nc.class_id) +
                       " missing from learned set");
    for (const auto& sc : classes_)
      if (sc.class_id == nc.class_id)
        throw StateError("memory update: class " + std::to_string(nc.class_id) +
                         " already stored");
    if (nc.features.rows() != static_cast<Eigen::Index>(nc.images.size()))
      throw InputError("memory update: feature/image count mismatch for class " +
                       std::to_string(nc.class_id));
  }

  Eigen::Index quota;
  if (policy_.kind == MemoryPolicy::Kind::fixed_total) {
    if (learned.empty()) throw StateError("memory update: empty learned class set");
    quota = policy_.budget / static_cast<Eigen::Index>(learned.size());
    if (quota == 0)
      throw ConfigError("memory budget " + std::to_string(policy_.budget) +
                        " cannot cover " + std::to_string(learned.size()) + " classes");
    for (auto& sc : classes_) {
      if (sc.count > quota) {  // keep the herding prefix
        sc.images.resize(quota * sample_size());
        sc.count = quota;
      }
    }
  } else {
    quota = policy_.per_class;
  }

  const Eigen::Index ss = sample_size();
  for (const auto& nc : new_classes) {
    const Eigen::Index take = std::min<Eigen::Index>(quota, nc.features.rows());
    auto order = herding_select(nc.features, static_cast<int>(take));
    StoredClass sc;
    sc.class_id = nc.class_id;
    sc.count = take;
    sc.images.reserve(take * ss);
    for (Eigen::Index r : order)
      sc.images.insert(sc.images.end(), nc.images[r], nc.images[r] + ss);
    classes_.push_back(std::move(sc));
  }
}

Eigen::Index ExemplarMemory::total_count() const {
  Eigen::Index n = 0;
  for (const auto& sc : classes_) n += sc.count;
  return n;
}

std::vector<int> ExemplarMemory::stored_class_ids() const {
  std::vector<int> out;
  for (const auto& sc : classes_) out.push_back(sc.class_id);
  return out;
}

Eigen::Index ExemplarMemory::class_count(int class_id) const {
  for (const auto& sc : classes_)
    if (sc.class_id == class_id) return sc.count;
  return 0;
}

const float* ExemplarMemory::sample(Eigen::Index flat_index, int& label_out) const {
  for (const auto& sc : classes_) {
    if (flat_index < sc.count) {
      label_out = sc.class_id;
      return sc.images.data() + flat_index * sample_size();
    }
    flat_index -= sc.count;
  }
  throw InputError("memory sample index out of range");
}

LabeledDataset ExemplarMemory::as_dataset() const {
  LabeledDataset ds;
  ds.channels = channels_;
  ds.height = height_;
  ds.width = width_;
  ds.split = "train";
  for (const auto& sc : classes_)
    for (Eigen::Index i = 0; i < sc.count; ++i)
      ds.append(sc.images.data() + i * sample_size(), sc.class_id);
  return ds;
}

void ExemplarMemory::restore(MemoryPolicy policy, int channels, int height, int width,
                             std::vector<StoredClass> classes) {
  policy_ = policy;
  channels_ = channels;
  height_ = height;
  width_ = width;
  classes_ = std::move(classes);
}

}  // namespace cil
