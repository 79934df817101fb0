#include "cil/protocol.hpp"

#include <algorithm>
#include <numeric>
#include <set>

#include "cil/rng.hpp"

namespace cil {

void ProtocolSpec::validate() const {
  if (total_classes < 1) throw ConfigError("protocol: total_classes must be positive");
  if (initial_classes < 0 || initial_classes >= total_classes + 1)
    throw ConfigError("protocol: initial_classes out of range");
  if (num_incremental_rounds < 1)
    throw ConfigError("protocol: num_incremental_rounds must be positive");
  const int remainder = total_classes - initial_classes;
  if (initial_classes == 0) {
    if (total_classes % num_incremental_rounds != 0)
      throw ConfigError("protocol: total_classes not divisible by round count");
  } else if (remainder % num_incremental_rounds != 0) {
    throw ConfigError("protocol: remaining classes not divisible by incremental round count");
  }
}

std::vector<RoundSpec> make_class_splits(const ProtocolSpec& spec) {
  spec.validate();
  std::vector<int> order(spec.total_classes);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(spec.class_order_seed);
  rng.shuffle(order);

  std::vector<RoundSpec> rounds;
  size_t cursor = 0;
  auto take = [&](int round_index, int n) {
    RoundSpec r;
    r.round_index = round_index;
    r.class_ids.assign(order.begin() + cursor, order.begin() + cursor + n);
    cursor += n;
    rounds.push_back(std::move(r));
  };
  if (spec.initial_classes == 0) {
    const int share = spec.total_classes / spec.num_incremental_rounds;
    for (int t = 0; t < spec.num_incremental_rounds; ++t) take(t, share);
  } else {
    take(0, spec.initial_classes);
    const int share = (spec.total_classes - spec.initial_classes) / spec.num_incremental_rounds;
    for (int t = 1; t <= spec.num_incremental_rounds; ++t) take(t, share);
  }
  return rounds;
}

std::vector<int> classes_through_round(const std::vector<RoundSpec>& rounds, int t) {
  if (t < 0 || t >= static_cast<int>(rounds.size()))
    throw InputError("classes_through_round: round index out of range");
  std::vector<int> out;
  for (int i = 0; i <= t; ++i)
    out.insert(out.end(), rounds[i].class_ids.begin(), rounds[i].class_ids.end());
  return out;
}

LabeledDataset round_training_set(const RoundSpec& round, const LabeledDataset& full_train,
                                  const ExemplarMemory& memory) {
  std::set<int> round_set(round.class_ids.begin(), round.class_ids.end());
  for (int id : memory.stored_class_ids())
    if (round_set.count(id))
      throw StateError("round_training_set: class " + std::to_string(id) +
                       " is both in memory and in the new round");
  LabeledDataset out;
  out.channels = full_train.channels;
  out.height = full_train.height;
  out.width = full_train.width;
  out.split = "train";
  for (Eigen::Index i = 0; i < full_train.count; ++i)
    if (round_set.count(full_train.labels[i])) out.append(full_train.image(i), full_train.labels[i]);
  if (memory.total_count() > 0) {
    if (memory.channels() != out.channels || memory.height() != out.height ||
        memory.width() != out.width)
      throw StateError("round_training_set: memory image shape differs from dataset");
    LabeledDataset mem = memory.as_dataset();
    for (Eigen::Index i = 0; i < mem.count; ++i) out.append(mem.image(i), mem.labels[i]);
  }
  return out;
}

}  // namespace cil
