#pragma once

// Class-incremental round layout: an optional large initial set followed by
// equal incremental shares, over a seeded class-order permutation, plus
// assembly of each round's training set from new-class data and the replay
// buffer.

#include <cstdint>
#include <vector>

#include "cil/dataset.hpp"
#include "cil/memory.hpp"

namespace cil {

struct RoundSpec {
  int round_index = 0;
  std::vector<int> class_ids;
};

struct ProtocolSpec {
  int total_classes = 100;
  int initial_classes = 0;  // 0 means all rounds share equally
  int num_incremental_rounds = 10;
  uint64_t class_order_seed = 0;

  void validate() const;
  int total_rounds() const {
    return initial_classes == 0 ? num_incremental_rounds : num_incremental_rounds + 1;
  }
};

std::vector<RoundSpec> make_class_splits(const ProtocolSpec& spec);

// All class ids introduced in rounds 0..t inclusive.
std::vector<int> classes_through_round(const std::vector<RoundSpec>& rounds, int t);

// New-class training samples plus every stored exemplar. Memory holding any
// of the round's classes is a state error.
LabeledDataset round_training_set(const RoundSpec& round, const LabeledDataset& full_train,
                                  const ExemplarMemory& memory);

}  // namespace cil
