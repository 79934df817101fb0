#pragma once

// Versioned binary containers for per-round model checkpoints and memory
// snapshots: a JSON header (spec, class ids, round, engine state, array
// manifest) followed by raw little-endian payload blobs. Round-trips are
// bit-exact.

#include <string>

#include "cil/memory.hpp"
#include "cil/model.hpp"

namespace cil {

void save_model_checkpoint(const std::string& path, IncrementalNet& net, int round_index,
                           const std::string& rng_state);

struct LoadedCheckpoint {
  IncrementalNet net;
  int round_index = 0;
  std::string rng_state;
};

LoadedCheckpoint load_model_checkpoint(const std::string& path);

void save_memory_snapshot(const std::string& path, const ExemplarMemory& memory);
ExemplarMemory load_memory_snapshot(const std::string& path);

}  // namespace cil
