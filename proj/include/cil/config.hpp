#pragma once

// Experiment configuration: one JSON tree validated in full (every problem
// reported at once, unknown keys rejected) before any training starts.
// Dotted-path overrides patch the tree; the canonical merged form is hashed
// so run directories are self-describing.

#include <json.hpp>

#include <cstdint>
#include <string>
#include <vector>

#include "cil/augment.hpp"
#include "cil/dataset.hpp"
#include "cil/distill.hpp"
#include "cil/memory.hpp"
#include "cil/model.hpp"
#include "cil/protocol.hpp"
#include "cil/uncertainty.hpp"

namespace cil {

struct LossWeights {
  double lambda_a = 0.5;
  double lambda_u = 1.0;
  double lambda_f = 0.5;
};

struct OptimSchedule {
  int epochs = 160;
  int batch_size = 128;
  double weight_decay = 5e-4;
  double momentum = 0.9;
  int warmup_epochs = 10;
  double warmup_end_lr = 0.01;
  std::vector<int> milestones = {100, 120};
  double decay_factor = 0.1;
};

// Linear warmup to warmup_end_lr, then step decay at the milestones.
double lr_at_epoch(const OptimSchedule& s, int epoch);

struct ComponentFlags {
  bool aikd = true;
  bool uct = true;
  bool cutmix = true;
  bool finetune = false;
};

struct AimConfig {
  AttentionVariant variant = AttentionVariant::block_wise_maps;
  int count_k = 4;
  bool stop_gradient_target = false;
};

struct UncertaintyConfig {
  DivergenceKind kind = DivergenceKind::kl;
  double temperature = 1.0;
};

struct FinetuneConfig {
  int epochs = 20;
  double lr = 0.01;
};

struct ExperimentConfig {
  DatasetDescriptor dataset;
  ProtocolSpec protocol;
  BackboneSpec backbone;
  HeadConfig head;
  OptimSchedule schedule;
  LossWeights weights;
  ComponentFlags components;
  DistanceKind distill_kind = DistanceKind::pod;
  AimConfig aim;
  UncertaintyConfig uncertainty;
  CutmixConfig cutmix;
  MemoryPolicy memory;
  FinetuneConfig finetune;
  std::vector<uint64_t> seeds = {1, 2, 3};
  std::string output_dir;

  nlohmann::json canonical;  // merged tree the run was built from
  std::string hash;

  bool cutmix_active() const { return components.cutmix && cutmix.enabled; }
};

nlohmann::json default_config_json();

// Merge + validate; throws ConfigError carrying every problem found.
ExperimentConfig parse_config(const nlohmann::json& user);

// Reads a JSON file and applies `--set path=value` overrides before parsing.
ExperimentConfig load_config_file(const std::string& path,
                                  const std::vector<std::string>& overrides = {});

// FNV-1a 64 over the canonical dump.
std::string config_hash(const nlohmann::json& canonical);

nlohmann::json apply_override(nlohmann::json config, const std::string& keyval);

}  // namespace cil
