#pragma once

// One continual-learning round: freeze the previous model, expand the head,
// attach fresh integration modules, optimize the combined objective over the
// round's data plus mixed replay samples, then refresh the exemplar memory
// and record metrics. Rounds chain into seeded multi-run experiments with
// per-round checkpoints.

#include <optional>
#include <string>
#include <vector>

#include "cil/augment.hpp"
#include "cil/config.hpp"
#include "cil/distill.hpp"
#include "cil/eval.hpp"
#include "cil/model.hpp"
#include "cil/protocol.hpp"
#include "cil/uncertainty.hpp"

namespace cil {

struct LossBreakdown {
  double total = 0.0;
  double aikd = 0.0;      // L_a value (0 when absent)
  double uct = 0.0;       // L_u value (plain mean CE when uncertainty is off)
  double feat = 0.0;      // L_f value (0 when absent)
  double ce_mean = 0.0;
  double u_mean = 1.0;
  bool has_aikd = false;
  bool has_feat = false;
};

struct LossOptions {
  LossWeights weights;
  ComponentFlags components;
  DistanceKind distill_kind = DistanceKind::pod;
  AimConfig aim;
  UncertaintyConfig uncertainty;
};

// Weighted sum of the distillation, uncertainty-regularized classification,
// and embedding terms over one combined batch. `old_model` null means a
// first-round batch: plain cross-entropy, u = 1. Throws NumericError when
// any term goes non-finite.
Tensor total_loss(const Tensor& images, const Tensor& soft_targets, IncrementalNet& new_model,
                  IncrementalNet* old_model, std::vector<AimModule>* aims,
                  const LossOptions& opt, LossBreakdown* breakdown = nullptr);

struct RunState {
  int round = -1;  // last completed round, -1 before any training
  IncrementalNet model;
  ExemplarMemory memory;
  std::vector<RoundMetrics> metrics;
  Rng rng{0};
};

class Trainer {
 public:
  explicit Trainer(ExperimentConfig cfg);

  // Shares an already-loaded dataset across sub-runs (ablation grids).
  Trainer(ExperimentConfig cfg, DatasetPair shared_data);

  // Full experiment: every seed, manifest + per-round artifacts + reports.
  MetricsReport run();

  SeedMetrics run_seed(uint64_t seed);

  // Continues a seed from its saved round checkpoint.
  SeedMetrics resume_seed(uint64_t seed, int from_round);

  RunState train_round(RunState state, const RoundSpec& round);

  RoundMetrics evaluate_round(IncrementalNet& model, int round_index,
                              const std::vector<int>& seen_classes);

  const std::vector<RoundSpec>& rounds() const { return rounds_; }
  const DatasetPair& data() const { return data_; }
  const ExperimentConfig& config() const { return cfg_; }

  std::string seed_dir(uint64_t seed) const;
  std::string round_dir(uint64_t seed, int round) const;

  void write_manifest() const;

 private:
  void persist_round(const RunState& state, uint64_t seed);
  void finetune_head(IncrementalNet& model, const LabeledDataset& round_data);
  std::vector<CandidateSet> candidates_for(IncrementalNet& model, const RoundSpec& round);

  ExperimentConfig cfg_;
  DatasetPair data_;
  std::vector<RoundSpec> rounds_;
  LossOptions loss_opt_;
};

}  // namespace cil
