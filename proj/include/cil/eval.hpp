#pragma once

// Per-round and aggregate accuracy metrics plus their serialized report
// formats (canonical JSON, per-round CSV, accuracy-vs-classes curve).

#include <string>
#include <vector>

#include "cil/model.hpp"

namespace cil {

// Percentage of samples whose true class ranks among the k largest logits;
// logit ties resolve by column order.
double top_k_accuracy(const Logits& logits, const std::vector<int>& labels, int k);

struct RoundMetrics {
  int round = 0;
  int classes_seen = 0;
  double top1 = 0.0;
  double top5 = 0.0;
};

struct SeedMetrics {
  uint64_t seed = 0;
  std::vector<RoundMetrics> rounds;
  double avg = 0.0;   // mean top-1 over all rounds, round 0 included
  double last = 0.0;  // final-round top-1
};

struct MetricsReport {
  int version = 1;
  std::string config_hash;
  std::vector<SeedMetrics> seeds;
  double mean_avg = 0.0, std_avg = 0.0;
  double mean_last = 0.0, std_last = 0.0;
};

// Fills Avg/Last per seed and the population mean/std across seeds.
MetricsReport aggregate(std::vector<SeedMetrics> seeds, const std::string& config_hash);

std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& text);

// Writes metrics.json, metrics.csv (one row per seed per round), and
// curve.tsv (x = classes seen, y = top-1 per seed and mean).
void emit_report(const MetricsReport& report, const std::string& dir);

}  // namespace cil
