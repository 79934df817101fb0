#include "cil/eval.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

namespace cil {

using nlohmann::json;

double top_k_accuracy(const Logits& logits, const std::vector<int>& labels, int k) {
  const Eigen::Index N = logits.values.dim(0), K = logits.values.dim(1);
  if (static_cast<Eigen::Index>(labels.size()) != N)
    throw InputError("top_k_accuracy: label count does not match logits");
  if (k < 1 || k > K) throw InputError("top_k_accuracy: k outside [1, #classes]");
  Eigen::Index hits = 0;
  std::vector<Eigen::Index> cols(K);
  for (Eigen::Index i = 0; i < N; ++i) {
    auto it = std::find(logits.class_ids.begin(), logits.class_ids.end(), labels[i]);
    if (it == logits.class_ids.end())
      throw EvalError("top_k_accuracy: label " + std::to_string(labels[i]) +
                      " outside the learned class set");
    const Eigen::Index target = std::distance(logits.class_ids.begin(), it);
    std::iota(cols.begin(), cols.end(), 0);
    const double* row = logits.values.value().data() + i * K;
    // stable partial sort: ties keep class (column) order
    std::stable_sort(cols.begin(), cols.end(),
                     [&](Eigen::Index a, Eigen::Index b) { return row[a] > row[b]; });
    for (int j = 0; j < k; ++j)
      if (cols[j] == target) {
        ++hits;
        break;
      }
  }
  return 100.0 * static_cast<double>(hits) / static_cast<double>(N);
}

MetricsReport aggregate(std::vector<SeedMetrics> seeds, const std::string& config_hash) {
  if (seeds.empty()) throw InputError("aggregate: no seed metrics");
  const size_t rounds = seeds.front().rounds.size();
  for (const auto& s : seeds)
    if (s.rounds.size() != rounds) throw InputError("aggregate: ragged round counts across seeds");

  MetricsReport rep;
  rep.config_hash = config_hash;
  for (auto& s : seeds) {
    double sum = 0.0;
    for (const auto& r : s.rounds) sum += r.top1;
    s.avg = sum / static_cast<double>(s.rounds.size());
    s.last = s.rounds.back().top1;
  }
  auto mean_of = [&](auto get) {
    double m = 0.0;
    for (const auto& s : seeds) m += get(s);
    return m / static_cast<double>(seeds.size());
  };
  auto pop_std = [&](auto get, double mean) {
    double v = 0.0;
    for (const auto& s : seeds) v += (get(s) - mean) * (get(s) - mean);
    return std::sqrt(v / static_cast<double>(seeds.size()));
  };
  rep.mean_avg = mean_of([](const SeedMetrics& s) { return s.avg; });
  rep.std_avg = pop_std([](const SeedMetrics& s) { return s.avg; }, rep.mean_avg);
  rep.mean_last = mean_of([](const SeedMetrics& s) { return s.last; });
  rep.std_last = pop_std([](const SeedMetrics& s) { return s.last; }, rep.mean_last);
  rep.seeds = std::move(seeds);
  return rep;
}

std::string report_to_json(const MetricsReport& report) {
  json j;
  j["version"] = report.version;
  j["config_hash"] = report.config_hash;
  json seeds = json::array();
  for (const auto& s : report.seeds) {
    json rounds = json::array();
    for (const auto& r : s.rounds)
      rounds.push_back({{"round", r.round},
                        {"classes_seen", r.classes_seen},
                        {"top1", r.top1},
                        {"top5", r.top5}});
    seeds.push_back(
        {{"seed", s.seed}, {"rounds", rounds}, {"avg", s.avg}, {"last", s.last}});
  }
  j["seeds"] = seeds;
  j["mean_avg"] = report.mean_avg;
  j["std_avg"] = report.std_avg;
  j["mean_last"] = report.mean_last;
  j["std_last"] = report.std_last;
  return j.dump(2);
}

MetricsReport report_from_json(const std::string& text) {
  json j = json::parse(text);
  MetricsReport rep;
  rep.version = j.at("version").get<int>();
  rep.config_hash = j.at("config_hash").get<std::string>();
  for (const auto& sj : j.at("seeds")) {
    SeedMetrics s;
    s.seed = sj.at("seed").get<uint64_t>();
    for (const auto& rj : sj.at("rounds")) {
      RoundMetrics r;
      r.round = rj.at("round").get<int>();
      r.classes_seen = rj.at("classes_seen").get<int>();
      r.top1 = rj.at("top1").get<double>();
      r.top5 = rj.at("top5").get<double>();
      s.rounds.push_back(r);
    }
    s.avg = sj.at("avg").get<double>();
    s.last = sj.at("last").get<double>();
    rep.seeds.push_back(std::move(s));
  }
  rep.mean_avg = j.at("mean_avg").get<double>();
  rep.std_avg = j.at("std_avg").get<double>();
  rep.mean_last = j.at("mean_last").get<double>();
  rep.std_last = j.at("std_last").get<double>();
  return rep;
}

void emit_report(const MetricsReport& report, const std::string& dir) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  {
    std::ofstream out(fs::path(dir) / "metrics.json");
    if (!out) throw IoError("cannot write metrics.json in " + dir);
    out << report_to_json(report) << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "metrics.csv");
    if (!out) throw IoError("cannot write metrics.csv in " + dir);
    out << "seed,round,classes_seen,top1,top5\n";
    for (const auto& s : report.seeds)
      for (const auto& r : s.rounds)
        out << s.seed << "," << r.round << "," << r.classes_seen << "," << r.top1 << ","
            << r.top5 << "\n";
  }
  {
    std::ofstream out(fs::path(dir) / "curve.tsv");
    if (!out) throw IoError("cannot write curve.tsv in " + dir);
    out << "classes_seen";
    for (const auto& s : report.seeds) out << "\ttop1_seed" << s.seed;
    out << "\ttop1_mean\n";
    if (!report.seeds.empty()) {
      const size_t rounds = report.seeds.front().rounds.size();
      for (size_t r = 0; r < rounds; ++r) {
        out << report.seeds.front().rounds[r].classes_seen;
        double mean = 0.0;
        for (const auto& s : report.seeds) {
          out << "\t" << s.rounds[r].top1;
          mean += s.rounds[r].top1;
        }
        out << "\t" << mean / static_cast<double>(report.seeds.size()) << "\n";
      }
    }
  }
}

}  // namespace cil
