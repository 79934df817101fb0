// cil: class-incremental learning experiments driven by a JSON config.
// Subcommands: run, ablate, resume, report.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cil/config.hpp"
#include "cil/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int fail_config(const cil::ConfigError& e) {
  std::cerr << "error: " << e.what() << "\n";
  return 2;
}

int fail_runtime(const std::exception& e) {
  std::cerr << "error: " << e.what() << "\n";
  return 1;
}

void print_report_summary(const cil::MetricsReport& rep) {
  std::cout << "seeds: " << rep.seeds.size() << "\n";
  for (const auto& s : rep.seeds)
    std::cout << "  seed " << s.seed << ": Avg " << s.avg << "  Last " << s.last << "\n";
  std::cout << "mean Avg " << rep.mean_avg << " +/- " << rep.std_avg << "\n";
  std::cout << "mean Last " << rep.mean_last << " +/- " << rep.std_last << "\n";
}

json load_user_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw cil::IoError("cannot open config file " + path);
  try {
    return json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw cil::ConfigError("config parse error in " + path + ": " + e.what());
  }
}

int cmd_run(const std::string& config_path, const std::vector<std::string>& overrides) {
  cil::ExperimentConfig cfg = cil::load_config_file(config_path, overrides);
  cil::Trainer trainer(std::move(cfg));
  cil::MetricsReport rep = trainer.run();
  std::cout << "run complete, outputs in " << trainer.config().output_dir << "\n";
  print_report_summary(rep);
  return 0;
}

struct AblateCell {
  std::string name;
  json patch;  // key -> value applied over the base config
};

int cmd_ablate(const std::string& config_path, const std::vector<std::string>& overrides,
               const std::string& flags_csv, const std::string& sweep_spec) {
  json base = load_user_json(config_path);
  for (const auto& o : overrides) base = cil::apply_override(base, o);
  cil::ExperimentConfig base_cfg = cil::parse_config(base);  // full validation up front
  const std::string base_out = base_cfg.output_dir;

  std::vector<AblateCell> cells;
  if (!flags_csv.empty() && !sweep_spec.empty())
    throw cil::ConfigError("ablate: use either --flags or --sweep, not both");
  if (!flags_csv.empty()) {
    std::vector<std::string> flags;
    std::istringstream is(flags_csv);
    std::string tok;
    while (std::getline(is, tok, ',')) {
      if (tok != "aikd" && tok != "uct" && tok != "cutmix" && tok != "finetune")
        throw cil::ConfigError("ablate: unknown component flag '" + tok + "'");
      flags.push_back(tok);
    }
    if (flags.empty()) throw cil::ConfigError("ablate: empty flag list");
    const size_t n = flags.size();
    for (size_t bits = 0; bits < (size_t(1) << n); ++bits) {
      AblateCell cell;
      std::string name;
      for (size_t i = 0; i < n; ++i) {
        const bool on = (bits >> i) & 1;
        cell.patch["components." + flags[i]] = on;
        name += (on ? flags[i] : "no_" + flags[i]);
        if (i + 1 < n) name += "__";
      }
      cell.name = name;
      cells.push_back(std::move(cell));
    }
  } else if (!sweep_spec.empty()) {
    const auto eq = sweep_spec.find('=');
    if (eq == std::string::npos)
      throw cil::ConfigError("ablate: --sweep expects key=v1,v2,...");
    const std::string key = sweep_spec.substr(0, eq);
    std::istringstream is(sweep_spec.substr(eq + 1));
    std::string tok;
    while (std::getline(is, tok, ',')) {
      AblateCell cell;
      cell.patch[key + std::string()] = json::parse(tok, nullptr, false).is_discarded()
                                            ? json(tok)
                                            : json::parse(tok);
      std::string name = key + "_" + tok;
      std::replace(name.begin(), name.end(), '.', '_');
      cell.name = name;
      cells.push_back(std::move(cell));
    }
    if (cells.empty()) throw cil::ConfigError("ablate: empty sweep value list");
  } else {
    throw cil::ConfigError("ablate: an empty grid (give --flags or --sweep)");
  }

  // Sub-runs share the loaded dataset and the class-order seed; only the
  // component under test changes.
  cil::DatasetPair shared = cil::load_dataset(base_cfg.dataset);
  json summary = json::array();
  std::cout << "ablation grid: " << cells.size() << " runs\n";
  for (const auto& cell : cells) {
    json sub = base;
    for (auto it = cell.patch.begin(); it != cell.patch.end(); ++it)
      sub = cil::apply_override(sub, it.key() + "=" + it.value().dump());
    sub = cil::apply_override(
        sub, "trainer.output_dir=" + (fs::path(base_out) / cell.name).string());
    cil::ExperimentConfig cfg = cil::parse_config(sub);
    cil::Trainer trainer(std::move(cfg), shared);
    cil::MetricsReport rep = trainer.run();
    std::cout << "  " << cell.name << ": mean Avg " << rep.mean_avg << "  mean Last "
              << rep.mean_last << "\n";
    summary.push_back({{"name", cell.name},
                       {"mean_avg", rep.mean_avg},
                       {"std_avg", rep.std_avg},
                       {"mean_last", rep.mean_last},
                       {"std_last", rep.std_last}});
  }
  fs::create_directories(base_out);
  {
    std::ofstream out(fs::path(base_out) / "ablation_summary.json");
    out << summary.dump(2) << "\n";
  }
  {
    std::ofstream out(fs::path(base_out) / "ablation_summary.csv");
    out << "name,mean_avg,std_avg,mean_last,std_last\n";
    for (const auto& row : summary)
      out << row.at("name").get<std::string>() << "," << row.at("mean_avg") << ","
          << row.at("std_avg") << "," << row.at("mean_last") << "," << row.at("std_last")
          << "\n";
  }
  std::cout << "ablation summary written to " << base_out << "\n";
  return 0;
}

int cmd_resume(const std::string& run_dir, int round, const std::string& config_path) {
  std::ifstream min(fs::path(run_dir) / "manifest.json");
  if (!min) throw cil::IoError("no manifest.json in " + run_dir);
  json manifest = json::parse(min);
  if (!config_path.empty()) {
    json supplied = load_user_json(config_path);
    cil::ExperimentConfig sup_cfg = cil::parse_config(supplied);
    if (sup_cfg.hash != manifest.at("config_hash").get<std::string>())
      throw cil::ConfigError("resume: supplied config hash " + sup_cfg.hash +
                             " does not match run manifest " +
                             manifest.at("config_hash").get<std::string>());
  }
  json cfg_json = manifest.at("config");
  cfg_json = cil::apply_override(cfg_json, "trainer.output_dir=" + run_dir);
  cil::ExperimentConfig cfg = cil::parse_config(cfg_json);
  cil::Trainer trainer(std::move(cfg));
  const int last_round = static_cast<int>(trainer.rounds().size()) - 1;
  if (round >= last_round) {
    std::cout << "resume: round " << round << " is already the last round; nothing to do\n";
    return 0;
  }
  std::vector<cil::SeedMetrics> per_seed;
  for (uint64_t seed : trainer.config().seeds)
    per_seed.push_back(trainer.resume_seed(seed, round));
  cil::MetricsReport rep = cil::aggregate(std::move(per_seed), trainer.config().hash);
  cil::emit_report(rep, trainer.config().output_dir);
  std::cout << "resume complete\n";
  print_report_summary(rep);
  return 0;
}

int cmd_report(const std::string& run_dir) {
  std::ifstream min(fs::path(run_dir) / "manifest.json");
  if (!min) throw cil::IoError("no manifest.json in " + run_dir);
  json manifest = json::parse(min);
  std::vector<cil::SeedMetrics> per_seed;
  for (const auto& sj : manifest.at("seeds")) {
    const uint64_t seed = sj.get<uint64_t>();
    // highest completed round wins
    int best = -1;
    const fs::path sdir = fs::path(run_dir) / ("seed_" + std::to_string(seed));
    if (!fs::is_directory(sdir)) throw cil::IoError("missing seed directory " + sdir.string());
    for (const auto& e : fs::directory_iterator(sdir)) {
      const std::string name = e.path().filename().string();
      if (name.rfind("round_", 0) == 0) best = std::max(best, std::stoi(name.substr(6)));
    }
    if (best < 0) throw cil::IoError("no completed rounds for seed " + std::to_string(seed));
    std::ifstream in(sdir / ("round_" + std::to_string(best)) / "state.json");
    if (!in) throw cil::IoError("missing state.json for seed " + std::to_string(seed));
    json sjs = json::parse(in);
    cil::SeedMetrics sm;
    sm.seed = seed;
    for (const auto& rj : sjs.at("metrics"))
      sm.rounds.push_back({rj.at("round").get<int>(), rj.at("classes_seen").get<int>(),
                           rj.at("top1").get<double>(), rj.at("top5").get<double>()});
    per_seed.push_back(std::move(sm));
  }
  cil::MetricsReport rep =
      cil::aggregate(std::move(per_seed), manifest.at("config_hash").get<std::string>());
  cil::emit_report(rep, run_dir);
  std::cout << "report re-rendered in " << run_dir << "\n";
  print_report_summary(rep);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"class-incremental learning toolkit"};
  app.require_subcommand(1);

  std::string config_path, run_dir, flags_csv, sweep_spec;
  std::vector<std::string> overrides;
  int round = 0;

  auto* run = app.add_subcommand("run", "execute an experiment from a config file");
  run->add_option("--config", config_path, "experiment config (JSON)")->required();
  run->add_option("--set", overrides, "dotted-path override, e.g. trainer.seeds=[1]");

  auto* ablate = app.add_subcommand("ablate", "grid of sub-runs over flags or one swept key");
  ablate->add_option("--config", config_path, "experiment config (JSON)")->required();
  ablate->add_option("--set", overrides, "dotted-path override applied to every sub-run");
  ablate->add_option("--flags", flags_csv,
                     "comma-separated component flags to grid over (e.g. aikd,uct,cutmix)");
  ablate->add_option("--sweep", sweep_spec, "key=v1,v2,... single-key sweep");

  auto* resume = app.add_subcommand("resume", "continue a run from a round checkpoint");
  resume->add_option("--run-dir", run_dir, "existing run directory")->required();
  resume->add_option("--round", round, "completed round to resume after")->required();
  resume->add_option("--config", config_path, "optional config to verify against the manifest");

  auto* report = app.add_subcommand("report", "re-render metrics files from a run directory");
  report->add_option("--run-dir", run_dir, "existing run directory")->required();

  // Dataset paths may be relative to $CIL_DATA_ROOT; see README.
  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(config_path, overrides);
    if (ablate->parsed()) return cmd_ablate(config_path, overrides, flags_csv, sweep_spec);
    if (resume->parsed()) return cmd_resume(run_dir, round, config_path);
    if (report->parsed()) return cmd_report(run_dir);
  } catch (const cil::ConfigError& e) {
    return fail_config(e);
  } catch (const std::exception& e) {
    return fail_runtime(e);
  }
  return 0;
}
