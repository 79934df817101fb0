#include "cil/config.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace cil {

using nlohmann::json;

double lr_at_epoch(const OptimSchedule& s, int epoch) {
  double lr;
  if (epoch < s.warmup_epochs) {
    lr = s.warmup_end_lr * static_cast<double>(epoch + 1) / s.warmup_epochs;
  } else {
    lr = s.warmup_end_lr;
    for (int m : s.milestones)
      if (epoch >= m) lr *= s.decay_factor;
  }
  return lr;
}

json default_config_json() {
  return json{
      {"dataset",
       {{"kind", "synthetic"},
        {"path", ""},
        {"image_size", 32},
        {"normalization", {{"mean", {0.5, 0.5, 0.5}}, {"std", {0.25, 0.25, 0.25}}}},
        {"synthetic",
         {{"classes", 8},
          {"train_per_class", 64},
          {"test_per_class", 16},
          {"noise", 0.25},
          {"seed", 1234}}}}},
      {"protocol",
       {{"total_classes", 8},
        {"initial_classes", 0},
        {"num_incremental_rounds", 2},
        {"class_order_seed", 17}}},
      {"model",
       {{"blocks", {16, 32, 64, 128}},
        {"embed_dim", 128},
        {"input_size", 32},
        {"head", "linear"},
        {"cosine_scale", 16.0},
        {"head_init_stddev", 0.01}}},
      {"schedule",
       {{"epochs", 160},
        {"batch_size", 128},
        {"weight_decay", 5e-4},
        {"momentum", 0.9},
        {"warmup_epochs", 10},
        {"warmup_end_lr", 0.01},
        {"milestones", {100, 120}},
        {"decay_factor", 0.1}}},
      {"weights", {{"lambda_a", 0.5}, {"lambda_u", 1.0}, {"lambda_f", 0.5}}},
      {"components",
       {{"aikd", true}, {"uct", true}, {"cutmix", true}, {"finetune", false}}},
      {"distill", {{"kind", "pod"}}},
      {"aim",
       {{"variant", "block_wise_maps"}, {"count_k", 4}, {"stop_gradient_target", false}}},
      {"uncertainty", {{"kind", "kl"}, {"temperature", 1.0}}},
      {"cutmix", {{"alpha", 1.0}, {"tau", 0.6}, {"enabled", true}}},
      {"memory", {{"policy", "fixed_total"}, {"budget", 2000}, {"per_class", 20}}},
      {"trainer", {{"seeds", {1, 2, 3}}, {"output_dir", "runs/out"}}},
      {"finetune", {{"epochs", 20}, {"lr", 0.01}}},
  };
}

namespace {

void merge_checked(const json& defaults, const json& user, json& out, const std::string& prefix,
                   std::vector<std::string>& errors) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!defaults.contains(it.key())) {
      errors.push_back("unknown key '" + path + "'");
      continue;
    }
    const json& dv = defaults.at(it.key());
    const json& uv = it.value();
    if (dv.is_object()) {
      if (!uv.is_object()) {
        errors.push_back("'" + path + "' must be an object");
        continue;
      }
      merge_checked(dv, uv, out[it.key()], path, errors);
    } else if (dv.is_boolean()) {
      if (!uv.is_boolean()) {
        errors.push_back("'" + path + "' must be a boolean");
        continue;
      }
      out[it.key()] = uv;
    } else if (dv.is_string()) {
      if (!uv.is_string()) {
        errors.push_back("'" + path + "' must be a string");
        continue;
      }
      out[it.key()] = uv;
    } else if (dv.is_number_integer() || dv.is_number_unsigned()) {
      if (!uv.is_number_integer() && !uv.is_number_unsigned()) {
        errors.push_back("'" + path + "' must be an integer");
        continue;
      }
      out[it.key()] = uv;
    } else if (dv.is_number()) {
      if (!uv.is_number()) {
        errors.push_back("'" + path + "' must be a number");
        continue;
      }
      out[it.key()] = uv;
    } else if (dv.is_array()) {
      if (!uv.is_array()) {
        errors.push_back("'" + path + "' must be an array");
        continue;
      }
      out[it.key()] = uv;
    } else {
      out[it.key()] = uv;
    }
  }
}

template <typename T>
std::vector<T> int_array(const json& j, const std::string& path,
                         std::vector<std::string>& errors) {
  std::vector<T> out;
  for (const auto& v : j) {
    if (!v.is_number_integer() && !v.is_number_unsigned()) {
      errors.push_back("'" + path + "' must contain integers");
      return out;
    }
    out.push_back(v.get<T>());
  }
  return out;
}

}  // namespace

std::string config_hash(const json& canonical) {
  const std::string dump = canonical.dump();
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : dump) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream os;
  os << std::hex << h;
  return os.str();
}

ExperimentConfig parse_config(const json& user) {
  std::vector<std::string> errors;
  json merged = default_config_json();
  if (!user.is_object()) {
    errors.push_back("config root must be a JSON object");
  } else {
    merge_checked(default_config_json(), user, merged, "", errors);
  }
  if (!errors.empty()) {
    std::string msg = "config validation failed:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }

  ExperimentConfig cfg;
  cfg.canonical = merged;
  cfg.hash = config_hash(merged);

  auto note = [&](const std::string& m) { errors.push_back(m); };

  // dataset
  {
    const json& d = merged.at("dataset");
    try {
      cfg.dataset.kind = parse_dataset_kind(d.at("kind").get<std::string>());
    } catch (const ConfigError& e) {
      note(e.what());
    }
    cfg.dataset.path = d.at("path").get<std::string>();
    if (const char* root = std::getenv("CIL_DATA_ROOT");
        root && !cfg.dataset.path.empty() &&
        std::filesystem::path(cfg.dataset.path).is_relative())
      cfg.dataset.path = (std::filesystem::path(root) / cfg.dataset.path).string();
    cfg.dataset.image_size = d.at("image_size").get<int>();
    if (cfg.dataset.image_size < 2) note("dataset.image_size must be >= 2");
    const json& norm = d.at("normalization");
    auto mean = norm.at("mean"), stddev = norm.at("std");
    if (mean.size() != 3 || stddev.size() != 3)
      note("dataset.normalization mean/std must have 3 entries");
    else
      for (int i = 0; i < 3; ++i) {
        cfg.dataset.mean[i] = mean[i].get<double>();
        cfg.dataset.stddev[i] = stddev[i].get<double>();
        if (cfg.dataset.stddev[i] <= 0) note("dataset.normalization.std must be positive");
      }
    const json& sp = d.at("synthetic");
    cfg.dataset.synthetic.classes = sp.at("classes").get<int>();
    cfg.dataset.synthetic.train_per_class = sp.at("train_per_class").get<int>();
    cfg.dataset.synthetic.test_per_class = sp.at("test_per_class").get<int>();
    cfg.dataset.synthetic.noise = sp.at("noise").get<double>();
    cfg.dataset.synthetic.seed = sp.at("seed").get<uint64_t>();
    if (cfg.dataset.kind != DatasetDescriptor::Kind::synthetic && cfg.dataset.path.empty())
      note("dataset.path required for non-synthetic datasets");
  }

  // protocol
  {
    const json& p = merged.at("protocol");
    cfg.protocol.total_classes = p.at("total_classes").get<int>();
    cfg.protocol.initial_classes = p.at("initial_classes").get<int>();
    cfg.protocol.num_incremental_rounds = p.at("num_incremental_rounds").get<int>();
    cfg.protocol.class_order_seed = p.at("class_order_seed").get<uint64_t>();
    try {
      cfg.protocol.validate();
    } catch (const ConfigError& e) {
      note(e.what());
    }
  }

  // model
  {
    const json& m = merged.at("model");
    cfg.backbone.channels = int_array<int>(m.at("blocks"), "model.blocks", errors);
    cfg.backbone.num_blocks = static_cast<int>(cfg.backbone.channels.size());
    cfg.backbone.embed_dim = m.at("embed_dim").get<int>();
    cfg.backbone.input_size = m.at("input_size").get<int>();
    if (cfg.dataset.image_size != cfg.backbone.input_size)
      note("model.input_size must match dataset.image_size");
    try {
      cfg.backbone.validate();
    } catch (const ConfigError& e) {
      note(e.what());
    }
    const std::string head = m.at("head").get<std::string>();
    if (head == "linear")
      cfg.head.kind = HeadKind::linear;
    else if (head == "cosine")
      cfg.head.kind = HeadKind::cosine;
    else
      note("model.head must be linear|cosine");
    cfg.head.cosine_scale = m.at("cosine_scale").get<double>();
    cfg.head.init_stddev = m.at("head_init_stddev").get<double>();
    if (cfg.head.init_stddev <= 0) note("model.head_init_stddev must be positive");
  }

  // schedule
  {
    const json& s = merged.at("schedule");
    cfg.schedule.epochs = s.at("epochs").get<int>();
    cfg.schedule.batch_size = s.at("batch_size").get<int>();
    cfg.schedule.weight_decay = s.at("weight_decay").get<double>();
    cfg.schedule.momentum = s.at("momentum").get<double>();
    cfg.schedule.warmup_epochs = s.at("warmup_epochs").get<int>();
    cfg.schedule.warmup_end_lr = s.at("warmup_end_lr").get<double>();
    cfg.schedule.milestones = int_array<int>(s.at("milestones"), "schedule.milestones", errors);
    cfg.schedule.decay_factor = s.at("decay_factor").get<double>();
    if (cfg.schedule.epochs < 1) note("schedule.epochs must be >= 1");
    if (cfg.schedule.batch_size < 1) note("schedule.batch_size must be >= 1");
    if (cfg.schedule.warmup_epochs < 0 || cfg.schedule.warmup_epochs > cfg.schedule.epochs)
      note("schedule.warmup_epochs must lie within [0, epochs]");
    if (cfg.schedule.warmup_end_lr <= 0) note("schedule.warmup_end_lr must be positive");
    if (cfg.schedule.decay_factor <= 0 || cfg.schedule.decay_factor > 1)
      note("schedule.decay_factor must be in (0, 1]");
    for (int m : cfg.schedule.milestones)
      if (m >= cfg.schedule.epochs) note("schedule.milestones must be below schedule.epochs");
  }

  // weights
  {
    const json& w = merged.at("weights");
    cfg.weights.lambda_a = w.at("lambda_a").get<double>();
    cfg.weights.lambda_u = w.at("lambda_u").get<double>();
    cfg.weights.lambda_f = w.at("lambda_f").get<double>();
    if (cfg.weights.lambda_a < 0 || cfg.weights.lambda_u < 0 || cfg.weights.lambda_f < 0)
      note("weights.* must be non-negative");
  }

  // components
  {
    const json& c = merged.at("components");
    cfg.components.aikd = c.at("aikd").get<bool>();
    cfg.components.uct = c.at("uct").get<bool>();
    cfg.components.cutmix = c.at("cutmix").get<bool>();
    cfg.components.finetune = c.at("finetune").get<bool>();
  }

  // distill / aim / uncertainty / cutmix
  try {
    cfg.distill_kind = parse_distance_kind(merged.at("distill").at("kind").get<std::string>());
  } catch (const ConfigError& e) {
    note(e.what());
  }
  {
    const json& a = merged.at("aim");
    try {
      cfg.aim.variant = parse_attention_variant(a.at("variant").get<std::string>());
    } catch (const ConfigError& e) {
      note(e.what());
    }
    cfg.aim.count_k = a.at("count_k").get<int>();
    cfg.aim.stop_gradient_target = a.at("stop_gradient_target").get<bool>();
    if (cfg.aim.count_k < 1 || cfg.aim.count_k > cfg.backbone.num_blocks)
      note("aim.count_k must be in [1, number of blocks]");
  }
  {
    const json& u = merged.at("uncertainty");
    try {
      cfg.uncertainty.kind = parse_divergence_kind(u.at("kind").get<std::string>());
    } catch (const ConfigError& e) {
      note(e.what());
    }
    cfg.uncertainty.temperature = u.at("temperature").get<double>();
    if (cfg.uncertainty.temperature <= 0) note("uncertainty.temperature must be positive");
  }
  {
    const json& c = merged.at("cutmix");
    cfg.cutmix.alpha = c.at("alpha").get<double>();
    cfg.cutmix.tau = c.at("tau").get<double>();
    cfg.cutmix.enabled = c.at("enabled").get<bool>();
    if (cfg.cutmix.alpha <= 0) note("cutmix.alpha must be positive");
    if (cfg.cutmix.tau < 0 || cfg.cutmix.tau > 1) note("cutmix.tau must be in [0, 1]");
  }

  // memory
  {
    const json& m = merged.at("memory");
    try {
      cfg.memory.kind = parse_memory_policy(m.at("policy").get<std::string>());
    } catch (const ConfigError& e) {
      note(e.what());
    }
    cfg.memory.budget = m.at("budget").get<int>();
    cfg.memory.per_class = m.at("per_class").get<int>();
    if (cfg.memory.budget < 1) note("memory.budget must be positive");
    if (cfg.memory.per_class < 1) note("memory.per_class must be positive");
  }

  // trainer + finetune
  {
    const json& t = merged.at("trainer");
    cfg.seeds = int_array<uint64_t>(t.at("seeds"), "trainer.seeds", errors);
    if (cfg.seeds.empty()) note("trainer.seeds must not be empty");
    cfg.output_dir = t.at("output_dir").get<std::string>();
    if (cfg.output_dir.empty()) note("trainer.output_dir must not be empty");
    const json& f = merged.at("finetune");
    cfg.finetune.epochs = f.at("epochs").get<int>();
    cfg.finetune.lr = f.at("lr").get<double>();
    if (cfg.finetune.epochs < 1) note("finetune.epochs must be >= 1");
    if (cfg.finetune.lr <= 0) note("finetune.lr must be positive");
  }

  if (cfg.components.finetune && cfg.cutmix_active())
    note("components.finetune requires cutmix to be disabled (it is the comparison arm)");
  if (cfg.protocol.total_classes > cfg.dataset.synthetic.classes &&
      cfg.dataset.kind == DatasetDescriptor::Kind::synthetic)
    note("protocol.total_classes exceeds dataset.synthetic.classes");

  if (!errors.empty()) {
    std::string msg = "config validation failed:";
    for (const auto& e : errors) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  return cfg;
}

json apply_override(json config, const std::string& keyval) {
  const auto eq = keyval.find('=');
  if (eq == std::string::npos)
    throw ConfigError("override '" + keyval + "' is not of the form path=value");
  const std::string path = keyval.substr(0, eq);
  const std::string raw = keyval.substr(eq + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;  // bare strings stay strings
  }
  std::vector<std::string> keys;
  std::istringstream is(path);
  std::string tok;
  while (std::getline(is, tok, '.')) keys.push_back(tok);
  if (keys.empty()) throw ConfigError("override '" + keyval + "' has an empty path");
  // Missing intermediates are created; schema validation still rejects paths
  // outside the known tree.
  json* cursor = &config;
  for (size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!cursor->contains(keys[i])) (*cursor)[keys[i]] = json::object();
    cursor = &(*cursor)[keys[i]];
    if (!cursor->is_object())
      throw ConfigError("override path '" + path + "' crosses a non-object value");
  }
  (*cursor)[keys.back()] = value;
  return config;
}

ExperimentConfig load_config_file(const std::string& path,
                                  const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  json user;
  try {
    user = json::parse(in, nullptr, true, /*ignore_comments=*/true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  for (const auto& o : overrides) user = apply_override(user, o);
  return parse_config(user);
}

}  // namespace cil
