#include "cil/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "cil/checkpoint.hpp"

namespace fs = std::filesystem;

namespace cil {

using nlohmann::json;

Tensor total_loss(const Tensor& images, const Tensor& soft_targets, IncrementalNet& new_model,
                  IncrementalNet* old_model, std::vector<AimModule>* aims,
                  const LossOptions& opt, LossBreakdown* breakdown) {
  if (images.dim(0) == 0) throw InputError("total_loss: empty batch");
  if (soft_targets.dim(0) != images.dim(0))
    throw InputError("total_loss: target rows do not match batch size");

  FullOutput out_new = new_model.forward_full(images);
  Tensor ce = cross_entropy_per_sample(out_new.logits.values, soft_targets);

  Tensor l_u, l_a, l_f;
  bool has_a = false, has_f = false;
  double u_mean = 1.0;
  if (old_model != nullptr) {
    if (!old_model->frozen()) throw StateError("total_loss: old model must be frozen");
    FullOutput out_old = old_model->forward_full(images);
    if (opt.components.uct) {
      Logits restricted = out_new.logits.restricted_to(out_old.logits.class_ids);
      Tensor u = prediction_uncertainty(out_old.logits, restricted, opt.uncertainty.kind,
                                        opt.uncertainty.temperature);
      u_mean = u.value().mean();
      l_u = uncertainty_regularized_loss(ce, u);
    } else {
      l_u = mean_all(ce);
    }
    if (opt.components.aikd) {
      if (aims == nullptr || aims->empty())
        throw StateError("total_loss: aikd enabled but no integration modules supplied");
      l_a = aikd_loss(out_new.pyramid, out_old.pyramid, *aims, opt.distill_kind,
                      opt.aim.count_k, opt.aim.stop_gradient_target);
      has_a = true;
    }
    l_f = feature_distill_loss(out_new.embedding, out_old.embedding);
    has_f = true;
  } else {
    l_u = mean_all(ce);
  }

  Tensor total = affine(l_u, opt.weights.lambda_u, 0.0);
  if (has_a) total = add(total, affine(l_a, opt.weights.lambda_a, 0.0));
  if (has_f) total = add(total, affine(l_f, opt.weights.lambda_f, 0.0));

  LossBreakdown bd;
  bd.total = total.item();
  bd.uct = l_u.item();
  bd.aikd = has_a ? l_a.item() : 0.0;
  bd.feat = has_f ? l_f.item() : 0.0;
  bd.ce_mean = ce.value().mean();
  bd.u_mean = u_mean;
  bd.has_aikd = has_a;
  bd.has_feat = has_f;
  if (!std::isfinite(bd.total))
    throw NumericError("total_loss diverged: total=" + std::to_string(bd.total) +
                       " aikd=" + std::to_string(bd.aikd) + " uct=" + std::to_string(bd.uct) +
                       " feat=" + std::to_string(bd.feat));
  if (breakdown != nullptr) *breakdown = bd;
  return total;
}

namespace {

// One-hot rows over the model's current class columns.
Tensor hard_targets(const std::vector<int>& labels, const std::vector<int>& class_ids) {
  const Eigen::Index n = static_cast<Eigen::Index>(labels.size());
  const Eigen::Index k = static_cast<Eigen::Index>(class_ids.size());
  Tensor::Array t = Tensor::Array::Zero(n * k);
  for (Eigen::Index i = 0; i < n; ++i) {
    auto it = std::find(class_ids.begin(), class_ids.end(), labels[i]);
    if (it == class_ids.end())
      throw StateError("training label " + std::to_string(labels[i]) +
                       " missing from the class head");
    t[i * k + std::distance(class_ids.begin(), it)] = 1.0;
  }
  return Tensor::leaf({n, k}, std::move(t), false);
}

Eigen::Index column_of(const std::vector<int>& class_ids, int id) {
  auto it = std::find(class_ids.begin(), class_ids.end(), id);
  if (it == class_ids.end())
    throw StateError("class " + std::to_string(id) + " missing from the class head");
  return std::distance(class_ids.begin(), it);
}

}  // namespace

Trainer::Trainer(ExperimentConfig cfg) : Trainer(std::move(cfg), DatasetPair{}) {}

Trainer::Trainer(ExperimentConfig cfg, DatasetPair shared_data) : cfg_(std::move(cfg)) {
  data_ = shared_data.num_classes > 0 ? std::move(shared_data) : load_dataset(cfg_.dataset);
  if (data_.num_classes < cfg_.protocol.total_classes)
    throw ConfigError("dataset provides " + std::to_string(data_.num_classes) +
                      " classes, protocol needs " +
                      std::to_string(cfg_.protocol.total_classes));
  rounds_ = make_class_splits(cfg_.protocol);
  loss_opt_ = {cfg_.weights, cfg_.components, cfg_.distill_kind, cfg_.aim, cfg_.uncertainty};
}

std::string Trainer::seed_dir(uint64_t seed) const {
  return (fs::path(cfg_.output_dir) / ("seed_" + std::to_string(seed))).string();
}

std::string Trainer::round_dir(uint64_t seed, int round) const {
  return (fs::path(seed_dir(seed)) / ("round_" + std::to_string(round))).string();
}

void Trainer::write_manifest() const {
  fs::create_directories(cfg_.output_dir);
  json manifest;
  manifest["tool"] = "cil";
  manifest["version"] = 1;
  manifest["config"] = cfg_.canonical;
  manifest["config_hash"] = cfg_.hash;
  manifest["seeds"] = cfg_.seeds;
  std::ofstream out(fs::path(cfg_.output_dir) / "manifest.json");
  if (!out) throw IoError("cannot write manifest in " + cfg_.output_dir);
  out << manifest.dump(2) << "\n";
}

RoundMetrics Trainer::evaluate_round(IncrementalNet& model, int round_index,
                                     const std::vector<int>& seen_classes) {
  const bool was_training = model.training();
  model.set_training(false);
  auto idx = data_.test.indices_of_classes(seen_classes);
  if (idx.empty()) throw EvalError("evaluate_round: no test samples for the seen classes");
  const Eigen::Index bs = cfg_.schedule.batch_size;
  const Eigen::Index k = model.num_classes();
  Tensor::Array all(static_cast<Eigen::Index>(idx.size()) * k);
  std::vector<int> labels;
  labels.reserve(idx.size());
  for (size_t start = 0; start < idx.size(); start += bs) {
    const size_t end = std::min(idx.size(), start + bs);
    std::vector<Eigen::Index> chunk(idx.begin() + start, idx.begin() + end);
    FullOutput out = model.forward_full(gather_batch(data_.test, chunk));
    all.segment(static_cast<Eigen::Index>(start) * k,
                static_cast<Eigen::Index>(end - start) * k) = out.logits.values.value();
    for (auto i : chunk) labels.push_back(data_.test.labels[i]);
  }
  Logits logits{Tensor::leaf({static_cast<Eigen::Index>(idx.size()), k}, std::move(all), false),
                model.class_ids()};
  RoundMetrics rm;
  rm.round = round_index;
  rm.classes_seen = static_cast<int>(seen_classes.size());
  rm.top1 = top_k_accuracy(logits, labels, 1);
  rm.top5 = top_k_accuracy(logits, labels, std::min<int>(5, static_cast<int>(k)));
  model.set_training(was_training);
  return rm;
}

std::vector<CandidateSet> Trainer::candidates_for(IncrementalNet& model,
                                                  const RoundSpec& round) {
  model.set_training(false);
  std::vector<CandidateSet> out;
  const Eigen::Index bs = cfg_.schedule.batch_size;
  for (int id : round.class_ids) {
    auto idx = data_.train.indices_of_classes({id});
    CandidateSet cs;
    cs.class_id = id;
    cs.features.resize(static_cast<Eigen::Index>(idx.size()), model.spec().embed_dim);
    for (size_t start = 0; start < idx.size(); start += bs) {
      const size_t end = std::min(idx.size(), start + bs);
      std::vector<Eigen::Index> chunk(idx.begin() + start, idx.begin() + end);
      FullOutput fo = model.forward_full(gather_batch(data_.train, chunk));
      for (size_t r = 0; r < chunk.size(); ++r) {
        Eigen::VectorXd f =
            fo.embedding.value().segment((r)*model.spec().embed_dim, model.spec().embed_dim);
        const double nrm = f.norm();
        if (nrm < 1e-12)
          throw NumericError("herding features: zero embedding for a sample of class " +
                             std::to_string(id));
        cs.features.row(static_cast<Eigen::Index>(start + r)) = (f / nrm).transpose();
      }
    }
    for (auto i : idx) cs.images.push_back(data_.train.image(i));
    out.push_back(std::move(cs));
  }
  return out;
}

void Trainer::finetune_head(IncrementalNet& model, const LabeledDataset& round_data) {
  // Class-balanced head-only pass, the comparison arm used when mixing is off.
  auto counts = round_data.per_class_counts();
  Eigen::Index floor_count = std::numeric_limits<Eigen::Index>::max();
  for (auto& [id, n] : counts) floor_count = std::min<Eigen::Index>(floor_count, n);
  std::vector<Eigen::Index> balanced;
  std::map<int, Eigen::Index> taken;
  for (Eigen::Index i = 0; i < round_data.count; ++i)
    if (taken[round_data.labels[i]]++ < floor_count) balanced.push_back(i);

  model.set_training(false);  // keep normalization statistics fixed
  std::vector<Tensor> head_params;
  for (auto& np : model.named_parameters())
    if (np.name.rfind("head.", 0) == 0) head_params.push_back(np.tensor);
  nn::SGD opt(head_params, cfg_.schedule.momentum, cfg_.schedule.weight_decay);
  for (int ep = 0; ep < cfg_.finetune.epochs; ++ep) {
    for (size_t start = 0; start < balanced.size();
         start += static_cast<size_t>(cfg_.schedule.batch_size)) {
      const size_t end =
          std::min(balanced.size(), start + static_cast<size_t>(cfg_.schedule.batch_size));
      std::vector<Eigen::Index> chunk(balanced.begin() + start, balanced.begin() + end);
      std::vector<int> labels;
      for (auto i : chunk) labels.push_back(round_data.labels[i]);
      FullOutput out = model.forward_full(gather_batch(round_data, chunk));
      Tensor loss = mean_all(
          cross_entropy_per_sample(out.logits.values, hard_targets(labels, model.class_ids())));
      opt.zero_grad();
      loss.backward();
      opt.step(cfg_.finetune.lr);
    }
  }
}

RunState Trainer::train_round(RunState state, const RoundSpec& round) {
  const bool first_round = state.round < 0;
  if (!first_round && state.round + 1 != round.round_index)
    throw StateError("train_round: rounds must be trained in order");

  IncrementalNet old_model;
  if (!first_round) {
    old_model = state.model.clone();
    old_model.freeze();
  }
  IncrementalNet model = first_round
                             ? IncrementalNet(cfg_.backbone, cfg_.head, state.rng)
                             : state.model.clone();
  model.expand_head(round.class_ids, state.rng);
  model.set_training(true);

  std::vector<AimModule> aims;
  const bool use_aikd = !first_round && cfg_.components.aikd;
  if (use_aikd)
    aims = init_aims(old_model.spec(), model.spec(), cfg_.aim.variant, state.rng);

  LabeledDataset round_data = round_training_set(round, data_.train, state.memory);
  const std::vector<int>& class_ids = model.class_ids();
  std::set<int> new_set(round.class_ids.begin(), round.class_ids.end());

  std::vector<Tensor> params = model.parameters();
  for (auto& aim : aims)
    for (auto& p : aim.parameters()) params.push_back(p);
  nn::SGD opt(params, cfg_.schedule.momentum, cfg_.schedule.weight_decay);

  const bool mix = cfg_.cutmix_active() && !first_round && state.memory.total_count() > 0;
  std::vector<Eigen::Index> order(round_data.count);
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 0; epoch < cfg_.schedule.epochs; ++epoch) {
    const double lr = lr_at_epoch(cfg_.schedule, epoch);
    state.rng.shuffle(order);
    for (size_t start = 0; start < order.size();
         start += static_cast<size_t>(cfg_.schedule.batch_size)) {
      const size_t end =
          std::min(order.size(), start + static_cast<size_t>(cfg_.schedule.batch_size));
      std::vector<Eigen::Index> chunk(order.begin() + start, order.begin() + end);
      std::vector<int> labels;
      for (auto i : chunk) labels.push_back(round_data.labels[i]);

      Tensor images = gather_batch(round_data, chunk);
      Tensor targets = hard_targets(labels, class_ids);

      if (mix) {
        std::vector<Eigen::Index> new_in_batch;
        for (auto i : chunk)
          if (new_set.count(round_data.labels[i])) new_in_batch.push_back(i);
        auto mixed = build_mixed_batch(state.memory, round_data, new_in_batch, cfg_.cutmix,
                                       state.rng);
        if (!mixed.empty()) {
          const Eigen::Index n0 = images.dim(0), add_n = static_cast<Eigen::Index>(mixed.size());
          const Eigen::Index ss = round_data.sample_size();
          const Eigen::Index k = static_cast<Eigen::Index>(class_ids.size());
          Tensor::Array iv(static_cast<Eigen::Index>((n0 + add_n)) * ss);
          iv.segment(0, n0 * ss) = images.value();
          Tensor::Array tv = Tensor::Array::Zero((n0 + add_n) * k);
          tv.segment(0, n0 * k) = targets.value();
          for (Eigen::Index m = 0; m < add_n; ++m) {
            const auto& ms = mixed[m];
            for (Eigen::Index j = 0; j < ss; ++j)
              iv[(n0 + m) * ss + j] = static_cast<double>(ms.image[j]);
            tv[(n0 + m) * k + column_of(class_ids, ms.old_class)] = ms.lambda_used;
            tv[(n0 + m) * k + column_of(class_ids, ms.new_class)] += 1.0 - ms.lambda_used;
          }
          images = Tensor::leaf({n0 + add_n, round_data.channels, round_data.height,
                                 round_data.width},
                                std::move(iv), false);
          targets = Tensor::leaf({n0 + add_n, k}, std::move(tv), false);
        }
      }

      Tensor loss = total_loss(images, targets, model, first_round ? nullptr : &old_model,
                               use_aikd ? &aims : nullptr, loss_opt_);
      opt.zero_grad();
      loss.backward();
      opt.step(lr);
    }
  }

  if (cfg_.components.finetune && !cfg_.cutmix_active() && !first_round)
    finetune_head(model, round_data);

  // Integration modules serve distillation only; they are dropped here.
  aims.clear();

  auto candidates = candidates_for(model, round);
  state.memory.update(candidates, classes_through_round(rounds_, round.round_index));

  model.set_training(false);
  RoundMetrics rm =
      evaluate_round(model, round.round_index, classes_through_round(rounds_, round.round_index));
  state.metrics.push_back(rm);
  state.model = std::move(model);
  state.round = round.round_index;
  return state;
}

void Trainer::persist_round(const RunState& state, uint64_t seed) {
  const std::string dir = round_dir(seed, state.round);
  fs::create_directories(dir);
  auto& model = const_cast<RunState&>(state).model;
  save_model_checkpoint((fs::path(dir) / "checkpoint.bin").string(), model, state.round,
                        state.rng.save_state());
  save_memory_snapshot((fs::path(dir) / "memory.bin").string(), state.memory);
  json sj;
  sj["round"] = state.round;
  json rounds = json::array();
  for (const auto& r : state.metrics)
    rounds.push_back({{"round", r.round},
                      {"classes_seen", r.classes_seen},
                      {"top1", r.top1},
                      {"top5", r.top5}});
  sj["metrics"] = rounds;
  std::ofstream out(fs::path(dir) / "state.json");
  if (!out) throw IoError("cannot write state.json in " + dir);
  out << sj.dump(2) << "\n";
}

SeedMetrics Trainer::run_seed(uint64_t seed) {
  RunState state;
  state.rng = Rng(seed);
  state.memory = ExemplarMemory(cfg_.memory, data_.train.channels, data_.train.height,
                                data_.train.width);
  for (const auto& round : rounds_) {
    state = train_round(std::move(state), round);
    persist_round(state, seed);
  }
  SeedMetrics sm;
  sm.seed = seed;
  sm.rounds = state.metrics;
  return sm;
}

SeedMetrics Trainer::resume_seed(uint64_t seed, int from_round) {
  const std::string dir = round_dir(seed, from_round);
  auto loaded = load_model_checkpoint((fs::path(dir) / "checkpoint.bin").string());
  if (loaded.round_index != from_round)
    throw IoError("checkpoint in " + dir + " is for round " +
                  std::to_string(loaded.round_index));
  RunState state;
  state.model = std::move(loaded.net);
  state.model.set_training(false);
  state.round = from_round;
  state.rng.restore_state(loaded.rng_state);
  state.memory = load_memory_snapshot((fs::path(dir) / "memory.bin").string());
  std::ifstream in(fs::path(dir) / "state.json");
  if (!in) throw IoError("missing state.json in " + dir);
  json sj = json::parse(in);
  for (const auto& rj : sj.at("metrics"))
    state.metrics.push_back({rj.at("round").get<int>(), rj.at("classes_seen").get<int>(),
                             rj.at("top1").get<double>(), rj.at("top5").get<double>()});

  for (const auto& round : rounds_) {
    if (round.round_index <= from_round) continue;
    state = train_round(std::move(state), round);
    persist_round(state, seed);
  }
  SeedMetrics sm;
  sm.seed = seed;
  sm.rounds = state.metrics;
  return sm;
}

MetricsReport Trainer::run() {
  write_manifest();
  std::vector<SeedMetrics> per_seed;
  for (uint64_t seed : cfg_.seeds) per_seed.push_back(run_seed(seed));
  MetricsReport report = aggregate(std::move(per_seed), cfg_.hash);
  emit_report(report, cfg_.output_dir);
  return report;
}

}  // namespace cil
