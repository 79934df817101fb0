#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cil/trainer.hpp"
#include "grad_check.hpp"

using namespace cil;
using nlohmann::json;
using testing::rand_leaf;
namespace fs = std::filesystem;

namespace {

// Small but trainable setup: 4 classes, 8x8 images, two blocks.
json tiny_config(const std::string& outdir, int epochs = 3) {
  json j = json::object();
  j["dataset"] = {{"kind", "synthetic"},
                  {"image_size", 8},
                  {"synthetic",
                   {{"classes", 4}, {"train_per_class", 10}, {"test_per_class", 6},
                    {"noise", 0.2}, {"seed", 77}}}};
  j["protocol"] = {{"total_classes", 4},
                   {"initial_classes", 0},
                   {"num_incremental_rounds", 2},
                   {"class_order_seed", 5}};
  j["model"] = {{"blocks", {4, 8}}, {"embed_dim", 8}, {"input_size", 8}};
  j["schedule"] = {{"epochs", epochs},
                   {"batch_size", 8},
                   {"warmup_epochs", 1},
                   {"warmup_end_lr", 0.02},
                   {"milestones", json::array()},
                   {"decay_factor", 0.1}};
  j["aim"] = {{"count_k", 2}};
  j["memory"] = {{"policy", "per_class"}, {"per_class", 3}};
  j["trainer"] = {{"seeds", {1}}, {"output_dir", outdir}};
  return j;
}

IncrementalNet small_net(Rng& rng, int classes) {
  BackboneSpec spec{2, {4, 6}, 6, 8};
  IncrementalNet net(spec, HeadConfig{}, rng);
  std::vector<int> ids(classes);
  for (int i = 0; i < classes; ++i) ids[i] = i;
  net.expand_head(ids, rng);
  return net;
}

}  // namespace

TEST_CASE("total_loss with weights (0,1,0) and no old model is plain cross-entropy") {
  Rng rng(31);
  IncrementalNet net = small_net(rng, 4);
  net.set_training(true);
  Tensor images = rand_leaf({6, 3, 8, 8}, rng, -1, 1, false);
  Tensor::Array tv = Tensor::Array::Zero(6 * 4);
  for (int i = 0; i < 6; ++i) tv[i * 4 + (i % 4)] = 1.0;
  Tensor targets = Tensor::leaf({6, 4}, tv, false);

  LossOptions opt;
  opt.weights = {0.0, 1.0, 0.0};
  LossBreakdown bd;
  Tensor loss = total_loss(images, targets, net, nullptr, nullptr, opt, &bd);
  CHECK(bd.u_mean == 1.0);
  CHECK_FALSE(bd.has_aikd);
  CHECK_FALSE(bd.has_feat);
  CHECK(loss.item() == doctest::Approx(bd.ce_mean));

  // direct recomputation of the cross-entropy
  FullOutput out = net.forward_full(images);
  const double ce = mean_all(cross_entropy_per_sample(out.logits.values, targets)).item();
  CHECK(loss.item() == doctest::Approx(ce));
}

TEST_CASE("clone-as-old in eval mode gives L_f = 0, u = 1, L_u = mean ce") {
  Rng rng(37);
  IncrementalNet net = small_net(rng, 4);
  net.set_training(false);
  IncrementalNet old_model = net.clone();
  old_model.freeze();

  Tensor images = rand_leaf({5, 3, 8, 8}, rng, -1, 1, false);
  Tensor::Array tv = Tensor::Array::Zero(5 * 4);
  for (int i = 0; i < 5; ++i) tv[i * 4 + (i % 4)] = 1.0;
  Tensor targets = Tensor::leaf({5, 4}, tv, false);

  LossOptions opt;
  opt.components.aikd = false;  // fresh modules cannot reproduce their targets
  LossBreakdown bd;
  total_loss(images, targets, net, &old_model, nullptr, opt, &bd);
  CHECK(bd.feat == doctest::Approx(0.0).epsilon(1e-9));
  CHECK(bd.u_mean == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(bd.uct == doctest::Approx(bd.ce_mean).epsilon(1e-9));
}

TEST_CASE("total_loss equals the weighted sum of independently computed terms") {
  Rng rng(41);
  IncrementalNet old_net = small_net(rng, 2);
  old_net.freeze();
  IncrementalNet new_net = small_net(rng, 4);  // fresh weights, wider head
  new_net.set_training(true);
  auto aims = init_aims(old_net.spec(), new_net.spec(), AttentionVariant::block_wise_maps, rng);

  Tensor images = rand_leaf({6, 3, 8, 8}, rng, -1, 1, false);
  Tensor::Array tv = Tensor::Array::Zero(6 * 4);
  for (int i = 0; i < 6; ++i) tv[i * 4 + (i % 4)] = 1.0;
  Tensor targets = Tensor::leaf({6, 4}, tv, false);

  LossOptions opt;
  opt.weights = {0.5, 1.0, 0.5};
  opt.aim.count_k = 2;
  LossBreakdown bd;
  Tensor loss = total_loss(images, targets, new_net, &old_net, &aims, opt, &bd);

  // the breakdown must satisfy the weighted-sum identity
  CHECK(std::abs(bd.total - (0.5 * bd.aikd + 1.0 * bd.uct + 0.5 * bd.feat)) < 1e-6);

  // and each term must match an independent evaluation
  FullOutput on = new_net.forward_full(images);
  FullOutput oo = old_net.forward_full(images);
  const double la = aikd_loss(on.pyramid, oo.pyramid, aims, DistanceKind::pod, 2).item();
  const double lf = feature_distill_loss(on.embedding, oo.embedding).item();
  Tensor ce = cross_entropy_per_sample(on.logits.values, targets);
  Logits restricted = on.logits.restricted_to(oo.logits.class_ids);
  Tensor u = prediction_uncertainty(oo.logits, restricted, DivergenceKind::kl);
  const double lu = uncertainty_regularized_loss(ce, u).item();
  CHECK(bd.aikd == doctest::Approx(la).epsilon(1e-9));
  CHECK(bd.feat == doctest::Approx(lf).epsilon(1e-9));
  CHECK(bd.uct == doctest::Approx(lu).epsilon(1e-9));
  CHECK(loss.item() == doctest::Approx(0.5 * la + lu + 0.5 * lf).epsilon(1e-9));
}

TEST_CASE("non-finite losses abort with a diagnostic") {
  Rng rng(43);
  IncrementalNet net = small_net(rng, 4);
  net.set_training(true);
  for (auto& np : net.named_parameters())
    if (np.name == "head.weight")
      np.tensor.value()[0] = std::numeric_limits<double>::quiet_NaN();
  Tensor images = rand_leaf({2, 3, 8, 8}, rng, -1, 1, false);
  Tensor::Array tv = Tensor::Array::Zero(2 * 4);
  tv[0] = 1.0;
  tv[4 + 1] = 1.0;
  Tensor targets = Tensor::leaf({2, 4}, tv, false);
  LossOptions opt;
  CHECK_THROWS_AS(total_loss(images, targets, net, nullptr, nullptr, opt), NumericError);
}

TEST_CASE("round 0 training beats chance on the toy set") {
  const std::string dir = (fs::temp_directory_path() / "cil_t_round0").string();
  fs::remove_all(dir);
  json j = tiny_config(dir, 6);
  j["protocol"]["num_incremental_rounds"] = 1;  // single round with all 4 classes
  Trainer trainer(parse_config(j));
  SeedMetrics sm = trainer.run_seed(1);
  REQUIRE(sm.rounds.size() == 1);
  CHECK(sm.rounds[0].classes_seen == 4);
  CHECK(sm.rounds[0].top1 > 25.0);  // chance level for four classes
  fs::remove_all(dir);
}

TEST_CASE("two-round run records metrics, persists artifacts, stays deterministic") {
  const std::string dir = (fs::temp_directory_path() / "cil_t_tworound").string();
  fs::remove_all(dir);
  Trainer trainer(parse_config(tiny_config(dir)));
  SeedMetrics a = trainer.run_seed(1);
  REQUIRE(a.rounds.size() == 2);
  CHECK(a.rounds[0].classes_seen == 2);
  CHECK(a.rounds[1].classes_seen == 4);
  CHECK(fs::exists(fs::path(dir) / "seed_1" / "round_0" / "checkpoint.bin"));
  CHECK(fs::exists(fs::path(dir) / "seed_1" / "round_1" / "memory.bin"));
  CHECK(fs::exists(fs::path(dir) / "seed_1" / "round_1" / "state.json"));

  // identical reruns, bit for bit
  Trainer trainer2(parse_config(tiny_config(dir)));
  SeedMetrics b = trainer2.run_seed(1);
  for (size_t r = 0; r < 2; ++r) {
    CHECK(a.rounds[r].top1 == b.rounds[r].top1);
    CHECK(a.rounds[r].top5 == b.rounds[r].top5);
  }
  fs::remove_all(dir);
}

TEST_CASE("resume from the round-0 checkpoint reproduces the uninterrupted run") {
  const std::string dir = (fs::temp_directory_path() / "cil_t_resume").string();
  fs::remove_all(dir);
  Trainer trainer(parse_config(tiny_config(dir)));
  SeedMetrics full = trainer.run_seed(1);

  Trainer resumer(parse_config(tiny_config(dir)));
  SeedMetrics resumed = resumer.resume_seed(1, 0);
  REQUIRE(resumed.rounds.size() == full.rounds.size());
  for (size_t r = 0; r < full.rounds.size(); ++r) {
    CHECK(resumed.rounds[r].top1 == full.rounds[r].top1);
    CHECK(resumed.rounds[r].top5 == full.rounds[r].top5);
  }
  fs::remove_all(dir);
}

TEST_CASE("run() aggregates seeds and emits the full report tree") {
  const std::string dir = (fs::temp_directory_path() / "cil_t_run").string();
  fs::remove_all(dir);
  json j = tiny_config(dir, 2);
  j["trainer"]["seeds"] = {1, 2};
  Trainer trainer(parse_config(j));
  MetricsReport rep = trainer.run();
  CHECK(rep.seeds.size() == 2);
  CHECK(fs::exists(fs::path(dir) / "manifest.json"));
  CHECK(fs::exists(fs::path(dir) / "metrics.json"));
  CHECK(fs::exists(fs::path(dir) / "metrics.csv"));
  CHECK(fs::exists(fs::path(dir) / "curve.tsv"));
  fs::remove_all(dir);
}

TEST_CASE("finetune arm runs when cutmix is disabled") {
  const std::string dir = (fs::temp_directory_path() / "cil_t_finetune").string();
  fs::remove_all(dir);
  json j = tiny_config(dir, 2);
  j["components"] = {{"cutmix", false}, {"finetune", true}};
  j["finetune"] = {{"epochs", 2}, {"lr", 0.01}};
  Trainer trainer(parse_config(j));
  SeedMetrics sm = trainer.run_seed(1);
  CHECK(sm.rounds.size() == 2);
  fs::remove_all(dir);
}
