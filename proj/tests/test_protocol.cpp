#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "cil/protocol.hpp"

using namespace cil;
namespace fs = std::filesystem;

TEST_CASE("class splits: equal shares, initial block, degenerate protocol") {
  ProtocolSpec b0{100, 0, 10, 7};
  auto rounds = make_class_splits(b0);
  REQUIRE(rounds.size() == 10);
  std::set<int> seen;
  for (const auto& r : rounds) {
    CHECK(r.class_ids.size() == 10);
    seen.insert(r.class_ids.begin(), r.class_ids.end());
  }
  CHECK(seen.size() == 100);

  ProtocolSpec b50{100, 50, 2, 7};
  auto rounds50 = make_class_splits(b50);
  REQUIRE(rounds50.size() == 3);
  CHECK(rounds50[0].class_ids.size() == 50);
  CHECK(rounds50[1].class_ids.size() == 25);
  CHECK(rounds50[2].class_ids.size() == 25);

  ProtocolSpec single{10, 0, 1, 7};
  auto one = make_class_splits(single);
  REQUIRE(one.size() == 1);
  CHECK(one[0].class_ids.size() == 10);

  ProtocolSpec bad{100, 0, 7, 7};
  CHECK_THROWS_AS(make_class_splits(bad), ConfigError);
  ProtocolSpec bad50{100, 50, 7, 7};
  CHECK_THROWS_AS(make_class_splits(bad50), ConfigError);
}

TEST_CASE("class order is a pure function of the seed") {
  ProtocolSpec a{20, 0, 4, 11}, b{20, 0, 4, 11}, c{20, 0, 4, 12};
  auto ra = make_class_splits(a), rb = make_class_splits(b), rc = make_class_splits(c);
  for (size_t i = 0; i < ra.size(); ++i) CHECK(ra[i].class_ids == rb[i].class_ids);
  // different seed: same class universe, different order
  std::vector<int> flat_a, flat_c;
  for (const auto& r : ra) flat_a.insert(flat_a.end(), r.class_ids.begin(), r.class_ids.end());
  for (const auto& r : rc) flat_c.insert(flat_c.end(), r.class_ids.begin(), r.class_ids.end());
  CHECK(flat_a != flat_c);
  std::sort(flat_a.begin(), flat_a.end());
  std::sort(flat_c.begin(), flat_c.end());
  CHECK(flat_a == flat_c);
}

TEST_CASE("round training set composition and overlap guard") {
  DatasetDescriptor desc;
  desc.kind = DatasetDescriptor::Kind::synthetic;
  desc.image_size = 8;
  desc.synthetic = {4, 6, 2, 0.1, 99};
  DatasetPair data = load_dataset(desc);

  ProtocolSpec spec{4, 0, 2, 3};
  auto rounds = make_class_splits(spec);

  ExemplarMemory empty(MemoryPolicy{}, 3, 8, 8);
  LabeledDataset d0 = round_training_set(rounds[0], data.train, empty);
  CHECK(d0.count == 12);  // two new classes, six samples each
  for (auto& [id, n] : d0.per_class_counts()) CHECK(n == 6);

  // memory with one exemplar per round-0 class
  ExemplarMemory mem(MemoryPolicy{MemoryPolicy::Kind::per_class, 0, 1}, 3, 8, 8);
  std::vector<CandidateSet> cands;
  for (int id : rounds[0].class_ids) {
    CandidateSet cs;
    cs.class_id = id;
    cs.features = Eigen::MatrixXd::Random(3, 2);
    auto idx = data.train.indices_of_classes({id});
    for (int i = 0; i < 3; ++i) cs.images.push_back(data.train.image(idx[i]));
    cands.push_back(std::move(cs));
  }
  mem.update(cands, rounds[0].class_ids);

  LabeledDataset d1 = round_training_set(rounds[1], data.train, mem);
  CHECK(d1.count == 12 + 2);  // new samples plus one exemplar per old class
  auto counts = d1.per_class_counts();
  for (int id : rounds[0].class_ids) CHECK(counts[id] == 1);
  for (int id : rounds[1].class_ids) CHECK(counts[id] == 6);

  CHECK_THROWS_AS(round_training_set(rounds[0], data.train, mem), StateError);

  CHECK(classes_through_round(rounds, 1).size() == 4);
  CHECK(classes_through_round(rounds, 0) == rounds[0].class_ids);
}

TEST_CASE("synthetic loader is deterministic with the declared shape") {
  DatasetDescriptor desc;
  desc.kind = DatasetDescriptor::Kind::synthetic;
  desc.image_size = 8;
  desc.synthetic = {8, 5, 3, 0.2, 4242};
  DatasetPair a = load_dataset(desc);
  DatasetPair b = load_dataset(desc);
  CHECK(a.train.count == 40);
  CHECK(a.test.count == 24);
  CHECK(a.num_classes == 8);
  CHECK(a.train.images == b.train.images);
  CHECK(a.test.images == b.test.images);
  CHECK(a.train.labels == b.train.labels);
  for (auto& [id, n] : a.train.per_class_counts()) CHECK(n == 5);
  CHECK(a.train.split == "train");
  CHECK(a.test.split == "test");
}

TEST_CASE("archive loader reads records and reports actual counts") {
  const fs::path dir = fs::temp_directory_path() / "cil_test_archive";
  fs::create_directories(dir);
  auto write_bin = [&](const fs::path& p, const std::vector<int>& fine_labels) {
    std::ofstream out(p, std::ios::binary);
    for (int lbl : fine_labels) {
      unsigned char coarse = 0, fine = static_cast<unsigned char>(lbl);
      out.put(static_cast<char>(coarse));
      out.put(static_cast<char>(fine));
      for (int i = 0; i < 3072; ++i) out.put(static_cast<char>((i + lbl) % 256));
    }
  };
  write_bin(dir / "train.bin", {0, 1, 2, 0, 1, 2, 0, 1});
  write_bin(dir / "test.bin", {0, 1, 2});

  DatasetDescriptor desc;
  desc.kind = DatasetDescriptor::Kind::cifar_archive;
  desc.path = dir.string();
  desc.image_size = 32;
  DatasetPair data = load_dataset(desc);
  CHECK(data.train.count == 8);
  CHECK(data.test.count == 3);
  CHECK(data.num_classes == 3);
  auto counts = data.train.per_class_counts();
  CHECK(counts[0] == 3);
  CHECK(counts[2] == 2);
  // normalization applied: byte 2 of class 0's first record is (2+0)%256 -> 2/255
  const double expected = (2.0 / 255.0 - 0.5) / 0.25;
  CHECK(data.train.image(0)[2] == doctest::Approx(expected));

  // truncated file rejected
  std::ofstream(dir / "train.bin", std::ios::binary) << "short";
  CHECK_THROWS_AS(load_dataset(desc), IoError);
  fs::remove_all(dir);
}

TEST_CASE("folder loader reads PPM class directories in sorted order") {
  const fs::path root = fs::temp_directory_path() / "cil_test_folder";
  fs::remove_all(root);
  auto write_ppm = [&](const fs::path& p, unsigned char fill) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p, std::ios::binary);
    out << "P6\n4 4\n255\n";
    for (int i = 0; i < 4 * 4 * 3; ++i) out.put(static_cast<char>(fill));
  };
  for (const char* split : {"train", "test"}) {
    write_ppm(root / split / "cat" / "a.ppm", 10);
    write_ppm(root / split / "cat" / "b.ppm", 20);
    write_ppm(root / split / "dog" / "a.ppm", 30);
  }
  DatasetDescriptor desc;
  desc.kind = DatasetDescriptor::Kind::folder;
  desc.path = root.string();
  desc.image_size = 4;
  DatasetPair data = load_dataset(desc);
  CHECK(data.num_classes == 2);
  CHECK(data.train.count == 3);
  // "cat" sorts before "dog": labels 0,0,1
  CHECK(data.train.labels == std::vector<int>({0, 0, 1}));
  CHECK(data.train.image(0)[0] == doctest::Approx((10.0 / 255.0 - 0.5) / 0.25));
  fs::remove_all(root);
}
