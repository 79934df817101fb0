#pragma once

// Labeled image datasets and their loaders: a seeded synthetic generator for
// desk-scale runs, a per-class folder tree of PPM/PGM images, and the 100-way
// binary archive layout (train.bin/test.bin records of two label bytes plus
// a 32x32x3 image).

#include <array>
#include <map>
#include <string>
#include <vector>

#include "cil/rng.hpp"
#include "cil/tensor.hpp"

namespace cil {

struct LabeledDataset {
  Eigen::Index count = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> images;  // count * channels * height * width
  std::vector<int> labels;
  std::string split;  // "train" or "test"

  Eigen::Index sample_size() const {
    return static_cast<Eigen::Index>(channels) * height * width;
  }
  const float* image(Eigen::Index i) const { return images.data() + i * sample_size(); }
  void append(const float* img, int label);
  std::map<int, int> per_class_counts() const;
  std::vector<Eigen::Index> indices_of_classes(const std::vector<int>& ids) const;
};

// Rows of `idx` stacked into a [N, C, H, W] tensor (double, no grad).
Tensor gather_batch(const LabeledDataset& ds, const std::vector<Eigen::Index>& idx);

struct SyntheticSpec {
  int classes = 8;
  int train_per_class = 64;
  int test_per_class = 16;
  double noise = 0.25;
  uint64_t seed = 1234;
};

struct DatasetDescriptor {
  enum class Kind { synthetic, folder, cifar_archive };
  Kind kind = Kind::synthetic;
  std::string path;  // folder root or archive directory; unused for synthetic
  int image_size = 32;
  std::array<double, 3> mean = {0.5, 0.5, 0.5};
  std::array<double, 3> stddev = {0.25, 0.25, 0.25};
  SyntheticSpec synthetic;
};

DatasetDescriptor::Kind parse_dataset_kind(const std::string& s);

struct DatasetPair {
  LabeledDataset train;
  LabeledDataset test;
  int num_classes = 0;
};

// Deterministic: the same descriptor always yields identical arrays.
DatasetPair load_dataset(const DatasetDescriptor& desc);

}  // namespace cil
