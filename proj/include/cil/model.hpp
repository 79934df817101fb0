#pragma once

// Incremental classifier: an L-block convolutional feature extractor that
// exposes every intermediate block output, a pooled embedding, and a class
// head that grows as new classes arrive. Old columns are preserved verbatim
// on expansion.

#include <map>
#include <string>
#include <vector>

#include "cil/nn.hpp"
#include "cil/rng.hpp"
#include "cil/tensor.hpp"

namespace cil {

struct BackboneSpec {
  int num_blocks = 4;
  std::vector<int> channels = {16, 32, 64, 128};
  int embed_dim = 128;
  int input_size = 32;
  int in_channels = 3;

  void validate() const;
  // Spatial size of block l's output (1-based block index).
  int block_spatial(int block_index) const;
  bool operator==(const BackboneSpec&) const = default;
};

enum class HeadKind { linear, cosine };

struct HeadConfig {
  HeadKind kind = HeadKind::linear;
  double cosine_scale = 16.0;
  double init_stddev = 0.01;
  bool operator==(const HeadConfig&) const = default;
};

// Logit matrix plus the global class id owning each column.
struct Logits {
  Tensor values;  // [B, K]
  std::vector<int> class_ids;

  // Columns for `ids`, in that order; errors if any id is absent.
  Logits restricted_to(const std::vector<int>& ids) const;
};

struct FullOutput {
  std::vector<Tensor> pyramid;  // block outputs, shallow to deep
  Tensor embedding;             // [B, embed_dim]
  Logits logits;
};

class IncrementalNet {
 public:
  IncrementalNet() = default;
  IncrementalNet(BackboneSpec spec, HeadConfig head, Rng& rng);

  // One pass exposing every quantity the losses consume.
  FullOutput forward_full(const Tensor& batch);

  // Appends head columns for new classes; existing columns are untouched.
  void expand_head(const std::vector<int>& new_class_ids, Rng& rng);

  // Stops gradient flow into every parameter and pins normalization to
  // inference statistics. Irreversible by design; clone first if needed.
  void freeze();
  bool frozen() const { return frozen_; }

  void set_training(bool training) { training_ = training && !frozen_; }
  bool training() const { return training_; }

  IncrementalNet clone() const;

  const BackboneSpec& spec() const { return spec_; }
  const HeadConfig& head_config() const { return head_cfg_; }
  const std::vector<int>& class_ids() const { return class_ids_; }
  int num_classes() const { return static_cast<int>(class_ids_.size()); }

  std::vector<Tensor> parameters();
  std::vector<nn::NamedParam> named_parameters();
  std::map<std::string, nn::ArrayXd*> named_buffers();
  double parameter_checksum() const;

 private:
  BackboneSpec spec_;
  HeadConfig head_cfg_;
  std::vector<nn::Conv2d> convs_;
  std::vector<nn::BatchNorm2d> norms_;
  nn::Linear head_;
  std::vector<int> class_ids_;
  bool training_ = true;
  bool frozen_ = false;
};

}  // namespace cil
