#include "cil/model.hpp"

#include <algorithm>
#include <set>

namespace cil {

void BackboneSpec::validate() const {
  if (num_blocks < 1) throw ConfigError("backbone: num_blocks must be >= 1");
  if (static_cast<int>(channels.size()) != num_blocks)
    throw ConfigError("backbone: channels list must have one entry per block");
  for (int c : channels)
    if (c < 1) throw ConfigError("backbone: channel counts must be positive");
  if (embed_dim != channels.back())
    throw ConfigError("backbone: embed_dim must equal the last block's channel count");
  if (in_channels < 1) throw ConfigError("backbone: in_channels must be positive");
  int size = input_size;
  for (int l = 0; l < num_blocks; ++l) {
    if (size < 2 || size % 2 != 0)
      throw ConfigError("backbone: input_size " + std::to_string(input_size) +
                        " does not survive " + std::to_string(num_blocks) + " halvings");
    size /= 2;
  }
}

int BackboneSpec::block_spatial(int block_index) const {
  if (block_index < 1 || block_index > num_blocks)
    throw InputError("block_spatial: block index out of range");
  return input_size >> block_index;
}

Logits Logits::restricted_to(const std::vector<int>& ids) const {
  std::vector<Eigen::Index> cols;
  cols.reserve(ids.size());
  for (int id : ids) {
    auto it = std::find(class_ids.begin(), class_ids.end(), id);
    if (it == class_ids.end())
      throw InputError("logits restriction: class id " + std::to_string(id) + " not present");
    cols.push_back(std::distance(class_ids.begin(), it));
  }
  return {gather_cols(values, cols), ids};
}

IncrementalNet::IncrementalNet(BackboneSpec spec, HeadConfig head, Rng& rng)
    : spec_(std::move(spec)), head_cfg_(head) {
  spec_.validate();
  int in_ch = spec_.in_channels;
  for (int l = 0; l < spec_.num_blocks; ++l) {
    convs_.emplace_back(in_ch, spec_.channels[l], 3, 1, 1, rng);
    norms_.emplace_back(spec_.channels[l]);
    in_ch = spec_.channels[l];
  }
  // Head starts empty; the first expand_head call installs the columns.
  head_ = nn::Linear(spec_.embed_dim, 0, head_cfg_.init_stddev, rng);
}

FullOutput IncrementalNet::forward_full(const Tensor& batch) {
  if (batch.rank() != 4 || batch.dim(1) != spec_.in_channels ||
      batch.dim(2) != spec_.input_size || batch.dim(3) != spec_.input_size)
    throw InputError("forward_full: batch shape " + shape_str(batch.shape()) +
                     " does not match backbone input " + std::to_string(spec_.in_channels) + "x" +
                     std::to_string(spec_.input_size) + "x" + std::to_string(spec_.input_size));
  FullOutput out;
  Tensor x = batch;
  for (int l = 0; l < spec_.num_blocks; ++l) {
    x = convs_[l].forward(x);
    x = norms_[l].forward(x, training_);
    x = relu(x);
    x = avg_pool2d(x, 2);
    out.pyramid.push_back(x);
  }
  out.embedding = global_avg_pool(x);
  if (num_classes() == 0) throw StateError("forward_full: head has no classes yet");
  if (head_cfg_.kind == HeadKind::cosine) {
    Tensor xn = l2_normalize_rows(out.embedding);
    Tensor wn = l2_normalize_rows(head_.weight());
    Tensor zero_bias = Tensor::zeros({num_classes()});
    out.logits = {affine(linear(xn, wn, zero_bias), head_cfg_.cosine_scale, 0.0), class_ids_};
  } else {
    out.logits = {head_.forward(out.embedding), class_ids_};
  }
  return out;
}

void IncrementalNet::expand_head(const std::vector<int>& new_class_ids, Rng& rng) {
  if (frozen_) throw StateError("expand_head: model is frozen");
  if (new_class_ids.empty()) return;
  std::set<int> fresh(new_class_ids.begin(), new_class_ids.end());
  if (fresh.size() != new_class_ids.size())
    throw InputError("expand_head: duplicate ids in new_class_ids");
  for (int id : class_ids_)
    if (fresh.count(id))
      throw InputError("expand_head: class id " + std::to_string(id) + " already present");

  const int old_k = num_classes();
  const int new_k = old_k + static_cast<int>(new_class_ids.size());
  const int d = spec_.embed_dim;
  Tensor::Array w(static_cast<Eigen::Index>(new_k) * d);
  Tensor::Array b = Tensor::Array::Zero(new_k);
  if (old_k > 0) {
    w.segment(0, static_cast<Eigen::Index>(old_k) * d) = head_.weight().value();
    b.segment(0, old_k) = head_.bias().value();
  }
  for (Eigen::Index i = static_cast<Eigen::Index>(old_k) * d; i < w.size(); ++i)
    w[i] = rng.normal(0.0, head_cfg_.init_stddev);
  head_.weight() = Tensor::leaf({new_k, d}, std::move(w), true);
  head_.bias() = Tensor::leaf({new_k}, std::move(b), true);
  class_ids_.insert(class_ids_.end(), new_class_ids.begin(), new_class_ids.end());
}

void IncrementalNet::freeze() {
  for (auto& p : parameters()) p.set_requires_grad(false);
  frozen_ = true;
  training_ = false;
}

IncrementalNet IncrementalNet::clone() const {
  IncrementalNet c;
  c.spec_ = spec_;
  c.head_cfg_ = head_cfg_;
  for (const auto& conv : convs_) c.convs_.push_back(conv.cloned());
  for (const auto& norm : norms_) c.norms_.push_back(norm.cloned());
  c.head_ = head_.cloned();
  c.class_ids_ = class_ids_;
  c.training_ = training_;
  c.frozen_ = frozen_;
  return c;
}

std::vector<Tensor> IncrementalNet::parameters() {
  std::vector<Tensor> out;
  for (auto& np : named_parameters()) out.push_back(np.tensor);
  return out;
}

std::vector<nn::NamedParam> IncrementalNet::named_parameters() {
  std::vector<nn::NamedParam> out;
  for (size_t l = 0; l < convs_.size(); ++l) {
    convs_[l].collect("block" + std::to_string(l + 1) + ".conv", out);
    norms_[l].collect("block" + std::to_string(l + 1) + ".norm", out);
  }
  head_.collect("head", out);
  return out;
}

std::map<std::string, nn::ArrayXd*> IncrementalNet::named_buffers() {
  std::map<std::string, nn::ArrayXd*> out;
  for (size_t l = 0; l < norms_.size(); ++l)
    norms_[l].collect_buffers("block" + std::to_string(l + 1) + ".norm", out);
  return out;
}

double IncrementalNet::parameter_checksum() const {
  double sum = 0.0;
  auto& self = const_cast<IncrementalNet&>(*this);
  for (auto& np : self.named_parameters()) {
    double local = 0.0;
    for (Eigen::Index i = 0; i < np.tensor.numel(); ++i)
      local += np.tensor.value()[i] * static_cast<double>((i % 97) + 1);
    sum += local;
  }
  return sum;
}

}  // namespace cil
