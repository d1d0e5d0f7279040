#pragma once

// Small residual CNN encoder with a two-layer projection head.
//
// Backbone: stem conv -> stages of residual blocks -> global average pool.
// Head: fc1 -> relu -> fc2 -> row-wise L2 normalization.
// All normalization layers are per-sample (group/layer/instance style).

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "mococxr/diffcore/tensor.hpp"

namespace mococxr::diffcore {

enum class NormKind { kGroup, kLayer, kInstance, kNone };

std::string to_string(NormKind kind);
NormKind parse_norm_kind(const std::string& text);

struct EncoderSpec {
  std::size_t input_size = 64;
  std::vector<std::size_t> channel_widths{16, 32, 64};
  std::size_t blocks_per_stage = 2;
  NormKind norm_kind = NormKind::kGroup;
  std::size_t norm_groups = 4;
  std::size_t stem_stride = 2;
  std::size_t feature_dim = 128;
  std::size_t projection_hidden = 128;

  // Throws std::invalid_argument on any violated invariant.
  void validate() const;
  std::size_t backbone_width() const { return channel_widths.back(); }

  std::map<std::string, std::string> to_fields() const;
  static EncoderSpec from_fields(const std::map<std::string, std::string>& fields);

  bool operator==(const EncoderSpec&) const = default;
};

// Ordered name -> tensor collection. Copies alias the tensors; clone() does not.
template <class T>
class BasicParamSet {
 public:
  using Entry = std::pair<std::string, BasicTensor<T>>;

  void add(std::string name, BasicTensor<T> tensor);
  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const BasicTensor<T>& get(const std::string& name) const;
  BasicTensor<T>& get(const std::string& name);
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t total_numel() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

  std::vector<std::string> names() const;
  BasicParamSet clone() const;
  // Entries whose names start with prefix; tensors are shared.
  BasicParamSet with_prefix(const std::string& prefix) const;
  void set_requires_grad(bool flag);
  void zero_grad();

  // Same names, order and shapes.
  bool same_layout(const BasicParamSet& other) const;

  // FNV-1a over names, shapes and value bytes.
  std::uint64_t checksum() const;

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

using ParamSet = BasicParamSet<float>;
using ParamSet64 = BasicParamSet<double>;

template <class To, class From>
BasicParamSet<To> cast_params(const BasicParamSet<From>& params) {
  BasicParamSet<To> out;
  for (const auto& [name, t] : params) out.add(name, cast<To>(t));
  return out;
}

// Fan-in scaled uniform weights, unit norm gains and zero biases, drawn from `seed`.
template <class T>
BasicParamSet<T> init_encoder(const EncoderSpec& spec, std::uint64_t seed);

// Binary classifier head on backbone features: "classifier.weight" [1 x C], "classifier.bias" [1].
template <class T>
BasicParamSet<T> init_classifier(std::size_t in_features, std::uint64_t seed);

// batch [N x 1 x S x S] with values in [0,1] -> pooled backbone features [N x C].
template <class T>
BasicTensor<T> backbone_features(const BasicParamSet<T>& params, const EncoderSpec& spec, const BasicTensor<T>& batch);

// features [N x C] -> unit-norm embeddings [N x d].
template <class T>
BasicTensor<T> project(const BasicParamSet<T>& params, const EncoderSpec& spec, const BasicTensor<T>& features);

// backbone + projection head: [N x 1 x S x S] -> [N x d] with unit-norm rows.
template <class T>
BasicTensor<T> forward_encoder(const BasicParamSet<T>& params, const EncoderSpec& spec, const BasicTensor<T>& batch);

// features [N x C] -> logits [N x 1].
template <class T>
BasicTensor<T> classify(const BasicParamSet<T>& params, const BasicTensor<T>& features);

inline const std::string kBackbonePrefix = "backbone.";
inline const std::string kHeadPrefix = "head.";
inline const std::string kClassifierPrefix = "classifier.";

}  // namespace mococxr::diffcore
