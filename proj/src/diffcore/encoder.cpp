#include "mococxr/diffcore/encoder.hpp"

#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mococxr/diffcore/ops.hpp"
#include "mococxr/random.hpp"

namespace mococxr::diffcore {

std::string to_string(NormKind kind) {
  switch (kind) {
    case NormKind::kGroup: return "group";
    case NormKind::kLayer: return "layer";
    case NormKind::kInstance: return "instance";
    case NormKind::kNone: return "none";
  }
  return "group";
}

NormKind parse_norm_kind(const std::string& text) {
  if (text == "group") return NormKind::kGroup;
  if (text == "layer") return NormKind::kLayer;
  if (text == "instance") return NormKind::kInstance;
  if (text == "none") return NormKind::kNone;
  throw std::invalid_argument("unknown norm kind '" + text + "' (expected group|layer|instance|none)");
}

void EncoderSpec::validate() const {
  if (input_size == 0) throw std::invalid_argument("encoder: input_size must be >= 1");
  if (channel_widths.empty()) throw std::invalid_argument("encoder: at least one stage is required");
  for (auto w : channel_widths) {
    if (w == 0) throw std::invalid_argument("encoder: channel widths must be >= 1");
  }
  if (blocks_per_stage == 0) throw std::invalid_argument("encoder: blocks_per_stage must be >= 1");
  if (feature_dim < 2) throw std::invalid_argument("encoder: feature_dim must be >= 2");
  if (projection_hidden == 0) throw std::invalid_argument("encoder: projection_hidden must be >= 1");
  if (stem_stride == 0) throw std::invalid_argument("encoder: stem_stride must be >= 1");
  if (norm_kind == NormKind::kGroup && norm_groups == 0) throw std::invalid_argument("encoder: norm_groups must be >= 1");
}

std::map<std::string, std::string> EncoderSpec::to_fields() const {
  std::ostringstream widths;
  for (std::size_t i = 0; i < channel_widths.size(); ++i) widths << (i ? "," : "") << channel_widths[i];
  return {
      {"input_size", std::to_string(input_size)},
      {"channel_widths", widths.str()},
      {"blocks_per_stage", std::to_string(blocks_per_stage)},
      {"norm_kind", to_string(norm_kind)},
      {"norm_groups", std::to_string(norm_groups)},
      {"stem_stride", std::to_string(stem_stride)},
      {"feature_dim", std::to_string(feature_dim)},
      {"projection_hidden", std::to_string(projection_hidden)},
  };
}

EncoderSpec EncoderSpec::from_fields(const std::map<std::string, std::string>& fields) {
  auto need = [&](const std::string& key) -> const std::string& {
    auto it = fields.find(key);
    if (it == fields.end()) throw std::invalid_argument("encoder spec: missing field '" + key + "'");
    return it->second;
  };
  EncoderSpec spec;
  spec.input_size = std::stoul(need("input_size"));
  spec.channel_widths.clear();
  std::stringstream ws(need("channel_widths"));
  for (std::string item; std::getline(ws, item, ',');) spec.channel_widths.push_back(std::stoul(item));
  spec.blocks_per_stage = std::stoul(need("blocks_per_stage"));
  spec.norm_kind = parse_norm_kind(need("norm_kind"));
  spec.norm_groups = std::stoul(need("norm_groups"));
  spec.stem_stride = std::stoul(need("stem_stride"));
  spec.feature_dim = std::stoul(need("feature_dim"));
  spec.projection_hidden = std::stoul(need("projection_hidden"));
  spec.validate();
  return spec;
}

template <class T>
void BasicParamSet<T>::add(std::string name, BasicTensor<T> tensor) {
  if (index_.count(name)) throw std::invalid_argument("param set: duplicate parameter '" + name + "'");
  index_.emplace(name, entries_.size());
  entries_.emplace_back(std::move(name), std::move(tensor));
}

template <class T>
const BasicTensor<T>& BasicParamSet<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("param set: no parameter named '" + name + "'");
  return entries_[it->second].second;
}

template <class T>
BasicTensor<T>& BasicParamSet<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("param set: no parameter named '" + name + "'");
  return entries_[it->second].second;
}

template <class T>
std::size_t BasicParamSet<T>::total_numel() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

template <class T>
std::vector<std::string> BasicParamSet<T>::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.first);
  return out;
}

template <class T>
BasicParamSet<T> BasicParamSet<T>::clone() const {
  BasicParamSet out;
  for (const auto& [name, t] : entries_) {
    auto c = t.clone();
    c.set_requires_grad(t.requires_grad());
    out.add(name, std::move(c));
  }
  return out;
}

template <class T>
BasicParamSet<T> BasicParamSet<T>::with_prefix(const std::string& prefix) const {
  BasicParamSet out;
  for (const auto& [name, t] : entries_) {
    if (name.compare(0, prefix.size(), prefix) == 0) out.add(name, t);
  }
  return out;
}

template <class T>
void BasicParamSet<T>::set_requires_grad(bool flag) {
  for (auto& e : entries_) e.second.set_requires_grad(flag);
}

template <class T>
void BasicParamSet<T>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

template <class T>
bool BasicParamSet<T>::same_layout(const BasicParamSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].first != other.entries_[i].first) return false;
    if (entries_[i].second.shape() != other.entries_[i].second.shape()) return false;
  }
  return true;
}

namespace {
void fnv_mix(std::uint64_t& h, const void* data, std::size_t bytes) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < bytes; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
}
}  // namespace

template <class T>
std::uint64_t BasicParamSet<T>::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& [name, t] : entries_) {
    fnv_mix(h, name.data(), name.size());
    for (auto extent : t.shape()) {
      const std::uint64_t e = extent;
      fnv_mix(h, &e, sizeof e);
    }
    auto v = t.values();
    fnv_mix(h, v.data(), v.size() * sizeof(T));
  }
  return h;
}

template class BasicParamSet<float>;
template class BasicParamSet<double>;

namespace {

std::size_t group_count(const EncoderSpec& spec, std::size_t channels) {
  switch (spec.norm_kind) {
    case NormKind::kGroup: return std::gcd(spec.norm_groups, channels);
    case NormKind::kLayer: return 1;
    case NormKind::kInstance: return channels;
    case NormKind::kNone: return 0;
  }
  return 1;
}

template <class T>
BasicTensor<T> uniform_tensor(Shape shape, double bound, Rng& rng) {
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
  return BasicTensor<T>(std::move(shape), std::move(values), true);
}

template <class T>
BasicTensor<T> filled(Shape shape, T value) {
  std::vector<T> values(shape_numel(shape), value);
  return BasicTensor<T>(std::move(shape), std::move(values), true);
}

// He-uniform: bound sqrt(6 / fan_in).
template <class T>
void add_conv(BasicParamSet<T>& ps, const std::string& name, std::size_t out, std::size_t in, std::size_t k, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in * k * k));
  ps.add(name + ".weight", uniform_tensor<T>({out, in, k, k}, bound, rng));
}

template <class T>
void add_norm(BasicParamSet<T>& ps, const EncoderSpec& spec, const std::string& name, std::size_t channels) {
  if (spec.norm_kind == NormKind::kNone) return;
  ps.add(name + ".weight", filled<T>({channels}, T{1}));
  ps.add(name + ".bias", filled<T>({channels}, T{0}));
}

template <class T>
void add_linear(BasicParamSet<T>& ps, const std::string& name, std::size_t out, std::size_t in, Rng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(in));
  ps.add(name + ".weight", uniform_tensor<T>({out, in}, bound, rng));
  ps.add(name + ".bias", filled<T>({out}, T{0}));
}

std::string block_name(std::size_t stage, std::size_t block) {
  return kBackbonePrefix + "stage" + std::to_string(stage) + ".block" + std::to_string(block);
}

// Downsampling blocks and width changes need a projected shortcut.
bool block_has_shortcut(std::size_t stage, std::size_t block, std::size_t in, std::size_t out) {
  return block == 0 && (stage > 0 || in != out);
}

template <class T>
BasicTensor<T> apply_norm(const BasicParamSet<T>& ps, const EncoderSpec& spec, const std::string& name,
                          const BasicTensor<T>& x) {
  if (spec.norm_kind == NormKind::kNone) return x;
  return group_norm(x, ps.get(name + ".weight"), ps.get(name + ".bias"), group_count(spec, x.dim(1)));
}

template <class T>
BasicTensor<T> apply_conv(const BasicParamSet<T>& ps, const std::string& name, const BasicTensor<T>& x,
                          std::size_t stride, std::size_t padding) {
  return conv2d(x, ps.get(name + ".weight"), BasicTensor<T>{}, Conv2dOptions{stride, padding});
}

}  // namespace

template <class T>
BasicParamSet<T> init_encoder(const EncoderSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, {0x656e63ULL}));
  BasicParamSet<T> ps;
  const auto w0 = spec.channel_widths.front();
  add_conv(ps, kBackbonePrefix + "stem.conv", w0, 1, 3, rng);
  add_norm(ps, spec, kBackbonePrefix + "stem.norm", w0);
  std::size_t in = w0;
  for (std::size_t s = 0; s < spec.channel_widths.size(); ++s) {
    const auto out = spec.channel_widths[s];
    for (std::size_t b = 0; b < spec.blocks_per_stage; ++b) {
      const auto name = block_name(s, b);
      const auto block_in = b == 0 ? in : out;
      add_conv(ps, name + ".conv1", out, block_in, 3, rng);
      add_norm(ps, spec, name + ".norm1", out);
      add_conv(ps, name + ".conv2", out, out, 3, rng);
      add_norm(ps, spec, name + ".norm2", out);
      if (block_has_shortcut(s, b, block_in, out)) {
        add_conv(ps, name + ".shortcut", out, block_in, 1, rng);
        add_norm(ps, spec, name + ".shortcut_norm", out);
      }
    }
    in = out;
  }
  add_linear(ps, kHeadPrefix + "fc1", spec.projection_hidden, spec.backbone_width(), rng);
  add_linear(ps, kHeadPrefix + "fc2", spec.feature_dim, spec.projection_hidden, rng);
  return ps;
}

template <class T>
BasicParamSet<T> init_classifier(std::size_t in_features, std::uint64_t seed) {
  if (in_features == 0) throw std::invalid_argument("classifier: in_features must be >= 1");
  Rng rng(derive_seed(seed, {0x636c73ULL}));
  BasicParamSet<T> ps;
  add_linear(ps, kClassifierPrefix.substr(0, kClassifierPrefix.size() - 1), 1, in_features, rng);
  return ps;
}

template <class T>
BasicTensor<T> backbone_features(const BasicParamSet<T>& params, const EncoderSpec& spec, const BasicTensor<T>& batch) {
  const auto& s = batch.shape();
  if (s.size() != 4 || s[1] != 1 || s[2] != spec.input_size || s[3] != spec.input_size) {
    throw std::invalid_argument("encoder: expected batch [N x 1 x " + std::to_string(spec.input_size) + " x " +
                                std::to_string(spec.input_size) + "], got " + shape_str(s));
  }
  if (s[0] == 0) throw std::invalid_argument("encoder: empty batch");
  for (T v : batch.values()) {
    if (!(v >= T{0} && v <= T{1})) throw std::invalid_argument("encoder: batch values must lie in [0,1]");
  }
  auto x = apply_conv(params, kBackbonePrefix + "stem.conv", batch, spec.stem_stride, 1);
  x = relu(apply_norm(params, spec, kBackbonePrefix + "stem.norm", x));
  for (std::size_t st = 0; st < spec.channel_widths.size(); ++st) {
    for (std::size_t b = 0; b < spec.blocks_per_stage; ++b) {
      const auto name = block_name(st, b);
      const std::size_t stride = (b == 0 && st > 0) ? 2 : 1;
      auto h = relu(apply_norm(params, spec, name + ".norm1", apply_conv(params, name + ".conv1", x, stride, 1)));
      h = apply_norm(params, spec, name + ".norm2", apply_conv(params, name + ".conv2", h, 1, 1));
      BasicTensor<T> shortcut = x;
      if (params.contains(name + ".shortcut.weight")) {
        shortcut = apply_norm(params, spec, name + ".shortcut_norm", apply_conv(params, name + ".shortcut", x, stride, 0));
      }
      x = relu(add(h, shortcut));
    }
  }
  return global_avg_pool(x);
}

template <class T>
BasicTensor<T> project(const BasicParamSet<T>& params, const EncoderSpec& spec, const BasicTensor<T>& features) {
  (void)spec;
  auto h = relu(linear(features, params.get(kHeadPrefix + "fc1.weight"), params.get(kHeadPrefix + "fc1.bias")));
  auto z = linear(h, params.get(kHeadPrefix + "fc2.weight"), params.get(kHeadPrefix + "fc2.bias"));
  return l2_normalize_rows(z);
}

template <class T>
BasicTensor<T> forward_encoder(const BasicParamSet<T>& params, const EncoderSpec& spec, const BasicTensor<T>& batch) {
  return project(params, spec, backbone_features(params, spec, batch));
}

template <class T>
BasicTensor<T> classify(const BasicParamSet<T>& params, const BasicTensor<T>& features) {
  return linear(features, params.get(kClassifierPrefix + "weight"), params.get(kClassifierPrefix + "bias"));
}

#define MOCOCXR_INSTANTIATE_ENCODER(T)                                                                        \
  template BasicParamSet<T> init_encoder<T>(const EncoderSpec&, std::uint64_t);                               \
  template BasicParamSet<T> init_classifier<T>(std::size_t, std::uint64_t);                                   \
  template BasicTensor<T> backbone_features(const BasicParamSet<T>&, const EncoderSpec&, const BasicTensor<T>&); \
  template BasicTensor<T> project(const BasicParamSet<T>&, const EncoderSpec&, const BasicTensor<T>&);        \
  template BasicTensor<T> forward_encoder(const BasicParamSet<T>&, const EncoderSpec&, const BasicTensor<T>&); \
  template BasicTensor<T> classify(const BasicParamSet<T>&, const BasicTensor<T>&);

MOCOCXR_INSTANTIATE_ENCODER(float)
MOCOCXR_INSTANTIATE_ENCODER(double)

#undef MOCOCXR_INSTANTIATE_ENCODER

}  // namespace mococxr::diffcore
