#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "seqft/ops.hpp"
#include "seqft/optim.hpp"
#include "seqft/rng.hpp"

namespace seqft {

enum class Activation { gelu, identity };

/// Architecture hyperparameters. Every learnable projection is a linear
/// layer; there are no convolutions or attention.
struct ArchMeta {
  Index image_size = 32;
  Index in_channels = 1;
  Index patch_size = 4;
  Index width = 32;
  Index mlp_hidden = 64;
  Index encoder_depth = 4;
  Index decoder_depth = 2;
  Index pixel_channels = 8;
  Index classes = 2;
  bool use_norm = true;
  Activation activation = Activation::gelu;

  Index grid() const { return image_size / patch_size; }
  Index tokens() const { return grid() * grid(); }
  Index patch_dim() const { return in_channels * patch_size * patch_size; }
  Index pixels() const { return image_size * image_size; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError("arch: " + m); };
    if (image_size < 1 || patch_size < 1 || width < 1 || mlp_hidden < 1 || in_channels < 1 ||
        pixel_channels < 1)
      fail("sizes must be positive");
    if (image_size % patch_size != 0) fail("image_size must be divisible by patch_size");
    if (encoder_depth < 0) fail("encoder_depth must be >= 0");
    if (decoder_depth < 1) fail("decoder_depth must be >= 1");
    if (classes < 2) fail("classes must be >= 2");
  }

  bool operator==(const ArchMeta&) const = default;
};

/// Tensor with deep-copy semantics, so that model structs behave as values.
template <typename Scalar>
class Parameter {
 public:
  Parameter() = default;
  explicit Parameter(Tensor<Scalar> t) : t_(std::move(t)) {}
  Parameter(const Parameter& o) : t_(o.t_.defined() ? o.t_.clone() : Tensor<Scalar>()) {}
  Parameter& operator=(const Parameter& o) {
    if (this != &o) t_ = o.t_.defined() ? o.t_.clone() : Tensor<Scalar>();
    return *this;
  }
  Parameter(Parameter&&) noexcept = default;
  Parameter& operator=(Parameter&&) noexcept = default;

  bool defined() const { return t_.defined(); }
  Tensor<Scalar>& tensor() { return t_; }
  const Tensor<Scalar>& tensor() const { return t_; }

 private:
  Tensor<Scalar> t_;
};

template <typename Scalar>
struct LinearLayer {
  std::string name;
  Parameter<Scalar> weight;  // [out x in]
  Parameter<Scalar> bias;    // [out], may be undefined

  Index out_dim() const { return weight.tensor().rows(); }
  Index in_dim() const { return weight.tensor().cols(); }

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const {
    return linear(x, weight.tensor(), bias.defined() ? &bias.tensor() : nullptr);
  }
};

template <typename Scalar>
struct NormLayer {
  std::string name;
  Parameter<Scalar> gamma;
  Parameter<Scalar> beta;

  Tensor<Scalar> operator()(const Tensor<Scalar>& x) const {
    return layer_norm(x, gamma.tensor(), beta.tensor());
  }
};

/// Pre-norm residual MLP block: x + fc2(act(fc1(norm(x)))).
template <typename Scalar>
struct EncoderBlock {
  NormLayer<Scalar> norm;
  LinearLayer<Scalar> fc1;
  LinearLayer<Scalar> fc2;
};

template <typename Scalar>
struct Encoder {
  LinearLayer<Scalar> patch_embed;
  Parameter<Scalar> pos_embed;   // [tokens x width]
  Parameter<Scalar> mask_token;  // [width]
  std::vector<EncoderBlock<Scalar>> blocks;
  NormLayer<Scalar> final_norm;  // gamma/beta undefined when norms are disabled

  /// f(name, Parameter&) in a fixed order.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    auto lin = [&](auto& l) {
      f(l.name + ".weight", l.weight);
      if (l.bias.defined()) f(l.name + ".bias", l.bias);
    };
    auto norm = [&](auto& n) {
      if (!n.gamma.defined()) return;
      f(n.name + ".weight", n.gamma);
      f(n.name + ".bias", n.beta);
    };
    lin(self.patch_embed);
    f(std::string("encoder.pos_embed"), self.pos_embed);
    f(std::string("encoder.mask_token"), self.mask_token);
    for (auto& b : self.blocks) {
      norm(b.norm);
      lin(b.fc1);
      lin(b.fc2);
    }
    norm(self.final_norm);
  }

  /// f(LinearLayer&) over every linear layer, shallow to deep.
  template <typename Self, typename F>
  static void visit_linear(Self& self, F&& f) {
    f(self.patch_embed);
    for (auto& b : self.blocks) {
      f(b.fc1);
      f(b.fc2);
    }
  }
};

template <typename Scalar>
struct Decoder {
  std::vector<LinearLayer<Scalar>> blocks;
};

enum class Group { encoder, decoder, seg_head, ssl_head };

inline const char* to_string(Group g) {
  switch (g) {
    case Group::encoder: return "encoder";
    case Group::decoder: return "decoder";
    case Group::seg_head: return "seg_head";
    case Group::ssl_head: return "ssl_head";
  }
  return "?";
}

template <typename Scalar>
struct ModelState {
  ArchMeta arch;
  Encoder<Scalar> encoder;
  Decoder<Scalar> decoder;
  LinearLayer<Scalar> seg_head;
  LinearLayer<Scalar> ssl_head;

  /// f(name, Parameter&, Group) over every parameter, in checkpoint order.
  template <typename Self, typename F>
  static void visit(Self& self, F&& f) {
    Encoder<Scalar>::visit(self.encoder,
                           [&](const std::string& n, auto& p) { f(n, p, Group::encoder); });
    auto lin = [&](auto& l, Group g) {
      f(l.name + ".weight", l.weight, g);
      if (l.bias.defined()) f(l.name + ".bias", l.bias, g);
    };
    for (auto& b : self.decoder.blocks) lin(b, Group::decoder);
    lin(self.seg_head, Group::seg_head);
    lin(self.ssl_head, Group::ssl_head);
  }
};

template <typename Scalar>
NamedTensors<Scalar> named_parameters(const ModelState<Scalar>& model,
                                      std::initializer_list<Group> groups = {
                                          Group::encoder, Group::decoder, Group::seg_head,
                                          Group::ssl_head}) {
  NamedTensors<Scalar> out;
  ModelState<Scalar>::visit(model, [&](const std::string& n, const Parameter<Scalar>& p, Group g) {
    if (std::find(groups.begin(), groups.end(), g) != groups.end()) out.emplace_back(n, p.tensor());
  });
  return out;
}

template <typename Scalar>
NamedTensors<Scalar> named_parameters(const Encoder<Scalar>& encoder) {
  NamedTensors<Scalar> out;
  Encoder<Scalar>::visit(encoder, [&](const std::string& n, const Parameter<Scalar>& p) {
    out.emplace_back(n, p.tensor());
  });
  return out;
}

template <typename Scalar>
Index parameter_count(const NamedTensors<Scalar>& params) {
  Index n = 0;
  for (const auto& [name, t] : params) n += t.size();
  return n;
}

template <typename Scalar>
void set_requires_grad(const NamedTensors<Scalar>& params, bool on) {
  for (auto [name, t] : params) t.set_requires_grad(on);
}

/// Frozen copy of an encoder: deep copy with requires_grad off.
template <typename Scalar>
Encoder<Scalar> frozen_copy(const Encoder<Scalar>& encoder) {
  Encoder<Scalar> out = encoder;
  set_requires_grad(named_parameters(out), false);
  return out;
}

namespace detail {

template <typename Scalar>
Tensor<Scalar> uniform_tensor(Shape shape, double bound, std::uint64_t seed) {
  Rng rng(seed);
  Matrix<Scalar> v(view_rows(shape), view_cols(shape));
  for (Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<Scalar>(rng.uniform(-bound, bound));
  return Tensor<Scalar>(std::move(shape), std::move(v), true);
}

template <typename Scalar>
Tensor<Scalar> normal_tensor(Shape shape, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  Matrix<Scalar> v(view_rows(shape), view_cols(shape));
  for (Index i = 0; i < v.size(); ++i) v.data()[i] = static_cast<Scalar>(stddev * rng.normal());
  return Tensor<Scalar>(std::move(shape), std::move(v), true);
}

/// Weight ~ U(-1/sqrt(in), 1/sqrt(in)), bias = 0. Draws keyed by layer name.
template <typename Scalar>
LinearLayer<Scalar> make_linear(std::string name, Index out, Index in, std::uint64_t seed) {
  LinearLayer<Scalar> l;
  l.weight = Parameter<Scalar>(uniform_tensor<Scalar>(Shape{out, in}, 1.0 / std::sqrt(double(in)),
                                                      mix_seed(seed, name + ".weight")));
  l.bias = Parameter<Scalar>(Tensor<Scalar>::zeros(Shape{out}, true));
  l.name = std::move(name);
  return l;
}

template <typename Scalar>
NormLayer<Scalar> make_norm(std::string name, Index width) {
  NormLayer<Scalar> n;
  n.name = std::move(name);
  n.gamma = Parameter<Scalar>(Tensor<Scalar>::constant(Shape{width}, Scalar(1), true));
  n.beta = Parameter<Scalar>(Tensor<Scalar>::zeros(Shape{width}, true));
  return n;
}

}  // namespace detail

/// Deterministic initialization from `seed`. Each parameter's draws depend
/// only on (seed, parameter name).
template <typename Scalar = float>
ModelState<Scalar> init_model(const ArchMeta& arch, std::uint64_t seed) {
  arch.validate();
  ModelState<Scalar> m;
  m.arch = arch;
  auto& e = m.encoder;
  e.patch_embed = detail::make_linear<Scalar>("encoder.patch_embed", arch.width, arch.patch_dim(), seed);
  e.pos_embed = Parameter<Scalar>(detail::normal_tensor<Scalar>(
      Shape{arch.tokens(), arch.width}, 0.02, mix_seed(seed, "encoder.pos_embed")));
  e.mask_token = Parameter<Scalar>(
      detail::normal_tensor<Scalar>(Shape{arch.width}, 0.02, mix_seed(seed, "encoder.mask_token")));
  for (Index i = 0; i < arch.encoder_depth; ++i) {
    const std::string p = "encoder.blocks." + std::to_string(i);
    EncoderBlock<Scalar> b;
    if (arch.use_norm) b.norm = detail::make_norm<Scalar>(p + ".norm", arch.width);
    b.fc1 = detail::make_linear<Scalar>(p + ".fc1", arch.mlp_hidden, arch.width, seed);
    b.fc2 = detail::make_linear<Scalar>(p + ".fc2", arch.width, arch.mlp_hidden, seed);
    e.blocks.push_back(std::move(b));
  }
  if (arch.use_norm) e.final_norm = detail::make_norm<Scalar>("encoder.norm", arch.width);

  const Index up = arch.patch_size * arch.patch_size * arch.pixel_channels;
  for (Index i = 0; i < arch.decoder_depth; ++i) {
    const bool last = i + 1 == arch.decoder_depth;
    m.decoder.blocks.push_back(detail::make_linear<Scalar>(
        "decoder.blocks." + std::to_string(i), last ? up : arch.width, arch.width, seed));
  }
  m.seg_head = detail::make_linear<Scalar>("seg_head", arch.classes, arch.pixel_channels, seed);
  m.ssl_head = detail::make_linear<Scalar>("ssl_head", arch.patch_dim(), arch.width, seed);
  return m;
}

/// Fresh segmentation head with `classes` outputs. No other parameter is
/// touched.
template <typename Scalar>
void reinit_seg_head(ModelState<Scalar>& model, Index classes, std::uint64_t seed) {
  if (classes < 2) throw ConfigError("reinit_seg_head: classes must be >= 2");
  model.arch.classes = classes;
  model.seg_head =
      detail::make_linear<Scalar>("seg_head", classes, model.arch.pixel_channels, seed);
}

/// Copies values by name into `model`. Every model parameter must be present
/// with a matching shape.
template <typename Scalar, typename Source>
void load_parameters(ModelState<Scalar>& model, const NamedTensors<Source>& values) {
  ModelState<Scalar>::visit(model, [&](const std::string& n, Parameter<Scalar>& p, Group) {
    auto it = std::find_if(values.begin(), values.end(), [&](const auto& kv) { return kv.first == n; });
    if (it == values.end()) throw DataError("missing parameter '" + n + "'");
    if (it->second.shape() != p.tensor().shape()) {
      throw DimensionError("parameter '" + n + "' has shape " + to_string(it->second.shape()) +
                           ", expected " + to_string(p.tensor().shape()));
    }
    p.tensor().data() = it->second.value().template cast<Scalar>();
  });
}

template <typename To, typename From>
ModelState<To> cast_model(const ModelState<From>& model) {
  ModelState<To> out = init_model<To>(model.arch, 0);
  load_parameters(out, named_parameters(model));
  return out;
}

// ---------------------------------------------------------------------------
// Patch layout
//
// Token t = gy * grid + gx. Patch column = c * p * p + py * p + px.
// Segmentation cells are emitted patch-major: cell = t * p * p + py * p + px.

/// Image [C x H*W] (row-major per channel) to patches [tokens x patch_dim].
template <typename Scalar>
Matrix<Scalar> patchify(const ArchMeta& arch, const Matrix<Scalar>& image) {
  const Index p = arch.patch_size, g = arch.grid(), s = arch.image_size;
  if (image.rows() != arch.in_channels || image.cols() != s * s) {
    throw DimensionError("patchify: image " + std::to_string(image.rows()) + "x" +
                         std::to_string(image.cols()) + " does not match arch");
  }
  Matrix<Scalar> out(arch.tokens(), arch.patch_dim());
  for (Index gy = 0; gy < g; ++gy)
    for (Index gx = 0; gx < g; ++gx)
      for (Index c = 0; c < arch.in_channels; ++c)
        for (Index py = 0; py < p; ++py)
          for (Index px = 0; px < p; ++px)
            out(gy * g + gx, c * p * p + py * p + px) = image(c, (gy * p + py) * s + gx * p + px);
  return out;
}

/// cell_index()[y * W + x] is the patch-major cell of raster pixel (y, x).
inline std::vector<Index> cell_index(const ArchMeta& arch) {
  const Index p = arch.patch_size, g = arch.grid(), s = arch.image_size;
  std::vector<Index> idx(static_cast<std::size_t>(s * s));
  for (Index y = 0; y < s; ++y)
    for (Index x = 0; x < s; ++x)
      idx[y * s + x] = ((y / p) * g + x / p) * p * p + (y % p) * p + (x % p);
  return idx;
}

/// Raster labels to patch-major cell labels.
inline std::vector<std::int32_t> labels_to_cells(const ArchMeta& arch,
                                                 std::span<const std::uint8_t> mask) {
  const auto idx = cell_index(arch);
  if (mask.size() != idx.size()) throw DimensionError("labels_to_cells: mask size mismatch");
  std::vector<std::int32_t> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[idx[i]] = mask[i];
  return out;
}

namespace detail {

inline void check_image_shape(const ArchMeta& arch, const Shape& shape) {
  if (shape.size() != 3 || shape[0] != arch.in_channels) {
    throw DimensionError("expected image [C x H x W] with C = " + std::to_string(arch.in_channels) +
                         ", got " + to_string(shape));
  }
  if (shape[1] % arch.patch_size != 0 || shape[2] % arch.patch_size != 0) {
    throw DimensionError("image " + to_string(shape) + " not divisible by patch size " +
                         std::to_string(arch.patch_size));
  }
  if (shape[1] != arch.image_size || shape[2] != arch.image_size) {
    throw DimensionError("image " + to_string(shape) + " does not match arch image size " +
                         std::to_string(arch.image_size));
  }
}

template <typename Scalar>
Tensor<Scalar> activate(Activation a, const Tensor<Scalar>& x) {
  return a == Activation::gelu ? gelu(x) : x;
}

}  // namespace detail

/// Input to the encoder: [B*tokens x patch_dim] for a batch of images.
template <typename Scalar, typename Image>
Tensor<Scalar> patch_batch(const ArchMeta& arch, std::span<const Image* const> images) {
  const Index t = arch.tokens();
  Matrix<Scalar> out(t * static_cast<Index>(images.size()), arch.patch_dim());
  for (std::size_t i = 0; i < images.size(); ++i) {
    out.middleRows(static_cast<Index>(i) * t, t) =
        patchify<Scalar>(arch, images[i]->value().template cast<Scalar>());
  }
  Shape shape{out.rows(), out.cols()};
  return Tensor<Scalar>(std::move(shape), std::move(out), false);
}

struct PlainLinear {
  template <typename Scalar>
  Tensor<Scalar> operator()(const LinearLayer<Scalar>& layer, const Tensor<Scalar>& x) const {
    return layer(x);
  }
};

/// Encoder over patch rows of a batch. `apply` maps (layer, input) to the
/// layer output, which is where low-rank adapters hook in. `mask`, when
/// non-null, marks token rows replaced by the mask token.
template <typename Scalar, typename Apply = PlainLinear>
Tensor<Scalar> encode(const Encoder<Scalar>& enc, const ArchMeta& arch,
                      const Tensor<Scalar>& patches, const std::vector<bool>* mask = nullptr,
                      Apply&& apply = {}) {
  Tensor<Scalar> x = apply(enc.patch_embed, patches);
  if (mask) x = replace_rows(x, *mask, enc.mask_token.tensor());
  x = add_tiled(x, enc.pos_embed.tensor());
  for (const auto& b : enc.blocks) {
    Tensor<Scalar> h = b.norm.gamma.defined() ? b.norm(x) : x;
    h = apply(b.fc1, h);
    h = detail::activate(arch.activation, h);
    h = apply(b.fc2, h);
    x = x + h;
  }
  if (enc.final_norm.gamma.defined()) x = enc.final_norm(x);
  return x;
}

/// Encoder features [B*tokens x width] to cell logits [B*cells x classes],
/// cells in patch-major order.
template <typename Scalar>
Tensor<Scalar> decode_cells(const ModelState<Scalar>& model, const Tensor<Scalar>& features) {
  const ArchMeta& arch = model.arch;
  Tensor<Scalar> x = features;
  for (const auto& layer : model.decoder.blocks) x = detail::activate(arch.activation, layer(x));
  const Index cells_per_token = arch.patch_size * arch.patch_size;
  x = reshape(x, Shape{x.rows() * cells_per_token, arch.pixel_channels});
  if (model.seg_head.out_dim() != arch.classes) {
    throw ConfigError("seg head has " + std::to_string(model.seg_head.out_dim()) +
                      " outputs but arch declares " + std::to_string(arch.classes) + " classes");
  }
  return model.seg_head(x);
}

/// Encoder output for one image plus where it came from.
template <typename Scalar>
struct FeatureMap {
  Tensor<Scalar> values;  // [tokens x width] (or [B*tokens x width] for batches)
  std::string provenance;
};

template <typename Scalar>
FeatureMap<Scalar> forward_features(const ModelState<Scalar>& model, const Tensor<Scalar>& image,
                                    std::string provenance = "model") {
  detail::check_image_shape(model.arch, image.shape());
  const Tensor<Scalar>* one[] = {&image};
  Tensor<Scalar> patches = patch_batch<Scalar>(model.arch, std::span<const Tensor<Scalar>* const>(one));
  return {encode(model.encoder, model.arch, patches), std::move(provenance) + ":encoder.out"};
}

/// Class logits [classes x H x W] for one image.
template <typename Scalar>
Tensor<Scalar> forward_segmentation(const ModelState<Scalar>& model, const Tensor<Scalar>& image) {
  const ArchMeta& arch = model.arch;
  auto features = forward_features(model, image).values;
  Tensor<Scalar> cells = decode_cells(model, features);
  Tensor<Scalar> raster = gather_rows(cells, cell_index(arch));
  return reshape(transpose(raster), Shape{arch.classes, arch.image_size, arch.image_size});
}

/// Reconstructed patch values [tokens x patch_dim]; masked patches are
/// replaced by the mask token before encoding.
template <typename Scalar>
Tensor<Scalar> forward_ssl(const ModelState<Scalar>& model, const Tensor<Scalar>& image,
                           const std::vector<bool>& mask) {
  const ArchMeta& arch = model.arch;
  detail::check_image_shape(arch, image.shape());
  if (static_cast<Index>(mask.size()) != arch.tokens()) {
    throw DimensionError("mask has " + std::to_string(mask.size()) + " entries for " +
                         std::to_string(arch.tokens()) + " patches");
  }
  const Tensor<Scalar>* one[] = {&image};
  Tensor<Scalar> patches = patch_batch<Scalar>(arch, std::span<const Tensor<Scalar>* const>(one));
  return model.ssl_head(encode(model.encoder, arch, patches, &mask));
}

/// Number of masked patches for a given ratio: floor(ratio * tokens).
inline std::size_t masked_count(double ratio, Index tokens) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(tokens) + 1e-9));
}

}  // namespace seqft
