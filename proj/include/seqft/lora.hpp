#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "seqft/model.hpp"

namespace seqft {

/// Low-rank update for one linear layer: delta W = scale * B A with
/// A [rank x in], B [out x rank].
template <typename Scalar>
struct LoraAdapter {
  std::string layer_name;
  Parameter<Scalar> A;
  Parameter<Scalar> B;
  Index rank = 0;

  Matrix<Scalar> delta(Scalar scale = Scalar(1)) const {
    Matrix<Scalar> d = B.tensor().value() * A.tensor().value();
    if (scale != Scalar(1)) d *= scale;
    return d;
  }
};

/// Frozen base encoder plus one adapter per linear layer. Only A and B are
/// trainable.
template <typename Scalar>
struct AdaptedEncoder {
  ArchMeta arch;
  Encoder<Scalar> base;
  std::vector<LoraAdapter<Scalar>> adapters;
  Scalar scale = Scalar(1);

  const LoraAdapter<Scalar>* find(const std::string& layer_name) const {
    for (const auto& a : adapters) {
      if (a.layer_name == layer_name) return &a;
    }
    return nullptr;
  }
};

template <typename Scalar>
NamedTensors<Scalar> adapter_parameters(const AdaptedEncoder<Scalar>& adapted) {
  NamedTensors<Scalar> out;
  for (const auto& a : adapted.adapters) {
    out.emplace_back(a.layer_name + ".lora.A", a.A.tensor());
    out.emplace_back(a.layer_name + ".lora.B", a.B.tensor());
  }
  return out;
}

/// Wraps every linear layer of a frozen copy of `encoder` with a rank-`rank`
/// adapter. B starts at zero so the adapted forward equals the base forward;
/// A ~ U(-1/sqrt(in), 1/sqrt(in)).
template <typename Scalar>
AdaptedEncoder<Scalar> inject(const Encoder<Scalar>& encoder, const ArchMeta& arch, Index rank,
                              std::uint64_t seed, Scalar scale = Scalar(1)) {
  if (rank < 1) throw ConfigError("lora rank must be positive, got " + std::to_string(rank));
  AdaptedEncoder<Scalar> out;
  out.arch = arch;
  out.base = frozen_copy(encoder);
  out.scale = scale;
  Encoder<Scalar>::visit_linear(out.base, [&](const LinearLayer<Scalar>& layer) {
    const Index d = layer.out_dim(), k = layer.in_dim();
    if (rank > std::min(d, k)) {
      throw ConfigError("lora rank " + std::to_string(rank) + " exceeds min(d, k) = " +
                        std::to_string(std::min(d, k)) + " for layer '" + layer.name + "'");
    }
    LoraAdapter<Scalar> a;
    a.layer_name = layer.name;
    a.rank = rank;
    a.A = Parameter<Scalar>(detail::uniform_tensor<Scalar>(
        Shape{rank, k}, 1.0 / std::sqrt(double(k)), mix_seed(seed, layer.name + ".lora.A")));
    a.B = Parameter<Scalar>(Tensor<Scalar>::zeros(Shape{d, rank}, true));
    out.adapters.push_back(std::move(a));
  });
  return out;
}

/// y = x W^T + scale * (x A^T) B^T + bias for adapted layers.
template <typename Scalar>
struct LoraLinear {
  const AdaptedEncoder<Scalar>* adapted;

  Tensor<Scalar> operator()(const LinearLayer<Scalar>& layer, const Tensor<Scalar>& x) const {
    Tensor<Scalar> y = layer(x);
    const LoraAdapter<Scalar>* a = adapted->find(layer.name);
    if (!a) return y;
    Tensor<Scalar> low = linear(linear(x, a->A.tensor()), a->B.tensor());
    if (adapted->scale != Scalar(1)) low = scale(low, adapted->scale);
    return y + low;
  }
};

/// Adapted encoder features for a patch batch [B*tokens x patch_dim].
template <typename Scalar>
Tensor<Scalar> adapted_encode(const AdaptedEncoder<Scalar>& adapted, const Tensor<Scalar>& patches,
                              const std::vector<bool>* mask = nullptr) {
  return encode(adapted.base, adapted.arch, patches, mask, LoraLinear<Scalar>{&adapted});
}

template <typename Scalar>
FeatureMap<Scalar> adapted_forward(const AdaptedEncoder<Scalar>& adapted, const Tensor<Scalar>& image) {
  detail::check_image_shape(adapted.arch, image.shape());
  const Tensor<Scalar>* one[] = {&image};
  Tensor<Scalar> patches =
      patch_batch<Scalar>(adapted.arch, std::span<const Tensor<Scalar>* const>(one));
  return {adapted_encode(adapted, patches), "adapted:encoder.out"};
}

/// Reparameterization: a fresh encoder where each adapted layer carries
/// W + scale * B A. Every other value is copied bit for bit.
template <typename Scalar>
Encoder<Scalar> merge(const AdaptedEncoder<Scalar>& adapted) {
  Encoder<Scalar> out = adapted.base;
  Encoder<Scalar>::visit_linear(out, [&](LinearLayer<Scalar>& layer) {
    if (const auto* a = adapted.find(layer.name)) {
      layer.weight.tensor().data() += a->delta(adapted.scale);
    }
  });
  set_requires_grad(named_parameters(out), true);
  return out;
}

}  // namespace seqft
