#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "seqft/lora.hpp"
#include "seqft/losses.hpp"
#include "seqft/metrics.hpp"
#include "support.hpp"

using namespace seqft;
using seqft::testing::gradcheck;
using seqft::testing::random_tensor;

namespace {

ArchMeta small_arch() {
  ArchMeta a;
  a.image_size = 8;
  a.patch_size = 4;
  a.width = 6;
  a.mlp_hidden = 8;
  a.encoder_depth = 2;
  a.decoder_depth = 2;
  a.pixel_channels = 3;
  a.classes = 3;
  return a;
}

Tensor<float> random_image(Rng& rng, const ArchMeta& a) {
  std::vector<float> v(static_cast<std::size_t>(a.in_channels * a.pixels()));
  for (auto& x : v) x = static_cast<float>(rng.uniform());
  return Tensor<float>::from_values(Shape{a.in_channels, a.image_size, a.image_size}, v);
}

bool same_values(const NamedTensors<float>& a, const NamedTensors<float>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].first != b[i].first || a[i].second.value() != b[i].second.value()) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("init is deterministic and seed dependent") {
  const ArchMeta arch;
  auto a = init_model<float>(arch, 5), b = init_model<float>(arch, 5), c = init_model<float>(arch, 6);
  CHECK(same_values(named_parameters(a), named_parameters(b)));
  CHECK_FALSE(same_values(named_parameters(a), named_parameters(c)));
}

TEST_CASE("parameter partition is exact") {
  auto m = init_model<float>(ArchMeta{}, 1);
  std::set<std::string> names;
  Index total = 0;
  for (Group g : {Group::encoder, Group::decoder, Group::seg_head, Group::ssl_head}) {
    for (const auto& [n, t] : named_parameters(m, {g})) {
      CHECK(names.insert(n).second);
      total += t.size();
    }
  }
  CHECK(total == parameter_count(named_parameters(m)));
  CHECK(names.size() == named_parameters(m).size());
}

TEST_CASE("reinit_seg_head touches only the head") {
  auto m = init_model<float>(ArchMeta{}, 1);
  const auto before = named_parameters(frozen_copy(m.encoder));
  ModelState<float> copy = m;
  reinit_seg_head(m, 3, 99);
  CHECK(same_values(named_parameters(m.encoder), named_parameters(copy.encoder)));
  CHECK(same_values(named_parameters(m, {Group::decoder, Group::ssl_head}),
                    named_parameters(copy, {Group::decoder, Group::ssl_head})));
  CHECK(m.seg_head.out_dim() == 3);
  CHECK(m.arch.classes == 3);
}

TEST_CASE("forward_features is deterministic") {
  Rng rng(1);
  auto m = init_model<float>(ArchMeta{}, 1);
  auto img = random_image(rng, m.arch);
  CHECK(forward_features(m, img).values.value() == forward_features(m, img).values.value());
  CHECK(forward_features(m, img).values.shape() == Shape{64, 32});
}

TEST_CASE("zero encoder reduces to normalized position embeddings") {
  Rng rng(2);
  auto m = init_model<double>(ArchMeta{}, 3);
  Encoder<double>::visit_linear(m.encoder, [](LinearLayer<double>& l) {
    l.weight.tensor().data().setZero();
    l.bias.tensor().data().setZero();
  });
  auto& gamma = m.encoder.final_norm.gamma.tensor().data();
  auto& beta = m.encoder.final_norm.beta.tensor().data();
  for (Index i = 0; i < gamma.size(); ++i) {
    gamma(0, i) = rng.uniform(0.5, 1.5);
    beta(0, i) = rng.uniform(-0.5, 0.5);
  }
  std::vector<double> pix(1024);
  for (auto& p : pix) p = rng.uniform();
  auto img = Tensor<double>::from_values(Shape{1, 32, 32}, pix);
  const auto f = forward_features(m, img).values.value();

  // Straight-line oracle: the linear layers contribute nothing, so every
  // token is layer_norm(pos_embed row) with the final gamma/beta.
  const auto& pos = m.encoder.pos_embed.tensor().value();
  double worst = 0.0;
  for (Index t = 0; t < 64; ++t) {
    double mu = 0.0;
    for (Index j = 0; j < 32; ++j) mu += pos(t, j);
    mu /= 32.0;
    double var = 0.0;
    for (Index j = 0; j < 32; ++j) var += (pos(t, j) - mu) * (pos(t, j) - mu);
    var /= 32.0;
    for (Index j = 0; j < 32; ++j) {
      const double expect = (pos(t, j) - mu) / std::sqrt(var + 1e-5) * gamma(0, j) + beta(0, j);
      worst = std::max(worst, std::abs(expect - f(t, j)));
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("linear no-norm configuration is homogeneous") {
  ArchMeta arch = small_arch();
  arch.use_norm = false;
  arch.activation = Activation::identity;
  auto m = init_model<double>(arch, 4);
  m.encoder.pos_embed.tensor().data().setZero();
  Encoder<double>::visit_linear(m.encoder, [](LinearLayer<double>& l) { l.bias.tensor().data().setZero(); });
  Rng rng(5);
  std::vector<double> pix(64), twice(64);
  for (std::size_t i = 0; i < 64; ++i) {
    pix[i] = rng.uniform();
    twice[i] = 2 * pix[i];
  }
  const auto f1 = forward_features(m, Tensor<double>::from_values(Shape{1, 8, 8}, pix)).values.value();
  const auto f2 = forward_features(m, Tensor<double>::from_values(Shape{1, 8, 8}, twice)).values.value();
  CHECK((f2 - 2 * f1).cwiseAbs().maxCoeff() < 1e-12);
  const auto z = forward_features(m, Tensor<double>::zeros(Shape{1, 8, 8})).values.value();
  CHECK(z.isZero(0));
}

TEST_CASE("identity SSL configuration reproduces the patches") {
  ArchMeta arch = small_arch();
  arch.encoder_depth = 0;
  arch.use_norm = false;
  arch.width = arch.patch_dim();
  auto m = init_model<float>(arch, 1);
  m.encoder.patch_embed.weight.tensor().data().setIdentity();
  m.encoder.pos_embed.tensor().data().setZero();
  m.ssl_head.weight.tensor().data().setIdentity();
  Rng rng(6);
  auto img = random_image(rng, arch);
  const auto rec = forward_ssl(m, img, std::vector<bool>(4, false)).value();
  // Patch round trip by hand: token (gy, gx), column (py, px).
  for (Index gy = 0; gy < 2; ++gy)
    for (Index gx = 0; gx < 2; ++gx)
      for (Index py = 0; py < 4; ++py)
        for (Index px = 0; px < 4; ++px)
          CHECK(rec(gy * 2 + gx, py * 4 + px) == img.value()(0, (gy * 4 + py) * 8 + gx * 4 + px));
  CHECK_THROWS_AS(forward_ssl(m, img, std::vector<bool>(3, false)), DimensionError);
}

TEST_CASE("mask count and masked reconstruction determinism") {
  CHECK(masked_count(0.6, 16) == 9);
  CHECK(masked_count(0.6, 64) == 38);
  auto m = init_model<float>(ArchMeta{}, 2);
  Rng r1(3), r2(3), img_rng(4);
  auto img = random_image(img_rng, m.arch);
  const auto mask1 = r1.choose_mask(64, masked_count(0.6, 64));
  const auto mask2 = r2.choose_mask(64, masked_count(0.6, 64));
  CHECK(mask1 == mask2);
  CHECK(forward_ssl(m, img, mask1).value() == forward_ssl(m, img, mask2).value());
}

TEST_CASE("segmentation logits, forced argmax and shape errors") {
  auto m = init_model<float>(ArchMeta{}, 3);
  Rng rng(7);
  auto img = random_image(rng, m.arch);
  auto logits = forward_segmentation(m, img);
  CHECK(logits.shape() == Shape{2, 32, 32});
  const auto p = detail::softmax_rows<float>(transpose(reshape(logits, Shape{2, 1024})).value());
  CHECK((p.rowwise().sum().array() - 1.0f).abs().maxCoeff() < 1e-6f);

  m.seg_head.weight.tensor().data().setZero();
  m.seg_head.bias.tensor().data() << 10.0f, 0.0f;
  const auto forced = forward_segmentation(m, img).value();
  CHECK((forced.row(0).array() > forced.row(1).array()).all());

  CHECK_THROWS_AS(forward_features(m, Tensor<float>::zeros(Shape{1, 30, 30})), DimensionError);
  m.arch.classes = 3;
  CHECK_THROWS_AS(forward_segmentation(m, img), ConfigError);
}

TEST_CASE("segmentation gradient reaches the first encoder weight") {
  auto m = init_model<double>(small_arch(), 8);
  Rng rng(9);
  std::vector<double> pix(64);
  for (auto& p : pix) p = rng.uniform();
  auto img = Tensor<double>::from_values(Shape{1, 8, 8}, pix);
  auto& w = m.encoder.patch_embed.weight.tensor();
  CHECK(gradcheck([&] { return mean(forward_segmentation(m, img)); }, {w}) < 1e-3);
}

// ---------------------------------------------------------------------------
// LoRA

TEST_CASE("inject covers every linear layer and starts as a no-op") {
  auto m = init_model<float>(ArchMeta{}, 1);
  auto adapted = inject(m.encoder, m.arch, 2, 7);
  int layers = 0;
  Encoder<float>::visit_linear(m.encoder, [&](const auto&) { ++layers; });
  CHECK(layers == 9);
  CHECK(static_cast<int>(adapted.adapters.size()) == layers);
  Rng rng(2);
  auto img = random_image(rng, m.arch);
  CHECK(adapted_forward(adapted, img).values.value() == forward_features(m, img).values.value());
  for (const auto& [n, t] : named_parameters(adapted.base)) CHECK_FALSE(t.requires_grad());
}

TEST_CASE("hand example: W = I, A = [[1,2]], B = [[3],[4]]") {
  AdaptedEncoder<double> adapted;
  LinearLayer<double> layer;
  layer.name = "l";
  layer.weight = Parameter<double>(Tensor<double>::from_values(Shape{2, 2}, {1, 0, 0, 1}));
  LoraAdapter<double> a;
  a.layer_name = "l";
  a.rank = 1;
  a.A = Parameter<double>(Tensor<double>::from_values(Shape{1, 2}, {1, 2}, true));
  a.B = Parameter<double>(Tensor<double>::from_values(Shape{2, 1}, {3, 4}, true));
  adapted.adapters.push_back(a);
  const Matrix<double> merged = layer.weight.tensor().value() + a.delta();
  CHECK(merged == (Matrix<double>(2, 2) << 4, 6, 4, 9).finished());
  auto x = Tensor<double>::from_values(Shape{1, 2}, {1, 0});
  const auto y = LoraLinear<double>{&adapted}(layer, x).value();
  CHECK(y(0, 0) == 4.0);
  CHECK(y(0, 1) == 4.0);
}

TEST_CASE("merge agrees with adapted forward and keeps non-weights") {
  auto m = init_model<float>(ArchMeta{}, 1);
  auto adapted = inject(m.encoder, m.arch, 2, 3);
  Rng rng(4);
  for (auto& a : adapted.adapters) {
    for (Index i = 0; i < a.B.tensor().size(); ++i) a.B.tensor().data().data()[i] = float(rng.uniform(-0.2, 0.2));
  }
  const Encoder<float> merged = merge(adapted);
  CHECK(parameter_count(named_parameters(merged)) == parameter_count(named_parameters(m.encoder)));
  ModelState<float> mm = m;
  mm.encoder = merged;
  for (int i = 0; i < 10; ++i) {
    auto img = random_image(rng, m.arch);
    const auto a = adapted_forward(adapted, img).values.value();
    const auto b = forward_features(mm, img).values.value();
    CHECK(((a - b).array().abs() / (1.0f + a.array().abs())).maxCoeff() < 1e-5f);
  }
  const auto base = named_parameters(m.encoder);
  const auto out = named_parameters(merged);
  for (std::size_t i = 0; i < base.size(); ++i) {
    if (!is_linear_weight(base[i].first)) CHECK(base[i].second.value() == out[i].second.value());
  }
}

TEST_CASE("rank bound and validation") {
  auto m = init_model<double>(small_arch(), 1);
  auto adapted = inject(m.encoder, m.arch, 2, 5);
  Rng rng(6);
  for (auto& a : adapted.adapters) {
    for (Index i = 0; i < a.B.tensor().size(); ++i) a.B.tensor().data().data()[i] = rng.uniform(-1, 1);
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a.delta());
    const auto s = svd.singularValues();
    CHECK((s.array() > 1e-6).count() <= 2);
  }
  try {
    inject(m.encoder, m.arch, 7, 1);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("encoder.patch_embed") != std::string::npos);
    CHECK(std::string(e.what()).find("min(d, k) = 6") != std::string::npos);
  }
  CHECK_THROWS_AS(inject(m.encoder, m.arch, 0, 1), ConfigError);
}

TEST_CASE("adapter training leaves the base untouched") {
  auto m = init_model<float>(ArchMeta{}, 1);
  const Encoder<float> snapshot = frozen_copy(m.encoder);
  auto adapted = inject(m.encoder, m.arch, 2, 3);
  AdamW<float> opt(adapter_parameters(adapted), {.lr = 0.01});
  Rng rng(5);
  auto img = random_image(rng, m.arch);
  auto target = Tensor<float>::constant(Shape{64, 32}, 0.5f);
  for (int i = 0; i < 5; ++i) {
    opt.zero_grad();
    refine_loss<float>(adapted_forward(adapted, img), {target, "t"}).backward();
    opt.step();
  }
  CHECK(same_values(named_parameters(adapted.base), named_parameters(snapshot)));
  CHECK(same_values(named_parameters(m.encoder), named_parameters(snapshot)));
  CHECK_FALSE(adapted.adapters[0].B.tensor().value().isZero(0));
}

// ---------------------------------------------------------------------------
// Losses

TEST_CASE("seg_loss on a perfect prediction approaches zero") {
  std::vector<std::int32_t> labels{0, 1, 1, 0, 2, 2};
  Matrix<double> z = Matrix<double>::Constant(6, 3, -30.0);
  for (std::size_t i = 0; i < labels.size(); ++i) z(static_cast<Index>(i), labels[i]) = 30.0;
  auto out = seg_loss(Tensor<double>(Shape{6, 3}, z), labels);
  CHECK(out.components.at("dice") < 1e-6);
  CHECK(out.components.at("ce") < 1e-6);
  CHECK(out.total.item() == doctest::Approx(out.components.at("dice") + out.components.at("ce")).epsilon(1e-12));
}

TEST_CASE("seg_loss with disjoint hard prediction has dice loss one") {
  std::vector<std::int32_t> labels{1, 1, 0, 0};
  // Predicts foreground exactly where the target is background.
  Matrix<double> z = Matrix<double>::Zero(4, 2);
  z(0, 0) = 50;
  z(1, 0) = 50;
  z(2, 1) = 50;
  z(3, 1) = 50;
  auto out = seg_loss(Tensor<double>(Shape{4, 2}, z), labels);
  CHECK(out.components.at("dice") == doctest::Approx(1.0).epsilon(1e-5));
}

TEST_CASE("seg_loss uniform logits match the direct formula") {
  // Binary task, 4 cells, half foreground, uniform logits: p = 0.5 everywhere.
  std::vector<std::int32_t> labels{1, 1, 0, 0};
  auto out = seg_loss(Tensor<double>::zeros(Shape{4, 2}), labels);
  const double eps = 1e-5;
  const double inter = 0.5 + 0.5;   // sum p_fg * t over the two foreground cells
  const double denom = 4 * 0.5 + 2; // sum p_fg + sum t
  const double dice_loss = 1.0 - (2 * inter + eps) / (denom + eps);
  const double ce = std::log(2.0);
  CHECK(out.components.at("dice") == doctest::Approx(dice_loss).epsilon(1e-12));
  CHECK(out.components.at("ce") == doctest::Approx(ce).epsilon(1e-12));
  CHECK(out.total.item() == doctest::Approx(dice_loss + ce).epsilon(1e-12));
}

TEST_CASE("seg_loss rejects out-of-range labels naming the cell") {
  std::vector<std::int32_t> labels{0, 1, 2, 0};
  try {
    seg_loss(Tensor<double>::zeros(Shape{4, 2}), labels);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("cell 2") != std::string::npos);
  }
}

TEST_CASE("kd and refine losses") {
  Rng rng(11);
  auto s = random_tensor(rng, Shape{8, 4});
  auto t = random_tensor(rng, Shape{8, 4});
  CHECK(kd_loss<double>({s, "s"}, {s, "t"}).item() == 0.0);
  auto shifted = Tensor<double>(Shape{8, 4}, (s.value().array() + 1.0).matrix());
  CHECK(kd_loss<double>({shifted, "s"}, {s, "t"}).item() == doctest::Approx(1.0).epsilon(1e-12));
  double acc = 0.0;
  for (Index i = 0; i < 8; ++i)
    for (Index j = 0; j < 4; ++j) acc += (s.value()(i, j) - t.value()(i, j)) * (s.value()(i, j) - t.value()(i, j));
  CHECK(kd_loss<double>({s, "s"}, {t, "t"}).item() == doctest::Approx(acc / 32).epsilon(1e-12));
  CHECK(refine_loss<double>({s, "s"}, {t, "t"}).item() == kd_loss<double>({s, "s"}, {t, "t"}).item());
  CHECK(kd_loss<double>({s, "s"}, {t, "t"}).item() == kd_loss<double>({t, "s"}, {s, "t"}).item());

  // Gradient is one-sided.
  s.zero_grad();
  t.zero_grad();
  kd_loss<double>({s, "s"}, {t, "t"}).backward();
  CHECK(s.has_grad());
  CHECK_FALSE(t.has_grad());
  CHECK_THROWS_AS(kd_loss<double>({s, "s"}, {random_tensor(rng, Shape{4, 8}), "t"}), DimensionError);
}

TEST_CASE("refine loss gradient w.r.t. an adapter entry") {
  auto m = init_model<double>(small_arch(), 2);
  auto adapted = inject(m.encoder, m.arch, 2, 3);
  Rng rng(12);
  for (auto& a : adapted.adapters) {
    for (Index i = 0; i < a.B.tensor().size(); ++i) a.B.tensor().data().data()[i] = rng.uniform(-0.3, 0.3);
  }
  std::vector<double> pix(64);
  for (auto& p : pix) p = rng.uniform();
  auto img = Tensor<double>::from_values(Shape{1, 8, 8}, pix);
  auto target = random_tensor(rng, Shape{4, 6}, -1, 1, false);
  for (auto& a : adapted.adapters) {
    CHECK(gradcheck([&] { return refine_loss<double>(adapted_forward(adapted, img), {target, "t"}); },
                    {a.A.tensor(), a.B.tensor()}) < 1e-3);
  }
}
