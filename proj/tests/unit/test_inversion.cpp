#include <doctest.h>

#include <cmath>

#include "nerftap/diff/gradcheck.hpp"
#include "nerftap/inversion/inversion.hpp"

using namespace nerftap;
using namespace nerftap::inversion;
using radiance::RadianceModel;

namespace {

Tensor random_image(Rng& rng, int r) {
  Tensor t({3, r, r});
  for (float& v : t.data) v = float(rng.uniform());
  return t;
}

RadianceModel in_domain(std::uint64_t k, Tensor& target, Pose& pose) {
  RadianceModel g0 = radiance::make_radiance_model({}, 100);
  Rng rng = Rng::stream(5, "target", k);
  RadianceModel m = g0;
  m.w = radiance::random_latent(m.config, rng);
  pose = {rng.uniform(-20, 20), rng.uniform(-10, 10)};
  target = radiance::synthesize(m, pose);
  return g0;
}

}  // namespace

TEST_CASE("perceptual distance: identity, symmetry, monotone perturbation") {
  Rng rng(1);
  Tensor x = random_image(rng, 64);
  CHECK(perceptual_distance(x, x) == 0.0);
  for (int i = 0; i < 5; ++i) {
    Tensor a = random_image(rng, 64), b = random_image(rng, 64);
    CHECK(perceptual_distance(a, b) == doctest::Approx(perceptual_distance(b, a)).epsilon(1e-6));
    CHECK(perceptual_distance(a, b) > 0);
  }
  Tensor noise({3, 64, 64});
  rng.fill_normal(noise.data, 1.0);
  double prev = 0;
  for (double eps : {0.01, 0.05, 0.1}) {
    Tensor y = x;
    for (std::size_t i = 0; i < y.numel(); ++i) y.data[i] += float(eps * noise.data[i]);
    const double d = perceptual_distance(x, y);
    CHECK(d > prev);
    prev = d;
  }
  CHECK_THROWS_AS(perceptual_distance(x, Tensor({3, 32, 32})), diff::ShapeError);
  CHECK_THROWS_AS(perceptual_distance(Tensor({3, 40, 40}), Tensor({3, 40, 40})), diff::ShapeError);
}

TEST_CASE("perceptual distance is differentiable in both arguments") {
  const auto net = default_perceptual_net().cast<double>();
  Rng rng(2);
  diff::TensorT<double> x({3, 16, 16}), y({3, 16, 16});
  for (double& v : x.data) v = rng.uniform();
  for (double& v : y.data) v = rng.uniform();
  x.requires_grad = y.requires_grad = true;
  diff::GraphT<double> g;
  Var d = perceptual_distance(g, net, g.param(x), g.param(y));
  CHECK(diff::check_gradient(g, d, x, 1e-5) < 1e-3);
  CHECK(diff::check_gradient(g, d, y, 1e-5) < 1e-3);
}

TEST_CASE("the perceptual net is fixed by its seed") {
  CHECK(make_perceptual_net().conv_w[3].data == default_perceptual_net().conv_w[3].data);
  CHECK(make_perceptual_net(1).conv_w[0].data != default_perceptual_net().conv_w[0].data);
  CHECK(default_perceptual_net().conv_w[3].shape == diff::Shape{64, 32, 3, 3});
}

TEST_CASE("noise regularization closed cases") {
  radiance::NoiseBank zero = radiance::zero_noise({});
  CHECK(noise_regularization(zero) == 0.0);
  radiance::NoiseBank ones = zero;
  for (Tensor& n : ones.layers) n.data.assign(n.numel(), 1.0f);
  // 64 -> 32 -> 16 -> 8: four levels, two directions, two layers.
  const double constant = noise_regularization(ones);
  CHECK(constant == doctest::Approx(16.0));
  for (int seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    radiance::NoiseBank iid = zero;
    for (Tensor& n : iid.layers) rng.fill_normal(n.data, 1.0);
    const double v = noise_regularization(iid);
    CHECK(v >= 0);
    CHECK(v < 0.05);
    CHECK(v < constant);
  }
}

TEST_CASE("noise regularization gradient") {
  Rng rng(3);
  diff::TensorT<double> a({16, 16}), b({32, 32});
  for (double& v : a.data) v = rng.normal() + 0.3;
  for (double& v : b.data) v = rng.normal() - 0.2;
  a.requires_grad = b.requires_grad = true;
  diff::GraphT<double> g;
  Var r = noise_regularization(g, {g.param(a), g.param(b)});
  CHECK(diff::check_gradient(g, r, a, 1e-5) < 1e-3);
  CHECK(diff::check_gradient(g, r, b, 1e-5) < 1e-3);
}

TEST_CASE("inversion preconditions") {
  Tensor target;
  Pose pose;
  RadianceModel g0 = in_domain(0, target, pose);
  InversionConfig cfg;
  cfg.stage1_steps = 0;
  CHECK_THROWS_AS(invert_latent(target, pose, g0, cfg), std::invalid_argument);
  cfg = {};
  cfg.stage2_steps = 0;
  CHECK_THROWS_AS(finetune_generator(target, pose, g0, g0.w, g0.noise, cfg), std::invalid_argument);
  cfg = {};
  CHECK_THROWS_AS(invert_latent(Tensor({3, 32, 32}), pose, g0, cfg), diff::ShapeError);
  CHECK_THROWS_AS(invert_latent(target, Pose{80, 0}, g0, cfg), std::invalid_argument);
  Tensor bad = target;
  bad.data[5] = NAN;
  cfg.stage1_steps = 3;
  try {
    invert_latent(bad, pose, g0, cfg);
    FAIL("expected a numeric error");
  } catch (const diff::NumericError& e) {
    CHECK(std::string(e.what()).find("step 0") != std::string::npos);
  }
}

TEST_CASE("stage one fits w and noise with the generator frozen") {
  Tensor target;
  Pose pose;
  RadianceModel g0 = in_domain(1, target, pose);
  const std::string hash = radiance::generator_hash(g0.g);
  InversionConfig cfg;
  cfg.stage1_steps = 60;
  LatentFit fit = invert_latent(target, pose, g0, cfg);
  CHECK(fit.curve.size() == 60);
  CHECK(fit.curve.back() <= fit.curve.front());
  CHECK(radiance::generator_hash(g0.g) == hash);
  CHECK(fit.w.shape == g0.w.shape);
  CHECK(fit.w.grad.empty());
}

TEST_CASE("stage two with zero pixel weight optimizes the perceptual term alone") {
  Tensor target;
  Pose pose;
  RadianceModel g0 = in_domain(2, target, pose);
  InversionConfig cfg;
  cfg.lambda_l2 = 0;
  cfg.stage2_steps = 3;
  const Tensor pivot = g0.w;
  GeneratorFit fit = finetune_generator(target, pose, g0, g0.w, g0.noise, cfg);
  CHECK(fit.curve.size() == 3);
  CHECK(fit.curve[0] == perceptual_distance(radiance::synthesize(g0, pose), target));
  CHECK(g0.w.data == pivot.data);
  cfg.lambda_l2 = 1;
  GeneratorFit with_pixels = finetune_generator(target, pose, g0, g0.w, g0.noise, cfg);
  const double pixel = mse(radiance::synthesize(g0, pose), target);
  CHECK(with_pixels.curve[0] - fit.curve[0] == doctest::Approx(pixel).epsilon(1e-4));
}

TEST_CASE("in-domain two-stage inversion reconstructs the target") {
  Tensor target;
  Pose pose;
  RadianceModel g0 = in_domain(3, target, pose);
  InversionResult r = invert(target, pose, g0, InversionConfig{});
  CHECK(r.stage1_curve.size() == 400);
  CHECK(r.stage2_curve.size() == 400);
  CHECK(r.stage2_curve.back() <= r.stage1_curve.back());
  RadianceModel fitted = apply(g0, r);
  const Tensor recon = radiance::synthesize(fitted, pose);
  CHECK(mse(recon, target) <= 1e-3);
  CHECK(psnr(recon, target) >= 30.0);
  Pose turned = pose;
  turned.yaw_deg += 10;
  CHECK(mse(radiance::synthesize(fitted, turned), recon) > 0);

  auto map = to_tensor_map(r);
  InversionResult back = inversion_from_tensor_map(g0.config, diff::decode_blob(diff::encode_blob(map)));
  CHECK(back.w.data == r.w.data);
  CHECK(radiance::generator_hash(back.g) == radiance::generator_hash(r.g));
  CHECK(back.stage2_curve.size() == 400);
}

TEST_CASE("stage two improves pixel error on an out-of-domain image") {
  RadianceModel g0 = radiance::make_radiance_model({}, 100);
  Tensor target({3, 64, 64});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        target.data[(c * 64 + y) * 64 + x] = float(c == 0 ? x / 63.0 : c == 1 ? y / 63.0 : 0.5 * (x + y) / 126.0 + 0.25);
  const Pose pose{0, 0};
  InversionConfig cfg;
  LatentFit s1 = invert_latent(target, pose, g0, cfg);
  RadianceModel m = g0;
  m.w = s1.w;
  m.noise = s1.noise;
  const double mse1 = mse(radiance::synthesize(m, pose), target);
  GeneratorFit s2 = finetune_generator(target, pose, g0, s1.w, s1.noise, cfg);
  m.g = s2.g;
  CHECK(mse(radiance::synthesize(m, pose), target) < mse1);
}

TEST_CASE("inversion is deterministic") {
  Tensor target;
  Pose pose;
  RadianceModel g0 = in_domain(4, target, pose);
  InversionConfig cfg;
  cfg.stage1_steps = 15;
  cfg.stage2_steps = 15;
  auto a = diff::encode_blob(to_tensor_map(invert(target, pose, g0, cfg)));
  auto b = diff::encode_blob(to_tensor_map(invert(target, pose, g0, cfg)));
  CHECK(a == b);
}
