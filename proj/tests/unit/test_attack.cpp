#include <doctest.h>

#include <cmath>

#include "nerftap/attack/attack.hpp"
#include "nerftap/diff/gradcheck.hpp"
#include "nerftap/util/hash.hpp"

using namespace nerftap;
using namespace nerftap::attack;

namespace {

radiance::RadianceConfig toy_config() {
  radiance::RadianceConfig c;
  c.plane_resolution = 16;
  c.render_resolution = 8;
  c.n_samples = 16;
  return c;
}

AttackProblem toy_problem(std::uint64_t seed) {
  const auto cfg = toy_config();
  const auto src = radiance::make_radiance_model(cfg, 10 + seed);
  const auto tgt = radiance::make_radiance_model(cfg, 20 + seed);
  return {{src, {}, radiance::synthesize(src, {})}, {tgt, {}, radiance::synthesize(tgt, {})},
          faceid::make_embedder('A', 3 + seed)};
}

AttackConfig toy_attack() {
  AttackConfig c;
  c.texture_resolution = 16;
  c.batch_size = 2;
  c.epochs = 4;
  return c;
}

Tensor random_tensor(Rng& rng, diff::Shape shape, double lo = 0, double hi = 1) {
  Tensor t(std::move(shape));
  for (float& v : t.data) v = float(rng.uniform(lo, hi));
  return t;
}

std::string artifact_hash(const AttackArtifact& a) { return sha256_hex(diff::encode_blob(to_tensor_map(a))); }

}  // namespace

TEST_CASE("uv generator: shape, range, determinism") {
  Rng rng(1);
  UVGenerator gen = make_uv_generator(4);
  Tensor z = random_tensor(rng, {3, 32, 32});
  Tensor a = uv_generator_forward(gen, z);
  CHECK(a.shape == z.shape);
  for (float v : a.data) CHECK((v >= 0.0f && v <= 1.0f));
  CHECK(uv_generator_forward(gen, z).data == a.data);
  CHECK(uv_generator_forward(make_uv_generator(5), z).data != a.data);
  CHECK_THROWS_AS(uv_generator_forward(gen, Tensor({3, 30, 30})), diff::ShapeError);
  CHECK_THROWS_AS(uv_generator_forward(gen, Tensor({1, 32, 32})), diff::ShapeError);
  UVGenerator back = uv_generator_from_tensor_map(diff::decode_blob(diff::encode_blob(to_tensor_map(gen))));
  CHECK(uv_generator_forward(back, z).data == a.data);
}

TEST_CASE("uv generator gradient w.r.t. its parameters") {
  Rng rng(2);
  auto gen = make_uv_generator(7).cast<double>();
  for (auto* p : radiance::param_list(gen)) p->requires_grad = true;
  diff::TensorT<double> z({3, 16, 16});
  for (double& v : z.data) v = rng.uniform();
  diff::GraphT<double> g;
  Var out = uv_generator_forward(g, gen, g.param(std::as_const(z)));
  diff::TensorT<double> w(g.shape(out));
  for (double& v : w.data) v = rng.uniform(-1, 1);
  Var loss = g.sum(g.mul(out, g.constant(w)));
  for (auto* p : radiance::param_list(gen)) {
    std::vector<std::size_t> idx;
    for (int i = 0; i < 6; ++i) idx.push_back(rng.below(p->numel()));
    CHECK(diff::check_gradient(g, loss, *p, 1e-6, idx) < 1e-3);
  }
}

TEST_CASE("target uv map") {
  const radiance::Pose front{};
  const uvgeom::UVLookup lk = uvgeom::rasterize_uv(uvgeom::build_face_mesh(front), 64);
  Tensor flat({3, 64, 64}, 0.3f);
  for (float v : target_uv_map(flat, lk, 64).data) CHECK(v == doctest::Approx(0.3f));

  const auto model = radiance::make_radiance_model({}, 100);
  const Tensor x = radiance::synthesize(model, front);
  const Tensor z = target_uv_map(x, lk, 64);
  uvgeom::Mask all = uvgeom::make_mask(uvgeom::MaskKind::Eye);
  std::fill(all.grid.begin(), all.grid.end(), 1);
  const Tensor back = uvgeom::apply_patch(x, lk, z, all);
  double err = 0;
  std::size_t n = 0;
  for (std::size_t k = 0; k < lk.valid.size(); ++k) {
    if (!lk.valid[k]) continue;
    for (int c = 0; c < 3; ++c) {
      const double d = back.data[c * 4096 + k] - x.data[c * 4096 + k];
      err += d * d;
      ++n;
    }
  }
  CHECK(err / double(n) < 5e-2);

  // Hole filling leaves no texel at the placeholder and copies existing colours only.
  Tensor stripes({3, 64, 64});
  for (std::size_t i = 0; i < stripes.numel(); ++i) stripes.data[i] = (i / 64) % 2 ? 0.9f : 0.1f;
  for (float v : target_uv_map(stripes, lk, 64).data) CHECK((v >= 0.1f - 1e-6f && v <= 0.9f + 1e-6f));
  CHECK_THROWS_AS(target_uv_map(Tensor({3, 32, 32}), lk, 64), diff::ShapeError);
}

TEST_CASE("cosine similarity loss contracts") {
  CHECK(cosine_similarity_loss(Tensor({2}, {1, 0}), Tensor({2}, {1, 0}), Tensor({2}, {0, 1})) == doctest::Approx(0.5));
  Tensor a({3}, {0.2f, -1.0f, 0.5f});
  CHECK(cosine_similarity_loss(a, a, a) == doctest::Approx(0.0).epsilon(1e-12));
  Tensor neg({3}, {-0.2f, 1.0f, -0.5f});
  CHECK(cosine_similarity_loss(a, neg, neg) == doctest::Approx(2.0));
  CHECK_THROWS_AS(cosine_similarity_loss(a, Tensor({3}), a), diff::NumericError);

  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = random_tensor(rng, {16}, -1, 1), y = random_tensor(rng, {16}, -1, 1), z = random_tensor(rng, {16}, -1, 1);
    const double base = cosine_similarity_loss(x, y, z);
    CHECK((base >= 0.0 && base <= 2.0));
    for (float s : {0.5f, 2.0f, 10.0f}) {
      Tensor xs = x, ys = y, zs = z;
      for (float& v : xs.data) v *= s;
      for (float& v : ys.data) v *= s;
      for (float& v : zs.data) v *= s;
      CHECK(std::abs(cosine_similarity_loss(xs, y, z) - base) < 1e-6);
      CHECK(std::abs(cosine_similarity_loss(x, ys, z) - base) < 1e-6);
      CHECK(std::abs(cosine_similarity_loss(x, y, zs) - base) < 1e-6);
    }
  }
}

TEST_CASE("cosine similarity loss gradient") {
  Rng rng(4);
  diff::TensorT<double> a({8}), b({8}), c({8});
  for (auto* t : {&a, &b, &c})
    for (double& v : t->data) v = rng.uniform(-1, 1);
  a.requires_grad = b.requires_grad = c.requires_grad = true;
  diff::GraphT<double> g;
  Var loss = cosine_similarity_loss(g, g.param(a), g.param(b), g.param(c));
  CHECK(diff::check_gradient(g, loss, a, 1e-6) < 1e-6);
  CHECK(diff::check_gradient(g, loss, b, 1e-6) < 1e-6);
  CHECK(diff::check_gradient(g, loss, c, 1e-6) < 1e-6);
}

TEST_CASE("gram matrix") {
  Tensor f({2, 2, 2}, {1, 1, 1, 1, 2, 2, 2, 2});
  const Tensor gm = gram_matrix(f);
  CHECK(gm.shape == diff::Shape{2, 2});
  // Unnormalized [[4, 8], [8, 16]] divided by C H W = 8.
  CHECK(gm.data == std::vector<float>{0.5f, 1.0f, 1.0f, 2.0f});
  for (float v : gram_matrix(Tensor({3, 4, 5})).data) CHECK(v == 0.0f);

  Rng rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor a = gram_matrix(random_tensor(rng, {6, 5, 4}, -1, 1));
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) CHECK(a.data[i * 6 + j] == a.data[j * 6 + i]);
    std::vector<double> x(6);
    for (double& v : x) v = rng.uniform(-1, 1);
    double q = 0;
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j) q += x[i] * a.data[i * 6 + j] * x[j];
    CHECK(q >= -1e-6);
  }
}

TEST_CASE("style loss contracts") {
  Rng rng(6);
  const uvgeom::Mask mask = uvgeom::make_mask(uvgeom::MaskKind::EyeNose);
  uvgeom::Mask none = mask;
  std::fill(none.grid.begin(), none.grid.end(), 0);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor a = random_tensor(rng, {3, 64, 64}), b = random_tensor(rng, {3, 64, 64});
    CHECK(style_loss(a, a, mask) == 0.0);
    const double ab = style_loss(a, b, mask);
    CHECK(ab > 0.0);
    CHECK(ab == doctest::Approx(style_loss(b, a, mask)).epsilon(1e-6));
    CHECK(style_loss(a, b, none) == 0.0);
    // Texels outside the mask do not matter.
    Tensor c = a;
    for (std::size_t i = 0; i < mask.grid.size(); ++i)
      if (!mask.grid[i])
        for (int ch = 0; ch < 3; ++ch) c.data[ch * 4096 + i] = float(rng.uniform());
    CHECK(style_loss(a, c, mask) == 0.0);
  }
}

TEST_CASE("full objective gradient on a one-sample batch") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const AttackProblem problem = toy_problem(seed);
    AttackConfig cfg = toy_attack();
    cfg.batch_size = 1;
    cfg.lambda_s = 0.5;
    cfg.seed = seed;
    const uvgeom::Mask mask = uvgeom::make_mask(cfg.mask, cfg.texture_resolution);
    RenderCache cache;
    const auto ctx = make_context(problem, mask).cast<double>();
    std::vector<SampleT<double>> batch;
    for (const Sample& s : draw_batch(cfg, problem, mask, 0, cache)) batch.push_back(s.cast<double>());
    REQUIRE(!batch[0].plan.pixels.empty());
    auto gen = make_uv_generator(seed).cast<double>();
    for (auto* p : radiance::param_list(gen)) p->requires_grad = true;
    diff::GraphT<double> g;
    const auto vars = nerftap_objective(g, gen, ctx, batch, cfg);
    Rng rng = Rng::stream(seed, "fd");
    for (auto* p : radiance::param_list(gen)) {
      std::vector<std::size_t> idx;
      for (int i = 0; i < 3; ++i) idx.push_back(rng.below(p->numel()));
      CHECK(diff::check_gradient(g, vars.loss, *p, 1e-5, idx) < 1e-3);
    }
  }
}

TEST_CASE("nerftap training: determinism and ablation equivalence") {
  const AttackProblem problem = toy_problem(1);
  AttackConfig cfg = toy_attack();
  RenderCache shared;
  const AttackArtifact a = train_attack(cfg, problem, shared);
  RenderCache fresh;
  const AttackArtifact b = train_attack(cfg, problem, fresh);
  CHECK(artifact_hash(a) == artifact_hash(b));
  const AttackArtifact c = train_attack(cfg, problem, shared);
  CHECK(artifact_hash(a) == artifact_hash(c));
  CHECK(shared.hits() > 0);
  REQUIRE(a.loss_curve.size() == 4);
  REQUIRE(a.texture);
  CHECK(uv_generator_forward(*a.generator, make_context(problem, uvgeom::make_mask(cfg.mask, 16)).target_uv).data ==
        a.texture->data);

  AttackConfig zero = cfg;
  zero.lambda_s = 0;
  AttackConfig off = cfg;
  off.use_style_loss = false;
  const AttackArtifact z = train_attack(zero, problem, shared);
  const AttackArtifact o = train_attack(off, problem, shared);
  CHECK(z.loss_curve == o.loss_curve);
  CHECK(z.texture->data == o.texture->data);
  CHECK(z.loss_curve == z.cosine_curve);
  CHECK(a.loss_curve[0] == doctest::Approx(a.cosine_curve[0] + cfg.lambda_s * a.style_curve[0]));
  for (double v : a.cosine_curve) CHECK((v >= 0 && v <= 2));
}

TEST_CASE("ablation switches change what the batch sees") {
  const AttackProblem problem = toy_problem(2);
  AttackConfig cfg = toy_attack();
  const uvgeom::Mask mask = uvgeom::make_mask(cfg.mask, 16);
  RenderCache cache;
  const auto full = draw_batch(cfg, problem, mask, 3, cache);
  AttackConfig frozen = cfg;
  frozen.use_view_synthesis = false;
  const auto fixed = draw_batch(frozen, problem, mask, 3, cache);
  const Tensor front = radiance::synthesize(problem.source.model, problem.source.pose);
  for (const Sample& s : fixed) CHECK(s.source_view.data == front.data);
  CHECK(full[0].source_view.data != front.data);
  AttackConfig flat = cfg;
  flat.use_2d_transform = false;
  for (const Sample& s : draw_batch(flat, problem, mask, 3, cache)) CHECK_FALSE(s.transform.has_value());
  for (const Sample& s : full) CHECK(s.transform.has_value());
  // The same seed gives the same poses whatever the other switches are.
  const auto again = draw_batch(flat, problem, mask, 3, cache);
  for (std::size_t i = 0; i < full.size(); ++i) CHECK(again[i].source_view.data == full[i].source_view.data);
}

TEST_CASE("training preconditions") {
  AttackProblem problem = toy_problem(3);
  AttackConfig cfg = toy_attack();
  RenderCache cache;
  AttackProblem missing = problem;
  missing.target.model.w = Tensor();
  CHECK_THROWS_AS(train_attack(cfg, missing, cache), std::invalid_argument);
  AttackConfig bad = cfg;
  bad.lr = 0;
  CHECK_THROWS_AS(train_attack(bad, problem, cache), std::invalid_argument);
  bad = cfg;
  bad.lambda_s = -1;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = cfg;
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  AttackProblem poisoned = problem;
  poisoned.embedder.conv_b[0].data[0] = std::nanf("");
  CHECK_THROWS_WITH_AS(train_attack(cfg, poisoned, cache), doctest::Contains("step 0"), diff::NumericError);
}

TEST_CASE("baselines") {
  const AttackProblem problem = toy_problem(4);
  AttackConfig cfg = toy_attack();
  BaselineConfig b;

  const AttackArtifact fgsm = run_baseline(BaselineMethod::Fgsm, cfg, problem, b);
  REQUIRE(fgsm.image);
  const Tensor& x0 = problem.source.image;
  int moved = 0;
  for (std::size_t i = 0; i < x0.numel(); ++i) {
    const float x = fgsm.image->data[i];
    const double d = std::abs(double(x) - x0.data[i]);
    CHECK(d <= b.epsilon + 1e-6);
    if (d > 0 && x > 0.0f && x < 1.0f) {
      CHECK(d == doctest::Approx(b.epsilon).epsilon(1e-5));
      ++moved;
    }
  }
  CHECK(moved > 0);

  BaselineConfig one = b;
  one.iterations = 1;
  const AttackArtifact mim1 = run_baseline(BaselineMethod::Mim, cfg, problem, one);
  CHECK(mim1.image->data == fgsm.image->data);

  for (BaselineMethod m : {BaselineMethod::Mim, BaselineMethod::Dim}) {
    const AttackArtifact r = run_baseline(m, cfg, problem, b);
    CHECK(r.loss_curve.size() == 10);
    for (std::size_t i = 0; i < x0.numel(); ++i) {
      CHECK(std::abs(double(r.image->data[i]) - x0.data[i]) <= b.epsilon + 1e-6);
      CHECK((r.image->data[i] >= 0.0f && r.image->data[i] <= 1.0f));
    }
  }

  BaselineConfig few = b;
  few.patch_steps = 20;
  const AttackArtifact pgd = run_baseline(BaselineMethod::PgdPatch, cfg, problem, few);
  REQUIRE(pgd.texture);
  const uvgeom::Mask mask = uvgeom::make_mask(cfg.mask, 16);
  const Tensor zbar = make_context(problem, mask).target_uv;
  bool changed = false;
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < mask.grid.size(); ++i) {
      const float v = pgd.texture->data[c * 256 + i], v0 = zbar.data[c * 256 + i];
      if (!mask.grid[i]) CHECK(v == v0);
      else changed |= v != v0;
      CHECK((v >= 0.0f && v <= 1.0f));
    }
  CHECK(changed);
  CHECK(pgd.loss_curve.back() < pgd.loss_curve.front());
  CHECK(run_baseline(BaselineMethod::PgdPatch, cfg, problem, few).texture->data == pgd.texture->data);

  CHECK(parse_baseline("dim") == BaselineMethod::Dim);
  CHECK(baseline_name(BaselineMethod::PgdPatch) == "pgd_patch");
  CHECK_THROWS_AS(parse_baseline("tim"), std::invalid_argument);
}
