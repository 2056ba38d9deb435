#include <doctest.h>

#include <cmath>

#include "nerftap/diff/gradcheck.hpp"
#include "nerftap/radiance/field.hpp"
#include "nerftap/radiance/model.hpp"

using namespace nerftap;
using namespace nerftap::radiance;
using diff::Tensor;
using diff::TensorT;
using G = diff::GraphT<double>;
using TD = TensorT<double>;

namespace {

RadianceConfig toy_config() {
  RadianceConfig c;
  c.plane_resolution = 16;
  c.render_resolution = 8;
  c.n_samples = 16;
  return c;
}

Var contract(G& g, Var out, std::uint64_t seed) {
  Rng rng(seed);
  TD w(g.shape(out));
  for (double& v : w.data) v = rng.uniform(-1, 1);
  return g.sum(g.mul(out, g.constant(w)));
}

double sq_dist(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += double(a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
  return s;
}

double bilinear_oracle(const float* plane, int R, double col, double row) {
  const int x0 = std::min(int(col), R - 2), y0 = std::min(int(row), R - 2);
  const double fx = col - x0, fy = row - y0;
  double v = 0;
  for (int dy = 0; dy < 2; ++dy)
    for (int dx = 0; dx < 2; ++dx) {
      const double wgt = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy);
      v += wgt * plane[(y0 + dy) * R + x0 + dx];
    }
  return v;
}

FieldSample constant_field(double sigma, Vec3 color) {
  FieldSample s;
  s.sigma = sigma;
  s.color = color;
  return s;
}

}  // namespace

TEST_CASE("pose validation") {
  CHECK_NOTHROW(validate(Pose{45, -30}));
  CHECK_THROWS(validate(Pose{46, 0}));
  CHECK_THROWS(validate(Pose{0, 31}));
  CHECK_THROWS(validate(Pose{0, 0, 0.9}));
}

TEST_CASE("zero latent yields the reproducible bias response") {
  RadianceModel m = make_radiance_model(RadianceConfig{}, 3);
  m.w = Tensor({32});
  Tensor a = generate_planes(m);
  CHECK(generate_planes(m).data == a.data);
  CHECK(a.shape == diff::Shape{24, 32, 32});
  RadianceModel other = make_radiance_model(RadianceConfig{}, 3);
  other.w = Tensor({32});
  CHECK(generate_planes(other).data == a.data);
}

TEST_CASE("different generator seeds give different planes") {
  RadianceModel a = make_radiance_model(RadianceConfig{}, 1);
  RadianceModel b = make_radiance_model(RadianceConfig{}, 2);
  b.w = a.w;
  CHECK(sq_dist(generate_planes(a), generate_planes(b)) > 0);
}

TEST_CASE("planes are differentiable in w") {
  auto md = make_radiance_model(toy_config(), 4).cast<double>();
  md.w.requires_grad = true;
  G g;
  auto gv = bind_generator(g, md.g);
  Var planes = triplane_generate(g, md.config, g.param(md.w), gv);
  Var loss = contract(g, planes, 11);
  CHECK(diff::check_gradient(g, loss, md.w, 1e-4) < 1e-3);
  CHECK_THROWS_AS(triplane_generate(g, md.config, g.constant(TD({5})), gv), diff::ShapeError);
}

TEST_CASE("sample_point on constant planes") {
  Tensor planes({3 * 2, 4, 4}, 0.25f);
  auto f = sample_point(planes, {0.3, -0.7, 0.1});
  CHECK(f.size() == 2);
  CHECK(f[0] == doctest::Approx(0.75));
  CHECK(f[1] == doctest::Approx(0.75));
  bool clamped = false;
  sample_point(planes, {1.5, 0, 0}, &clamped);
  CHECK(clamped);
  sample_point(planes, {0.5, 0, 0}, &clamped);
  CHECK_FALSE(clamped);
}

TEST_CASE("sample_point at a lattice node and against a bilinear oracle") {
  const int C = 3, R = 5;
  Rng rng(21);
  Tensor planes({3 * C, R, R});
  for (float& v : planes.data) v = float(rng.uniform(-1, 1));
  // (x, y, z) = (-0.5, 0, 0.5) lands on lattice nodes 1, 2, 3 when R = 5.
  auto node = sample_point(planes, {-0.5, 0.0, 0.5});
  for (int c = 0; c < C; ++c) {
    const float expect = planes.data[(0 * C + c) * R * R + 2 * R + 1] + planes.data[(1 * C + c) * R * R + 3 * R + 1] +
                         planes.data[(2 * C + c) * R * R + 3 * R + 2];
    CHECK(node[c] == doctest::Approx(expect).epsilon(1e-6));
  }
  for (int trial = 0; trial < 200; ++trial) {
    Vec3 p{rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)};
    auto f = sample_point(planes, p);
    auto grid = [R](double v) { return (v + 1) * 0.5 * (R - 1); };
    const std::array<std::array<double, 2>, 3> at{{{grid(p[0]), grid(p[1])}, {grid(p[0]), grid(p[2])}, {grid(p[1]), grid(p[2])}}};
    for (int c = 0; c < C; ++c) {
      double expect = 0;
      for (int pl = 0; pl < 3; ++pl) expect += bilinear_oracle(planes.data.data() + (pl * C + c) * R * R, R, at[pl][0], at[pl][1]);
      CHECK(std::abs(f[c] - expect) < 1e-6);
    }
  }
}

TEST_CASE("empty space leaves the background") {
  Ray ray{{0, 0, 3}, {0, 0, -1}};
  auto r = integrate_ray([](const Vec3&) { return constant_field(0.0, {1, 0, 0}); }, ray, 1, 5, 32, {1, 1, 1});
  CHECK(r.alpha == 0.0);
  CHECK(r.rgb == Vec3{1, 1, 1});
}

TEST_CASE("constant density matches the closed form") {
  Ray ray{{0, 0, 0}, {1, 0, 0}};
  for (double sigma : {0.5, 1.0, 2.0}) {
    auto r = integrate_ray([sigma](const Vec3&) { return constant_field(sigma, {1, 0, 0}); }, ray, 0, 2, 256, {1, 1, 1});
    const double alpha = 1 - std::exp(-sigma * 2);
    CHECK(std::abs(r.alpha - alpha) < 1e-3);
    CHECK(r.rgb[0] == doctest::Approx(alpha + (1 - alpha)).epsilon(1e-9));
    CHECK(std::abs(r.rgb[1] - (1 - alpha)) < 1e-3);
  }
}

TEST_CASE("quadrature converges when doubling the sample count") {
  Ray ray{{0, 0, 3}, {0, 0, -1}};
  auto field = [](const Vec3& p) {
    FieldSample s;
    s.sigma = 2.0 * std::exp(-p[2] * p[2] * 4);
    s.color = {0.5 + 0.5 * std::sin(3 * p[2]), 0.2, 0.8};
    return s;
  };
  auto a = integrate_ray(field, ray, 1, 5, 64, {1, 1, 1});
  auto b = integrate_ray(field, ray, 1, 5, 128, {1, 1, 1});
  for (int c = 0; c < 3; ++c) CHECK(std::abs(a.rgb[c] - b.rgb[c]) < 1e-2);
}

TEST_CASE("ray preconditions and numeric errors") {
  Ray ray{{0, 0, 3}, {0, 0, -1}};
  auto field = [](const Vec3&) { return constant_field(1.0, {1, 1, 1}); };
  CHECK_THROWS(integrate_ray(field, ray, 2, 1, 16, {1, 1, 1}));
  CHECK_THROWS(integrate_ray(field, ray, 1, 2, 1, {1, 1, 1}));
  auto bad = [](const Vec3&) { return constant_field(NAN, {1, 1, 1}); };
  CHECK_THROWS_AS(integrate_ray(bad, ray, 1, 2, 4, {1, 1, 1}), diff::NumericError);
  RadianceModel m = make_radiance_model(RadianceConfig{}, 1);
  Tensor planes = generate_planes(m);
  CHECK_THROWS(render_ray(m, planes, {0, 0, 3}, {0, 0, -2}, 1.7, 3.7, 16));
}

TEST_CASE("model rays: weights and transmittance are well formed") {
  RadianceModel m = make_radiance_model(RadianceConfig{}, 5);
  Tensor planes = generate_planes(m);
  Rng rng(8);
  for (int i = 0; i < 50; ++i) {
    Camera cam = make_camera({rng.uniform(-45, 45), rng.uniform(-30, 30)}, m.config.tan_half_fov);
    Ray ray = pixel_ray(cam, int(rng.below(32)), int(rng.below(32)), 32);
    auto r = render_ray(m, planes, ray.origin, ray.direction, 1.7, 3.7, 48);
    double sum = 0;
    for (std::size_t k = 0; k < r.weights.size(); ++k) {
      CHECK(r.weights[k] >= 0);
      if (k) CHECK(r.transmittance[k] <= r.transmittance[k - 1]);
      sum += r.weights[k];
    }
    CHECK(sum <= 1.0 + 1e-12);
  }
}

TEST_CASE("camera faces the origin with x to the right") {
  Camera c = make_camera({0, 0}, 0.3);
  CHECK(c.origin[2] == doctest::Approx(2.7));
  CHECK(c.right[0] == doctest::Approx(1));
  CHECK(c.up[1] == doctest::Approx(1));
  Ray centre = pixel_ray(c, 0, 0, 2);
  CHECK(centre.direction[0] < 0);
  CHECK(centre.direction[1] > 0);
}

TEST_CASE("graph render agrees with per-ray quadrature") {
  RadianceModel m = make_radiance_model(RadianceConfig{}, 6);
  const Pose pose{12, -7};
  RenderOutput out = render(m, pose);
  Tensor planes = generate_planes(m);
  Camera cam = make_camera(pose, m.config.tan_half_fov);
  const int r = m.config.render_resolution;
  for (int row = 0; row < r; row += 3) {
    for (int col = 0; col < r; col += 3) {
      Ray ray = pixel_ray(cam, row, col, r);
      auto rr = render_ray(m, planes, ray.origin, ray.direction, m.config.near, m.config.far, m.config.n_samples);
      for (int c = 0; c < 3; ++c) CHECK(std::abs(out.x_c.data[(c * r + row) * r + col] - rr.rgb[c]) < 1e-4);
      for (int f = 0; f < m.config.feature_channels; ++f)
        CHECK(std::abs(out.x_f.data[(f * r + row) * r + col] - rr.feat[f]) < 1e-4);
    }
  }
}

TEST_CASE("render_view of an empty field is the background") {
  RadianceModel m = make_radiance_model(RadianceConfig{}, 7);
  const int F = m.config.feature_channels;
  m.decoder.fc2_b.data[3] = -1000.0f;
  for (int k = 0; k < m.config.decoder_hidden; ++k) m.decoder.fc2_w.data[k * (4 + F) + 3] = 0.0f;
  RenderOutput out = render(m, {0, 0});
  for (float v : out.x_c.data) CHECK(v == 1.0f);
}

TEST_CASE("views depend on yaw and are deterministic") {
  RadianceModel m = make_radiance_model(RadianceConfig{}, 9);
  RenderOutput a = render(m, {15, 0});
  RenderOutput b = render(m, {-15, 0});
  CHECK(sq_dist(a.x_c, b.x_c) > 0);
  RenderOutput again = render(make_radiance_model(RadianceConfig{}, 9), {15, 0});
  CHECK(again.x_c.data == a.x_c.data);
  CHECK(again.x_cf.data == a.x_cf.data);
  CHECK(a.x_c.shape == diff::Shape{3, 32, 32});
  CHECK(a.x_f.shape == diff::Shape{4, 32, 32});
  CHECK(a.x_cf.shape == diff::Shape{3, 64, 64});
  for (float v : a.x_c.data) CHECK((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("super resolution with zero weights is a constant image") {
  RadianceConfig cfg;
  diff::Graph g;
  Tensor xc({3, 4, 4}, 0.3f), xf({4, 4, 4}, -0.2f);
  Tensor w1({8, 7, 3, 3}), b1({8}, 0.5f), w2({3, 8, 3, 3}), b2({3}, 0.7f);
  SuperResVars sr{g.param(w1), g.param(b1), g.param(w2), g.param(b2)};
  Var out = super_resolve(g, cfg, g.param(xc), g.param(xf), sr, NoiseVars{});
  CHECK(g.shape(out) == diff::Shape{3, 8, 8});
  const float expect = 1.0f / (1.0f + std::exp(-0.7f));
  for (float v : g.value(out).data) CHECK(v == doctest::Approx(expect));
}

TEST_CASE("super resolution output range and gradient in x_c") {
  auto md = make_radiance_model(toy_config(), 10).cast<double>();
  Rng rng(4);
  TD xc({3, 8, 8}), xf({4, 8, 8});
  for (double& v : xc.data) v = rng.uniform(-2, 3);
  for (double& v : xf.data) v = rng.uniform(-2, 2);
  xc.requires_grad = true;
  G g;
  Var out = super_resolve(g, md.config, g.param(xc), g.param(xf), bind_superres(g, md.superres), bind_noise(g, md.noise));
  for (double v : g.value(out).data) CHECK((v >= 0.0 && v <= 1.0));
  Var loss = contract(g, out, 5);
  CHECK(diff::check_gradient(g, loss, xc, 1e-4) < 1e-3);
}

TEST_CASE("synthesis: determinism, latent sensitivity, view sweep") {
  RadianceModel m = make_radiance_model(RadianceConfig{}, 12);
  Tensor a = synthesize(m, {0, 0});
  CHECK(synthesize(m, {0, 0}).data == a.data);
  RadianceModel other = m;
  Rng rng(1);
  other.w = random_latent(m.config, rng);
  CHECK(sq_dist(a, synthesize(other, {0, 0})) > 0);
  std::vector<Tensor> sweep;
  for (double yaw : {-30.0, -15.0, 0.0, 15.0, 30.0}) sweep.push_back(synthesize(m, {yaw, 0}));
  for (std::size_t i = 0; i < sweep.size(); ++i)
    for (std::size_t j = i + 1; j < sweep.size(); ++j) CHECK(sq_dist(sweep[i], sweep[j]) > 0);
  for (float v : a.data) CHECK((v >= 0.0f && v <= 1.0f));
}

TEST_CASE("mean pixel is differentiable end to end in w") {
  RadianceConfig cfg;
  cfg.render_resolution = 16;
  auto md = make_radiance_model(cfg, 13).cast<double>();
  md.w.requires_grad = true;
  G g;
  ModelVars v = bind_model(g, md);
  Var loss = g.mean(synthesize(g, cfg, v, Pose{10, 5}));
  CHECK(diff::check_gradient(g, loss, md.w, 1e-4) < 1e-3);
}

TEST_CASE("model tensors round-trip through the blob layout") {
  RadianceModel m = make_radiance_model(RadianceConfig{}, 14);
  auto map = to_tensor_map(m);
  CHECK(map.count("w") == 1);
  CHECK(map.count("g.fc2.w") == 1);
  CHECK(map.count("decoder.fc1.w") == 1);
  CHECK(map.count("superres.conv2.b") == 1);
  auto back = from_tensor_map(m.config, diff::decode_blob(diff::encode_blob(map)));
  CHECK(synthesize(back, {5, 5}).data == synthesize(m, {5, 5}).data);
  CHECK(generator_hash(back.g) == generator_hash(m.g));
  map["g.fc1.w"] = Tensor({2, 2});
  CHECK_THROWS_AS(from_tensor_map(m.config, map), diff::ShapeError);
}

TEST_CASE("latent mean is the average of seeded draws") {
  RadianceConfig cfg;
  Tensor a = latent_mean(cfg, 3);
  CHECK(a.data == latent_mean(cfg, 3).data);
  for (float v : a.data) CHECK(std::abs(v) < 0.15f);
}
