#include "nerftap/radiance/model.hpp"

#include <cmath>
#include <cstring>
#include <optional>
#include <stdexcept>

#include "nerftap/radiance/field.hpp"
#include "nerftap/util/hash.hpp"

namespace nerftap::radiance {

using diff::Shape;
using diff::Tensor;

void validate(const Pose& pose) {
  if (!std::isfinite(pose.yaw_deg) || std::abs(pose.yaw_deg) > Pose::kMaxYaw) {
    throw std::invalid_argument("pose yaw " + std::to_string(pose.yaw_deg) + " outside [-45, 45]");
  }
  if (!std::isfinite(pose.pitch_deg) || std::abs(pose.pitch_deg) > Pose::kMaxPitch) {
    throw std::invalid_argument("pose pitch " + std::to_string(pose.pitch_deg) + " outside [-30, 30]");
  }
  if (!(pose.camera_distance > 1.0)) throw std::invalid_argument("camera distance must exceed 1");
}

void RadianceConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw std::invalid_argument(std::string("radiance.") + name + " must be positive");
  };
  positive(latent_dim, "latent_dim");
  positive(generator_hidden, "generator_hidden");
  positive(plane_seed_resolution, "plane_seed_resolution");
  positive(plane_channels, "plane_channels");
  positive(decoder_hidden, "decoder_hidden");
  positive(feature_channels, "feature_channels");
  positive(render_resolution, "render_resolution");
  positive(superres_hidden, "superres_hidden");
  if (plane_resolution < 2 || plane_resolution % plane_seed_resolution != 0) {
    throw std::invalid_argument("radiance.plane_resolution must be a multiple of plane_seed_resolution");
  }
  if (superres_hidden < 3) throw std::invalid_argument("radiance.superres_hidden must be at least 3");
  if (n_samples < 2) throw std::invalid_argument("radiance.n_samples must be at least 2");
  if (!(near < far) || near < 0) throw std::invalid_argument("radiance.near must be non-negative and below far");
  if (!(tan_half_fov > 0)) throw std::invalid_argument("radiance.tan_half_fov must be positive");
  if (!(support_radius > 0)) throw std::invalid_argument("radiance.support_radius must be positive");
  for (double a : shape_axes) {
    if (!(a > 0)) throw std::invalid_argument("radiance.shape_axes must be positive");
  }
}

namespace {

Tensor normal_tensor(Rng& rng, Shape s, double stddev) {
  Tensor t(std::move(s));
  rng.fill_normal(t.data, stddev);
  return t;
}

void add_center_tap(Tensor& w, int out, int in, float v) {
  const int ci = w.shape[1], k = w.shape[2];
  w.data[((std::size_t(out) * ci + in) * k + k / 2) * k + k / 2] += v;
}

}  // namespace

Tensor random_latent(const RadianceConfig& config, Rng& rng) {
  return normal_tensor(rng, {config.latent_dim}, 1.0);
}

Tensor latent_mean(const RadianceConfig& config, std::uint64_t seed, int count) {
  if (count < 1) throw std::invalid_argument("latent_mean needs at least one sample");
  Rng rng = Rng::stream(seed, "latent-mean");
  std::vector<double> acc(config.latent_dim, 0.0);
  for (int i = 0; i < count; ++i) {
    for (double& a : acc) a += rng.normal();
  }
  Tensor out({config.latent_dim});
  for (int k = 0; k < config.latent_dim; ++k) out.data[k] = static_cast<float>(acc[k] / count);
  return out;
}

NoiseBank zero_noise(const RadianceConfig& config) {
  const int r = config.output_resolution();
  NoiseBank n;
  n.layers[0] = Tensor({r, r});
  n.layers[1] = Tensor({r, r});
  return n;
}

RadianceModel make_radiance_model(const RadianceConfig& config, std::uint64_t seed) {
  config.validate();
  const int L = config.latent_dim, H = config.generator_hidden, C = config.plane_channels;
  const int s = config.plane_seed_resolution, D = config.decoder_hidden, F = config.feature_channels;
  const int SH = config.superres_hidden;

  RadianceModel m;
  m.config = config;
  Rng lat = Rng::stream(seed, "latent");
  m.w = random_latent(config, lat);

  Rng rg = Rng::stream(seed, "generator");
  m.g.fc1_w = normal_tensor(rg, {L, H}, std::sqrt(2.0 / L));
  m.g.fc1_b = normal_tensor(rg, {H}, 0.1);
  m.g.fc2_w = normal_tensor(rg, {H, 3 * C * s * s}, 1.0 / std::sqrt(double(H)));
  m.g.fc2_b = normal_tensor(rg, {3 * C * s * s}, 0.3);
  for (int i = 0; i < 3; ++i) {
    m.g.conv_w[i] = normal_tensor(rg, {C, C, 3, 3}, 1.0 / std::sqrt(9.0 * C));
    for (int c = 0; c < C; ++c) add_center_tap(m.g.conv_w[i], c, c, 1.0f);
    m.g.conv_b[i] = normal_tensor(rg, {C}, 0.1);
  }

  Rng rd = Rng::stream(seed, "decoder");
  m.decoder.fc1_w = normal_tensor(rd, {C, D}, 0.5 / std::sqrt(double(C)));
  m.decoder.fc1_b = normal_tensor(rd, {D}, 0.1);
  m.decoder.fc2_w = normal_tensor(rd, {D, 4 + F}, 1.0 / std::sqrt(double(D)));
  for (int k = 0; k < D; ++k) m.decoder.fc2_w.data[std::size_t(k) * (4 + F) + 3] *= 0.5f;
  m.decoder.fc2_b = Tensor({4 + F});
  // Centre the colour logits on the mean softplus activation.
  for (int c = 0; c < 4 + F; ++c) {
    double col = 0;
    for (int k = 0; k < D; ++k) col += m.decoder.fc2_w.data[std::size_t(k) * (4 + F) + c];
    m.decoder.fc2_b.data[c] = static_cast<float>(-0.9 * col);
  }

  Rng rs = Rng::stream(seed, "superres");
  m.superres.conv1_w = normal_tensor(rs, {SH, 3 + F, 3, 3}, 0.03);
  for (int c = 0; c < 3; ++c) add_center_tap(m.superres.conv1_w, c, c, 1.0f);
  m.superres.conv1_b = Tensor({SH});
  m.superres.conv2_w = normal_tensor(rs, {3, SH, 3, 3}, 0.02);
  for (int c = 0; c < 3; ++c) add_center_tap(m.superres.conv2_w, c, c, 8.0f);
  m.superres.conv2_b = Tensor({3}, -4.0f);

  m.noise = zero_noise(config);
  return m;
}

diff::TensorMap to_tensor_map(const RadianceModel& model) {
  diff::TensorMap out;
  model.visit([&](const std::string& name, const Tensor& t) {
    Tensor c(t.shape, t.data);
    out.emplace(name, std::move(c));
  });
  return out;
}

RadianceModel from_tensor_map(const RadianceConfig& config, const diff::TensorMap& tensors) {
  RadianceModel m = make_radiance_model(config, 0);
  m.visit([&](const std::string& name, Tensor& t) { t.data = diff::blob_get(tensors, name, t.shape).data; });
  return m;
}

std::string generator_hash(const GeneratorParams& g) {
  std::vector<std::uint8_t> bytes;
  g.visit([&](const std::string& name, const Tensor& t) {
    bytes.insert(bytes.end(), name.begin(), name.end());
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data.data());
    bytes.insert(bytes.end(), p, p + t.data.size() * sizeof(float));
  });
  return sha256_hex(bytes);
}

// ---------------------------------------------------------------------------

template <class T>
Var triplane_generate(GraphT<T>& graph, const RadianceConfig& config, Var w, const GeneratorVars& g) {
  const int L = config.latent_dim, C = config.plane_channels, s = config.plane_seed_resolution;
  if (graph.value(w).numel() != std::size_t(L)) throw diff::ShapeError("triplane_generate.w", {L}, graph.shape(w));
  Var x = graph.reshape(w, {1, L});
  Var h = graph.leaky_relu(graph.linear(x, g.fc1_w, g.fc1_b));
  Var seedmap = graph.reshape(graph.linear(h, g.fc2_w, g.fc2_b), {3 * C, s, s});
  Var up = graph.upsample_bilinear(seedmap, config.plane_resolution / s);
  std::array<Var, 3> planes;
  for (int i = 0; i < 3; ++i) planes[i] = graph.conv2d(graph.slice(up, i * C, (i + 1) * C), g.conv_w[i], g.conv_b[i]);
  return graph.concat({planes[0], planes[1], planes[2]});
}

template <class T>
RenderVars render_view(GraphT<T>& graph, const RadianceConfig& config, Var planes, const DecoderVars& decoder,
                       const Pose& pose) {
  validate(pose);
  const int C = config.plane_channels, R = config.plane_resolution, F = config.feature_channels;
  const int r = config.render_resolution, S = config.n_samples;
  const int rays = r * r;
  const Shape want{3 * C, R, R};
  if (graph.shape(planes) != want) throw diff::ShapeError("render_view.planes", want, graph.shape(planes));

  std::optional<Rng> jitter;
  if (config.jitter) {
    std::uint64_t bits[2];
    std::memcpy(&bits[0], &pose.yaw_deg, 8);
    std::memcpy(&bits[1], &pose.pitch_deg, 8);
    jitter.emplace(Rng::stream(bits[0] ^ (bits[1] * 0x9e3779b97f4a7c15ull), "ray-jitter"));
  }

  const Camera cam = make_camera(pose, config.tan_half_fov);
  std::vector<int> active;
  std::array<std::vector<T>, 3> coords;
  std::vector<T> prior;
  for (int row = 0; row < r; ++row) {
    for (int col = 0; col < r; ++col) {
      const Ray ray = pixel_ray(cam, row, col, r);
      const auto ts = sample_depths(config.near, config.far, S, jitter ? &*jitter : nullptr);
      for (int k = 0; k < S; ++k) {
        Vec3 p;
        for (int a = 0; a < 3; ++a) p[a] = ray.origin[a] + ts[k] * ray.direction[a];
        if (!in_support(config, p)) continue;
        active.push_back((row * r + col) * S + k);
        const auto pc = plane_coords(p, R);
        for (int pl = 0; pl < 3; ++pl) {
          coords[pl].push_back(T(pc[pl][0]));
          coords[pl].push_back(T(pc[pl][1]));
        }
        prior.push_back(T(density_prior(config, p)));
      }
    }
  }

  const T delta = T((config.far - config.near) / S);
  std::vector<T> bg(config.background.begin(), config.background.end());
  Var comp;
  if (active.empty()) {
    Var zd = graph.constant(TensorT<T>({rays, S}));
    Var zc = graph.constant(TensorT<T>({rays * S, 3 + F}));
    comp = graph.volume_composite(zd, zc, delta, bg);
  } else {
    const int A = static_cast<int>(active.size());
    Var feat;
    for (int pl = 0; pl < 3; ++pl) {
      Var at = graph.constant(TensorT<T>({A, 2}, std::move(coords[pl])));
      Var s = graph.grid_sample(graph.slice(planes, pl * C, (pl + 1) * C), at);
      feat = pl == 0 ? s : graph.add(feat, s);
    }
    Var h = graph.softplus(graph.linear(graph.transpose(feat), decoder.fc1_w, decoder.fc1_b));
    Var o = graph.linear(h, decoder.fc2_w, decoder.fc2_b);
    Var color = graph.sigmoid(graph.slice_cols(o, 0, 3));
    Var sigma = graph.softplus(graph.add(graph.slice_cols(o, 3, 4), graph.constant(TensorT<T>({A, 1}, std::move(prior)))));
    Var extra = graph.slice_cols(o, 4, 4 + F);
    Var cf = graph.scatter_rows(graph.concat_cols({color, extra}), active, rays * S);
    Var density = graph.reshape(graph.scatter_rows(sigma, active, rays * S), {rays, S});
    comp = graph.volume_composite(density, cf, delta, bg);
  }
  Var chw = graph.transpose(comp);
  return {graph.reshape(graph.slice(chw, 0, 3), {3, r, r}), graph.reshape(graph.slice(chw, 3, 3 + F), {F, r, r})};
}

template <class T>
Var super_resolve(GraphT<T>& graph, const RadianceConfig& config, Var x_c, Var x_f, const SuperResVars& sr,
                  const NoiseVars& noise) {
  const Shape& sc = graph.shape(x_c);
  const Shape& sf = graph.shape(x_f);
  if (sc.size() != 3 || sc[0] != 3) throw diff::ShapeError("super_resolve.x_c", {3, -1, -1}, sc);
  if (sf.size() != 3 || sf[1] != sc[1] || sf[2] != sc[2]) throw diff::ShapeError("super_resolve.x_f", {-1, sc[1], sc[2]}, sf);
  (void)config;
  Var x = graph.upsample_bilinear(graph.concat({x_c, x_f}), 2);
  Var h = graph.conv2d(x, sr.conv1_w, sr.conv1_b);
  if (noise.layers[0].valid()) h = graph.add_plane(h, noise.layers[0]);
  h = graph.leaky_relu(h);
  Var o = graph.conv2d(h, sr.conv2_w, sr.conv2_b);
  if (noise.layers[1].valid()) o = graph.add_plane(o, noise.layers[1]);
  return graph.sigmoid(o);
}

template <class T>
Var synthesize(GraphT<T>& graph, const RadianceConfig& config, const ModelVars& vars, const Pose& pose) {
  Var planes = triplane_generate(graph, config, vars.w, vars.g);
  RenderVars rv = render_view(graph, config, planes, vars.decoder, pose);
  return super_resolve(graph, config, rv.x_c, rv.x_f, vars.superres, vars.noise);
}

template Var triplane_generate<float>(GraphT<float>&, const RadianceConfig&, Var, const GeneratorVars&);
template Var triplane_generate<double>(GraphT<double>&, const RadianceConfig&, Var, const GeneratorVars&);
template RenderVars render_view<float>(GraphT<float>&, const RadianceConfig&, Var, const DecoderVars&, const Pose&);
template RenderVars render_view<double>(GraphT<double>&, const RadianceConfig&, Var, const DecoderVars&, const Pose&);
template Var super_resolve<float>(GraphT<float>&, const RadianceConfig&, Var, Var, const SuperResVars&, const NoiseVars&);
template Var super_resolve<double>(GraphT<double>&, const RadianceConfig&, Var, Var, const SuperResVars&,
                                   const NoiseVars&);
template Var synthesize<float>(GraphT<float>&, const RadianceConfig&, const ModelVars&, const Pose&);
template Var synthesize<double>(GraphT<double>&, const RadianceConfig&, const ModelVars&, const Pose&);

// ---------------------------------------------------------------------------

RenderOutput render(const RadianceModel& model, const Pose& pose) {
  diff::Graph graph;
  ModelVars v = bind_model(graph, model);
  Var planes = triplane_generate(graph, model.config, v.w, v.g);
  RenderVars rv = render_view(graph, model.config, planes, v.decoder, pose);
  Var x = super_resolve(graph, model.config, rv.x_c, rv.x_f, v.superres, v.noise);
  return {graph.value(rv.x_c), graph.value(rv.x_f), graph.value(x)};
}

Tensor synthesize(const RadianceModel& model, const Pose& pose) {
  diff::Graph graph;
  ModelVars v = bind_model(graph, model);
  return graph.value(synthesize(graph, model.config, v, pose));
}

Tensor generate_planes(const RadianceModel& model) {
  diff::Graph graph;
  Var w = graph.param(model.w);
  return graph.value(triplane_generate(graph, model.config, w, bind_generator(graph, model.g)));
}

}  // namespace nerftap::radiance
