#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "nerftap/diff/blob.hpp"
#include "nerftap/diff/graph.hpp"
#include "nerftap/util/rng.hpp"

namespace nerftap::radiance {

using diff::GraphT;
using diff::TensorT;
using diff::Var;

struct Pose {
  double yaw_deg = 0.0;
  double pitch_deg = 0.0;
  double camera_distance = 2.7;

  static constexpr double kMaxYaw = 45.0;
  static constexpr double kMaxPitch = 30.0;
};

/// Throws std::invalid_argument when angles leave their ranges or the camera sits inside the unit cube.
void validate(const Pose& pose);

struct RadianceConfig {
  int latent_dim = 32;
  int generator_hidden = 64;
  int plane_seed_resolution = 8;
  int plane_channels = 8;
  int plane_resolution = 32;
  int decoder_hidden = 16;
  int feature_channels = 4;
  int render_resolution = 32;
  int superres_hidden = 8;
  int n_samples = 48;
  double near = 1.7;
  double far = 3.7;
  double tan_half_fov = 0.3;
  bool jitter = false;
  std::array<double, 3> background{1.0, 1.0, 1.0};
  // Head-shaped bounding prior added to the raw density.
  std::array<double, 3> shape_axes{0.5, 0.65, 0.4};
  double prior_gain = 30.0;
  double prior_offset = 0.0;
  // Density vanishes beyond this multiple of the prior radius.
  double support_radius = 1.2;

  int output_resolution() const { return 2 * render_resolution; }
  void validate() const;
};

template <class T>
struct GeneratorParamsT {
  TensorT<T> fc1_w, fc1_b, fc2_w, fc2_b;
  std::array<TensorT<T>, 3> conv_w, conv_b;

  using value_type = T;
  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }
  template <class S, class F>
  static void visit_impl(S& s, F& f) {
    f("g.fc1.w", s.fc1_w);
    f("g.fc1.b", s.fc1_b);
    f("g.fc2.w", s.fc2_w);
    f("g.fc2.b", s.fc2_b);
    for (int i = 0; i < 3; ++i) {
      f("g.conv" + std::to_string(i) + ".w", s.conv_w[i]);
      f("g.conv" + std::to_string(i) + ".b", s.conv_b[i]);
    }
  }
};

template <class T>
struct DecoderParamsT {
  TensorT<T> fc1_w, fc1_b, fc2_w, fc2_b;

  using value_type = T;
  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }
  template <class S, class F>
  static void visit_impl(S& s, F& f) {
    f("decoder.fc1.w", s.fc1_w);
    f("decoder.fc1.b", s.fc1_b);
    f("decoder.fc2.w", s.fc2_w);
    f("decoder.fc2.b", s.fc2_b);
  }
};

template <class T>
struct SuperResParamsT {
  TensorT<T> conv1_w, conv1_b, conv2_w, conv2_b;

  using value_type = T;
  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }
  template <class S, class F>
  static void visit_impl(S& s, F& f) {
    f("superres.conv1.w", s.conv1_w);
    f("superres.conv1.b", s.conv1_b);
    f("superres.conv2.w", s.conv2_w);
    f("superres.conv2.b", s.conv2_b);
  }
};

/// Per-layer additive noise images for the two super-resolution convs.
template <class T>
struct NoiseBankT {
  std::array<TensorT<T>, 2> layers;

  using value_type = T;
  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }
  template <class S, class F>
  static void visit_impl(S& s, F& f) {
    f("noise.0", s.layers[0]);
    f("noise.1", s.layers[1]);
  }
};

template <class T>
struct RadianceModelT {
  RadianceConfig config;
  TensorT<T> w;
  GeneratorParamsT<T> g;
  DecoderParamsT<T> decoder;
  SuperResParamsT<T> superres;
  NoiseBankT<T> noise;

  using value_type = T;
  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }
  template <class S, class F>
  static void visit_impl(S& s, F& f) {
    f("w", s.w);
    s.g.visit(f);
    s.decoder.visit(f);
    s.superres.visit(f);
    s.noise.visit(f);
  }

  template <class U>
  RadianceModelT<U> cast() const {
    RadianceModelT<U> out;
    out.config = config;
    std::vector<const TensorT<T>*> src;
    visit([&](const std::string&, const TensorT<T>& t) { src.push_back(&t); });
    std::size_t i = 0;
    out.visit([&](const std::string&, TensorT<U>& t) { t = src[i++]->template cast<U>(); });
    return out;
  }
};

using GeneratorParams = GeneratorParamsT<float>;
using NoiseBank = NoiseBankT<float>;
using RadianceModel = RadianceModelT<float>;

/// Seeded random generator, decoder and super-resolution weights; latent drawn from the same seed; zero noise.
RadianceModel make_radiance_model(const RadianceConfig& config, std::uint64_t seed);
diff::Tensor random_latent(const RadianceConfig& config, Rng& rng);
/// Average of `count` latents drawn from the seed's "latent-mean" stream.
diff::Tensor latent_mean(const RadianceConfig& config, std::uint64_t seed, int count = 1000);
NoiseBank zero_noise(const RadianceConfig& config);

diff::TensorMap to_tensor_map(const RadianceModel& model);
/// Loads every reserved name of `config`'s model layout from `tensors`; shapes are checked.
RadianceModel from_tensor_map(const RadianceConfig& config, const diff::TensorMap& tensors);
/// SHA-256 over the generator parameters only.
std::string generator_hash(const GeneratorParams& g);

/// Every tensor of a parameter group, in visit order.
template <class P>
std::vector<TensorT<typename P::value_type>*> param_list(P& p) {
  std::vector<TensorT<typename P::value_type>*> out;
  p.visit([&](const std::string&, TensorT<typename P::value_type>& t) { out.push_back(&t); });
  return out;
}

// ---------------------------------------------------------------------------
// Graph builders. Bind parameters once per graph, then compose.

struct GeneratorVars {
  Var fc1_w, fc1_b, fc2_w, fc2_b;
  std::array<Var, 3> conv_w, conv_b;
};
struct DecoderVars {
  Var fc1_w, fc1_b, fc2_w, fc2_b;
};
struct SuperResVars {
  Var conv1_w, conv1_b, conv2_w, conv2_b;
};
/// Invalid entries mean "no noise".
struct NoiseVars {
  std::array<Var, 2> layers;
};
struct ModelVars {
  Var w;
  GeneratorVars g;
  DecoderVars decoder;
  SuperResVars superres;
  NoiseVars noise;
};

template <class T, class P>
GeneratorVars bind_generator(GraphT<T>& graph, P& p) {
  GeneratorVars v{graph.param(p.fc1_w), graph.param(p.fc1_b), graph.param(p.fc2_w), graph.param(p.fc2_b), {}, {}};
  for (int i = 0; i < 3; ++i) {
    v.conv_w[i] = graph.param(p.conv_w[i]);
    v.conv_b[i] = graph.param(p.conv_b[i]);
  }
  return v;
}
template <class T, class P>
DecoderVars bind_decoder(GraphT<T>& graph, P& p) {
  return {graph.param(p.fc1_w), graph.param(p.fc1_b), graph.param(p.fc2_w), graph.param(p.fc2_b)};
}
template <class T, class P>
SuperResVars bind_superres(GraphT<T>& graph, P& p) {
  return {graph.param(p.conv1_w), graph.param(p.conv1_b), graph.param(p.conv2_w), graph.param(p.conv2_b)};
}
template <class T, class P>
NoiseVars bind_noise(GraphT<T>& graph, P& p) {
  return {{graph.param(p.layers[0]), graph.param(p.layers[1])}};
}
/// M may be const, in which case no parameter receives gradients.
template <class T, class M>
ModelVars bind_model(GraphT<T>& graph, M& m) {
  return {graph.param(m.w), bind_generator(graph, m.g), bind_decoder(graph, m.decoder), bind_superres(graph, m.superres),
          bind_noise(graph, m.noise)};
}

/// w [latent] -> planes [3C x R x R] ordered xy, xz, yz.
template <class T>
Var triplane_generate(GraphT<T>& graph, const RadianceConfig& config, Var w, const GeneratorVars& g);

struct RenderVars {
  Var x_c;  // [3 x r x r]
  Var x_f;  // [F x r x r]
};
template <class T>
RenderVars render_view(GraphT<T>& graph, const RadianceConfig& config, Var planes, const DecoderVars& decoder,
                       const Pose& pose);

/// [3 x 2r x 2r] in (0, 1).
template <class T>
Var super_resolve(GraphT<T>& graph, const RadianceConfig& config, Var x_c, Var x_f, const SuperResVars& sr,
                  const NoiseVars& noise);

template <class T>
Var synthesize(GraphT<T>& graph, const RadianceConfig& config, const ModelVars& vars, const Pose& pose);

// ---------------------------------------------------------------------------
// Gradient-free conveniences.

struct RenderOutput {
  diff::Tensor x_c, x_f, x_cf;
};
RenderOutput render(const RadianceModel& model, const Pose& pose);
diff::Tensor synthesize(const RadianceModel& model, const Pose& pose);
diff::Tensor generate_planes(const RadianceModel& model);

}  // namespace nerftap::radiance
