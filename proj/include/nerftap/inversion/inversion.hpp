#pragma once

#include <cstdint>
#include <vector>

#include "nerftap/diff/blob.hpp"
#include "nerftap/diff/graph.hpp"
#include "nerftap/radiance/model.hpp"

namespace nerftap::inversion {

using diff::GraphT;
using diff::Tensor;
using diff::TensorT;
using diff::Var;
using radiance::Pose;

constexpr std::uint64_t kPerceptualSeed = 0x1f3a5c7e9b2d4f60ull;

/// Frozen random conv stack: four stages of 3x3 conv, leaky relu, 2x average pool.
template <class T>
struct PerceptualNetT {
  std::vector<TensorT<T>> conv_w;

  template <class U>
  PerceptualNetT<U> cast() const {
    PerceptualNetT<U> out;
    for (const auto& w : conv_w) out.conv_w.push_back(w.template cast<U>());
    return out;
  }
};
using PerceptualNet = PerceptualNetT<float>;

PerceptualNet make_perceptual_net(std::uint64_t seed = kPerceptualSeed);
/// The process-wide net built from kPerceptualSeed.
const PerceptualNet& default_perceptual_net();

/// Activations after every stage for an image [3 x H x W], H and W divisible by 16.
template <class T>
std::vector<Var> perceptual_features(GraphT<T>& graph, const PerceptualNetT<T>& net, Var x);
/// Mean over stages of the mean squared activation difference.
template <class T>
Var perceptual_distance(GraphT<T>& graph, const std::vector<Var>& fx, const std::vector<Var>& fy);
template <class T>
Var perceptual_distance(GraphT<T>& graph, const PerceptualNetT<T>& net, Var x, Var y);
double perceptual_distance(const Tensor& x, const Tensor& y);

/// Sum over noise images and their 2x pooling pyramid (down to 8x8) of the squared
/// circular one-pixel autocorrelations along x and y.
template <class T>
Var noise_regularization(GraphT<T>& graph, const std::vector<Var>& noise);
double noise_regularization(const radiance::NoiseBank& noise);

struct InversionConfig {
  int stage1_steps = 400;
  int stage2_steps = 400;
  double lambda_noise = 1.0;
  double lambda_l2 = 1.0;
  double lr_latent = 0.1;
  double lr_noise = 1e-4;
  double lr_generator = 1e-4;
  std::uint64_t latent_mean_seed = 7;
  int latent_mean_count = 1000;

  void validate() const;
};

struct LatentFit {
  Tensor w;
  radiance::NoiseBank noise;
  std::vector<double> curve;
};

struct GeneratorFit {
  radiance::GeneratorParams g;
  std::vector<double> curve;
};

struct InversionResult {
  Tensor w;
  radiance::NoiseBank noise;
  radiance::GeneratorParams g;
  std::vector<double> stage1_curve;
  std::vector<double> stage2_curve;
};

/// Optimizes w (from the latent mean) and the noise bank with the rest of `model` frozen.
/// The latent and noise stored in `model` are ignored.
LatentFit invert_latent(const Tensor& target, const Pose& pose, const radiance::RadianceModel& model,
                        const InversionConfig& config);

/// Tunes the generator parameters around the fixed pivot w with noise held fixed.
GeneratorFit finetune_generator(const Tensor& target, const Pose& pose, const radiance::RadianceModel& model,
                                const Tensor& w, const radiance::NoiseBank& noise, const InversionConfig& config);

InversionResult invert(const Tensor& target, const Pose& pose, const radiance::RadianceModel& model,
                       const InversionConfig& config);

/// `model` with the inverted latent, noise and tuned generator substituted.
radiance::RadianceModel apply(const radiance::RadianceModel& model, const InversionResult& result);

diff::TensorMap to_tensor_map(const InversionResult& result);
InversionResult inversion_from_tensor_map(const radiance::RadianceConfig& config, const diff::TensorMap& tensors);

double mse(const Tensor& a, const Tensor& b);
double psnr(const Tensor& a, const Tensor& b);

}  // namespace nerftap::inversion
