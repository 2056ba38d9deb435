#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nerftap/diff/blob.hpp"
#include "nerftap/diff/graph.hpp"
#include "nerftap/radiance/model.hpp"

namespace nerftap::faceid {

using diff::GraphT;
using diff::Tensor;
using diff::TensorT;
using diff::Var;
using radiance::Pose;

constexpr int kInputSize = 48;
constexpr int kEmbeddingDim = 64;
constexpr double kCropFraction = 0.8;

/// Conv stack: each stage is a 3x3 conv, leaky relu and 2x average pool, followed
/// by a dense projection to kEmbeddingDim and L2 normalization.
struct ArchSpec {
  char id;
  std::vector<int> stages;
  /// Extra 2x average pools applied after the conv stages.
  int extra_pools;
};

/// A-D form the surrogate zoo; E backs the mock remote service.
const ArchSpec& arch_spec(char id);
bool is_arch(char id);

template <class T>
struct EmbedderT {
  char arch = 'A';
  std::uint64_t seed = 0;
  std::vector<TensorT<T>> conv_w, conv_b;
  TensorT<T> fc_w, fc_b;

  using value_type = T;
  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }
  template <class S, class F>
  static void visit_impl(S& s, F& f) {
    for (std::size_t i = 0; i < s.conv_w.size(); ++i) {
      f("conv" + std::to_string(i) + ".w", s.conv_w[i]);
      f("conv" + std::to_string(i) + ".b", s.conv_b[i]);
    }
    f("fc.w", s.fc_w);
    f("fc.b", s.fc_b);
  }

  template <class U>
  EmbedderT<U> cast() const {
    EmbedderT<U> out;
    out.arch = arch;
    out.seed = seed;
    for (const auto& t : conv_w) out.conv_w.push_back(t.template cast<U>());
    for (const auto& t : conv_b) out.conv_b.push_back(t.template cast<U>());
    out.fc_w = fc_w.template cast<U>();
    out.fc_b = fc_b.template cast<U>();
    return out;
  }
};
using Embedder = EmbedderT<float>;

Embedder make_embedder(char arch, std::uint64_t seed);
std::size_t parameter_count(const Embedder& model);
/// "embedder.<arch>.<seed>"
std::string checkpoint_name(const Embedder& model);
diff::TensorMap to_tensor_map(const Embedder& model);
Embedder embedder_from_tensor_map(char arch, std::uint64_t seed, const diff::TensorMap& tensors);
std::string parameter_hash(const Embedder& model);

/// Central crop to kCropFraction of the side, bilinear resize to kInputSize. x is [3 x S x S], S >= 2.
template <class T>
Var align(GraphT<T>& graph, Var x);
Tensor align(const Tensor& x);

/// Unit-norm [kEmbeddingDim] embedding of an aligned image [3 x kInputSize x kInputSize].
/// A const model binds parameters that never receive gradients.
template <class T, class M>
Var embed(GraphT<T>& graph, M& model, Var aligned);
Tensor embed(const Embedder& model, const Tensor& aligned);
/// align then embed.
Tensor embed_face(const Embedder& model, const Tensor& image);

double cosine(const Tensor& a, const Tensor& b);

/// Zips seeds with archs; a single seed is shared by every arch.
std::vector<Embedder> make_model_zoo(const std::vector<std::uint64_t>& seeds, const std::vector<char>& archs);

struct PoseRange {
  double yaw_min = -30.0;
  double yaw_max = 30.0;
  double pitch = 0.0;
};

struct View {
  Pose pose;
  Tensor image;
};

struct Identity {
  int id = 0;
  Tensor w;
  std::vector<View> views;
};

struct IdentitySet {
  std::vector<Identity> identities;
  std::size_t image_count() const;
};

/// Fresh latents on the shared generator of `model`; views at evenly spaced yaws.
IdentitySet synthesize_identity_set(const radiance::RadianceModel& model, int n_ids, int views_per_id,
                                    const PoseRange& range, std::uint64_t seed);

struct SmokeTrainConfig {
  int epochs = 80;
  /// Training continues to at least this many epochs even once the margin is reached.
  int min_epochs = 30;
  double lr = 2e-3;
  double target_margin = 0.3;
  /// Views with index % holdout_every == holdout_every - 1 are held out.
  int holdout_every = 4;
  int eval_every = 5;
  std::uint64_t seed = 11;
};

struct SmokeTrainReport {
  char arch;
  int epochs_run;
  double margin;
};

/// Mean same-identity cosine minus mean different-identity cosine over the given
/// views of each identity (held-out views when heldout is true, else all).
double separation_margin(const Embedder& model, const IdentitySet& set, int holdout_every, bool heldout);

/// Cosine-margin contrastive training of every model until the held-out margin
/// reaches config.target_margin (and at least config.min_epochs have run). Throws std::runtime_error with the achieved margin
/// when the epoch budget runs out.
std::vector<SmokeTrainReport> train_zoo_smoke(std::vector<Embedder>& zoo, const IdentitySet& set,
                                              const SmokeTrainConfig& config);

}  // namespace nerftap::faceid
