#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "nerftap/diff/blob.hpp"
#include "nerftap/diff/graph.hpp"
#include "nerftap/faceid/faceid.hpp"
#include "nerftap/inversion/inversion.hpp"
#include "nerftap/radiance/model.hpp"
#include "nerftap/uvgeom/uvgeom.hpp"

namespace nerftap::attack {

using diff::GraphT;
using diff::Tensor;
using diff::TensorT;
using diff::Var;
using radiance::Pose;

// ---------------------------------------------------------------------------
// UV-map generator: a small U-net, z [3 x U x U] -> [3 x U x U] in (0, 1).

template <class T>
struct UVGeneratorT {
  // enc1 3->8, enc2 8->16, mid 16->32, dec2 (32+16)->16, dec1 (16+8)->8, out 8->3
  std::array<TensorT<T>, 6> conv_w, conv_b;

  using value_type = T;
  static constexpr std::array<const char*, 6> kNames{"enc1", "enc2", "mid", "dec2", "dec1", "out"};
  template <class F>
  void visit(F&& f) { visit_impl(*this, f); }
  template <class F>
  void visit(F&& f) const { visit_impl(*this, f); }
  template <class S, class F>
  static void visit_impl(S& s, F& f) {
    for (std::size_t i = 0; i < 6; ++i) {
      f(std::string("uvgen.") + kNames[i] + ".w", s.conv_w[i]);
      f(std::string("uvgen.") + kNames[i] + ".b", s.conv_b[i]);
    }
  }
  template <class U>
  UVGeneratorT<U> cast() const {
    UVGeneratorT<U> out;
    for (std::size_t i = 0; i < 6; ++i) {
      out.conv_w[i] = conv_w[i].template cast<U>();
      out.conv_b[i] = conv_b[i].template cast<U>();
    }
    return out;
  }
};
using UVGenerator = UVGeneratorT<float>;

UVGenerator make_uv_generator(std::uint64_t seed);
diff::TensorMap to_tensor_map(const UVGenerator& gen);
UVGenerator uv_generator_from_tensor_map(const diff::TensorMap& tensors);

/// The side must be divisible by 4. A const generator binds parameters that never receive gradients.
template <class T, class G>
Var uv_generator_forward(GraphT<T>& graph, G& gen, Var z);
Tensor uv_generator_forward(const UVGenerator& gen, const Tensor& z);

/// Texture [3 x U x U] from an image seen under `lookup`: each texel averages the pixels
/// whose UV falls in it, and empty texels copy the nearest filled texel.
Tensor target_uv_map(const Tensor& image, const uvgeom::UVLookup& lookup, int texture_resolution);

// ---------------------------------------------------------------------------
// Losses

/// 1 - (cos(a, b) + cos(a, c)) / 2. Throws NumericError on a zero vector.
template <class T>
Var cosine_similarity_loss(GraphT<T>& graph, Var a, Var b, Var c);
double cosine_similarity_loss(const Tensor& a, const Tensor& b, const Tensor& c);

/// F F^T / (C H W) for features [C x H x W].
Tensor gram_matrix(const Tensor& features);

constexpr std::uint64_t kStyleSeed = 0x5e7a11c0ffee0042ull;

template <class T>
struct StyleExtractorT {
  inversion::PerceptualNetT<T> net;
  std::array<double, 4> layer_weights{1.0, 1.0, 1.0, 1.0};

  template <class U>
  StyleExtractorT<U> cast() const {
    return {net.template cast<U>(), layer_weights};
  }
};
using StyleExtractor = StyleExtractorT<float>;

StyleExtractor make_style_extractor(std::uint64_t seed = kStyleSeed);
const StyleExtractor& default_style_extractor();

/// Per-layer Gram matrices of the masked texture z * mask.
template <class T>
std::vector<Var> style_grams(GraphT<T>& graph, const StyleExtractorT<T>& extractor, Var z, Var mask3);
/// Weighted sum over layers of squared Gram differences.
template <class T>
Var style_loss(GraphT<T>& graph, const StyleExtractorT<T>& extractor, const std::vector<Var>& grams_a,
               const std::vector<Var>& grams_b);
double style_loss(const Tensor& a, const Tensor& b, const uvgeom::Mask& mask);

/// The mask [U x U] repeated over three channels.
Tensor mask_channels(const uvgeom::Mask& mask);

// ---------------------------------------------------------------------------
// Training

struct AttackConfig {
  double lambda_s = 1e-4;
  double alpha = 0.2;
  double tau = 15.0;
  int batch_size = 8;
  int epochs = 200;
  double lr = 3e-4;
  uvgeom::MaskKind mask = uvgeom::MaskKind::EyeNose;
  int texture_resolution = 64;
  std::uint64_t seed = 1;
  bool use_style_loss = true;
  bool use_2d_transform = true;
  bool use_view_synthesis = true;
  uvgeom::SimilarityLimits transform;

  void validate() const;
};

/// A face known to the attacker: the inverted generator and the image it came from.
struct Subject {
  radiance::RadianceModel model;
  Pose pose;
  Tensor image;
};

struct AttackProblem {
  Subject source;
  Subject target;
  faceid::Embedder embedder;
};

/// Renders, patch plans and embeddings reused across steps and across runs. Keys
/// include content hashes, so entries never go stale.
class RenderCache {
 public:
  const Tensor& view(const std::string& model_key, const radiance::RadianceModel& model, const Pose& pose);
  const Tensor& embedding(const std::string& model_key, const radiance::RadianceModel& model, const Pose& pose,
                          const std::string& embedder_key, const faceid::Embedder& embedder);
  const uvgeom::PatchPlan& plan(const Pose& pose, int image_resolution, const uvgeom::Mask& mask);
  void clear();
  std::size_t size() const { return views_.size() + embeddings_.size() + plans_.size(); }
  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }

 private:
  std::unordered_map<std::string, Tensor> views_, embeddings_;
  std::unordered_map<std::string, uvgeom::PatchPlan> plans_;
  std::size_t hits_ = 0, misses_ = 0;
};

std::string model_key(const radiance::RadianceModel& model);
std::string pose_bits(const Pose& pose);

/// Everything in the objective that does not depend on the generator parameters.
template <class T>
struct ObjectiveContextT {
  TensorT<T> target_uv;         // z-bar
  TensorT<T> mask3;             // [3 x U x U]
  TensorT<T> target_embedding;  // nu-bar
  faceid::EmbedderT<T> embedder;
  StyleExtractorT<T> style;

  template <class U>
  ObjectiveContextT<U> cast() const {
    return {target_uv.template cast<U>(), mask3.template cast<U>(), target_embedding.template cast<U>(),
            embedder.template cast<U>(), style.template cast<U>()};
  }
};
using ObjectiveContext = ObjectiveContextT<float>;

template <class T>
struct SampleT {
  TensorT<T> source_view;        // x-hat' [3 x R x R]
  uvgeom::PatchPlan plan;        // lookup at the source pose
  TensorT<T> target_embedding;   // nu-bar'
  std::optional<uvgeom::Similarity> transform;

  template <class U>
  SampleT<U> cast() const {
    return {source_view.template cast<U>(), plan, target_embedding.template cast<U>(), transform};
  }
};
using Sample = SampleT<float>;

ObjectiveContext make_context(const AttackProblem& problem, const uvgeom::Mask& mask);
/// Poses, renders and transforms of batch `step`; each draw comes from its own seeded stream.
std::vector<Sample> draw_batch(const AttackConfig& config, const AttackProblem& problem, const uvgeom::Mask& mask,
                               int step, RenderCache& cache);

template <class T>
struct ObjectiveVars {
  Var loss, cosine_loss, style_loss, texture;
};

/// Batch-mean cosine loss plus lambda_s times the style loss (when enabled).
template <class T, class G>
ObjectiveVars<T> nerftap_objective(GraphT<T>& graph, G& gen, const ObjectiveContextT<T>& ctx,
                                   const std::vector<SampleT<T>>& batch, const AttackConfig& config);

struct StepResult {
  double loss, cosine_loss, style_loss;
};

/// One batch: accumulates d loss / d theta into gen's gradients.
StepResult nerftap_step(const AttackConfig& config, UVGenerator& gen, const AttackProblem& problem,
                        const ObjectiveContext& ctx, const uvgeom::Mask& mask, int step, RenderCache& cache);

struct AttackArtifact {
  std::string method = "nerftap";
  AttackConfig config;
  std::optional<UVGenerator> generator;
  /// Adversarial UV map for patch methods.
  std::optional<Tensor> texture;
  /// Adversarial source image for global methods.
  std::optional<Tensor> image;
  std::vector<double> loss_curve, cosine_curve, style_curve;
};

AttackArtifact train_attack(const AttackConfig& config, const AttackProblem& problem, RenderCache& cache);

// ---------------------------------------------------------------------------
// Baselines

enum class BaselineMethod { Fgsm, Mim, Dim, PgdPatch };
BaselineMethod parse_baseline(const std::string& name);
std::string baseline_name(BaselineMethod method);

struct BaselineConfig {
  double epsilon = 0.031;
  int iterations = 10;
  double momentum = 1.0;
  int patch_steps = 100;
  double patch_step_size = 0.01;
};

/// Global methods perturb the acquired source image; pgd_patch optimizes the masked
/// texels of a UV map initialized at the target's UV map. All minimize the cosine loss
/// against the acquired target image alone.
AttackArtifact run_baseline(BaselineMethod method, const AttackConfig& config, const AttackProblem& problem,
                            const BaselineConfig& baseline = {});

diff::TensorMap to_tensor_map(const AttackArtifact& artifact);

}  // namespace nerftap::attack
