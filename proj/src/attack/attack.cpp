#include "nerftap/attack/attack.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

#include "nerftap/diff/optim.hpp"
#include "nerftap/util/hash.hpp"

namespace nerftap::attack {

namespace {

constexpr std::array<std::array<int, 2>, 6> kLayers{{{3, 8}, {8, 16}, {16, 32}, {48, 16}, {24, 8}, {8, 3}}};

}  // namespace

UVGenerator make_uv_generator(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "uvgen");
  UVGenerator gen;
  for (std::size_t i = 0; i < kLayers.size(); ++i) {
    const auto [cin, cout] = kLayers[i];
    gen.conv_w[i] = Tensor({cout, cin, 3, 3});
    const double gain = i + 1 == kLayers.size() ? 1.0 : 2.0;
    rng.fill_normal(gen.conv_w[i].data, std::sqrt(gain / (cin * 9.0)));
    gen.conv_b[i] = Tensor({cout});
  }
  return gen;
}

diff::TensorMap to_tensor_map(const UVGenerator& gen) {
  diff::TensorMap out;
  gen.visit([&](const std::string& name, const Tensor& t) { out.emplace(name, t); });
  return out;
}

UVGenerator uv_generator_from_tensor_map(const diff::TensorMap& tensors) {
  UVGenerator gen = make_uv_generator(0);
  gen.visit([&](const std::string& name, Tensor& t) { t.data = diff::blob_get(tensors, name, t.shape).data; });
  return gen;
}

template <class T, class G>
Var uv_generator_forward(GraphT<T>& graph, G& gen, Var z) {
  const diff::Shape& s = graph.shape(z);
  if (s.size() != 3 || s[0] != 3 || s[1] != s[2] || s[1] % 4 != 0 || s[1] == 0) {
    throw diff::ShapeError("uv_generator_forward", {3, -4, -4}, s);
  }
  auto conv = [&](Var x, int i) { return graph.conv2d(x, graph.param(gen.conv_w[i]), graph.param(gen.conv_b[i])); };
  Var h1 = graph.leaky_relu(conv(graph.add_scalar(z, T(-0.5)), 0));
  Var h2 = graph.leaky_relu(conv(graph.avg_pool2(h1), 1));
  Var h3 = graph.leaky_relu(conv(graph.avg_pool2(h2), 2));
  Var d2 = graph.leaky_relu(conv(graph.concat({graph.upsample_nearest(h3, 2), h2}), 3));
  Var d1 = graph.leaky_relu(conv(graph.concat({graph.upsample_nearest(d2, 2), h1}), 4));
  return graph.sigmoid(conv(d1, 5));
}

Tensor uv_generator_forward(const UVGenerator& gen, const Tensor& z) {
  diff::Graph graph;
  return graph.value(uv_generator_forward(graph, gen, graph.param(z)));
}

template Var uv_generator_forward<float, UVGenerator>(GraphT<float>&, UVGenerator&, Var);
template Var uv_generator_forward<float, const UVGenerator>(GraphT<float>&, const UVGenerator&, Var);
template Var uv_generator_forward<double, UVGeneratorT<double>>(GraphT<double>&, UVGeneratorT<double>&, Var);
template Var uv_generator_forward<double, const UVGeneratorT<double>>(GraphT<double>&, const UVGeneratorT<double>&, Var);

Tensor target_uv_map(const Tensor& image, const uvgeom::UVLookup& lookup, int texture_resolution) {
  const int R = lookup.resolution, U = texture_resolution;
  if (image.shape != diff::Shape{3, R, R}) throw diff::ShapeError("target_uv_map", {3, R, R}, image.shape);
  if (U < 1) throw std::invalid_argument("texture resolution must be positive");
  const std::size_t plane = std::size_t(U) * U, pixels = std::size_t(R) * R;
  std::vector<double> sum(3 * plane, 0.0);
  std::vector<int> count(plane, 0);
  for (std::size_t k = 0; k < pixels; ++k) {
    if (!lookup.valid[k]) continue;
    const int col = std::clamp(int(std::floor(double(lookup.u[k]) * U)), 0, U - 1);
    const int row = std::clamp(int(std::floor(double(lookup.v[k]) * U)), 0, U - 1);
    const std::size_t t = std::size_t(row) * U + col;
    ++count[t];
    for (int c = 0; c < 3; ++c) sum[c * plane + t] += image.data[c * pixels + k];
  }
  std::vector<std::size_t> filled;
  for (std::size_t t = 0; t < plane; ++t)
    if (count[t] > 0) filled.push_back(t);

  Tensor out({3, U, U}, 0.5f);
  if (filled.empty()) return out;
  for (std::size_t t : filled)
    for (int c = 0; c < 3; ++c) out.data[c * plane + t] = float(sum[c * plane + t] / count[t]);
  for (std::size_t t = 0; t < plane; ++t) {
    if (count[t] > 0) continue;
    const int r = int(t / U), q = int(t % U);
    std::size_t best = filled.front();
    long best_d = std::numeric_limits<long>::max();
    for (std::size_t f : filled) {
      const long dr = long(f / U) - r, dq = long(f % U) - q;
      const long d = dr * dr + dq * dq;
      if (d < best_d) {
        best_d = d;
        best = f;
      }
    }
    for (int c = 0; c < 3; ++c) out.data[c * plane + t] = out.data[c * plane + best];
  }
  return out;
}

// ---------------------------------------------------------------------------

template <class T>
Var cosine_similarity_loss(GraphT<T>& graph, Var a, Var b, Var c) {
  const diff::Shape& s = graph.shape(a);
  if (graph.shape(b) != s) throw diff::ShapeError("cosine_similarity_loss", s, graph.shape(b));
  if (graph.shape(c) != s) throw diff::ShapeError("cosine_similarity_loss", s, graph.shape(c));
  Var na = graph.l2_norm(a), nb = graph.l2_norm(b), nc = graph.l2_norm(c);
  for (Var n : {na, nb, nc})
    if (graph.item(n) == T(0)) throw diff::NumericError("cosine_similarity_loss: zero-norm vector");
  Var cab = graph.div(graph.sum(graph.mul(a, b)), graph.mul(na, nb));
  Var cac = graph.div(graph.sum(graph.mul(a, c)), graph.mul(na, nc));
  return graph.add_scalar(graph.scale(graph.add(cab, cac), T(-0.5)), T(1));
}

template Var cosine_similarity_loss<float>(GraphT<float>&, Var, Var, Var);
template Var cosine_similarity_loss<double>(GraphT<double>&, Var, Var, Var);

double cosine_similarity_loss(const Tensor& a, const Tensor& b, const Tensor& c) {
  diff::GraphT<double> graph;
  Var v = cosine_similarity_loss(graph, graph.constant(a.cast<double>()), graph.constant(b.cast<double>()),
                                 graph.constant(c.cast<double>()));
  return graph.item(v);
}

Tensor gram_matrix(const Tensor& features) {
  diff::Graph graph;
  return graph.value(graph.gram(graph.param(features)));
}

StyleExtractor make_style_extractor(std::uint64_t seed) { return {inversion::make_perceptual_net(seed), {1, 1, 1, 1}}; }

const StyleExtractor& default_style_extractor() {
  static const StyleExtractor extractor = make_style_extractor();
  return extractor;
}

template <class T>
std::vector<Var> style_grams(GraphT<T>& graph, const StyleExtractorT<T>& extractor, Var z, Var mask3) {
  std::vector<Var> grams;
  for (Var f : inversion::perceptual_features(graph, extractor.net, graph.mul(z, mask3))) grams.push_back(graph.gram(f));
  return grams;
}

template <class T>
Var style_loss(GraphT<T>& graph, const StyleExtractorT<T>& extractor, const std::vector<Var>& grams_a,
               const std::vector<Var>& grams_b) {
  if (grams_a.size() != extractor.layer_weights.size() || grams_b.size() != grams_a.size()) {
    throw diff::ShapeError("style_loss", {int(extractor.layer_weights.size())}, {int(grams_a.size())});
  }
  Var total;
  for (std::size_t l = 0; l < grams_a.size(); ++l) {
    Var term = graph.scale(graph.sum(graph.square(graph.sub(grams_a[l], grams_b[l]))), T(extractor.layer_weights[l]));
    total = total.valid() ? graph.add(total, term) : term;
  }
  return total;
}

template std::vector<Var> style_grams<float>(GraphT<float>&, const StyleExtractorT<float>&, Var, Var);
template std::vector<Var> style_grams<double>(GraphT<double>&, const StyleExtractorT<double>&, Var, Var);
template Var style_loss<float>(GraphT<float>&, const StyleExtractorT<float>&, const std::vector<Var>&,
                               const std::vector<Var>&);
template Var style_loss<double>(GraphT<double>&, const StyleExtractorT<double>&, const std::vector<Var>&,
                                const std::vector<Var>&);

Tensor mask_channels(const uvgeom::Mask& mask) {
  const std::size_t plane = mask.grid.size();
  Tensor out({3, mask.resolution, mask.resolution});
  for (int c = 0; c < 3; ++c)
    for (std::size_t i = 0; i < plane; ++i) out.data[c * plane + i] = mask.grid[i];
  return out;
}

double style_loss(const Tensor& a, const Tensor& b, const uvgeom::Mask& mask) {
  const StyleExtractor& ex = default_style_extractor();
  diff::Graph graph;
  Var m = graph.constant(mask_channels(mask));
  Var v = style_loss(graph, ex, style_grams(graph, ex, graph.param(a), m), style_grams(graph, ex, graph.param(b), m));
  return graph.item(v);
}

// ---------------------------------------------------------------------------

void AttackConfig::validate() const {
  if (!(lambda_s >= 0)) throw std::invalid_argument("attack.lambda_s must be >= 0");
  if (!(alpha > 0)) throw std::invalid_argument("attack.alpha must be > 0");
  if (!(tau >= 0)) throw std::invalid_argument("attack.tau must be >= 0");
  if (batch_size < 1) throw std::invalid_argument("attack.batch_size must be >= 1");
  if (epochs < 1) throw std::invalid_argument("attack.epochs must be >= 1");
  if (!(lr > 0)) throw std::invalid_argument("attack.lr must be > 0");
  if (texture_resolution < 16 || texture_resolution % 4 != 0) {
    throw std::invalid_argument("attack.texture_resolution must be a multiple of 4, at least 16");
  }
}

std::string pose_bits(const Pose& pose) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%016llx%016llx%016llx",
                static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(pose.yaw_deg)),
                static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(pose.pitch_deg)),
                static_cast<unsigned long long>(std::bit_cast<std::uint64_t>(pose.camera_distance)));
  return buf;
}

std::string model_key(const radiance::RadianceModel& model) {
  const radiance::RadianceConfig& c = model.config;
  char buf[128];
  std::snprintf(buf, sizeof buf, "|%d|%d|%d|%d|%.17g|%.17g", c.render_resolution, c.n_samples, c.plane_resolution,
                int(c.jitter), c.near, c.far);
  return sha256_hex(diff::encode_blob(radiance::to_tensor_map(model))) + buf;
}

namespace {

std::string mask_key(const uvgeom::Mask& mask) {
  return uvgeom::mask_kind_name(mask.kind) + std::to_string(mask.resolution) +
         sha256_hex(std::span<const std::uint8_t>(mask.grid.data(), mask.grid.size()));
}

}  // namespace

const Tensor& RenderCache::view(const std::string& key, const radiance::RadianceModel& model, const Pose& pose) {
  const std::string k = key + pose_bits(pose);
  if (auto it = views_.find(k); it != views_.end()) {
    ++hits_;
    return it->second;
  }
  ++misses_;
  return views_.emplace(k, radiance::synthesize(model, pose)).first->second;
}

const Tensor& RenderCache::embedding(const std::string& key, const radiance::RadianceModel& model, const Pose& pose,
                                     const std::string& embedder_key, const faceid::Embedder& embedder) {
  const std::string k = key + pose_bits(pose) + embedder_key;
  if (auto it = embeddings_.find(k); it != embeddings_.end()) {
    ++hits_;
    return it->second;
  }
  ++misses_;
  return embeddings_.emplace(k, faceid::embed_face(embedder, radiance::synthesize(model, pose))).first->second;
}

const uvgeom::PatchPlan& RenderCache::plan(const Pose& pose, int image_resolution, const uvgeom::Mask& mask) {
  const std::string k = pose_bits(pose) + "|" + std::to_string(image_resolution) + "|" + mask_key(mask);
  if (auto it = plans_.find(k); it != plans_.end()) {
    ++hits_;
    return it->second;
  }
  ++misses_;
  const uvgeom::UVLookup lookup = uvgeom::rasterize_uv(uvgeom::build_face_mesh(pose), image_resolution);
  return plans_.emplace(k, uvgeom::plan_patch(lookup, mask)).first->second;
}

void RenderCache::clear() {
  views_.clear();
  embeddings_.clear();
  plans_.clear();
  hits_ = misses_ = 0;
}

// ---------------------------------------------------------------------------

namespace {

void check_problem(const AttackProblem& p) {
  for (const Subject* s : {&p.source, &p.target}) {
    const char* which = s == &p.source ? "source" : "target";
    if (s->model.w.numel() == 0) throw std::invalid_argument(std::string("attack: missing ") + which + " inversion");
    const int R = s->model.config.output_resolution();
    if (s->image.shape != diff::Shape{3, R, R}) {
      throw diff::ShapeError(std::string("attack.") + which + ".image", {3, R, R}, s->image.shape);
    }
    radiance::validate(s->pose);
  }
  if (p.source.model.config.output_resolution() != p.target.model.config.output_resolution()) {
    throw std::invalid_argument("attack: source and target render at different resolutions");
  }
  if (p.embedder.conv_w.empty()) throw std::invalid_argument("attack: missing white-box embedder");
}

}  // namespace

ObjectiveContext make_context(const AttackProblem& problem, const uvgeom::Mask& mask) {
  check_problem(problem);
  const int R = problem.target.model.config.output_resolution();
  const uvgeom::UVLookup lookup = uvgeom::rasterize_uv(uvgeom::build_face_mesh(problem.target.pose), R);
  return {target_uv_map(problem.target.image, lookup, mask.resolution), mask_channels(mask),
          faceid::embed_face(problem.embedder, problem.target.image), problem.embedder, default_style_extractor()};
}

std::vector<Sample> draw_batch(const AttackConfig& config, const AttackProblem& problem, const uvgeom::Mask& mask,
                               int step, RenderCache& cache) {
  Rng source_rng = Rng::stream(config.seed, "source-pose", std::uint64_t(step));
  Rng target_rng = Rng::stream(config.seed, "target-pose", std::uint64_t(step));
  Rng transform_rng = Rng::stream(config.seed, "transform", std::uint64_t(step));
  const std::string source_key = model_key(problem.source.model);
  const std::string target_key = model_key(problem.target.model);
  const std::string embedder_key = faceid::parameter_hash(problem.embedder);
  const int R = problem.source.model.config.output_resolution();

  std::vector<Sample> batch;
  for (int i = 0; i < config.batch_size; ++i) {
    const Pose ps = uvgeom::sample_pose(problem.source.pose, config.alpha, config.tau, source_rng);
    const Pose pt = uvgeom::sample_pose(problem.target.pose, config.alpha, config.tau, target_rng);
    const uvgeom::Similarity sim = uvgeom::sample_similarity(transform_rng, config.transform);
    const Pose& source_pose = config.use_view_synthesis ? ps : problem.source.pose;
    const Pose& target_pose = config.use_view_synthesis ? pt : problem.target.pose;
    Sample s;
    s.source_view = cache.view(source_key, problem.source.model, source_pose);
    s.plan = cache.plan(source_pose, R, mask);
    s.target_embedding = cache.embedding(target_key, problem.target.model, target_pose, embedder_key, problem.embedder);
    if (config.use_2d_transform) s.transform = sim;
    batch.push_back(std::move(s));
  }
  return batch;
}

template <class T, class G>
ObjectiveVars<T> nerftap_objective(GraphT<T>& graph, G& gen, const ObjectiveContextT<T>& ctx,
                                   const std::vector<SampleT<T>>& batch, const AttackConfig& config) {
  if (batch.empty()) throw std::invalid_argument("nerftap_objective: empty batch");
  Var zbar = graph.param(ctx.target_uv);
  Var ztilde = uv_generator_forward(graph, gen, zbar);
  Var nu = graph.param(ctx.target_embedding);
  Var total;
  for (const SampleT<T>& s : batch) {
    Var x = uvgeom::apply_patch(graph, graph.param(s.source_view), ztilde, s.plan);
    if (s.transform) x = uvgeom::similarity_transform(graph, x, *s.transform);
    Var e = faceid::embed(graph, ctx.embedder, faceid::align(graph, x));
    Var jc = cosine_similarity_loss(graph, e, graph.param(s.target_embedding), nu);
    total = total.valid() ? graph.add(total, jc) : jc;
  }
  ObjectiveVars<T> out;
  out.texture = ztilde;
  out.cosine_loss = graph.scale(total, T(1) / T(batch.size()));
  Var mask3 = graph.param(ctx.mask3);
  out.style_loss = style_loss(graph, ctx.style, style_grams(graph, ctx.style, zbar, mask3),
                              style_grams(graph, ctx.style, ztilde, mask3));
  out.loss = out.cosine_loss;
  if (config.use_style_loss && config.lambda_s > 0) {
    out.loss = graph.add(out.loss, graph.scale(out.style_loss, T(config.lambda_s)));
  }
  return out;
}

template ObjectiveVars<float> nerftap_objective<float, UVGenerator>(GraphT<float>&, UVGenerator&,
                                                                   const ObjectiveContextT<float>&,
                                                                   const std::vector<SampleT<float>>&,
                                                                   const AttackConfig&);
template ObjectiveVars<float> nerftap_objective<float, const UVGenerator>(GraphT<float>&, const UVGenerator&,
                                                                         const ObjectiveContextT<float>&,
                                                                         const std::vector<SampleT<float>>&,
                                                                         const AttackConfig&);
template ObjectiveVars<double> nerftap_objective<double, UVGeneratorT<double>>(GraphT<double>&, UVGeneratorT<double>&,
                                                                              const ObjectiveContextT<double>&,
                                                                              const std::vector<SampleT<double>>&,
                                                                              const AttackConfig&);

StepResult nerftap_step(const AttackConfig& config, UVGenerator& gen, const AttackProblem& problem,
                        const ObjectiveContext& ctx, const uvgeom::Mask& mask, int step, RenderCache& cache) {
  const std::vector<Sample> batch = draw_batch(config, problem, mask, step, cache);
  diff::Graph graph;
  const ObjectiveVars<float> v = nerftap_objective(graph, gen, ctx, batch, config);
  const StepResult r{graph.item(v.loss), graph.item(v.cosine_loss), graph.item(v.style_loss)};
  if (!std::isfinite(r.loss)) {
    throw diff::NumericError("nerftap_step: non-finite loss at step " + std::to_string(step) +
                             " (cosine " + std::to_string(r.cosine_loss) + ", style " + std::to_string(r.style_loss) + ")");
  }
  graph.backward(v.loss);
  return r;
}

AttackArtifact train_attack(const AttackConfig& config, const AttackProblem& problem, RenderCache& cache) {
  config.validate();
  const uvgeom::Mask mask = uvgeom::make_mask(config.mask, config.texture_resolution);
  const ObjectiveContext ctx = make_context(problem, mask);

  AttackArtifact art;
  art.config = config;
  UVGenerator gen = make_uv_generator(config.seed);
  std::vector<Tensor*> params = radiance::param_list(gen);
  for (Tensor* p : params) p->requires_grad = true;
  diff::AdamState opt;
  for (int step = 0; step < config.epochs; ++step) {
    diff::zero_grads<float>(params);
    const StepResult r = nerftap_step(config, gen, problem, ctx, mask, step, cache);
    art.loss_curve.push_back(r.loss);
    art.cosine_curve.push_back(r.cosine_loss);
    art.style_curve.push_back(r.style_loss);
    diff::adam_step<float>(opt, params, float(diff::cosine_anneal_lr(config.lr, step, config.epochs)));
  }
  for (Tensor* p : params) {
    p->requires_grad = false;
    p->grad.clear();
  }
  art.texture = uv_generator_forward(gen, ctx.target_uv);
  art.generator = std::move(gen);
  return art;
}

// ---------------------------------------------------------------------------

BaselineMethod parse_baseline(const std::string& name) {
  if (name == "fgsm") return BaselineMethod::Fgsm;
  if (name == "mim") return BaselineMethod::Mim;
  if (name == "dim") return BaselineMethod::Dim;
  if (name == "pgd_patch") return BaselineMethod::PgdPatch;
  throw std::invalid_argument("unknown baseline method '" + name + "'");
}

std::string baseline_name(BaselineMethod method) {
  switch (method) {
    case BaselineMethod::Fgsm: return "fgsm";
    case BaselineMethod::Mim: return "mim";
    case BaselineMethod::Dim: return "dim";
    case BaselineMethod::PgdPatch: return "pgd_patch";
  }
  throw std::invalid_argument("unknown baseline method");
}

namespace {

float sign(float g) { return g > 0 ? 1.0f : (g < 0 ? -1.0f : 0.0f); }

/// Cosine loss against the target embedding and its gradient w.r.t. the image.
double image_loss_grad(const ObjectiveContext& ctx, const Tensor& x, const std::optional<uvgeom::Similarity>& t,
                       std::vector<float>& grad) {
  diff::Graph graph;
  Tensor xin = x;
  xin.requires_grad = true;
  Var v = graph.param(xin);
  if (t) v = uvgeom::similarity_transform(graph, v, *t);
  Var nu = graph.param(ctx.target_embedding);
  Var loss = cosine_similarity_loss(graph, faceid::embed(graph, ctx.embedder, faceid::align(graph, v)), nu, nu);
  graph.backward(loss);
  grad = xin.grad;
  grad.resize(x.numel(), 0.0f);
  return graph.item(loss);
}

AttackArtifact global_baseline(BaselineMethod method, const AttackConfig& config, const AttackProblem& problem,
                               const ObjectiveContext& ctx, const BaselineConfig& b) {
  AttackArtifact art;
  const Tensor& x0 = problem.source.image;
  Tensor x = x0;
  std::vector<float> grad;
  if (method == BaselineMethod::Fgsm) {
    art.loss_curve.push_back(image_loss_grad(ctx, x, std::nullopt, grad));
    for (std::size_t i = 0; i < x.numel(); ++i) x.data[i] = std::clamp(x0.data[i] - float(b.epsilon) * sign(grad[i]), 0.0f, 1.0f);
  } else {
    if (b.iterations < 1) throw std::invalid_argument("baseline iterations must be >= 1");
    const float step = float(b.epsilon / b.iterations);
    std::vector<double> momentum(x.numel(), 0.0);
    for (int t = 0; t < b.iterations; ++t) {
      std::optional<uvgeom::Similarity> sim;
      if (method == BaselineMethod::Dim) {
        Rng rng = Rng::stream(config.seed, "baseline-transform", std::uint64_t(t));
        sim = uvgeom::sample_similarity(rng, config.transform);
      }
      art.loss_curve.push_back(image_loss_grad(ctx, x, sim, grad));
      double l1 = 0;
      for (float g : grad) l1 += std::abs(double(g));
      if (l1 == 0) l1 = 1;
      for (std::size_t i = 0; i < x.numel(); ++i) {
        momentum[i] = b.momentum * momentum[i] + grad[i] / l1;
        const float moved = x.data[i] - step * sign(float(momentum[i]));
        x.data[i] = std::clamp(std::clamp(moved, x0.data[i] - float(b.epsilon), x0.data[i] + float(b.epsilon)), 0.0f, 1.0f);
      }
    }
  }
  art.image = std::move(x);
  return art;
}

AttackArtifact patch_baseline(const AttackProblem& problem, const ObjectiveContext& ctx, const uvgeom::Mask& mask,
                              const BaselineConfig& b) {
  if (b.patch_steps < 1) throw std::invalid_argument("baseline patch_steps must be >= 1");
  AttackArtifact art;
  const int R = problem.source.model.config.output_resolution();
  const uvgeom::PatchPlan plan =
      uvgeom::plan_patch(uvgeom::rasterize_uv(uvgeom::build_face_mesh(problem.source.pose), R), mask);
  Tensor z = ctx.target_uv;
  const std::size_t plane = mask.grid.size();
  for (int t = 0; t < b.patch_steps; ++t) {
    diff::Graph graph;
    z.requires_grad = true;
    z.zero_grad();
    Var x = uvgeom::apply_patch(graph, graph.param(problem.source.image), graph.param(z), plan);
    Var nu = graph.param(ctx.target_embedding);
    Var loss = cosine_similarity_loss(graph, faceid::embed(graph, ctx.embedder, faceid::align(graph, x)), nu, nu);
    art.loss_curve.push_back(graph.item(loss));
    graph.backward(loss);
    for (int c = 0; c < 3; ++c)
      for (std::size_t i = 0; i < plane; ++i) {
        if (!mask.grid[i]) continue;
        float& v = z.data[c * plane + i];
        v = std::clamp(v - float(b.patch_step_size) * sign(z.grad[c * plane + i]), 0.0f, 1.0f);
      }
  }
  z.requires_grad = false;
  z.grad.clear();
  art.texture = std::move(z);
  return art;
}

}  // namespace

AttackArtifact run_baseline(BaselineMethod method, const AttackConfig& config, const AttackProblem& problem,
                            const BaselineConfig& baseline) {
  config.validate();
  const uvgeom::Mask mask = uvgeom::make_mask(config.mask, config.texture_resolution);
  const ObjectiveContext ctx = make_context(problem, mask);
  AttackArtifact art = method == BaselineMethod::PgdPatch ? patch_baseline(problem, ctx, mask, baseline)
                                                          : global_baseline(method, config, problem, ctx, baseline);
  art.method = baseline_name(method);
  art.config = config;
  for (double v : art.loss_curve)
    if (!std::isfinite(v)) throw diff::NumericError(art.method + ": non-finite loss");
  art.cosine_curve = art.loss_curve;
  return art;
}

diff::TensorMap to_tensor_map(const AttackArtifact& artifact) {
  diff::TensorMap out;
  if (artifact.generator) out = to_tensor_map(*artifact.generator);
  if (artifact.texture) out.emplace("texture", *artifact.texture);
  if (artifact.image) out.emplace("image", *artifact.image);
  auto curve = [&](const char* name, const std::vector<double>& c) {
    if (c.empty()) return;
    out.emplace(name, Tensor({int(c.size())}, std::vector<float>(c.begin(), c.end())));
  };
  curve("curve.loss", artifact.loss_curve);
  curve("curve.cosine", artifact.cosine_curve);
  curve("curve.style", artifact.style_curve);
  return out;
}

}  // namespace nerftap::attack
