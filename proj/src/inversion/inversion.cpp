#include "nerftap/inversion/inversion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

#include "nerftap/diff/optim.hpp"
#include "nerftap/util/rng.hpp"

namespace nerftap::inversion {

using radiance::GeneratorParams;
using radiance::ModelVars;
using radiance::NoiseBank;
using radiance::RadianceModel;

namespace {

constexpr int kStageChannels[4] = {8, 16, 32, 64};

}  // namespace

PerceptualNet make_perceptual_net(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "perceptual");
  PerceptualNet net;
  int in = 3;
  for (int out : kStageChannels) {
    Tensor w({out, in, 3, 3});
    rng.fill_normal(w.data, std::sqrt(2.0 / (9.0 * in)));
    net.conv_w.push_back(std::move(w));
    in = out;
  }
  return net;
}

const PerceptualNet& default_perceptual_net() {
  static const PerceptualNet net = make_perceptual_net();
  return net;
}

template <class T>
std::vector<Var> perceptual_features(GraphT<T>& graph, const PerceptualNetT<T>& net, Var x) {
  const diff::Shape& s = graph.shape(x);
  if (s.size() != 3 || s[0] != 3 || s[1] % 16 != 0 || s[2] % 16 != 0 || s[1] == 0) {
    throw diff::ShapeError("perceptual_features", {3, -16, -16}, s);
  }
  std::vector<Var> feats;
  Var h = graph.add_scalar(graph.scale(x, T(2)), T(-1));
  for (const auto& w : net.conv_w) {
    h = graph.avg_pool2(graph.leaky_relu(graph.conv2d(h, graph.param(w), Var{})));
    feats.push_back(h);
  }
  return feats;
}

template <class T>
Var perceptual_distance(GraphT<T>& graph, const std::vector<Var>& fx, const std::vector<Var>& fy) {
  if (fx.size() != fy.size() || fx.empty()) {
    throw diff::ShapeError("perceptual_distance", {int(fx.size())}, {int(fy.size())});
  }
  Var total;
  for (std::size_t i = 0; i < fx.size(); ++i) {
    Var term = graph.mean(graph.square(graph.sub(fx[i], fy[i])));
    total = total.valid() ? graph.add(total, term) : term;
  }
  return graph.scale(total, T(1) / T(fx.size()));
}

template <class T>
Var perceptual_distance(GraphT<T>& graph, const PerceptualNetT<T>& net, Var x, Var y) {
  if (graph.shape(x) != graph.shape(y)) throw diff::ShapeError("perceptual_distance", graph.shape(x), graph.shape(y));
  return perceptual_distance(graph, perceptual_features(graph, net, x), perceptual_features(graph, net, y));
}

double perceptual_distance(const Tensor& x, const Tensor& y) {
  diff::Graph graph;
  return graph.item(perceptual_distance(graph, default_perceptual_net(), graph.param(x), graph.param(y)));
}

namespace {

template <class T>
Var roll_rows(GraphT<T>& graph, Var x) {
  const int h = graph.shape(x)[0];
  return graph.concat({graph.slice(x, 1, h), graph.slice(x, 0, 1)});
}

}  // namespace

template <class T>
Var noise_regularization(GraphT<T>& graph, const std::vector<Var>& noise) {
  Var total = graph.scalar(T(0));
  for (Var n : noise) {
    const diff::Shape& s = graph.shape(n);
    if (s.size() != 2) throw diff::ShapeError("noise_regularization", {-1, -1}, s);
    Var level = n;
    while (true) {
      const diff::Shape ls = graph.shape(level);
      Var sy = graph.mean(graph.mul(level, roll_rows(graph, level)));
      Var t = graph.transpose(level);
      Var sx = graph.mean(graph.mul(t, roll_rows(graph, t)));
      total = graph.add(total, graph.add(graph.square(sy), graph.square(sx)));
      if (ls[0] <= 8 || ls[1] <= 8 || ls[0] % 2 != 0 || ls[1] % 2 != 0) break;
      Var pooled = graph.avg_pool2(graph.reshape(level, {1, ls[0], ls[1]}));
      level = graph.reshape(pooled, {ls[0] / 2, ls[1] / 2});
    }
  }
  return total;
}

double noise_regularization(const NoiseBank& noise) {
  diff::Graph graph;
  std::vector<Var> vars;
  for (const Tensor& n : noise.layers) vars.push_back(graph.param(n));
  return graph.item(noise_regularization(graph, vars));
}

template std::vector<Var> perceptual_features<float>(GraphT<float>&, const PerceptualNetT<float>&, Var);
template std::vector<Var> perceptual_features<double>(GraphT<double>&, const PerceptualNetT<double>&, Var);
template Var perceptual_distance<float>(GraphT<float>&, const std::vector<Var>&, const std::vector<Var>&);
template Var perceptual_distance<double>(GraphT<double>&, const std::vector<Var>&, const std::vector<Var>&);
template Var perceptual_distance<float>(GraphT<float>&, const PerceptualNetT<float>&, Var, Var);
template Var perceptual_distance<double>(GraphT<double>&, const PerceptualNetT<double>&, Var, Var);
template Var noise_regularization<float>(GraphT<float>&, const std::vector<Var>&);
template Var noise_regularization<double>(GraphT<double>&, const std::vector<Var>&);

void InversionConfig::validate() const {
  if (stage1_steps < 1) throw std::invalid_argument("inversion.stage1_steps must be at least 1");
  if (stage2_steps < 1) throw std::invalid_argument("inversion.stage2_steps must be at least 1");
  if (!(lambda_noise >= 0)) throw std::invalid_argument("inversion.lambda_noise must be non-negative");
  if (!(lambda_l2 >= 0)) throw std::invalid_argument("inversion.lambda_l2 must be non-negative");
  if (!(lr_latent > 0) || !(lr_noise > 0) || !(lr_generator > 0)) {
    throw std::invalid_argument("inversion learning rates must be positive");
  }
  if (latent_mean_count < 1) throw std::invalid_argument("inversion.latent_mean_count must be at least 1");
}

namespace {

void check_target(const RadianceModel& model, const Tensor& target) {
  const int r = model.config.output_resolution();
  if (target.shape != diff::Shape{3, r, r}) throw diff::ShapeError("inversion.target", {3, r, r}, target.shape);
}

double checked_loss(const diff::Graph& graph, Var loss, const char* stage, int step) {
  const double v = graph.item(loss);
  if (!std::isfinite(v)) {
    throw diff::NumericError(std::string(stage) + ": non-finite loss at step " + std::to_string(step));
  }
  return v;
}

void adam_group(diff::AdamState& state, std::vector<Tensor*> params, double lr, int step, int steps) {
  diff::adam_step<float>(state, params, float(diff::cosine_anneal_lr(lr, step, steps)));
}

}  // namespace

LatentFit invert_latent(const Tensor& target, const Pose& pose, const RadianceModel& model,
                        const InversionConfig& config) {
  config.validate();
  radiance::validate(pose);
  check_target(model, target);
  const PerceptualNet& net = default_perceptual_net();

  LatentFit fit;
  fit.w = radiance::latent_mean(model.config, config.latent_mean_seed, config.latent_mean_count);
  fit.noise = radiance::zero_noise(model.config);
  fit.w.requires_grad = true;
  for (Tensor& n : fit.noise.layers) n.requires_grad = true;

  diff::AdamState opt_w, opt_n;
  const int steps = config.stage1_steps;
  for (int step = 0; step < steps; ++step) {
    diff::Graph graph;
    std::vector<Var> target_feats = perceptual_features(graph, net, graph.param(target));
    const RadianceModel& frozen = model;
    ModelVars v{graph.param(fit.w), radiance::bind_generator(graph, frozen.g), radiance::bind_decoder(graph, frozen.decoder),
                radiance::bind_superres(graph, frozen.superres), radiance::bind_noise(graph, fit.noise)};
    Var x = radiance::synthesize(graph, model.config, v, pose);
    Var loss = perceptual_distance(graph, perceptual_features(graph, net, x), target_feats);
    if (config.lambda_noise > 0) {
      Var reg = noise_regularization(graph, {v.noise.layers[0], v.noise.layers[1]});
      loss = graph.add(loss, graph.scale(reg, float(config.lambda_noise)));
    }
    fit.curve.push_back(checked_loss(graph, loss, "invert_latent", step));
    fit.w.zero_grad();
    for (Tensor& n : fit.noise.layers) n.zero_grad();
    graph.backward(loss);
    adam_group(opt_w, {&fit.w}, config.lr_latent, step, steps);
    adam_group(opt_n, {&fit.noise.layers[0], &fit.noise.layers[1]}, config.lr_noise, step, steps);
  }
  fit.w.requires_grad = false;
  fit.w.grad.clear();
  for (Tensor& n : fit.noise.layers) {
    n.requires_grad = false;
    n.grad.clear();
  }
  return fit;
}

GeneratorFit finetune_generator(const Tensor& target, const Pose& pose, const RadianceModel& model, const Tensor& w,
                                const NoiseBank& noise, const InversionConfig& config) {
  config.validate();
  radiance::validate(pose);
  check_target(model, target);
  if (w.shape != model.w.shape) throw diff::ShapeError("finetune_generator.w", model.w.shape, w.shape);
  const PerceptualNet& net = default_perceptual_net();

  GeneratorFit fit;
  fit.g = model.g;
  std::vector<Tensor*> params = radiance::param_list(fit.g);
  for (Tensor* p : params) p->requires_grad = true;

  diff::AdamState opt;
  const int steps = config.stage2_steps;
  for (int step = 0; step < steps; ++step) {
    diff::Graph graph;
    Var tgt = graph.param(target);
    std::vector<Var> target_feats = perceptual_features(graph, net, tgt);
    ModelVars v{graph.param(w), radiance::bind_generator(graph, fit.g), radiance::bind_decoder(graph, model.decoder),
                radiance::bind_superres(graph, model.superres), radiance::bind_noise(graph, noise)};
    Var x = radiance::synthesize(graph, model.config, v, pose);
    Var loss = perceptual_distance(graph, perceptual_features(graph, net, x), target_feats);
    if (config.lambda_l2 > 0) {
      Var l2 = graph.mean(graph.square(graph.sub(x, tgt)));
      loss = graph.add(loss, graph.scale(l2, float(config.lambda_l2)));
    }
    fit.curve.push_back(checked_loss(graph, loss, "finetune_generator", step));
    diff::zero_grads<float>(params);
    graph.backward(loss);
    adam_group(opt, params, config.lr_generator, step, steps);
  }
  for (Tensor* p : params) {
    p->requires_grad = false;
    p->grad.clear();
  }
  return fit;
}

InversionResult invert(const Tensor& target, const Pose& pose, const RadianceModel& model,
                       const InversionConfig& config) {
  LatentFit latent = invert_latent(target, pose, model, config);
  GeneratorFit tuned = finetune_generator(target, pose, model, latent.w, latent.noise, config);
  return {std::move(latent.w), std::move(latent.noise), std::move(tuned.g), std::move(latent.curve),
          std::move(tuned.curve)};
}

RadianceModel apply(const RadianceModel& model, const InversionResult& result) {
  RadianceModel out = model;
  out.w = result.w;
  out.noise = result.noise;
  out.g = result.g;
  return out;
}

diff::TensorMap to_tensor_map(const InversionResult& result) {
  diff::TensorMap out;
  auto put = [&](const std::string& name, const Tensor& t) { out.emplace(name, Tensor(t.shape, t.data)); };
  put("w", result.w);
  result.noise.visit(put);
  result.g.visit(put);
  auto curve = [&](const std::string& name, const std::vector<double>& c) {
    out.emplace(name, Tensor({int(c.size())}, std::vector<float>(c.begin(), c.end())));
  };
  curve("curve.stage1", result.stage1_curve);
  curve("curve.stage2", result.stage2_curve);
  return out;
}

InversionResult inversion_from_tensor_map(const radiance::RadianceConfig& config, const diff::TensorMap& tensors) {
  RadianceModel shape_source = radiance::make_radiance_model(config, 0);
  InversionResult r;
  r.w = diff::blob_get(tensors, "w", shape_source.w.shape);
  r.noise = shape_source.noise;
  r.noise.visit([&](const std::string& name, Tensor& t) { t = diff::blob_get(tensors, name, t.shape); });
  r.g = shape_source.g;
  r.g.visit([&](const std::string& name, Tensor& t) { t = diff::blob_get(tensors, name, t.shape); });
  for (auto [name, curve] : {std::pair{"curve.stage1", &r.stage1_curve}, std::pair{"curve.stage2", &r.stage2_curve}}) {
    auto it = tensors.find(name);
    if (it == tensors.end() || it->second.rank() != 1) throw diff::BlobError(std::string("missing tensor ") + name);
    curve->assign(it->second.data.begin(), it->second.data.end());
  }
  return r;
}

double mse(const Tensor& a, const Tensor& b) {
  if (a.shape != b.shape) throw diff::ShapeError("mse", a.shape, b.shape);
  double s = 0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = double(a.data[i]) - double(b.data[i]);
    s += d * d;
  }
  return s / double(a.numel());
}

double psnr(const Tensor& a, const Tensor& b) {
  const double m = mse(a, b);
  return m == 0 ? INFINITY : 10.0 * std::log10(1.0 / m);
}

}  // namespace nerftap::inversion
