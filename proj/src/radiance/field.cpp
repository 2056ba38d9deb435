#include "nerftap/radiance/field.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace nerftap::radiance {

namespace {

Vec3 normalize(const Vec3& v) {
  const double n = std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
  return {v[0] / n, v[1] / n, v[2] / n};
}

Vec3 cross(const Vec3& a, const Vec3& b) {
  return {a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]};
}

double softplus(double x) { return x > 30 ? x : std::log1p(std::exp(x)); }
double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double bilerp(const float* plane, int R, double col, double row) {
  col = std::clamp(col, 0.0, double(R - 1));
  row = std::clamp(row, 0.0, double(R - 1));
  const int x0 = std::min(int(std::floor(col)), R - 2), y0 = std::min(int(std::floor(row)), R - 2);
  const double fx = col - x0, fy = row - y0;
  auto at = [&](int y, int x) { return double(plane[std::size_t(y) * R + x]); };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) + fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
}

}  // namespace

Camera make_camera(const Pose& pose, double tan_half_fov) {
  validate(pose);
  const double yaw = pose.yaw_deg * std::numbers::pi / 180.0;
  const double pitch = pose.pitch_deg * std::numbers::pi / 180.0;
  const double d = pose.camera_distance;
  Camera c;
  c.origin = {d * std::sin(yaw) * std::cos(pitch), d * std::sin(pitch), d * std::cos(yaw) * std::cos(pitch)};
  c.forward = normalize({-c.origin[0], -c.origin[1], -c.origin[2]});
  c.right = normalize(cross(c.forward, {0, 1, 0}));
  c.up = cross(c.right, c.forward);
  c.tan_half_fov = tan_half_fov;
  return c;
}

Ray pixel_ray(const Camera& camera, int row, int col, int resolution) {
  const double nx = (col + 0.5) / resolution * 2.0 - 1.0;
  const double ny = 1.0 - (row + 0.5) / resolution * 2.0;
  Vec3 d;
  for (int a = 0; a < 3; ++a) {
    d[a] = camera.forward[a] + camera.tan_half_fov * (nx * camera.right[a] + ny * camera.up[a]);
  }
  return {camera.origin, normalize(d)};
}

std::vector<double> sample_depths(double t_n, double t_f, int n, Rng* jitter) {
  if (!(t_n < t_f)) throw std::invalid_argument("ray bounds need t_n < t_f");
  if (n < 2) throw std::invalid_argument("a ray needs at least two samples");
  const double delta = (t_f - t_n) / n;
  std::vector<double> t(n);
  for (int i = 0; i < n; ++i) t[i] = t_n + (i + (jitter ? jitter->uniform() : 0.5)) * delta;
  return t;
}

double prior_radius(const RadianceConfig& config, const Vec3& p) {
  double s = 0;
  for (int a = 0; a < 3; ++a) s += (p[a] / config.shape_axes[a]) * (p[a] / config.shape_axes[a]);
  return std::sqrt(s);
}

double density_prior(const RadianceConfig& config, const Vec3& p) {
  return config.prior_gain * (1.0 - prior_radius(config, p)) + config.prior_offset;
}

bool in_support(const RadianceConfig& config, const Vec3& p) { return prior_radius(config, p) <= config.support_radius; }

std::array<std::array<double, 2>, 3> plane_coords(const Vec3& p, int R) {
  auto g = [R](double v) { return (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * (R - 1); };
  return {{{g(p[0]), g(p[1])}, {g(p[0]), g(p[2])}, {g(p[1]), g(p[2])}}};
}

std::vector<double> sample_point(const diff::Tensor& planes, const Vec3& p, bool* clamped) {
  if (planes.rank() != 3 || planes.dim(0) % 3 != 0 || planes.dim(1) != planes.dim(2)) {
    throw diff::ShapeError("sample_point.planes", {-3, -1, -1}, planes.shape);
  }
  const int C = planes.dim(0) / 3, R = planes.dim(1);
  if (clamped) {
    *clamped = false;
    for (double v : p) *clamped = *clamped || v < -1.0 || v > 1.0;
  }
  const auto pc = plane_coords(p, R);
  std::vector<double> f(C, 0.0);
  const std::size_t plane = std::size_t(R) * R;
  for (int pl = 0; pl < 3; ++pl)
    for (int c = 0; c < C; ++c) f[c] += bilerp(planes.data.data() + (std::size_t(pl) * C + c) * plane, R, pc[pl][0], pc[pl][1]);
  return f;
}

RayResult integrate_ray(const Field& field, const Ray& ray, double t_n, double t_f, int n_samples, const Vec3& background,
                        Rng* jitter) {
  const auto ts = sample_depths(t_n, t_f, n_samples, jitter);
  const double delta = (t_f - t_n) / n_samples;
  RayResult out;
  double trans = 1.0;
  for (int i = 0; i < n_samples; ++i) {
    Vec3 p;
    for (int a = 0; a < 3; ++a) p[a] = ray.origin[a] + ts[i] * ray.direction[a];
    const FieldSample s = field(p);
    if (!std::isfinite(s.sigma)) throw diff::NumericError("non-finite density at sample " + std::to_string(i));
    if (out.feat.size() < s.feat.size()) out.feat.resize(s.feat.size(), 0.0);
    const double a = std::exp(-s.sigma * delta);
    const double w = trans * (1.0 - a);
    out.transmittance.push_back(trans);
    out.weights.push_back(w);
    for (int c = 0; c < 3; ++c) out.rgb[c] += w * s.color[c];
    for (std::size_t k = 0; k < s.feat.size(); ++k) out.feat[k] += w * s.feat[k];
    out.alpha += w;
    trans *= a;
  }
  for (int c = 0; c < 3; ++c) out.rgb[c] += (1.0 - out.alpha) * background[c];
  return out;
}

Field model_field(const RadianceModel& model, const diff::Tensor& planes) {
  return [&model, &planes](const Vec3& p) {
    const RadianceConfig& cfg = model.config;
    const int F = cfg.feature_channels, D = cfg.decoder_hidden, C = cfg.plane_channels, O = 4 + F;
    FieldSample s;
    s.feat.assign(F, 0.0);
    if (!in_support(cfg, p)) return s;
    const auto f = sample_point(planes, p);
    const auto& dec = model.decoder;
    std::vector<double> h(D);
    for (int j = 0; j < D; ++j) {
      double acc = dec.fc1_b.data[j];
      for (int c = 0; c < C; ++c) acc += f[c] * dec.fc1_w.data[std::size_t(c) * D + j];
      h[j] = softplus(acc);
    }
    std::vector<double> o(O);
    for (int k = 0; k < O; ++k) {
      double acc = dec.fc2_b.data[k];
      for (int j = 0; j < D; ++j) acc += h[j] * dec.fc2_w.data[std::size_t(j) * O + k];
      o[k] = acc;
    }
    for (int c = 0; c < 3; ++c) s.color[c] = sigmoid(o[c]);
    s.sigma = softplus(o[3] + density_prior(cfg, p));
    for (int k = 0; k < F; ++k) s.feat[k] = o[4 + k];
    return s;
  };
}

RayResult render_ray(const RadianceModel& model, const diff::Tensor& planes, const Vec3& origin, const Vec3& direction,
                     double t_n, double t_f, int n_samples) {
  const double n = std::sqrt(direction[0] * direction[0] + direction[1] * direction[1] + direction[2] * direction[2]);
  if (std::abs(n - 1.0) > 1e-6) throw std::invalid_argument("ray direction must be unit length");
  const Vec3 bg{model.config.background[0], model.config.background[1], model.config.background[2]};
  return integrate_ray(model_field(model, planes), {origin, direction}, t_n, t_f, n_samples, bg);
}

}  // namespace nerftap::radiance
