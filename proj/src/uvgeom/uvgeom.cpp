#include "nerftap/uvgeom/uvgeom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "nerftap/radiance/field.hpp"

namespace nerftap::uvgeom {

void Mesh::validate() const {
  if (uv.size() != vertices.size()) throw std::invalid_argument("mesh needs one uv per vertex");
  for (const auto& f : faces)
    for (int i : f)
      if (i < 0 || std::size_t(i) >= vertices.size()) throw std::invalid_argument("mesh face index out of range");
  for (const auto& t : uv)
    if (!(t[0] >= 0 && t[0] <= 1 && t[1] >= 0 && t[1] <= 1)) throw std::invalid_argument("mesh uv outside [0,1]^2");
}

Mesh build_face_mesh(const Pose& pose, const FaceMeshConfig& config) {
  if (config.grid < 2) throw std::invalid_argument("face mesh grid must be at least 2");
  const radiance::Camera cam = radiance::make_camera(pose, 1.0);
  const auto [a, b, c] = config.semi_axes;
  const int n = config.grid;
  Mesh mesh;
  for (int row = 0; row < n; ++row) {
    const double phi = std::numbers::pi * (0.5 - double(row) / (n - 1));
    for (int col = 0; col < n; ++col) {
      const double theta = std::numbers::pi * (double(col) / (n - 1) - 0.5);
      const radiance::Vec3 p{a * std::sin(theta) * std::cos(phi), b * std::sin(phi), c * std::cos(theta) * std::cos(phi)};
      auto dot = [&p](const radiance::Vec3& e) { return p[0] * e[0] + p[1] * e[1] + p[2] * e[2]; };
      mesh.vertices.push_back({dot(cam.right), dot(cam.up), config.centre_depth + dot(cam.forward)});
      mesh.uv.push_back({double(col) / (n - 1), 0.5 * (1.0 - std::sin(phi))});
    }
  }
  for (int row = 0; row + 1 < n; ++row)
    for (int col = 0; col + 1 < n; ++col) {
      const int i = row * n + col;
      mesh.faces.push_back({i, i + 1, i + n});
      mesh.faces.push_back({i + 1, i + n + 1, i + n});
    }
  return mesh;
}

std::size_t UVLookup::valid_count() const { return std::size_t(std::count(valid.begin(), valid.end(), 1)); }

UVLookup rasterize_uv(const Mesh& mesh, int resolution) {
  mesh.validate();
  if (resolution < 1) throw std::invalid_argument("rasterization resolution must be positive");
  const int R = resolution;
  UVLookup out;
  out.resolution = R;
  out.u.assign(std::size_t(R) * R, 0.0f);
  out.v.assign(std::size_t(R) * R, 0.0f);
  out.depth.assign(std::size_t(R) * R, std::numeric_limits<float>::infinity());
  out.valid.assign(std::size_t(R) * R, 0);
  std::vector<double> zbuf(std::size_t(R) * R, std::numeric_limits<double>::infinity());

  std::vector<std::array<double, 2>> px(mesh.vertices.size());
  for (std::size_t i = 0; i < px.size(); ++i) {
    px[i] = {(mesh.vertices[i][0] + 1.0) * 0.5 * R - 0.5, (1.0 - mesh.vertices[i][1]) * 0.5 * R - 0.5};
  }
  for (const auto& f : mesh.faces) {
    const auto &p0 = px[f[0]], &p1 = px[f[1]], &p2 = px[f[2]];
    const double area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p2[0] - p0[0]) * (p1[1] - p0[1]);
    if (std::abs(area) < 1e-12) {
      ++out.degenerate_triangles;
      continue;
    }
    const int x0 = std::max(0, int(std::ceil(std::min({p0[0], p1[0], p2[0]}))));
    const int x1 = std::min(R - 1, int(std::floor(std::max({p0[0], p1[0], p2[0]}))));
    const int y0 = std::max(0, int(std::ceil(std::min({p0[1], p1[1], p2[1]}))));
    const int y1 = std::min(R - 1, int(std::floor(std::max({p0[1], p1[1], p2[1]}))));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        const double w0 = ((p1[0] - x) * (p2[1] - y) - (p2[0] - x) * (p1[1] - y)) / area;
        const double w1 = ((p2[0] - x) * (p0[1] - y) - (p0[0] - x) * (p2[1] - y)) / area;
        const double w2 = 1.0 - w0 - w1;
        constexpr double eps = -1e-9;
        if (w0 < eps || w1 < eps || w2 < eps) continue;
        const double z = w0 * mesh.vertices[f[0]][2] + w1 * mesh.vertices[f[1]][2] + w2 * mesh.vertices[f[2]][2];
        const std::size_t k = std::size_t(y) * R + x;
        if (!(z < zbuf[k])) continue;
        zbuf[k] = z;
        out.depth[k] = float(z);
        out.u[k] = float(std::clamp(w0 * mesh.uv[f[0]][0] + w1 * mesh.uv[f[1]][0] + w2 * mesh.uv[f[2]][0], 0.0, 1.0));
        out.v[k] = float(std::clamp(w0 * mesh.uv[f[0]][1] + w1 * mesh.uv[f[1]][1] + w2 * mesh.uv[f[2]][1], 0.0, 1.0));
        out.valid[k] = 1;
      }
  }
  return out;
}

diff::TensorMap to_tensor_map(const UVLookup& lookup, const std::string& key) {
  const int R = lookup.resolution;
  const std::string base = "uvlookup." + key + ".";
  diff::TensorMap out;
  out.emplace(base + "u", Tensor({R, R}, lookup.u));
  out.emplace(base + "v", Tensor({R, R}, lookup.v));
  std::vector<float> depth = lookup.depth, valid(lookup.valid.begin(), lookup.valid.end());
  for (std::size_t i = 0; i < depth.size(); ++i)
    if (!lookup.valid[i]) depth[i] = -1.0f;
  out.emplace(base + "depth", Tensor({R, R}, depth));
  out.emplace(base + "valid", Tensor({R, R}, valid));
  return out;
}

UVLookup lookup_from_tensor_map(const diff::TensorMap& tensors, const std::string& key, int resolution) {
  const std::string base = "uvlookup." + key + ".";
  const diff::Shape shape{resolution, resolution};
  UVLookup out;
  out.resolution = resolution;
  out.u = diff::blob_get(tensors, base + "u", shape).data;
  out.v = diff::blob_get(tensors, base + "v", shape).data;
  out.depth = diff::blob_get(tensors, base + "depth", shape).data;
  const auto& valid = diff::blob_get(tensors, base + "valid", shape).data;
  out.valid.resize(valid.size());
  for (std::size_t i = 0; i < valid.size(); ++i) {
    out.valid[i] = valid[i] != 0.0f;
    if (!out.valid[i]) out.depth[i] = std::numeric_limits<float>::infinity();
  }
  return out;
}

std::string pose_key(const Pose& pose) {
  char buf[96];
  std::snprintf(buf, sizeof buf, "y%.6f_p%.6f_d%.6f", pose.yaw_deg, pose.pitch_deg, pose.camera_distance);
  return buf;
}

MaskKind parse_mask_kind(const std::string& name) {
  if (name == "eye") return MaskKind::Eye;
  if (name == "eye_nose") return MaskKind::EyeNose;
  if (name == "respirator") return MaskKind::Respirator;
  throw std::invalid_argument("unknown mask kind '" + name + "'");
}

std::string mask_kind_name(MaskKind kind) {
  switch (kind) {
    case MaskKind::Eye: return "eye";
    case MaskKind::EyeNose: return "eye_nose";
    case MaskKind::Respirator: return "respirator";
  }
  throw std::invalid_argument("unknown mask kind");
}

std::size_t Mask::area() const { return std::size_t(std::count(grid.begin(), grid.end(), 1)); }

Tensor Mask::to_tensor() const {
  Tensor t({resolution, resolution});
  for (std::size_t i = 0; i < grid.size(); ++i) t.data[i] = grid[i];
  return t;
}

Mask Mask::from_tensor(MaskKind kind, const Tensor& grid) {
  if (grid.rank() != 2 || grid.dim(0) != grid.dim(1)) throw diff::ShapeError("mask", {-1, -1}, grid.shape);
  Mask m;
  m.kind = kind;
  m.resolution = grid.dim(0);
  m.grid.resize(grid.numel());
  for (std::size_t i = 0; i < grid.numel(); ++i) {
    if (grid.data[i] != 0.0f && grid.data[i] != 1.0f) throw std::invalid_argument("mask values must be exactly 0 or 1");
    m.grid[i] = grid.data[i] != 0.0f;
  }
  return m;
}

namespace {

bool in_ellipse(double u, double v, double cu, double cv, double ru, double rv) {
  const double du = (u - cu) / ru, dv = (v - cv) / rv;
  return du * du + dv * dv <= 1.0;
}

bool in_box(double u, double v, double u0, double u1, double v0, double v1) { return u >= u0 && u <= u1 && v >= v0 && v <= v1; }

bool eye_region(double u, double v) {
  return in_ellipse(u, v, 0.3, 0.35, 0.14, 0.09) || in_ellipse(u, v, 0.7, 0.35, 0.14, 0.09) ||
         in_box(u, v, 0.3, 0.7, 0.32, 0.38);
}

}  // namespace

Mask make_mask(MaskKind kind, int resolution) {
  if (resolution < 16) throw std::invalid_argument("mask resolution must be at least 16");
  Mask m;
  m.kind = kind;
  m.resolution = resolution;
  m.grid.assign(std::size_t(resolution) * resolution, 0);
  for (int row = 0; row < resolution; ++row)
    for (int col = 0; col < resolution; ++col) {
      const double u = (col + 0.5) / resolution, v = (row + 0.5) / resolution;
      bool in = false;
      switch (kind) {
        case MaskKind::Eye: in = eye_region(u, v); break;
        case MaskKind::EyeNose: in = eye_region(u, v) || in_box(u, v, 0.42, 0.58, 0.35, 0.62); break;
        case MaskKind::Respirator: in = in_ellipse(u, v, 0.5, 0.75, 0.32, 0.2); break;
      }
      m.grid[std::size_t(row) * resolution + col] = in;
    }
  return m;
}

double uv_to_texel(double a, int texture_resolution) { return a * texture_resolution - 0.5; }

namespace {

double sample_mask(const Mask& m, double u, double v) {
  const int U = m.resolution;
  const double x = std::clamp(uv_to_texel(u, U), 0.0, double(U - 1));
  const double y = std::clamp(uv_to_texel(v, U), 0.0, double(U - 1));
  const int x0 = std::min(int(x), U - 2), y0 = std::min(int(y), U - 2);
  const double fx = x - x0, fy = y - y0;
  auto at = [&](int r, int c) { return double(m.grid[std::size_t(r) * U + c]); };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x0 + 1)) + fy * ((1 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
}

}  // namespace

PatchPlan plan_patch(const UVLookup& lookup, const Mask& mask) {
  PatchPlan plan;
  plan.image_resolution = lookup.resolution;
  plan.texture_resolution = mask.resolution;
  std::vector<float> coords;
  for (std::size_t k = 0; k < lookup.valid.size(); ++k) {
    if (!lookup.valid[k] || sample_mask(mask, lookup.u[k], lookup.v[k]) < 0.5) continue;
    plan.pixels.push_back(int(k));
    coords.push_back(float(uv_to_texel(lookup.u[k], mask.resolution)));
    coords.push_back(float(uv_to_texel(lookup.v[k], mask.resolution)));
  }
  if (!plan.pixels.empty()) plan.coords = Tensor({int(plan.pixels.size()), 2}, std::move(coords));
  return plan;
}

template <class T>
Var apply_patch(GraphT<T>& graph, Var x, Var z, const PatchPlan& plan) {
  const diff::Shape& sx = graph.shape(x);
  const diff::Shape& sz = graph.shape(z);
  const int R = plan.image_resolution, U = plan.texture_resolution;
  if (sx != diff::Shape{3, R, R}) throw diff::ShapeError("apply_patch.image", {3, R, R}, sx);
  if (sz != diff::Shape{3, U, U}) throw diff::ShapeError("apply_patch.texture", {3, U, U}, sz);
  if (plan.pixels.empty()) return x;
  Var coords = graph.constant(plan.coords.template cast<T>());
  return graph.overwrite_pixels(x, graph.grid_sample(z, coords), plan.pixels);
}

Tensor apply_patch(const Tensor& x, const UVLookup& lookup, const Tensor& z, const Mask& mask) {
  if (x.rank() != 3 || x.dim(1) != lookup.resolution) {
    throw diff::ShapeError("apply_patch.image", {3, lookup.resolution, lookup.resolution}, x.shape);
  }
  const PatchPlan plan = plan_patch(lookup, mask);
  diff::Graph graph;
  return graph.value(apply_patch(graph, graph.param(x), graph.param(z), plan));
}

template Var apply_patch<float>(GraphT<float>&, Var, Var, const PatchPlan&);
template Var apply_patch<double>(GraphT<double>&, Var, Var, const PatchPlan&);

Similarity sample_similarity(Rng& rng, const SimilarityLimits& limits) {
  Similarity s;
  s.rot_deg = rng.uniform(-limits.max_rot_deg, limits.max_rot_deg);
  s.scale = rng.uniform(1.0 - limits.max_scale_dev, 1.0 + limits.max_scale_dev);
  s.shift_x = rng.uniform(-limits.max_shift_px, limits.max_shift_px);
  s.shift_y = rng.uniform(-limits.max_shift_px, limits.max_shift_px);
  return s;
}

template <class T>
Var similarity_transform(GraphT<T>& graph, Var x, const Similarity& s) {
  const diff::Shape& sh = graph.shape(x);
  if (sh.size() != 3) throw diff::ShapeError("similarity_transform", {-1, -1, -1}, sh);
  if (!(s.scale > 0)) throw std::invalid_argument("similarity scale must be positive");
  const int C = sh[0], H = sh[1], W = sh[2];
  const double cx = 0.5 * (W - 1), cy = 0.5 * (H - 1);
  const double th = s.rot_deg * std::numbers::pi / 180.0;
  const double ct = std::cos(th) / s.scale, st = std::sin(th) / s.scale;
  TensorT<T> coords({H * W, 2});
  for (int r = 0; r < H; ++r)
    for (int q = 0; q < W; ++q) {
      const double dx = q - cx - s.shift_x, dy = r - cy - s.shift_y;
      const std::size_t i = std::size_t(r) * W + q;
      coords.data[2 * i] = T(cx + ct * dx + st * dy);
      coords.data[2 * i + 1] = T(cy - st * dx + ct * dy);
    }
  return graph.reshape(graph.grid_sample(x, graph.constant(std::move(coords))), {C, H, W});
}

template <class T>
Var random_similarity_transform(GraphT<T>& graph, Var x, Rng& rng, const SimilarityLimits& limits) {
  return similarity_transform(graph, x, sample_similarity(rng, limits));
}

template Var similarity_transform<float>(GraphT<float>&, Var, const Similarity&);
template Var similarity_transform<double>(GraphT<double>&, Var, const Similarity&);
template Var random_similarity_transform<float>(GraphT<float>&, Var, Rng&, const SimilarityLimits&);
template Var random_similarity_transform<double>(GraphT<double>&, Var, Rng&, const SimilarityLimits&);

Pose sample_pose(const Pose& base, double alpha, double tau, Rng& rng) {
  if (!(alpha > 0)) throw std::invalid_argument("pose sampling needs alpha > 0");
  if (!(tau >= 0)) throw std::invalid_argument("pose sampling needs tau >= 0");
  if (tau == 0) return base;
  Pose p = base;
  p.yaw_deg = std::clamp(base.yaw_deg + tau * (2.0 * rng.beta(alpha, alpha) - 1.0), -Pose::kMaxYaw, Pose::kMaxYaw);
  p.pitch_deg = std::clamp(base.pitch_deg + tau * (2.0 * rng.beta(alpha, alpha) - 1.0), -Pose::kMaxPitch, Pose::kMaxPitch);
  return p;
}

}  // namespace nerftap::uvgeom
