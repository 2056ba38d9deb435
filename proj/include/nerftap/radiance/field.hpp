#pragma once

#include <array>
#include <functional>
#include <vector>

#include "nerftap/radiance/model.hpp"

namespace nerftap::radiance {

using Vec3 = std::array<double, 3>;

struct Camera {
  Vec3 origin, right, up, forward;
  double tan_half_fov = 0.0;
};

Camera make_camera(const Pose& pose, double tan_half_fov);

struct Ray {
  Vec3 origin, direction;
};

/// Ray through the centre of pixel (row, col) of a resolution x resolution image; row 0 is the top.
Ray pixel_ray(const Camera& camera, int row, int col, int resolution);

/// Depths of the n quadrature points in [t_n, t_f]: interval midpoints, or jittered within each interval.
std::vector<double> sample_depths(double t_n, double t_f, int n, Rng* jitter = nullptr);

/// Radius of p in units of the head prior's semi-axes.
double prior_radius(const RadianceConfig& config, const Vec3& p);
double density_prior(const RadianceConfig& config, const Vec3& p);
bool in_support(const RadianceConfig& config, const Vec3& p);

/// Plane-grid coordinates (column, row) of p on the xy, xz and yz planes.
std::array<std::array<double, 2>, 3> plane_coords(const Vec3& p, int plane_resolution);

/// Sum of the three bilinear plane samples at p. planes is [3C x R x R]. Components of p
/// outside [-1, 1] are clamped and `clamped` is set.
std::vector<double> sample_point(const diff::Tensor& planes, const Vec3& p, bool* clamped = nullptr);

struct FieldSample {
  double sigma = 0.0;
  Vec3 color{0, 0, 0};
  std::vector<double> feat;
};
using Field = std::function<FieldSample(const Vec3&)>;

struct RayResult {
  Vec3 rgb{0, 0, 0};
  std::vector<double> feat;
  double alpha = 0.0;
  std::vector<double> weights;
  std::vector<double> transmittance;
};

/// Midpoint quadrature of the emission-absorption integral with background blending.
RayResult integrate_ray(const Field& field, const Ray& ray, double t_n, double t_f, int n_samples, const Vec3& background,
                        Rng* jitter = nullptr);

/// The decoded radiance field of `model` (planes from generate_planes(model)).
Field model_field(const RadianceModel& model, const diff::Tensor& planes);

RayResult render_ray(const RadianceModel& model, const diff::Tensor& planes, const Vec3& origin, const Vec3& direction,
                     double t_n, double t_f, int n_samples);

}  // namespace nerftap::radiance
