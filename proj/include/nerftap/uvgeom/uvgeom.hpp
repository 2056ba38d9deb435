#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "nerftap/diff/blob.hpp"
#include "nerftap/diff/graph.hpp"
#include "nerftap/radiance/model.hpp"
#include "nerftap/util/rng.hpp"

namespace nerftap::uvgeom {

using diff::GraphT;
using diff::Tensor;
using diff::TensorT;
using diff::Var;
using radiance::Pose;

/// Vertices live in normalized image space: x right and y up in [-1, 1] across the
/// image, z the distance from the camera plane (smaller is nearer).
struct Mesh {
  std::vector<std::array<double, 3>> vertices;
  std::vector<std::array<int, 3>> faces;
  std::vector<std::array<double, 2>> uv;

  /// Throws std::invalid_argument on out-of-range indices or UVs.
  void validate() const;
};

struct FaceMeshConfig {
  int grid = 24;
  std::array<double, 3> semi_axes{0.45, 0.6, 0.35};
  /// Distance of the ellipsoid centre from the camera plane.
  double centre_depth = 2.7;
};

/// Front half of an ellipsoid rotated by the pose (the same rotation the renderer's
/// camera applies), with cylindrical UVs: u follows the azimuth left to right, v the
/// height top to bottom.
Mesh build_face_mesh(const Pose& pose, const FaceMeshConfig& config = {});

struct UVLookup {
  int resolution = 0;
  std::vector<float> u, v, depth;
  std::vector<std::uint8_t> valid;
  int degenerate_triangles = 0;

  std::size_t valid_count() const;
};

/// Z-buffered barycentric rasterization of the mesh at pixel centres.
UVLookup rasterize_uv(const Mesh& mesh, int resolution);

/// Lookup tensors under "uvlookup.<key>.{u,v,depth,valid}".
diff::TensorMap to_tensor_map(const UVLookup& lookup, const std::string& key);
UVLookup lookup_from_tensor_map(const diff::TensorMap& tensors, const std::string& key, int resolution);
/// Stable key for a pose's lookup.
std::string pose_key(const Pose& pose);

enum class MaskKind { Eye, EyeNose, Respirator };
MaskKind parse_mask_kind(const std::string& name);
std::string mask_kind_name(MaskKind kind);

struct Mask {
  MaskKind kind = MaskKind::Eye;
  int resolution = 0;
  /// Row-major [v][u] grid of 0/1.
  std::vector<std::uint8_t> grid;

  std::size_t area() const;
  double area_fraction() const { return double(area()) / double(grid.size()); }
  /// [resolution x resolution] tensor of 0/1.
  Tensor to_tensor() const;
  static Mask from_tensor(MaskKind kind, const Tensor& grid);
};

Mask make_mask(MaskKind kind, int resolution = 64);

/// Texel-centre convention: UV coordinate a maps to pixel coordinate a * U - 0.5.
double uv_to_texel(double a, int texture_resolution);

/// Pixels that receive texture and the texel coordinates they sample.
struct PatchPlan {
  int image_resolution = 0;
  int texture_resolution = 0;
  std::vector<int> pixels;
  Tensor coords;  // [pixels x 2] (column, row) in texel units
};

/// A pixel is patched when it is valid and the bilinearly sampled mask is >= 0.5.
PatchPlan plan_patch(const UVLookup& lookup, const Mask& mask);

/// x [3 x R x R], texture z [3 x U x U].
template <class T>
Var apply_patch(GraphT<T>& graph, Var x, Var z, const PatchPlan& plan);
Tensor apply_patch(const Tensor& x, const UVLookup& lookup, const Tensor& z, const Mask& mask);

struct SimilarityLimits {
  double max_rot_deg = 5.0;
  double max_scale_dev = 0.05;
  double max_shift_px = 2.0;
};

struct Similarity {
  double rot_deg = 0.0;
  double scale = 1.0;
  double shift_x = 0.0;
  double shift_y = 0.0;
};

Similarity sample_similarity(Rng& rng, const SimilarityLimits& limits = {});
/// Bilinear resampling of x [C x H x W] about the image centre, clamping at the border.
template <class T>
Var similarity_transform(GraphT<T>& graph, Var x, const Similarity& s);
template <class T>
Var random_similarity_transform(GraphT<T>& graph, Var x, Rng& rng, const SimilarityLimits& limits = {});

/// yaw and pitch each offset by tau * (2 beta - 1), beta ~ Beta(alpha, alpha), then clamped to the valid ranges.
Pose sample_pose(const Pose& base, double alpha, double tau, Rng& rng);

}  // namespace nerftap::uvgeom
