#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "nerftap/attack/attack.hpp"
#include "nerftap/eval/eval.hpp"
#include "nerftap/faceid/faceid.hpp"
#include "nerftap/inversion/inversion.hpp"
#include "nerftap/radiance/model.hpp"

namespace nerftap::cli {

namespace fs = std::filesystem;

/// Exit code 2.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Exit code 3.
class MissingArtifact : public std::runtime_error {
 public:
  explicit MissingArtifact(const fs::path& path)
      : std::runtime_error("missing artifact: " + path.string() + " (run the upstream command first)"), path(path) {}
  fs::path path;
};

struct FaceidSection {
  std::string archs = "ABCD";
  int train_ids = 24;
  int train_views = 8;
  faceid::SmokeTrainConfig train;
  faceid::PoseRange range;
};

struct EvalSection {
  int victims = 8;
  int views = 20;
  int calibration_ids = 8;
  int calibration_views = 20;
  double far = 0.001;
  char system_arch = 'E';
  int render_views = 5;
  double render_yaw_min = -30.0;
  double render_yaw_max = 30.0;
};

/// Models attacked in white-box mode and the baseline knobs live beside the attack hyper-parameters.
struct AttackSection {
  attack::AttackConfig config;
  attack::BaselineConfig baseline;
  std::string whitebox = "A";
};

/// Per-module seeds are derived from `seed`; they never appear in the document.
struct RunConfig {
  radiance::RadianceConfig radiance;
  inversion::InversionConfig inversion;
  FaceidSection faceid;
  AttackSection attack;
  EvalSection eval;
  std::uint64_t seed = 1;
  std::string out = "run";

  void validate() const;
};

/// Unknown sections or keys and mistyped values throw ConfigError.
RunConfig parse_config(const std::string& json_text);
RunConfig load_config(const fs::path& path);
/// Every field, defaults included, as pretty-printed JSON.
std::string dump_config(const RunConfig& config);
std::string config_hash(const RunConfig& config);

enum class Ablation { Style, Transform2d, ViewSynth };
Ablation parse_ablation(const std::string& name);
std::string ablation_name(Ablation a);

struct AttackRequest {
  std::string method = "nerftap";
  uvgeom::MaskKind mask = uvgeom::MaskKind::EyeNose;
  std::vector<Ablation> ablations;
};

/// Directory name under attacks/ and the method label used in reports, e.g.
/// "nerftap_eye_nose_A_no-style" and "nerftap-no-style".
std::string attack_tag(const AttackRequest& request, char whitebox);
std::string method_label(const AttackRequest& request);

/// The artifact tree of one run. Every command is a pure function of the config and
/// the files written by upstream commands.
class Workspace {
 public:
  explicit Workspace(RunConfig config);

  const RunConfig& config() const { return config_; }
  const fs::path& root() const { return root_; }

  /// identities/, acquired/, zoo/ (attack zoo and the mock system's model), lookups/,
  /// world.nftp, latents.nftp, manifest.json.
  void prepare();
  /// calibration.json with one FAR threshold per zoo model.
  std::vector<eval::ThresholdCalibration> calibrate();
  /// Inverts every acquired image into inversions/. Returns the PSNR of each.
  std::vector<double> invert_all();
  /// Inverts one image into inversions/<stem>.nftp; the pose is the camera it was taken from.
  double invert_image(const fs::path& image, const radiance::Pose& pose);
  /// One artifact per victim and white-box model under attacks/<tag>/. The cache may be
  /// shared across calls.
  std::vector<fs::path> attack(const AttackRequest& request, attack::RenderCache& cache);
  /// Transfer matrix over every attack present plus the clean-source control ("none").
  eval::EvalReport evaluate();
  /// The source wearing the first victim's patch at evenly spaced yaws.
  std::vector<fs::path> render(const AttackRequest& request);

  /// Writes `<command>.config.json` with the resolved config.
  void echo_config(const std::string& command) const;

  radiance::RadianceModel world() const;
  std::vector<faceid::Embedder> zoo() const;
  /// The held-out embedder behind the mock FR system.
  faceid::Embedder system_model() const;
  attack::Subject subject(const std::string& name) const;
  radiance::RadianceModel source_truth() const;
  faceid::IdentitySet victims() const;

 private:
  fs::path require(const fs::path& relative) const;
  std::vector<std::string> acquired_names() const;

  RunConfig config_;
  fs::path root_;
};

/// Files under `root` (relative, sorted) with their sha256.
std::vector<std::pair<std::string, std::string>> tree_hashes(const fs::path& root);

/// Entry point of the command-line tool; returns the process exit code.
int run(int argc, char** argv);

}  // namespace nerftap::cli
