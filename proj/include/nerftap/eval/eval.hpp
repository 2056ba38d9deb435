#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nerftap/attack/attack.hpp"
#include "nerftap/faceid/faceid.hpp"

namespace nerftap::eval {

using diff::Tensor;

struct ThresholdCalibration {
  std::string model;
  double epsilon = 0.0;
  double far_achieved = 0.0;
  std::size_t n_impostor_pairs = 0;
};

/// Threshold from raw impostor scores: the (k+1)-th largest score with k = floor(far * n),
/// raised to the midpoint with the next larger distinct score. Throws when n < 1 / far.
ThresholdCalibration calibrate_scores(std::vector<double> impostor_scores, double far);
/// Cosines of every cross-identity image pair of the set.
std::vector<double> impostor_scores(const faceid::Embedder& model, const faceid::IdentitySet& set);
ThresholdCalibration calibrate_threshold(const faceid::Embedder& model, const faceid::IdentitySet& set, double far);

/// 100 * #{(i, j) : scores[i][j] > epsilon} / (N M).
double asr_from_scores(const std::vector<std::vector<double>>& scores, double epsilon);
/// Cosine of every (target, attack) embedding pair, targets along rows.
std::vector<std::vector<double>> pair_scores(const faceid::Embedder& model, const std::vector<Tensor>& targets,
                                             const std::vector<Tensor>& attacks);
double asr(const faceid::Embedder& model, const std::vector<Tensor>& targets, const std::vector<Tensor>& attacks,
           double epsilon);

class SystemClient {
 public:
  virtual ~SystemClient() = default;
  virtual std::string name() const = 0;
  /// Match confidence in [0, 100].
  virtual double confidence(const Tensor& x1, const Tensor& x2) const = 0;
};

/// 50 (1 + cos) under a held-out embedder that no attack is trained against.
class MockClient : public SystemClient {
 public:
  explicit MockClient(faceid::Embedder embedder) : embedder_(std::move(embedder)) {}
  std::string name() const override { return "mock-" + faceid::checkpoint_name(embedder_); }
  double confidence(const Tensor& x1, const Tensor& x2) const override;

 private:
  faceid::Embedder embedder_;
};

double mock_confidence(const faceid::Embedder& embedder, const Tensor& x1, const Tensor& x2);
/// 50 (1 + cos), clamped to [0, 100].
double confidence_from_cosine(double cosine);

struct McsResult {
  double mcs = 0.0;
  std::size_t pairs = 0;
  std::size_t skipped = 0;
  std::vector<std::string> errors;
};
/// Mean confidence over all N M pairs; failing pairs are skipped and reported.
McsResult mcs(const SystemClient& client, const std::vector<Tensor>& targets, const std::vector<Tensor>& attacks);

/// Attack images for UV-map artifacts: `source` rendered at each pose with the texture
/// applied. Global artifacts contribute their single adversarial image.
std::vector<Tensor> render_attack_images(const attack::AttackArtifact& artifact,
                                         const radiance::RadianceModel& source, const std::vector<radiance::Pose>& poses,
                                         uvgeom::MaskKind mask);

struct AttackImages {
  std::string train_model;  // white-box model id, "-" for none
  std::string method;
  std::string mask;
  std::vector<Tensor> images;
};

/// One victim: their recorded images and the attacks aimed at them.
struct EvalCase {
  std::vector<Tensor> targets;
  std::vector<AttackImages> attacks;
};

struct Cell {
  std::string train_model, test_model, mask, method;
  double asr = 0.0;
  bool whitebox = false;
  std::size_t successes = 0, pairs = 0;
  bool operator==(const Cell&) const = default;
};

struct McsCell {
  std::string client, train_model, mask, method;
  double mcs = 0.0;
  std::size_t pairs = 0, skipped = 0;
  bool operator==(const McsCell&) const = default;
};

struct EvalReport {
  std::vector<Cell> cells;
  std::vector<McsCell> mcs;
  std::string config_hash;
  std::uint64_t seed = 0;

  const Cell& cell(const std::string& train_model, const std::string& test_model, const std::string& method) const;
  /// Mean ASR over test models other than the training model.
  double blackbox_mean(const std::string& train_model, const std::string& method) const;
  bool operator==(const EvalReport&) const = default;
};

/// Cells pool success counts over cases, so every (train, method, mask) attack must
/// appear in each case. `zoo` and `thresholds` are parallel; model ids are arch letters.
EvalReport transfer_matrix(const std::vector<faceid::Embedder>& zoo, const std::vector<ThresholdCalibration>& thresholds,
                           const std::vector<EvalCase>& cases, const std::vector<const SystemClient*>& clients);

std::string to_json(const EvalReport& report);
EvalReport report_from_json(const std::string& text);
/// train_model,test_model,mask,method,asr,whitebox
std::string to_csv(const EvalReport& report);

}  // namespace nerftap::eval
