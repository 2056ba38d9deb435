#include "nerftap/eval/eval.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <tuple>

#include <json.hpp>

namespace nerftap::eval {

using nlohmann::json;

ThresholdCalibration calibrate_scores(std::vector<double> scores, double far) {
  if (!(far > 0 && far < 0.5)) throw std::invalid_argument("FAR must lie in (0, 0.5)");
  const std::size_t n = scores.size();
  if (double(n) * far < 1.0) {
    throw std::invalid_argument("FAR " + std::to_string(far) + " is unresolvable with " + std::to_string(n) +
                                " impostor pairs");
  }
  std::sort(scores.begin(), scores.end(), std::greater<>());
  const auto k = std::size_t(std::floor(far * double(n) + 1e-9));
  const double pivot = scores[k];
  // Nearest distinct score above the pivot.
  std::size_t above = k;
  while (above > 0 && scores[above - 1] == pivot) --above;
  ThresholdCalibration cal;
  cal.n_impostor_pairs = n;
  cal.epsilon = above == 0 ? std::nextafter(pivot, std::numeric_limits<double>::infinity())
                           : 0.5 * (pivot + scores[above - 1]);
  std::size_t accepted = 0;
  for (double s : scores) accepted += s > cal.epsilon;
  cal.far_achieved = double(accepted) / double(n);
  return cal;
}

std::vector<double> impostor_scores(const faceid::Embedder& model, const faceid::IdentitySet& set) {
  if (set.identities.size() < 2) throw std::invalid_argument("calibration needs at least two identities");
  std::vector<std::vector<Tensor>> emb;
  for (const auto& id : set.identities) {
    emb.emplace_back();
    for (const auto& v : id.views) emb.back().push_back(faceid::embed_face(model, v.image));
  }
  std::vector<double> scores;
  for (std::size_t a = 0; a < emb.size(); ++a)
    for (std::size_t b = a + 1; b < emb.size(); ++b)
      for (const Tensor& ea : emb[a])
        for (const Tensor& eb : emb[b]) scores.push_back(faceid::cosine(ea, eb));
  return scores;
}

ThresholdCalibration calibrate_threshold(const faceid::Embedder& model, const faceid::IdentitySet& set, double far) {
  ThresholdCalibration cal = calibrate_scores(impostor_scores(model, set), far);
  cal.model = std::string(1, model.arch);
  return cal;
}

double asr_from_scores(const std::vector<std::vector<double>>& scores, double epsilon) {
  std::size_t total = 0, hits = 0;
  for (const auto& row : scores)
    for (double s : row) {
      ++total;
      hits += s > epsilon;
    }
  if (total == 0) throw std::invalid_argument("ASR needs at least one target and one attack");
  return 100.0 * double(hits) / double(total);
}

namespace {

std::vector<Tensor> embed_all(const faceid::Embedder& model, const std::vector<Tensor>& images) {
  std::vector<Tensor> out;
  out.reserve(images.size());
  for (const Tensor& x : images) out.push_back(faceid::embed_face(model, x));
  return out;
}

std::vector<std::vector<double>> cosine_table(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  std::vector<std::vector<double>> out(a.size(), std::vector<double>(b.size()));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.size(); ++j) out[i][j] = faceid::cosine(a[i], b[j]);
  return out;
}

}  // namespace

std::vector<std::vector<double>> pair_scores(const faceid::Embedder& model, const std::vector<Tensor>& targets,
                                             const std::vector<Tensor>& attacks) {
  return cosine_table(embed_all(model, targets), embed_all(model, attacks));
}

double asr(const faceid::Embedder& model, const std::vector<Tensor>& targets, const std::vector<Tensor>& attacks,
           double epsilon) {
  return asr_from_scores(pair_scores(model, targets, attacks), epsilon);
}

double mock_confidence(const faceid::Embedder& embedder, const Tensor& x1, const Tensor& x2) {
  return confidence_from_cosine(faceid::cosine(faceid::embed_face(embedder, x1), faceid::embed_face(embedder, x2)));
}

double confidence_from_cosine(double cosine) { return std::clamp(50.0 * (1.0 + cosine), 0.0, 100.0); }

double MockClient::confidence(const Tensor& x1, const Tensor& x2) const { return mock_confidence(embedder_, x1, x2); }

McsResult mcs(const SystemClient& client, const std::vector<Tensor>& targets, const std::vector<Tensor>& attacks) {
  if (targets.empty() || attacks.empty()) throw std::invalid_argument("MCS needs at least one target and one attack");
  McsResult r;
  double sum = 0;
  for (std::size_t i = 0; i < targets.size(); ++i)
    for (std::size_t j = 0; j < attacks.size(); ++j) {
      try {
        sum += client.confidence(targets[i], attacks[j]);
        ++r.pairs;
      } catch (const std::exception& e) {
        ++r.skipped;
        r.errors.push_back("pair (" + std::to_string(i) + "," + std::to_string(j) + "): " + e.what());
      }
    }
  if (r.pairs == 0) throw std::runtime_error(client.name() + ": every pair failed");
  r.mcs = sum / double(r.pairs);
  return r;
}

std::vector<Tensor> render_attack_images(const attack::AttackArtifact& artifact, const radiance::RadianceModel& source,
                                         const std::vector<radiance::Pose>& poses, uvgeom::MaskKind mask_kind) {
  if (artifact.image) return {*artifact.image};
  if (!artifact.texture) throw std::invalid_argument("attack artifact has neither texture nor image");
  const uvgeom::Mask mask = uvgeom::make_mask(mask_kind, artifact.texture->dim(1));
  const int R = source.config.output_resolution();
  std::vector<Tensor> out;
  for (const auto& pose : poses) {
    const auto lookup = uvgeom::rasterize_uv(uvgeom::build_face_mesh(pose), R);
    out.push_back(uvgeom::apply_patch(radiance::synthesize(source, pose), lookup, *artifact.texture, mask));
  }
  return out;
}

const Cell& EvalReport::cell(const std::string& train_model, const std::string& test_model,
                             const std::string& method) const {
  for (const Cell& c : cells)
    if (c.train_model == train_model && c.test_model == test_model && c.method == method) return c;
  throw std::out_of_range("no cell " + train_model + "->" + test_model + " for " + method);
}

double EvalReport::blackbox_mean(const std::string& train_model, const std::string& method) const {
  double sum = 0;
  int n = 0;
  for (const Cell& c : cells)
    if (c.train_model == train_model && c.method == method && c.test_model != train_model) {
      sum += c.asr;
      ++n;
    }
  if (n == 0) throw std::out_of_range("no black-box cells for " + train_model + "/" + method);
  return sum / n;
}

EvalReport transfer_matrix(const std::vector<faceid::Embedder>& zoo, const std::vector<ThresholdCalibration>& thresholds,
                           const std::vector<EvalCase>& cases, const std::vector<const SystemClient*>& clients) {
  if (zoo.size() != thresholds.size()) throw std::invalid_argument("transfer_matrix: one threshold per model");
  if (cases.empty()) throw std::invalid_argument("transfer_matrix: no cases");
  using Key = std::tuple<std::string, std::string, std::string>;  // train, mask, method
  std::vector<Key> order;
  for (const auto& a : cases.front().attacks) order.emplace_back(a.train_model, a.mask, a.method);
  std::map<std::tuple<std::string, std::string, std::string, std::string>, std::pair<std::size_t, std::size_t>> counts;
  std::map<std::tuple<std::string, Key>, std::pair<double, std::pair<std::size_t, std::size_t>>> conf;

  for (const EvalCase& ec : cases) {
    if (ec.attacks.size() != order.size()) throw std::invalid_argument("transfer_matrix: cases list different attacks");
    for (std::size_t m = 0; m < zoo.size(); ++m) {
      const std::string test(1, zoo[m].arch);
      const std::vector<Tensor> te = embed_all(zoo[m], ec.targets);
      for (std::size_t a = 0; a < ec.attacks.size(); ++a) {
        const AttackImages& ai = ec.attacks[a];
        if (Key{ai.train_model, ai.mask, ai.method} != order[a]) {
          throw std::invalid_argument("transfer_matrix: cases list different attacks");
        }
        auto& [hits, pairs] = counts[{ai.train_model, ai.mask, ai.method, test}];
        for (const auto& row : cosine_table(te, embed_all(zoo[m], ai.images)))
          for (double s : row) {
            ++pairs;
            hits += s > thresholds[m].epsilon;
          }
      }
    }
    for (const SystemClient* client : clients)
      for (const AttackImages& ai : ec.attacks) {
        const McsResult r = mcs(*client, ec.targets, ai.images);
        auto& [sum, np] = conf[{client->name(), Key{ai.train_model, ai.mask, ai.method}}];
        sum += r.mcs * double(r.pairs);
        np.first += r.pairs;
        np.second += r.skipped;
      }
  }

  EvalReport report;
  for (const Key& k : order)
    for (const auto& model : zoo) {
      const std::string test(1, model.arch);
      const auto [hits, pairs] = counts.at({std::get<0>(k), std::get<1>(k), std::get<2>(k), test});
      Cell c;
      c.train_model = std::get<0>(k);
      c.mask = std::get<1>(k);
      c.method = std::get<2>(k);
      c.test_model = test;
      c.successes = hits;
      c.pairs = pairs;
      c.asr = 100.0 * double(hits) / double(pairs);
      c.whitebox = c.train_model == c.test_model;
      report.cells.push_back(c);
    }
  for (const SystemClient* client : clients)
    for (const Key& k : order) {
      const auto& [sum, np] = conf.at({client->name(), k});
      report.mcs.push_back({client->name(), std::get<0>(k), std::get<1>(k), std::get<2>(k),
                            np.first ? sum / double(np.first) : 0.0, np.first, np.second});
    }
  return report;
}

std::string to_json(const EvalReport& report) {
  json j;
  j["config_hash"] = report.config_hash;
  j["seed"] = report.seed;
  j["cells"] = json::array();
  for (const Cell& c : report.cells) {
    j["cells"].push_back({{"train_model", c.train_model}, {"test_model", c.test_model}, {"mask", c.mask},
                          {"method", c.method}, {"asr", c.asr}, {"whitebox", c.whitebox},
                          {"successes", c.successes}, {"pairs", c.pairs}});
  }
  j["mcs"] = json::array();
  for (const McsCell& m : report.mcs) {
    j["mcs"].push_back({{"client", m.client}, {"train_model", m.train_model}, {"mask", m.mask}, {"method", m.method},
                        {"mcs", m.mcs}, {"pairs", m.pairs}, {"skipped", m.skipped}});
  }
  return j.dump(2);
}

EvalReport report_from_json(const std::string& text) {
  const json j = json::parse(text);
  EvalReport r;
  r.config_hash = j.at("config_hash").get<std::string>();
  r.seed = j.at("seed").get<std::uint64_t>();
  for (const json& c : j.at("cells")) {
    r.cells.push_back({c.at("train_model"), c.at("test_model"), c.at("mask"), c.at("method"), c.at("asr"),
                       c.at("whitebox"), c.at("successes"), c.at("pairs")});
  }
  for (const json& m : j.at("mcs")) {
    r.mcs.push_back({m.at("client"), m.at("train_model"), m.at("mask"), m.at("method"), m.at("mcs"), m.at("pairs"),
                     m.at("skipped")});
  }
  return r;
}

std::string to_csv(const EvalReport& report) {
  std::ostringstream os;
  os.precision(17);
  os << "train_model,test_model,mask,method,asr,whitebox\n";
  for (const Cell& c : report.cells) {
    os << c.train_model << ',' << c.test_model << ',' << c.mask << ',' << c.method << ',' << c.asr << ','
       << (c.whitebox ? 1 : 0) << '\n';
  }
  return os.str();
}

}  // namespace nerftap::eval
