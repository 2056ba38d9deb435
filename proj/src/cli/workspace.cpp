#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "nerftap/cli/cli.hpp"
#include "nerftap/util/hash.hpp"
#include "nerftap/util/png_io.hpp"
#include "nerftap/util/rng.hpp"

namespace nerftap::cli {

using nlohmann::ordered_json;
using diff::Tensor;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!text.empty() && text.back() != '\n') out << '\n';
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_json(const fs::path& path, const ordered_json& j) { write_text(path, j.dump(2)); }

ordered_json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact(path);
  try {
    return ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

void write_blob(const fs::path& path, const diff::TensorMap& tensors) {
  fs::create_directories(path.parent_path());
  diff::save_blob(path, tensors);
}

void save_image(const fs::path& path, const Tensor& image) {
  fs::create_directories(path.parent_path());
  save_png(path, image);
}

std::string two_digits(int i) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%02d", i);
  return buf;
}

std::string victim_name(int i) { return "victim_" + two_digits(i); }

ordered_json pose_json(const radiance::Pose& p) { return {p.yaw_deg, p.pitch_deg}; }
radiance::Pose pose_from_json(const ordered_json& j) { return {j.at(0).get<double>(), j.at(1).get<double>()}; }

}  // namespace

Ablation parse_ablation(const std::string& name) {
  if (name == "style") return Ablation::Style;
  if (name == "transform2d") return Ablation::Transform2d;
  if (name == "viewsynth") return Ablation::ViewSynth;
  throw ConfigError("unknown ablation '" + name + "' (expected style, transform2d or viewsynth)");
}

std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::Style: return "style";
    case Ablation::Transform2d: return "transform2d";
    case Ablation::ViewSynth: return "viewsynth";
  }
  return "?";
}

namespace {

std::vector<Ablation> sorted_ablations(std::vector<Ablation> a) {
  std::sort(a.begin(), a.end());
  a.erase(std::unique(a.begin(), a.end()), a.end());
  return a;
}

}  // namespace

std::string method_label(const AttackRequest& r) {
  std::string out = r.method;
  for (Ablation a : sorted_ablations(r.ablations)) out += "-no-" + ablation_name(a);
  return out;
}

std::string attack_tag(const AttackRequest& r, char whitebox) {
  return r.method + "_" + uvgeom::mask_kind_name(r.mask) + "_" + whitebox +
         [&] {
           std::string s;
           for (Ablation a : sorted_ablations(r.ablations)) s += "_no-" + ablation_name(a);
           return s;
         }();
}

std::vector<std::pair<std::string, std::string>> tree_hashes(const fs::path& root) {
  std::vector<std::pair<std::string, std::string>> out;
  if (!fs::exists(root)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file()) out.emplace_back(fs::relative(e.path(), root).generic_string(), sha256_file(e.path()));
  std::sort(out.begin(), out.end());
  return out;
}

Workspace::Workspace(RunConfig config) : config_(std::move(config)), root_(config_.out) { config_.validate(); }

fs::path Workspace::require(const fs::path& relative) const {
  const fs::path p = root_ / relative;
  if (!fs::exists(p)) throw MissingArtifact(p);
  return p;
}

void Workspace::echo_config(const std::string& command) const {
  write_text(root_ / (command + ".config.json"), dump_config(config_));
}

radiance::RadianceModel Workspace::world() const {
  return radiance::from_tensor_map(config_.radiance, diff::load_blob(require("world.nftp")));
}

std::vector<faceid::Embedder> Workspace::zoo() const {
  std::vector<faceid::Embedder> out;
  const std::uint64_t seed = stream_seed(config_.seed, "zoo");
  for (char arch : config_.faceid.archs) {
    const fs::path p = require(fs::path("zoo") / (std::string("embedder_") + arch + ".nftp"));
    out.push_back(faceid::embedder_from_tensor_map(arch, seed, diff::load_blob(p)));
  }
  return out;
}

faceid::Embedder Workspace::system_model() const {
  const char arch = config_.eval.system_arch;
  const fs::path p = require(fs::path("zoo") / (std::string("system_") + arch + ".nftp"));
  return faceid::embedder_from_tensor_map(arch, stream_seed(config_.seed, "system"), diff::load_blob(p));
}

radiance::RadianceModel Workspace::source_truth() const {
  radiance::RadianceModel m = world();
  m.w = diff::blob_get(diff::load_blob(require("latents.nftp")), "source.w", {config_.radiance.latent_dim});
  return m;
}

faceid::IdentitySet Workspace::victims() const {
  const ordered_json index = read_json(require("identities/index.json"));
  faceid::IdentitySet set;
  int id = 0;
  for (const auto& victim : index.at("victims")) {
    faceid::Identity ident;
    ident.id = id++;
    for (const auto& view : victim.at("views")) {
      const fs::path p = require(fs::path("identities") / view.at("file").get<std::string>());
      ident.views.push_back({pose_from_json(view.at("pose")), load_png(p)});
    }
    set.identities.push_back(std::move(ident));
  }
  return set;
}

std::vector<std::string> Workspace::acquired_names() const {
  std::vector<std::string> names{"source"};
  for (int v = 0; v < config_.eval.victims; ++v) names.push_back(victim_name(v));
  return names;
}

attack::Subject Workspace::subject(const std::string& name) const {
  const ordered_json meta = read_json(require(fs::path("inversions") / (name + ".json")));
  const inversion::InversionResult r =
      inversion::inversion_from_tensor_map(config_.radiance, diff::load_blob(require(fs::path("inversions") / (name + ".nftp"))));
  fs::path image = meta.at("image").get<std::string>();
  if (image.is_relative()) image = root_ / image;
  if (!fs::exists(image)) throw MissingArtifact(image);
  return {inversion::apply(world(), r), pose_from_json(meta.at("pose")), load_png(image)};
}

void Workspace::prepare() {
  fs::create_directories(root_);
  const std::uint64_t seed = config_.seed;
  const radiance::RadianceModel w = radiance::make_radiance_model(config_.radiance, stream_seed(seed, "world"));
  write_blob(root_ / "world.nftp", radiance::to_tensor_map(w));

  // Zoo: smoke-trained on identities that appear nowhere else.
  const faceid::IdentitySet train = faceid::synthesize_identity_set(
      w, config_.faceid.train_ids, config_.faceid.train_views, config_.faceid.range, stream_seed(seed, "zoo-train-set"));
  std::vector<faceid::Embedder> zoo;
  for (char arch : config_.faceid.archs) zoo.push_back(faceid::make_embedder(arch, stream_seed(seed, "zoo")));
  faceid::SmokeTrainConfig tc = config_.faceid.train;
  tc.seed = stream_seed(seed, "zoo-train");
  const auto reports = faceid::train_zoo_smoke(zoo, train, tc);
  ordered_json zoo_report = ordered_json::array();
  for (std::size_t i = 0; i < zoo.size(); ++i) {
    write_blob(root_ / "zoo" / (std::string("embedder_") + zoo[i].arch + ".nftp"), faceid::to_tensor_map(zoo[i]));
    zoo_report.push_back({{"arch", std::string(1, reports[i].arch)},
                          {"checkpoint", faceid::checkpoint_name(zoo[i])},
                          {"epochs", reports[i].epochs_run},
                          {"heldout_margin", reports[i].margin}});
  }
  // The mock FR system: same training data, an architecture no attack ever sees.
  std::vector<faceid::Embedder> system{faceid::make_embedder(config_.eval.system_arch, stream_seed(seed, "system"))};
  tc.seed = stream_seed(seed, "system-train");
  const auto system_report = faceid::train_zoo_smoke(system, train, tc).front();
  write_blob(root_ / "zoo" / (std::string("system_") + system[0].arch + ".nftp"), faceid::to_tensor_map(system[0]));
  zoo_report.push_back({{"arch", std::string(1, system_report.arch)},
                        {"checkpoint", faceid::checkpoint_name(system[0])},
                        {"epochs", system_report.epochs_run},
                        {"heldout_margin", system_report.margin},
                        {"role", "system"}});
  write_json(root_ / "zoo" / "train_report.json", zoo_report);

  // Victims: the recorded views the FR system compares against.
  const faceid::IdentitySet victims = faceid::synthesize_identity_set(
      w, config_.eval.victims, config_.eval.views, config_.faceid.range, stream_seed(seed, "victims"));
  diff::TensorMap latents;
  ordered_json index = {{"victims", ordered_json::array()}};
  for (std::size_t v = 0; v < victims.identities.size(); ++v) {
    const auto& id = victims.identities[v];
    ordered_json views = ordered_json::array();
    for (std::size_t k = 0; k < id.views.size(); ++k) {
      const std::string file = victim_name(int(v)) + "/view_" + two_digits(int(k)) + ".png";
      save_image(root_ / "identities" / file, id.views[k].image);
      views.push_back({{"file", file}, {"pose", pose_json(id.views[k].pose)}});
    }
    index["victims"].push_back({{"name", victim_name(int(v))}, {"views", views}});
    latents.emplace(victim_name(int(v)) + ".w", id.w);
  }
  write_json(root_ / "identities" / "index.json", index);

  Rng source_rng = Rng::stream(seed, "source");
  latents.emplace("source.w", radiance::random_latent(config_.radiance, source_rng));
  write_blob(root_ / "latents.nftp", latents);

  // What the attacker gets hold of: one frontal photo per person.
  ordered_json acquired = ordered_json::array();
  const radiance::Pose frontal{};
  for (const std::string& name : acquired_names()) {
    radiance::RadianceModel m = w;
    m.w = latents.at(name + ".w");
    save_image(root_ / "acquired" / (name + ".png"), radiance::synthesize(m, frontal));
    acquired.push_back({{"name", name}, {"file", name + ".png"}, {"pose", pose_json(frontal)}});
  }
  write_json(root_ / "acquired" / "index.json", acquired);

  diff::TensorMap lookups;
  const int R = config_.radiance.output_resolution();
  std::vector<radiance::Pose> poses{frontal};
  for (const auto& view : victims.identities.front().views) poses.push_back(view.pose);
  for (const auto& p : poses) {
    const std::string key = uvgeom::pose_key(p);
    if (lookups.count(key + ".valid")) continue;
    for (auto& kv : uvgeom::to_tensor_map(uvgeom::rasterize_uv(uvgeom::build_face_mesh(p), R), key)) lookups.insert(kv);
  }
  write_blob(root_ / "lookups" / "views.nftp", lookups);

  ordered_json manifest;
  manifest["config_hash"] = config_hash(config_);
  manifest["seed"] = config_.seed;
  manifest["files"] = ordered_json::object();
  for (const char* dir : {"identities", "acquired", "zoo", "lookups"})
    for (const auto& [file, hash] : tree_hashes(root_ / dir)) manifest["files"][std::string(dir) + "/" + file] = hash;
  for (const char* file : {"world.nftp", "latents.nftp"}) manifest["files"][file] = sha256_file(root_ / file);
  write_json(root_ / "manifest.json", manifest);
}

std::vector<eval::ThresholdCalibration> Workspace::calibrate() {
  const faceid::IdentitySet set =
      faceid::synthesize_identity_set(world(), config_.eval.calibration_ids, config_.eval.calibration_views,
                                      config_.faceid.range, stream_seed(config_.seed, "calibration-set"));
  std::vector<eval::ThresholdCalibration> out;
  ordered_json j = ordered_json::array();
  for (const faceid::Embedder& m : zoo()) {
    out.push_back(eval::calibrate_threshold(m, set, config_.eval.far));
    const auto& c = out.back();
    j.push_back({{"model", c.model}, {"epsilon", c.epsilon}, {"far_target", config_.eval.far},
                 {"far_achieved", c.far_achieved}, {"impostor_pairs", c.n_impostor_pairs}});
  }
  write_json(root_ / "calibration.json", j);
  return out;
}

double Workspace::invert_image(const fs::path& image, const radiance::Pose& pose) {
  if (!fs::exists(image)) throw MissingArtifact(image);
  const Tensor target = load_png(image);
  const radiance::RadianceModel w = world();
  inversion::InversionConfig ic = config_.inversion;
  ic.latent_mean_seed = stream_seed(config_.seed, "latent-mean");
  const inversion::InversionResult r = inversion::invert(target, pose, w, ic);
  const double psnr = inversion::psnr(radiance::synthesize(inversion::apply(w, r), pose), target);
  const std::string stem = image.stem().string();
  // Paths inside the run are stored relative to it so reruns elsewhere write identical files.
  const fs::path rel = fs::relative(fs::absolute(image), fs::absolute(root_));
  const bool inside = !rel.empty() && *rel.begin() != "..";
  const std::string recorded = inside ? rel.generic_string() : fs::absolute(image).string();
  write_blob(root_ / "inversions" / (stem + ".nftp"), inversion::to_tensor_map(r));
  write_json(root_ / "inversions" / (stem + ".json"), {{"image", recorded},
                                                        {"pose", pose_json(pose)},
                                                        {"psnr", psnr},
                                                        {"stage1_curve", r.stage1_curve},
                                                        {"stage2_curve", r.stage2_curve}});
  return psnr;
}

std::vector<double> Workspace::invert_all() {
  const ordered_json acquired = read_json(require("acquired/index.json"));
  std::vector<double> out;
  for (const auto& a : acquired) {
    out.push_back(invert_image(root_ / "acquired" / a.at("file").get<std::string>(), pose_from_json(a.at("pose"))));
  }
  return out;
}

std::vector<fs::path> Workspace::attack(const AttackRequest& request, attack::RenderCache& cache) {
  const bool patch_method = request.method == "nerftap";
  std::optional<attack::BaselineMethod> baseline;
  if (!patch_method) {
    try {
      baseline = attack::parse_baseline(request.method);
    } catch (const std::invalid_argument&) {
      throw ConfigError("unknown method '" + request.method + "'");
    }
  }
  if (!request.ablations.empty() && !patch_method) throw ConfigError("ablations apply to nerftap only");

  attack::AttackConfig cfg = config_.attack.config;
  cfg.seed = stream_seed(config_.seed, "attack");
  cfg.mask = request.mask;
  for (Ablation a : request.ablations) {
    if (a == Ablation::Style) cfg.use_style_loss = false;
    if (a == Ablation::Transform2d) cfg.use_2d_transform = false;
    if (a == Ablation::ViewSynth) cfg.use_view_synthesis = false;
  }

  const std::vector<faceid::Embedder> models = zoo();
  const attack::Subject source = subject("source");
  std::vector<attack::Subject> targets;
  for (int v = 0; v < config_.eval.victims; ++v) targets.push_back(subject(victim_name(v)));

  std::vector<fs::path> written;
  for (char wb : config_.attack.whitebox) {
    const auto model = std::find_if(models.begin(), models.end(), [&](const auto& m) { return m.arch == wb; });
    const fs::path dir = root_ / "attacks" / attack_tag(request, wb);
    fs::create_directories(dir);
    ordered_json abl = ordered_json::array();
    for (Ablation a : sorted_ablations(request.ablations)) abl.push_back(ablation_name(a));
    write_json(dir / "meta.json", {{"method", request.method},
                                   {"label", method_label(request)},
                                   {"mask", uvgeom::mask_kind_name(request.mask)},
                                   {"train_model", std::string(1, wb)},
                                   {"ablations", abl}});
    for (int v = 0; v < config_.eval.victims; ++v) {
      const attack::AttackProblem problem{source, targets[std::size_t(v)], *model};
      const attack::AttackArtifact art = patch_method ? attack::train_attack(cfg, problem, cache)
                                                      : attack::run_baseline(*baseline, cfg, problem, config_.attack.baseline);
      const fs::path blob = dir / (victim_name(v) + ".nftp");
      write_blob(blob, attack::to_tensor_map(art));
      write_json(dir / (victim_name(v) + ".json"), {{"method", art.method},
                                                     {"loss_curve", art.loss_curve},
                                                     {"cosine_curve", art.cosine_curve},
                                                     {"style_curve", art.style_curve}});
      written.push_back(blob);
    }
  }
  return written;
}

namespace {

attack::AttackArtifact load_artifact(const fs::path& blob) {
  if (!fs::exists(blob)) throw MissingArtifact(blob);
  const diff::TensorMap t = diff::load_blob(blob);
  attack::AttackArtifact a;
  if (auto it = t.find("texture"); it != t.end()) a.texture = it->second;
  if (auto it = t.find("image"); it != t.end()) a.image = it->second;
  return a;
}

}  // namespace

eval::EvalReport Workspace::evaluate() {
  const ordered_json cal = read_json(require("calibration.json"));
  const std::vector<faceid::Embedder> models = zoo();
  std::vector<eval::ThresholdCalibration> thresholds;
  for (const auto& m : models) {
    const auto it = std::find_if(cal.begin(), cal.end(), [&](const auto& c) { return c.at("model") == std::string(1, m.arch); });
    if (it == cal.end()) throw std::runtime_error("calibration.json has no threshold for model " + std::string(1, m.arch));
    thresholds.push_back({std::string(1, m.arch), it->at("epsilon").get<double>(), it->at("far_achieved").get<double>(),
                          it->at("impostor_pairs").get<std::size_t>()});
  }
  const faceid::IdentitySet victims = this->victims();
  const radiance::RadianceModel source = source_truth();

  std::vector<fs::path> tags;
  if (fs::exists(root_ / "attacks"))
    for (const auto& e : fs::directory_iterator(root_ / "attacks"))
      if (e.is_directory()) tags.push_back(e.path());
  std::sort(tags.begin(), tags.end());

  std::vector<eval::EvalCase> cases;
  for (std::size_t v = 0; v < victims.identities.size(); ++v) {
    eval::EvalCase ec;
    std::vector<radiance::Pose> poses;
    for (const auto& view : victims.identities[v].views) {
      poses.push_back(view.pose);
      ec.targets.push_back(view.image);
    }
    std::vector<Tensor> clean;
    for (const auto& p : poses) clean.push_back(radiance::synthesize(source, p));
    ec.attacks.push_back({"-", "none", "none", clean});
    for (const fs::path& dir : tags) {
      const ordered_json meta = read_json(dir / "meta.json");
      const uvgeom::MaskKind mask = uvgeom::parse_mask_kind(meta.at("mask").get<std::string>());
      const attack::AttackArtifact art = load_artifact(dir / (victim_name(int(v)) + ".nftp"));
      ec.attacks.push_back({meta.at("train_model"), meta.at("label"), meta.at("mask"),
                            eval::render_attack_images(art, source, poses, mask)});
    }
    cases.push_back(std::move(ec));
  }
  const eval::MockClient system(system_model());
  eval::EvalReport report = eval::transfer_matrix(models, thresholds, cases, {&system});
  report.config_hash = config_hash(config_);
  report.seed = config_.seed;
  write_text(root_ / "report.json", eval::to_json(report));
  write_text(root_ / "report.csv", eval::to_csv(report));
  return report;
}

std::vector<fs::path> Workspace::render(const AttackRequest& request) {
  const std::string tag = attack_tag(request, config_.attack.whitebox.front());
  const attack::AttackArtifact art = load_artifact(root_ / "attacks" / tag / (victim_name(0) + ".nftp"));
  if (!art.texture) throw ConfigError("render needs a UV-patch method; " + request.method + " perturbs a single image");
  const radiance::RadianceModel source = source_truth();
  const auto& e = config_.eval;
  std::vector<fs::path> out;
  for (int i = 0; i < e.render_views; ++i) {
    const double yaw =
        e.render_views == 1 ? e.render_yaw_min
                            : e.render_yaw_min + (e.render_yaw_max - e.render_yaw_min) * i / (e.render_views - 1);
    const radiance::Pose pose{yaw, 0.0};
    const Tensor img = eval::render_attack_images(art, source, {pose}, request.mask).front();
    char name[64];
    std::snprintf(name, sizeof name, "yaw_%+06.1f_pitch_%+05.1f.png", pose.yaw_deg, pose.pitch_deg);
    out.push_back(root_ / "render" / tag / name);
    save_image(out.back(), img);
  }
  return out;
}

}  // namespace nerftap::cli
