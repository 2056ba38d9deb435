#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include <json.hpp>

#include "nerftap/cli/cli.hpp"
#include "nerftap/util/hash.hpp"

namespace nerftap::cli {

using nlohmann::ordered_json;

namespace {

struct Field {
  std::function<void(const ordered_json&)> set;
  std::function<ordered_json()> get;
};

using Sections = std::map<std::string, std::vector<std::pair<std::string, Field>>>;

template <class T>
T checked(const ordered_json& j, const std::string& where) {
  auto bad = [&](const char* want) { return ConfigError(where + ": expected " + want + ", got " + j.dump()); };
  if constexpr (std::is_same_v<T, bool>) {
    if (!j.is_boolean()) throw bad("a boolean");
  } else if constexpr (std::is_integral_v<T>) {
    if (!j.is_number_integer()) throw bad("an integer");
    if (std::is_unsigned_v<T> && j.is_number_integer() && !j.is_number_unsigned() && j.get<std::int64_t>() < 0)
      throw bad("a non-negative integer");
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!j.is_number()) throw bad("a number");
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!j.is_string()) throw bad("a string");
  } else {
    if (!j.is_array() || j.size() != std::tuple_size_v<T>) throw bad("an array of 3 numbers");
    for (const auto& v : j)
      if (!v.is_number()) throw bad("an array of 3 numbers");
  }
  return j.get<T>();
}

Sections fields(RunConfig& c) {
  Sections s;
  auto add = [&](const char* section, const char* key, auto& ref) {
    using T = std::remove_reference_t<decltype(ref)>;
    const std::string where = std::string(section) + "." + key;
    s[section].push_back({key, {[&ref, where](const ordered_json& j) { ref = checked<T>(j, where); },
                                [&ref] { return ordered_json(ref); }}});
  };
  auto add_custom = [&](const char* section, const char* key, Field f) { s[section].push_back({key, std::move(f)}); };

  auto& r = c.radiance;
  add("radiance", "latent_dim", r.latent_dim);
  add("radiance", "generator_hidden", r.generator_hidden);
  add("radiance", "plane_seed_resolution", r.plane_seed_resolution);
  add("radiance", "plane_channels", r.plane_channels);
  add("radiance", "plane_resolution", r.plane_resolution);
  add("radiance", "decoder_hidden", r.decoder_hidden);
  add("radiance", "feature_channels", r.feature_channels);
  add("radiance", "render_resolution", r.render_resolution);
  add("radiance", "superres_hidden", r.superres_hidden);
  add("radiance", "n_samples", r.n_samples);
  add("radiance", "near", r.near);
  add("radiance", "far", r.far);
  add("radiance", "tan_half_fov", r.tan_half_fov);
  add("radiance", "jitter", r.jitter);
  add("radiance", "background", r.background);
  add("radiance", "shape_axes", r.shape_axes);
  add("radiance", "prior_gain", r.prior_gain);
  add("radiance", "prior_offset", r.prior_offset);
  add("radiance", "support_radius", r.support_radius);

  auto& i = c.inversion;
  add("inversion", "stage1_steps", i.stage1_steps);
  add("inversion", "stage2_steps", i.stage2_steps);
  add("inversion", "lambda_noise", i.lambda_noise);
  add("inversion", "lambda_l2", i.lambda_l2);
  add("inversion", "lr_latent", i.lr_latent);
  add("inversion", "lr_noise", i.lr_noise);
  add("inversion", "lr_generator", i.lr_generator);
  add("inversion", "latent_mean_count", i.latent_mean_count);

  auto& f = c.faceid;
  add("faceid", "archs", f.archs);
  add("faceid", "train_ids", f.train_ids);
  add("faceid", "train_views", f.train_views);
  add("faceid", "epochs", f.train.epochs);
  add("faceid", "min_epochs", f.train.min_epochs);
  add("faceid", "lr", f.train.lr);
  add("faceid", "target_margin", f.train.target_margin);
  add("faceid", "holdout_every", f.train.holdout_every);
  add("faceid", "eval_every", f.train.eval_every);
  add("faceid", "yaw_min", f.range.yaw_min);
  add("faceid", "yaw_max", f.range.yaw_max);
  add("faceid", "pitch", f.range.pitch);

  auto& a = c.attack.config;
  add("attack", "lambda_s", a.lambda_s);
  add("attack", "alpha", a.alpha);
  add("attack", "tau", a.tau);
  add("attack", "batch_size", a.batch_size);
  add("attack", "epochs", a.epochs);
  add("attack", "lr", a.lr);
  add_custom("attack", "mask",
             {[&a](const ordered_json& j) {
                try {
                  a.mask = uvgeom::parse_mask_kind(checked<std::string>(j, "attack.mask"));
                } catch (const std::invalid_argument& e) {
                  throw ConfigError(std::string("attack.mask: ") + e.what());
                }
              },
              [&a] { return ordered_json(uvgeom::mask_kind_name(a.mask)); }});
  add("attack", "texture_resolution", a.texture_resolution);
  add("attack", "use_style_loss", a.use_style_loss);
  add("attack", "use_2d_transform", a.use_2d_transform);
  add("attack", "use_view_synthesis", a.use_view_synthesis);
  add("attack", "max_rot_deg", a.transform.max_rot_deg);
  add("attack", "max_scale_dev", a.transform.max_scale_dev);
  add("attack", "max_shift_px", a.transform.max_shift_px);
  add("attack", "whitebox", c.attack.whitebox);
  auto& b = c.attack.baseline;
  add("attack", "epsilon", b.epsilon);
  add("attack", "iterations", b.iterations);
  add("attack", "momentum", b.momentum);
  add("attack", "patch_steps", b.patch_steps);
  add("attack", "patch_step_size", b.patch_step_size);

  auto& e = c.eval;
  add("eval", "victims", e.victims);
  add("eval", "views", e.views);
  add("eval", "calibration_ids", e.calibration_ids);
  add("eval", "calibration_views", e.calibration_views);
  add("eval", "far", e.far);
  add_custom("eval", "system_arch",
             {[&e](const ordered_json& j) {
                const auto v = checked<std::string>(j, "eval.system_arch");
                if (v.size() != 1) throw ConfigError("eval.system_arch: expected one architecture letter");
                e.system_arch = v[0];
              },
              [&e] { return ordered_json(std::string(1, e.system_arch)); }});
  add("eval", "render_views", e.render_views);
  add("eval", "render_yaw_min", e.render_yaw_min);
  add("eval", "render_yaw_max", e.render_yaw_max);
  return s;
}

const char* kSectionOrder[] = {"radiance", "inversion", "faceid", "attack", "eval"};

}  // namespace

void RunConfig::validate() const {
  auto check = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError(what);
  };
  try {
    radiance.validate();
    inversion.validate();
    attack.config.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  check(!faceid.archs.empty(), "faceid.archs must name at least one architecture");
  for (char ch : faceid.archs) {
    try {
      faceid::make_embedder(ch, 0);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("faceid.archs: ") + e.what());
    }
  }
  check(faceid.train_ids >= 8 && faceid.train_views >= 4, "faceid needs train_ids >= 8 and train_views >= 4");
  check(faceid.train.holdout_every >= 2 && faceid.train_views >= 2 * faceid.train.holdout_every,
        "faceid.train_views must hold out at least two views per identity (train_views >= 2 * holdout_every)");
  check(faceid.range.yaw_min <= faceid.range.yaw_max, "faceid.yaw_min must not exceed faceid.yaw_max");
  check(!attack.whitebox.empty(), "attack.whitebox must name at least one model");
  for (char ch : attack.whitebox)
    check(faceid.archs.find(ch) != std::string::npos, std::string("attack.whitebox: model ") + ch + " is not in the zoo");
  check(attack.baseline.epsilon > 0 && attack.baseline.iterations >= 1 && attack.baseline.patch_steps >= 1 &&
            attack.baseline.patch_step_size > 0 && attack.baseline.momentum >= 0,
        "attack baseline settings must be positive");
  check(eval.victims >= 2 && eval.views >= 2, "eval needs at least two victims with two views");
  check(eval.calibration_ids >= 2 && eval.calibration_views >= 2, "eval needs a calibration set of 2 x 2 or more");
  check(eval.far > 0 && eval.far < 0.5, "eval.far must lie in (0, 0.5)");
  check(faceid.archs.find(eval.system_arch) == std::string::npos,
        "eval.system_arch must be held out of the zoo");
  try {
    faceid::make_embedder(eval.system_arch, 0);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("eval.system_arch: ") + e.what());
  }
  check(eval.render_views >= 1 && eval.render_yaw_min <= eval.render_yaw_max, "eval render sweep is empty");
  check(!out.empty(), "out must not be empty");
}

RunConfig parse_config(const std::string& text) {
  ordered_json doc;
  try {
    doc = ordered_json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  Sections s = fields(c);
  for (const auto& [name, value] : doc.items()) {
    if (name == "seed") {
      c.seed = checked<std::uint64_t>(value, "seed");
    } else if (name == "out") {
      c.out = checked<std::string>(value, "out");
    } else if (auto it = s.find(name); it != s.end()) {
      if (!value.is_object()) throw ConfigError(name + ": expected an object");
      for (const auto& [key, v] : value.items()) {
        auto f = std::find_if(it->second.begin(), it->second.end(), [&](const auto& p) { return p.first == key; });
        if (f == it->second.end()) throw ConfigError("unknown key " + name + "." + key);
        f->second.set(v);
      }
    } else {
      throw ConfigError("unknown key " + name);
    }
  }
  c.validate();
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const RunConfig& config) {
  RunConfig copy = config;
  Sections s = fields(copy);
  ordered_json doc;
  for (const char* name : kSectionOrder) {
    ordered_json section = ordered_json::object();
    for (const auto& [key, f] : s.at(name)) section[key] = f.get();
    doc[name] = section;
  }
  doc["seed"] = config.seed;
  doc["out"] = config.out;
  return doc.dump(2);
}

std::string config_hash(const RunConfig& config) {
  RunConfig c = config;
  c.out.clear();
  return sha256_hex(dump_config(c));
}

}  // namespace nerftap::cli
