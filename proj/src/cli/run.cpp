#include <chrono>
#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "nerftap/cli/cli.hpp"
#include "nerftap/util/png_io.hpp"

namespace nerftap::cli {

namespace {

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::string mask;
  std::string method;
  std::vector<std::string> ablate;
  std::string image;
  double yaw = 0.0, pitch = 0.0;
};

RunConfig resolve(const Options& o) {
  RunConfig c = load_config(o.config_path);
  if (o.seed) c.seed = *o.seed;
  if (o.out) c.out = *o.out;
  c.validate();
  return c;
}

AttackRequest request(const Options& o, const RunConfig& c, const std::string& default_method) {
  AttackRequest r;
  r.method = o.method.empty() ? default_method : o.method;
  try {
    r.mask = o.mask.empty() ? c.attack.config.mask : uvgeom::parse_mask_kind(o.mask);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  for (const auto& a : o.ablate) r.ablations.push_back(parse_ablation(a));
  return r;
}

void print_matrix(const eval::EvalReport& r) {
  std::printf("%-28s %-5s %-5s %8s\n", "method", "train", "test", "ASR%");
  for (const auto& c : r.cells)
    std::printf("%-28s %-5s %-5s %8.2f%s\n", c.method.c_str(), c.train_model.c_str(), c.test_model.c_str(), c.asr,
                c.whitebox ? " *" : "");
  for (const auto& m : r.mcs)
    std::printf("MCS %-24s %-5s %s %.2f (%zu pairs, %zu skipped)\n", m.method.c_str(), m.train_model.c_str(),
                m.client.c_str(), m.mcs, m.pairs, m.skipped);
}

int dispatch(const std::string& command, const Options& o) {
  const RunConfig cfg = resolve(o);
  Workspace ws(cfg);
  ws.echo_config(command);
  const auto t0 = std::chrono::steady_clock::now();
  if (command == "prepare") {
    ws.prepare();
    std::printf("prepared %s\n", ws.root().c_str());
  } else if (command == "calibrate") {
    for (const auto& c : ws.calibrate())
      std::printf("model %s epsilon %.6f far %.6f over %zu impostor pairs\n", c.model.c_str(), c.epsilon,
                  c.far_achieved, c.n_impostor_pairs);
  } else if (command == "invert") {
    if (!o.image.empty()) {
      std::printf("%s psnr %.2f dB\n", o.image.c_str(), ws.invert_image(o.image, {o.yaw, o.pitch}));
    } else {
      for (double p : ws.invert_all()) std::printf("psnr %.2f dB\n", p);
    }
  } else if (command == "attack" || command == "baseline") {
    attack::RenderCache cache;
    for (const auto& p : ws.attack(request(o, cfg, command == "attack" ? "nerftap" : "pgd_patch"), cache))
      std::printf("wrote %s\n", p.c_str());
  } else if (command == "eval") {
    print_matrix(ws.evaluate());
  } else if (command == "render") {
    for (const auto& p : ws.render(request(o, cfg, "nerftap"))) std::printf("wrote %s\n", p.c_str());
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::fprintf(stderr, "%s finished in %.1f s\n", command.c_str(), secs);
  return 0;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"Adversarial UV-patch impersonation attacks on synthetic radiance-field faces"};
  app.require_subcommand(1);
  Options o;
  const std::vector<std::string> methods{"nerftap", "fgsm", "mim", "dim", "pgd_patch"};

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", o.config_path, "run configuration (JSON)")->required();
    sub->add_option("--seed", o.seed, "override the global seed");
    sub->add_option("--out", o.out, "override the output directory");
  };
  auto attack_flags = [&](CLI::App* sub) {
    sub->add_option("--mask", o.mask, "patch region")->check(CLI::IsMember({"eye", "eye_nose", "respirator"}));
    sub->add_option("--method", o.method, "attack method")->check(CLI::IsMember(methods));
    sub->add_option("--ablate", o.ablate, "disable a component (repeatable)")
        ->check(CLI::IsMember({"style", "transform2d", "viewsynth"}));
  };

  for (const char* name : {"prepare", "calibrate", "invert", "attack", "baseline", "eval", "render"}) {
    CLI::App* sub = app.add_subcommand(name);
    common(sub);
    const std::string n = name;
    if (n == "attack" || n == "baseline" || n == "render") attack_flags(sub);
    if (n == "invert") {
      sub->add_option("--image", o.image, "invert this PNG instead of every acquired image");
      sub->add_option("--yaw", o.yaw, "camera yaw of --image in degrees");
      sub->add_option("--pitch", o.pitch, "camera pitch of --image in degrees");
    }
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }
  const std::string command = app.get_subcommands().front()->get_name();
  try {
    return dispatch(command, o);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const MissingArtifact& e) {
    std::fprintf(stderr, "%s\n", e.what());
    return 3;
  } catch (const diff::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}

}  // namespace nerftap::cli
