// turbuforge: batch front end for simulation, reconstruction, baselines,
// theorem checks and experiment sweeps.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"

#include "turbuforge/harness.hpp"
#include "turbuforge/hash.hpp"
#include "turbuforge/random.hpp"

namespace fs = std::filesystem;
using namespace turbuforge;
using harness::ExperimentConfig;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitDivergence = 3;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string out;
  bool force = false;
};

ExperimentConfig load(const Common& common) {
  ExperimentConfig c = harness::load_config(common.config_path);
  if (common.seed) c.seed = *common.seed;
  if (!common.out.empty()) c.out_dir = common.out;
  return c;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

void write_manifest(const ExperimentConfig& c, const std::string& command,
                    const std::vector<std::pair<std::string, std::string>>& extras = {}) {
  write_text(fs::path(c.out_dir) / "manifest.json", harness::manifest_json(c, command, extras));
}

std::string frame_name(int index_1based) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "frame_%04d.pgm", index_1based);
  return buf;
}

void write_metrics(const fs::path& path, const harness::MetricReport& m, const nlohmann::ordered_json& extra = {}) {
  nlohmann::ordered_json j;
  j["config_hash"] = m.config_hash;
  j["psnr_db"] = m.psnr_db;
  j["masked_magnitude_error"] = m.masked_magnitude_error;
  j["seconds"] = m.seconds;
  for (const auto& [k, v] : extra.items()) j[k] = v;
  write_text(path, j.dump(2) + "\n");
}

double elapsed(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

int cmd_simulate(const Common& common) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig c = load(common);
  const std::string hash = harness::config_hash(c);
  harness::prepare_output_dir(c.out_dir, hash, common.force);
  const fs::path out(c.out_dir);
  const Image scene = harness::load_scene(c.scene);
  const FrameStack stack = harness::simulate(c, scene, c.simulation.frames, c.seed);
  save_stack(stack, out / "stack.tfs");
  write_pnm(scene, out / (scene.channels == 1 ? "scene.pgm" : "scene.ppm"));
  const int l = stack.size();
  for (int idx : {1, std::max(1, l / 2), l}) write_pnm(stack.frames[idx - 1], out / frame_name(idx));
  write_manifest(c, "simulate", {{"stack", "stack.tfs"}, {"frames", std::to_string(l)}});
  std::printf("simulate: %d frames of %dx%d at D/r0 = %.4g -> %s (%.2fs)\n", l, c.scene.size, c.scene.size,
              c.turbulence.d_over_r0(), (out / "stack.tfs").c_str(), elapsed(t0));
  return kExitOk;
}

std::optional<Image> reference_for(const ExperimentConfig& c, const std::string& reference) {
  if (reference.empty()) return std::nullopt;
  if (reference == "scene") return harness::load_scene(c.scene);
  harness::SceneSettings s = c.scene;
  s.path = reference;
  return harness::load_scene(s);
}

fs::path stack_path_for(const ExperimentConfig& c, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (!c.recon.stack_path.empty()) return c.recon.stack_path;
  return fs::path(c.out_dir) / "stack.tfs";
}

int cmd_reconstruct(const Common& common, const std::string& stack_flag, const std::string& reference) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig c = load(common);
  const std::string hash = harness::config_hash(c);
  const fs::path stack_path = stack_path_for(c, stack_flag);
  const FrameStack stack = load_stack(stack_path);
  const auto ref = reference_for(c, reference);
  const fs::path out(c.out_dir);
  const fs::path ckpt = out / "checkpoints";
  harness::prepare_output_dir(out, hash, common.force);
  fs::create_directories(ckpt);
  const auto outcome = harness::reconstruct(c, stack, c.seed, ref, out / "loss.csv", ckpt);
  write_pfm(outcome.image, out / "final.pfm");
  write_pnm(outcome.image, out / (outcome.image.channels == 1 ? "final.pgm" : "final.ppm"));
  harness::MetricReport m;
  m.config_hash = hash;
  m.seconds = elapsed(t0);
  nlohmann::ordered_json extra;
  extra["d_over_r0"] = outcome.d_over_r0;
  if (ref) {
    m.psnr_db = outcome.psnr_db;
    const auto mask = harness::turbulence_mask(harness::turbulence_for(c), 400, c.theory.tau, derive_key(c.seed, 0x4d53));
    m.masked_magnitude_error = theory::masked_magnitude_error(*ref, outcome.image, mask);
    extra["mean_baseline_psnr_db"] = psnr(harness::baseline_mean(stack), *ref);
  } else {
    m.psnr_db = std::numeric_limits<double>::quiet_NaN();
    m.masked_magnitude_error = std::numeric_limits<double>::quiet_NaN();
  }
  write_metrics(out / "metrics.json", m, extra);
  write_manifest(c, "reconstruct", {{"stack", stack_path.string()}});
  std::printf("reconstruct: %s, D/r0 = %.4g", (out / "final.pfm").c_str(), outcome.d_over_r0);
  if (ref) std::printf(", PSNR = %.3f dB", outcome.psnr_db);
  std::printf(" (%.1fs)\n", m.seconds);
  return kExitOk;
}

int cmd_baseline(const Common& common, const std::string& stack_flag, const std::string& reference) {
  const auto t0 = std::chrono::steady_clock::now();
  const ExperimentConfig c = load(common);
  const std::string hash = harness::config_hash(c);
  const fs::path stack_path = stack_path_for(c, stack_flag);
  const FrameStack stack = load_stack(stack_path);
  const fs::path out(c.out_dir);
  harness::prepare_output_dir(out, hash, common.force);
  const int top_k = std::max(1, static_cast<int>(std::lround(c.experiment.lucky_fraction * stack.size())));
  const Image mean = harness::baseline_mean(stack);
  const Image lucky = harness::baseline_lucky(stack, top_k);
  const char* ext = mean.channels == 1 ? ".pgm" : ".ppm";
  write_pnm(mean, out / (std::string("mean") + ext));
  write_pnm(lucky, out / (std::string("lucky") + ext));
  write_pfm(mean, out / "mean.pfm");
  write_pfm(lucky, out / "lucky.pfm");
  const auto ref = reference_for(c, reference.empty() ? "scene" : reference);
  nlohmann::ordered_json j;
  j["config_hash"] = hash;
  j["frames"] = stack.size();
  j["lucky_top_k"] = top_k;
  j["mean_psnr_db"] = psnr(mean, *ref);
  j["lucky_psnr_db"] = psnr(lucky, *ref);
  j["seconds"] = elapsed(t0);
  write_text(out / "baseline.json", j.dump(2) + "\n");
  write_manifest(c, "baseline", {{"stack", stack_path.string()}});
  std::printf("baseline: mean %.3f dB, lucky(top %d) %.3f dB\n", j["mean_psnr_db"].get<double>(), top_k,
              j["lucky_psnr_db"].get<double>());
  return kExitOk;
}

int cmd_verify_theorem(const Common& common) {
  const ExperimentConfig c = load(common);
  const std::string hash = harness::config_hash(c);
  const fs::path out(c.out_dir);
  harness::prepare_output_dir(out, hash, common.force);
  const auto& t = c.theory;
  theory::KernelFamily family;
  theory::OracleOptions opts;
  opts.tau = t.tau;
  switch (t.family) {
    case harness::TheoryFamily::kTwoKernel: family = theory::two_kernel_family(); break;
    case harness::TheoryFamily::kDelta: family = theory::delta_family(); break;
    case harness::TheoryFamily::kGaussian:
      family = theory::gaussian_family(t.sigma_min, t.sigma_max, t.kernel_size);
      opts.moment = theory::OracleMoment::kFirst;
      break;
  }
  const Image x = harness::load_scene(c.scene);
  const auto result = theory::isoplanatic_oracle(x, family, t.frames, c.seed, opts);
  theory::CheckRecord rec;
  rec.name = "oracle/" + family.name;
  rec.inputs_hash = hash;
  rec.threshold = t.threshold;
  rec.metric = opts.moment == theory::OracleMoment::kFirst
                   ? theory::masked_relative_l2(result.estimate, x, result.mask)
                   : theory::masked_magnitude_error(x, result.estimate, result.mask);
  rec.pass = rec.metric < rec.threshold;
  std::ofstream os(out / "theory.jsonl", std::ios::binary);
  theory::write_jsonl(os, rec);
  theory::write_jsonl(std::cout, rec);
  if (result.underdetermined) std::fprintf(stderr, "warning: spectral mask covers under 10%% of frequencies\n");
  write_pfm(result.estimate, out / "oracle.pfm");
  write_manifest(c, "verify-theorem");
  return rec.pass ? kExitOk : kExitFailure;
}

int cmd_experiment(const Common& common) {
  const ExperimentConfig c = load(common);
  const std::string hash = harness::config_hash(c);
  const fs::path out(c.out_dir);
  harness::prepare_output_dir(out, hash, common.force);
  auto log = [](const std::string& line) {
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
  };
  if (c.experiment.kind == harness::ExperimentKind::kFramesSweep) {
    const auto rows = harness::run_frames_sweep(c, log);
    harness::write_frames_sweep_csv(rows, out / "frames_sweep.csv");
    std::vector<double> means;
    for (const auto& r : rows) means.push_back(r.mean_psnr);
    std::printf("frames_sweep: %zu rows, monotone (one inversion <= 0.3 dB): %s\n", rows.size(),
                harness::is_nondecreasing(means, 1, 0.3) ? "yes" : "no");
  } else {
    const auto rows = harness::run_strength_sweep(c, log);
    harness::write_strength_sweep_csv(rows, out / "strength_sweep.csv");
    std::printf("strength_sweep: %zu rows\n", rows.size());
  }
  write_manifest(c, "experiment");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"turbuforge: anisoplanatic turbulence simulation and adversarial reconstruction"};
  app.require_subcommand(1);
  Common common;
  std::string stack_flag, reference;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "Config file (key = value, [sections])")->required();
    sub->add_option("--seed", common.seed, "Override run.seed");
    sub->add_option("--out", common.out, "Override run.out");
    sub->add_flag("--force", common.force, "Overwrite results of a different config");
  };
  auto* simulate = app.add_subcommand("simulate", "Generate a turbulent frame stack");
  auto* reconstruct = app.add_subcommand("reconstruct", "Adversarial reconstruction from a stack");
  auto* baseline = app.add_subcommand("baseline", "Mean and lucky-frame baselines");
  auto* verify = app.add_subcommand("verify-theorem", "Isoplanatic oracle check");
  auto* experiment = app.add_subcommand("experiment", "Frame-count or D/r0 sweeps");
  for (auto* sub : {simulate, reconstruct, baseline, verify, experiment}) add_common(sub);
  for (auto* sub : {reconstruct, baseline}) {
    sub->add_option("--stack", stack_flag, "TFS1 stack (default: recon.stack, then <out>/stack.tfs)");
    sub->add_option("--reference", reference, "Reference image path, or 'scene' for the configured scene");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (*simulate) return cmd_simulate(common);
    if (*reconstruct) return cmd_reconstruct(common, stack_flag, reference);
    if (*baseline) return cmd_baseline(common, stack_flag, reference);
    if (*verify) return cmd_verify_theorem(common);
    if (*experiment) return cmd_experiment(common);
  } catch (const harness::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const recon::DivergenceError& e) {
    std::fprintf(stderr, "diverged: %s\n", e.what());
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitFailure;
  }
  return kExitFailure;
}
