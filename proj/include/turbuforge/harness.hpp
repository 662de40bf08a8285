#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "turbuforge/charts.hpp"
#include "turbuforge/recon.hpp"
#include "turbuforge/render.hpp"
#include "turbuforge/theory.hpp"

namespace turbuforge::harness {

/// Invalid configuration; line is 0 when the problem is not tied to one line.
struct ConfigError : std::runtime_error {
  ConfigError(const std::string& what, int line_no)
      : std::runtime_error(line_no > 0 ? "line " + std::to_string(line_no) + ": " + what : what), line(line_no) {}
  int line;
};

struct SceneSettings {
  ChartKind chart = ChartKind::kFaceLike;
  std::string path;  // overrides chart when set (PGM/PPM/PFM)
  int size = 32;
  int channels = 1;
  std::uint64_t chart_seed = 0;
};

struct SimulationSettings {
  int frames = 64;
  double noise_sigma = 0.01;
  RenderPath path = RenderPath::kExactAnchor;
};

struct SurrogateSettings {
  int rank = 16;
  int samples = 1600;
  double d_min = 0.0;  // 0: 0.5 x D/r0
  double d_max = 0.0;  // 0: 2 x D/r0
  std::string cache_dir;
};

struct ReconSettings {
  recon::ReconConfig config = recon::ReconConfig::desk_scaled(32);
  nn::GeneratorKind generator = nn::GeneratorKind::kPixelGrid;
  std::vector<int> gen_widths{16, 32, 64, 128};
  std::vector<int> disc_widths{32, 64, 128, 256};
  bool double_precision = false;
  int tile_px = 0;
  int overlap_px = -1;
  std::string stack_path;  // reconstruct: input TFS1 file
};

enum class ExperimentKind { kFramesSweep, kStrengthSweep };

struct ExperimentSettings {
  ExperimentKind kind = ExperimentKind::kFramesSweep;
  std::vector<int> frames_list{2, 8, 32, 128, 512};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<double> inits{1.0, 2.0, 3.0, 4.0};
  double lucky_fraction = 0.1;
  int threads = 1;  // concurrent runs
};

enum class TheoryFamily { kTwoKernel, kGaussian, kDelta };

struct TheorySettings {
  TheoryFamily family = TheoryFamily::kTwoKernel;
  int frames = 4096;
  double sigma_min = 0.6;
  double sigma_max = 1.0;
  int kernel_size = 5;
  double tau = 1e-3;
  double threshold = 0.05;
};

struct ExperimentConfig {
  SceneSettings scene;
  TurbulenceParams turbulence = TurbulenceParams::defaults_for(32);
  SimulationSettings simulation;
  SurrogateSettings surrogate;
  ReconSettings recon;
  ExperimentSettings experiment;
  TheorySettings theory;
  std::uint64_t seed = 0;
  std::string out_dir = "out";

  /// Range checks against each owning type; throws ConfigError.
  void validate() const;
};

/// key = value lines, '#' comments, [section] headers. Unknown sections or keys
/// and malformed values raise ConfigError with the offending line number.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical text form; parse_config(to_config_text(c)) reproduces c.
std::string to_config_text(const ExperimentConfig& config);
/// FNV-1a of the canonical text, as 16 hex digits.
std::string config_hash(const ExperimentConfig& config);

/// Manifest JSON text: config hash, command, canonical config, and extras.
std::string manifest_json(const ExperimentConfig& config, const std::string& command,
                          const std::vector<std::pair<std::string, std::string>>& extras = {});
/// Recovers the config embedded in a manifest.
ExperimentConfig config_from_manifest(const std::string& manifest_text);

/// Creates `dir`. If it already holds a manifest, returns normally only when
/// `force` is set or the stored hash equals `hash`; otherwise throws.
void prepare_output_dir(const std::filesystem::path& dir, const std::string& hash, bool force);

// ---- scenes, baselines, metrics ------------------------------------------------

Image load_scene(const SceneSettings& scene);
/// Turbulence parameters with image size and channels taken from the scene.
TurbulenceParams turbulence_for(const ExperimentConfig& config);

Image baseline_mean(const FrameStack& stack);
/// Mean of the top_k frames by gradient energy sum |grad y|^2 (forward
/// differences); ties keep the lower frame index.
Image baseline_lucky(const FrameStack& stack, int top_k);
double gradient_energy(const Image& img);

struct MetricReport {
  double psnr_db = 0.0;
  double masked_magnitude_error = 0.0;
  double seconds = 0.0;
  std::string config_hash;
};

/// Spectral mask of the isoplanatic Zernike family at the config's D/r0.
theory::SpectralMask turbulence_mask(const TurbulenceParams& params, int draws, double tau, std::uint64_t seed);

// ---- pipelines ----------------------------------------------------------------

FrameStack simulate(const ExperimentConfig& config, const Image& scene, int frames, std::uint64_t seed);

struct ReconOutcome {
  Image image;
  double psnr_db = std::numeric_limits<double>::quiet_NaN();
  double d_over_r0 = 0.0;
  double seconds = 0.0;
  std::vector<recon::LogRow> history;
};

/// Fits (or loads from the cache) the surrogate, builds the tiled renderer and
/// trains. `reference` enables PSNR logging. `csv` and `checkpoint_dir` are optional.
ReconOutcome reconstruct(const ExperimentConfig& config, const FrameStack& stack, std::uint64_t seed,
                         const std::optional<Image>& reference, const std::filesystem::path& csv = {},
                         const std::filesystem::path& checkpoint_dir = {});

struct FramesSweepRow {
  int frames = 0;
  double mean_psnr = 0.0;
  double std_psnr = 0.0;
  double mean_baseline_psnr = 0.0;
  std::vector<double> psnrs;
};
std::vector<FramesSweepRow> run_frames_sweep(const ExperimentConfig& config, const std::function<void(const std::string&)>& log = {});
void write_frames_sweep_csv(const std::vector<FramesSweepRow>& rows, const std::filesystem::path& path);

struct StrengthSweepRow {
  bool learn = false;
  double init = 0.0;
  double final_psnr = 0.0;
  double final_d_over_r0 = 0.0;
};
std::vector<StrengthSweepRow> run_strength_sweep(const ExperimentConfig& config, const std::function<void(const std::string&)>& log = {});
void write_strength_sweep_csv(const std::vector<StrengthSweepRow>& rows, const std::filesystem::path& path);

/// Non-decreasing up to `inversions` drops, each no larger than `tolerance`.
bool is_nondecreasing(const std::vector<double>& values, int inversions = 0, double tolerance = 0.0);

}  // namespace turbuforge::harness
