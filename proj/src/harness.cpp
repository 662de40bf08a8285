#include "turbuforge/harness.hpp"

#include <algorithm>
#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"

#include "turbuforge/hash.hpp"
#include "turbuforge/parallel.hpp"
#include "turbuforge/random.hpp"

namespace turbuforge::harness {

namespace {

// ---- value codecs ----------------------------------------------------------------

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& v, int line) {
  T out{};
  const auto* end = v.data() + v.size();
  const auto res = std::from_chars(v.data(), end, out);
  if (res.ec != std::errc() || res.ptr != end) throw ConfigError("invalid number '" + v + "'", line);
  return out;
}

bool parse_bool(const std::string& v, int line) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ConfigError("invalid boolean '" + v + "'", line);
}

template <typename T>
std::vector<T> parse_list(const std::string& v, int line) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_number<T>(trim(item), line));
  if (out.empty()) throw ConfigError("empty list", line);
  return out;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
std::string fmt(int v) { return std::to_string(v); }
std::string fmt(long v) { return std::to_string(v); }
std::string fmt(std::uint64_t v) { return std::to_string(v); }
std::string fmt(bool v) { return v ? "true" : "false"; }

template <typename T>
std::string fmt_list(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

template <typename E>
struct EnumName {
  E value;
  const char* name;
};

constexpr EnumName<RenderPath> kRenderPaths[] = {
    {RenderPath::kExactAnchor, "exact_anchor"}, {RenderPath::kExactPixel, "exact_pixel"}, {RenderPath::kTiledSurrogate, "tiled_surrogate"}};
constexpr EnumName<nn::GeneratorKind> kGenerators[] = {{nn::GeneratorKind::kPixelGrid, "pixel"},
                                                      {nn::GeneratorKind::kUntrainedConv, "untrained_conv"}};
constexpr EnumName<ExperimentKind> kExperiments[] = {{ExperimentKind::kFramesSweep, "frames_sweep"}, {ExperimentKind::kStrengthSweep, "strength_sweep"}};
constexpr EnumName<TheoryFamily> kFamilies[] = {
    {TheoryFamily::kTwoKernel, "two_kernel"}, {TheoryFamily::kGaussian, "gaussian"}, {TheoryFamily::kDelta, "delta"}};

template <typename E, std::size_t N>
E parse_enum(const EnumName<E> (&table)[N], const std::string& v, int line) {
  std::string options;
  for (const auto& e : table) {
    if (v == e.name) return e.value;
    options += (options.empty() ? "" : ", ") + std::string(e.name);
  }
  throw ConfigError("invalid value '" + v + "' (expected one of: " + options + ")", line);
}

template <typename E, std::size_t N>
std::string enum_name(const EnumName<E> (&table)[N], E value) {
  for (const auto& e : table)
    if (e.value == value) return e.name;
  return "?";
}

// ---- field registry ----------------------------------------------------------------

struct Field {
  std::string section;
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&, int)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

#define TF_NUM(sec, name, member, type)                                                                     \
  Field {                                                                                                   \
    sec, name, [](ExperimentConfig& c, const std::string& v, int l) { c.member = parse_number<type>(v, l); }, \
        [](const ExperimentConfig& c) { return fmt(c.member); }                                            \
  }
#define TF_BOOL(sec, name, member)                                                                 \
  Field {                                                                                          \
    sec, name, [](ExperimentConfig& c, const std::string& v, int l) { c.member = parse_bool(v, l); }, \
        [](const ExperimentConfig& c) { return fmt(c.member); }                                   \
  }
#define TF_STR(sec, name, member)                                                          \
  Field {                                                                                  \
    sec, name, [](ExperimentConfig& c, const std::string& v, int) { c.member = v; },         \
        [](const ExperimentConfig& c) { return c.member; }                                \
  }
#define TF_LIST(sec, name, member, type)                                                                         \
  Field {                                                                                                        \
    sec, name, [](ExperimentConfig& c, const std::string& v, int l) { c.member = parse_list<type>(v, l); },        \
        [](const ExperimentConfig& c) { return fmt_list(c.member); }                                            \
  }
#define TF_ENUM(sec, name, member, table)                                                                   \
  Field {                                                                                                   \
    sec, name, [](ExperimentConfig& c, const std::string& v, int l) { c.member = parse_enum(table, v, l); }, \
        [](const ExperimentConfig& c) { return enum_name(table, c.member); }                               \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      TF_NUM("run", "seed", seed, std::uint64_t),
      TF_STR("run", "out", out_dir),
      Field{"scene", "chart",
            [](ExperimentConfig& c, const std::string& v, int l) {
              try {
                c.scene.chart = parse_chart_kind(v);
              } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what(), l);
              }
            },
            [](const ExperimentConfig& c) { return chart_name(c.scene.chart); }},
      TF_STR("scene", "path", scene.path),
      TF_NUM("scene", "size", scene.size, int),
      TF_NUM("scene", "channels", scene.channels, int),
      TF_NUM("scene", "chart_seed", scene.chart_seed, std::uint64_t),
      TF_NUM("turbulence", "aperture_diameter_m", turbulence.aperture_diameter_m, double),
      TF_NUM("turbulence", "fried_param_m", turbulence.fried_param_m, double),
      TF_NUM("turbulence", "wavelength_m", turbulence.wavelength_m, double),
      TF_NUM("turbulence", "target_distance_m", turbulence.target_distance_m, double),
      TF_NUM("turbulence", "kernel_size_px", turbulence.kernel_size_px, int),
      TF_NUM("turbulence", "num_zernike", turbulence.num_zernike, int),
      TF_NUM("turbulence", "corr_length_px", turbulence.corr_length_px, double),
      TF_NUM("turbulence", "anchor_stride_px", turbulence.anchor_stride_px, int),
      TF_NUM("simulation", "frames", simulation.frames, int),
      TF_NUM("simulation", "noise_sigma", simulation.noise_sigma, double),
      TF_ENUM("simulation", "render_path", simulation.path, kRenderPaths),
      TF_NUM("surrogate", "rank", surrogate.rank, int),
      TF_NUM("surrogate", "samples", surrogate.samples, int),
      TF_NUM("surrogate", "d_min", surrogate.d_min, double),
      TF_NUM("surrogate", "d_max", surrogate.d_max, double),
      TF_STR("surrogate", "cache_dir", surrogate.cache_dir),
      TF_NUM("recon", "batch", recon.config.batch, int),
      TF_NUM("recon", "p_d", recon.config.p_d, double),
      TF_NUM("recon", "p_r", recon.config.p_r, double),
      TF_NUM("recon", "warmup_iters", recon.config.warmup_iters, long),
      TF_NUM("recon", "d_steps_per_g", recon.config.d_steps_per_g, int),
      TF_NUM("recon", "total_iters", recon.config.total_iters, long),
      TF_NUM("recon", "lr_gen", recon.config.adam_gen.lr, double),
      TF_NUM("recon", "lr_disc", recon.config.adam_disc.lr, double),
      Field{"recon", "beta1",
            [](ExperimentConfig& c, const std::string& v, int l) {
              c.recon.config.adam_gen.beta1 = c.recon.config.adam_disc.beta1 = parse_number<double>(v, l);
            },
            [](const ExperimentConfig& c) { return fmt(c.recon.config.adam_gen.beta1); }},
      Field{"recon", "beta2",
            [](ExperimentConfig& c, const std::string& v, int l) {
              c.recon.config.adam_gen.beta2 = c.recon.config.adam_disc.beta2 = parse_number<double>(v, l);
            },
            [](const ExperimentConfig& c) { return fmt(c.recon.config.adam_gen.beta2); }},
      TF_NUM("recon", "lr_log_d", recon.config.lr_log_d, double),
      TF_BOOL("recon", "learn_d_over_r0", recon.config.learn_d_over_r0),
      TF_NUM("recon", "d_over_r0_init", recon.config.d_over_r0_init, double),
      TF_NUM("recon", "log_every", recon.config.log_every, long),
      TF_NUM("recon", "checkpoint_every", recon.config.checkpoint_every, long),
      TF_ENUM("recon", "generator", recon.generator, kGenerators),
      TF_LIST("recon", "gen_widths", recon.gen_widths, int),
      TF_LIST("recon", "disc_widths", recon.disc_widths, int),
      TF_BOOL("recon", "double_precision", recon.double_precision),
      TF_NUM("recon", "tile_px", recon.tile_px, int),
      TF_NUM("recon", "overlap_px", recon.overlap_px, int),
      TF_STR("recon", "stack", recon.stack_path),
      TF_ENUM("experiment", "kind", experiment.kind, kExperiments),
      TF_LIST("experiment", "frames_list", experiment.frames_list, int),
      TF_LIST("experiment", "seeds", experiment.seeds, std::uint64_t),
      TF_LIST("experiment", "inits", experiment.inits, double),
      TF_NUM("experiment", "lucky_fraction", experiment.lucky_fraction, double),
      TF_NUM("experiment", "threads", experiment.threads, int),
      TF_ENUM("theory", "family", theory.family, kFamilies),
      TF_NUM("theory", "frames", theory.frames, int),
      TF_NUM("theory", "sigma_min", theory.sigma_min, double),
      TF_NUM("theory", "sigma_max", theory.sigma_max, double),
      TF_NUM("theory", "kernel_size", theory.kernel_size, int),
      TF_NUM("theory", "tau", theory.tau, double),
      TF_NUM("theory", "threshold", theory.threshold, double),
  };
  return f;
}

#undef TF_NUM
#undef TF_BOOL
#undef TF_STR
#undef TF_LIST
#undef TF_ENUM

const char* const kSections[] = {"run", "scene", "turbulence", "simulation", "surrogate", "recon", "experiment", "theory"};

}  // namespace

// ---- config ----------------------------------------------------------------------

void ExperimentConfig::validate() const {
  auto fail = [](const std::string& what) { throw ConfigError(what, 0); };
  if (scene.size < 8) fail("scene.size must be at least 8");
  if (scene.channels != 1 && scene.channels != 3) fail("scene.channels must be 1 or 3");
  try {
    TurbulenceParams p = turbulence;
    p.image_size_px = scene.size;
    p.validate();
    recon.config.validate();
  } catch (const std::invalid_argument& e) {
    fail(e.what());
  }
  if (simulation.frames < 1) fail("simulation.frames must be positive");
  if (!(simulation.noise_sigma >= 0.0)) fail("simulation.noise_sigma must be non-negative");
  if (surrogate.rank < 1) fail("surrogate.rank must be positive");
  if (surrogate.samples < 50 * surrogate.rank) fail("surrogate.samples must be at least 50 x rank");
  if (surrogate.d_min < 0.0 || surrogate.d_max < 0.0 || (surrogate.d_max > 0.0 && surrogate.d_max < surrogate.d_min)) {
    fail("surrogate.d_min / d_max must be non-negative with d_min <= d_max");
  }
  const int levels = static_cast<int>(recon.disc_widths.size());
  if (scene.size % (1 << levels) != 0) fail("scene.size must be divisible by 2^(number of disc_widths)");
  for (int w : recon.disc_widths)
    if (w < 1) fail("recon.disc_widths entries must be positive");
  if (recon.generator == nn::GeneratorKind::kUntrainedConv) {
    if (recon.gen_widths.empty() || scene.size % (1 << recon.gen_widths.size()) != 0) {
      fail("scene.size must be divisible by 2^(number of gen_widths)");
    }
  }
  for (int w : recon.gen_widths)
    if (w < 1) fail("recon.gen_widths entries must be positive");
  if (recon.tile_px < 0) fail("recon.tile_px must be non-negative");
  for (int l : experiment.frames_list)
    if (l < 1) fail("experiment.frames_list entries must be positive");
  for (double d : experiment.inits)
    if (!(d > 0.0)) fail("experiment.inits entries must be positive");
  if (!(experiment.lucky_fraction > 0.0 && experiment.lucky_fraction <= 1.0)) fail("experiment.lucky_fraction must lie in (0, 1]");
  if (experiment.threads < 1) fail("experiment.threads must be positive");
  if (theory.frames < 1) fail("theory.frames must be positive");
  if (!(theory.sigma_min > 0.0 && theory.sigma_max >= theory.sigma_min)) fail("theory sigma range invalid");
  if (theory.kernel_size < 1 || theory.kernel_size % 2 == 0) fail("theory.kernel_size must be odd");
  if (!(theory.tau >= 0.0 && theory.tau < 1.0)) fail("theory.tau must lie in [0, 1)");
}

ExperimentConfig parse_config(const std::string& text) {
  ExperimentConfig c;
  std::set<std::string> seen;
  std::optional<double> d_over_r0;
  std::string section;
  std::stringstream ss(text);
  std::string raw;
  int line = 0;
  std::vector<std::pair<const Field*, std::pair<std::string, int>>> assignments;
  while (std::getline(ss, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (s.empty()) continue;
    if (s.front() == '[') {
      if (s.back() != ']') throw ConfigError("malformed section header '" + s + "'", line);
      section = trim(s.substr(1, s.size() - 2));
      if (std::find(std::begin(kSections), std::end(kSections), section) == std::end(kSections)) {
        throw ConfigError("unknown section [" + section + "]", line);
      }
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("expected key = value, got '" + s + "'", line);
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (section.empty()) throw ConfigError("key '" + key + "' appears before any [section]", line);
    const std::string full = section + "." + key;
    if (!seen.insert(full).second) throw ConfigError("duplicate key " + full, line);
    if (section == "turbulence" && key == "d_over_r0") {
      d_over_r0 = parse_number<double>(value, line);
      if (!(*d_over_r0 > 0.0)) throw ConfigError("d_over_r0 must be positive", line);
      continue;
    }
    const auto& fs = fields();
    auto it = std::find_if(fs.begin(), fs.end(), [&](const Field& f) { return f.section == section && f.key == key; });
    if (it == fs.end()) throw ConfigError("unknown key '" + key + "' in [" + section + "]", line);
    assignments.push_back({&*it, {value, line}});
  }
  // Size-dependent defaults first, then explicit values on top of them.
  for (const auto& [f, v] : assignments)
    if (f->section == "scene" && f->key == "size") f->set(c, v.first, v.second);
  const auto base = TurbulenceParams::defaults_for(c.scene.size);
  c.turbulence = base;
  const auto scaled = recon::ReconConfig::desk_scaled(c.scene.size);
  c.recon.config.warmup_iters = scaled.warmup_iters;
  c.recon.config.total_iters = scaled.total_iters;
  for (const auto& [f, v] : assignments) f->set(c, v.first, v.second);
  c.turbulence.image_size_px = c.scene.size;
  if (d_over_r0) c.turbulence.set_d_over_r0(*d_over_r0);
  if (!seen.count("recon.d_over_r0_init")) c.recon.config.d_over_r0_init = c.turbulence.d_over_r0();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path.string(), 0);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string to_config_text(const ExperimentConfig& config) {
  std::string out, section;
  for (const auto& f : fields()) {
    if (f.section != section) {
      section = f.section;
      out += (out.empty() ? "" : "\n") + std::string("[") + section + "]\n";
    }
    out += f.key + " = " + f.get(config) + "\n";
  }
  return out;
}

std::string config_hash(const ExperimentConfig& config) { return hex64(fnv1a64(to_config_text(config))); }

std::string manifest_json(const ExperimentConfig& config, const std::string& command,
                          const std::vector<std::pair<std::string, std::string>>& extras) {
  nlohmann::ordered_json j;
  j["config_hash"] = config_hash(config);
  j["command"] = command;
  j["d_over_r0"] = config.turbulence.d_over_r0();
  nlohmann::ordered_json sections;
  for (const auto& f : fields()) sections[f.section][f.key] = f.get(config);
  j["config"] = sections;
  j["config_text"] = to_config_text(config);
  for (const auto& [k, v] : extras) j[k] = v;
  return j.dump(2) + "\n";
}

ExperimentConfig config_from_manifest(const std::string& manifest_text) {
  const auto j = nlohmann::json::parse(manifest_text);
  return parse_config(j.at("config_text").get<std::string>());
}

void prepare_output_dir(const std::filesystem::path& dir, const std::string& hash, bool force) {
  const auto manifest = dir / "manifest.json";
  if (std::filesystem::exists(manifest) && !force) {
    std::ifstream is(manifest);
    std::stringstream ss;
    ss << is.rdbuf();
    std::string stored;
    try {
      stored = nlohmann::json::parse(ss.str()).at("config_hash").get<std::string>();
    } catch (const std::exception&) {
      stored.clear();
    }
    if (stored != hash) {
      throw ConfigError("output directory " + dir.string() + " holds results of config " +
                            (stored.empty() ? std::string("<unreadable>") : stored) + "; pass --force to overwrite",
                        0);
    }
  }
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw std::runtime_error("cannot create output directory " + dir.string() + ": " + ec.message());
}

// ---- scenes, baselines ------------------------------------------------------------

Image load_scene(const SceneSettings& scene) {
  if (scene.path.empty()) return make_chart(scene.chart, scene.size, scene.channels, scene.chart_seed);
  const std::filesystem::path p(scene.path);
  Image img = p.extension() == ".pfm" ? read_pfm(p) : read_pnm(p);
  if (img.rows != scene.size || img.cols != scene.size || img.channels != scene.channels) {
    throw ConfigError("scene image " + scene.path + " does not match scene.size / scene.channels", 0);
  }
  img.clamp(0.0, 1.0);
  return img;
}

TurbulenceParams turbulence_for(const ExperimentConfig& config) {
  TurbulenceParams p = config.turbulence;
  p.image_size_px = config.scene.size;
  p.seed = config.seed;
  return p;
}

Image baseline_mean(const FrameStack& stack) {
  if (stack.frames.empty()) throw std::invalid_argument("baseline_mean: empty stack");
  Image mean = stack.frames[0];
  for (std::size_t i = 1; i < stack.frames.size(); ++i)
    for (std::size_t j = 0; j < mean.size(); ++j) mean.data[j] += stack.frames[i].data[j];
  for (double& v : mean.data) v /= static_cast<double>(stack.frames.size());
  return mean;
}

double gradient_energy(const Image& img) {
  double e = 0.0;
  for (int ch = 0; ch < img.channels; ++ch)
    for (int r = 0; r < img.rows; ++r)
      for (int c = 0; c < img.cols; ++c) {
        if (c + 1 < img.cols) e += std::pow(img(r, c + 1, ch) - img(r, c, ch), 2);
        if (r + 1 < img.rows) e += std::pow(img(r + 1, c, ch) - img(r, c, ch), 2);
      }
  return e;
}

Image baseline_lucky(const FrameStack& stack, int top_k) {
  const int l = stack.size();
  if (top_k < 1 || top_k > l) throw std::invalid_argument("baseline_lucky: top_k must lie in [1, L]");
  std::vector<double> energy(l);
  for (int i = 0; i < l; ++i) energy[i] = gradient_energy(stack.frames[i]);
  std::vector<int> order(l);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return energy[a] > energy[b]; });
  std::sort(order.begin(), order.begin() + top_k);  // summation in frame order
  Image mean(stack.frames[0].rows, stack.frames[0].cols, stack.frames[0].channels);
  for (int i = 0; i < top_k; ++i)
    for (std::size_t j = 0; j < mean.size(); ++j) mean.data[j] += stack.frames[order[i]].data[j];
  for (double& v : mean.data) v /= static_cast<double>(top_k);
  return mean;
}

theory::SpectralMask turbulence_mask(const TurbulenceParams& params, int draws, double tau, std::uint64_t seed) {
  return theory::estimate_spectral_mask(theory::zernike_family(params), params.image_size_px, draws, tau, seed);
}

// ---- pipelines -------------------------------------------------------------------

FrameStack simulate(const ExperimentConfig& config, const Image& scene, int frames, std::uint64_t seed) {
  const TurbulenceParams params = turbulence_for(config);
  SimulateOptions opts;
  opts.path = config.simulation.path;
  PsfBasis basis;
  if (opts.path == RenderPath::kTiledSurrogate) {
    PsfFitOptions fit;
    fit.d_min = config.surrogate.d_min;
    fit.d_max = config.surrogate.d_max;
    basis = config.surrogate.cache_dir.empty()
                ? fit_psf_basis(params, config.surrogate.rank, config.surrogate.samples, seed, fit)
                : cached_psf_basis(config.surrogate.cache_dir, params, config.surrogate.rank, config.surrogate.samples,
                                   seed, fit);
    opts.surrogate = &basis;
  }
  return simulate_stack(scene, params, frames, config.simulation.noise_sigma, seed, opts);
}

namespace {

template <typename T>
ReconOutcome run_trainer(const ExperimentConfig& config, const FrameStack& stack, std::uint64_t seed,
                         const std::optional<Image>& reference, const std::filesystem::path& csv,
                         const std::filesystem::path& checkpoint_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  TurbulenceParams params = turbulence_for(config);
  params.image_size_px = stack.frames.at(0).rows;
  const double init = config.recon.config.d_over_r0_init;
  const double nominal = params.d_over_r0();
  params.set_d_over_r0(init);
  PsfFitOptions fit;
  fit.d_min = config.surrogate.d_min;
  fit.d_max = config.surrogate.d_max;
  if (fit.d_min == 0.0 && fit.d_max == 0.0) {
    // Cover every strength the learnable D/r0 may travel between.
    fit.d_min = 0.5 * std::min(init, nominal);
    fit.d_max = 2.0 * std::max(init, nominal);
  }
  const std::uint64_t basis_seed = derive_key(seed, 0x505342);
  auto basis = std::make_shared<const PsfBasis>(
      config.surrogate.cache_dir.empty()
          ? fit_psf_basis(params, config.surrogate.rank, config.surrogate.samples, basis_seed, fit)
          : cached_psf_basis(config.surrogate.cache_dir, params, config.surrogate.rank, config.surrogate.samples,
                             basis_seed, fit));
  auto renderer =
      std::make_shared<recon::TurbulenceRenderer<T>>(params, basis, config.recon.tile_px, config.recon.overlap_px);

  nn::GeneratorSpec gs;
  gs.kind = config.recon.generator;
  gs.channels = stack.frames[0].channels;
  gs.image_size = params.image_size_px;
  gs.widths = config.recon.gen_widths;
  nn::DiscriminatorSpec ds;
  ds.channels = gs.channels;
  ds.image_size = gs.image_size;
  ds.widths = config.recon.disc_widths;
  recon::ReconConfig rc = config.recon.config;
  rc.checkpoint_dir = checkpoint_dir;
  recon::Trainer<T> trainer(stack, gs, ds, rc, renderer, seed, reference);
  trainer.run();
  if (!csv.empty()) trainer.write_csv(csv);
  if (!checkpoint_dir.empty()) trainer.save_checkpoint(checkpoint_dir / "final.tgc");

  ReconOutcome out;
  out.image = trainer.scene();
  if (reference) out.psnr_db = psnr(out.image, *reference);
  out.d_over_r0 = trainer.d_over_r0();
  out.history = trainer.history();
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

double std_of(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

}  // namespace

ReconOutcome reconstruct(const ExperimentConfig& config, const FrameStack& stack, std::uint64_t seed,
                         const std::optional<Image>& reference, const std::filesystem::path& csv,
                         const std::filesystem::path& checkpoint_dir) {
  if (stack.frames.empty()) throw std::invalid_argument("reconstruct: empty stack");
  const Image& f = stack.frames[0];
  if (f.rows != config.scene.size || f.cols != config.scene.size || f.channels != config.scene.channels) {
    throw ConfigError("stack frames are " + std::to_string(f.rows) + "x" + std::to_string(f.cols) + "x" +
                          std::to_string(f.channels) + " but the config expects " + std::to_string(config.scene.size) +
                          "x" + std::to_string(config.scene.size) + "x" + std::to_string(config.scene.channels),
                      0);
  }
  return config.recon.double_precision ? run_trainer<double>(config, stack, seed, reference, csv, checkpoint_dir)
                                       : run_trainer<float>(config, stack, seed, reference, csv, checkpoint_dir);
}

std::vector<FramesSweepRow> run_frames_sweep(const ExperimentConfig& config, const std::function<void(const std::string&)>& log) {
  const Image scene = load_scene(config.scene);
  const auto& ls = config.experiment.frames_list;
  const auto& seeds = config.experiment.seeds;
  const int runs = static_cast<int>(ls.size() * seeds.size());
  std::vector<double> psnrs(runs), base(runs);
  parallel_for(runs, config.experiment.threads, [&](int r) {
    const int l = ls[r / seeds.size()];
    const std::uint64_t s = seeds[r % seeds.size()];
    const FrameStack stack = simulate(config, scene, l, derive_key(s, 0x53544b, static_cast<std::uint64_t>(l)));
    const auto out = reconstruct(config, stack, s, scene);
    psnrs[r] = out.psnr_db;
    base[r] = psnr(baseline_mean(stack), scene);
    if (log) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "frames_sweep L=%d seed=%llu psnr=%.3f mean-baseline=%.3f (%.0fs)", l,
                    static_cast<unsigned long long>(s), out.psnr_db, base[r], out.seconds);
      log(buf);
    }
  });
  std::vector<FramesSweepRow> rows;
  for (std::size_t i = 0; i < ls.size(); ++i) {
    FramesSweepRow row;
    row.frames = ls[i];
    std::vector<double> b;
    for (std::size_t j = 0; j < seeds.size(); ++j) {
      row.psnrs.push_back(psnrs[i * seeds.size() + j]);
      b.push_back(base[i * seeds.size() + j]);
    }
    row.mean_psnr = mean_of(row.psnrs);
    row.std_psnr = std_of(row.psnrs);
    row.mean_baseline_psnr = mean_of(b);
    rows.push_back(row);
  }
  return rows;
}

void write_frames_sweep_csv(const std::vector<FramesSweepRow>& rows, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "L,mean_psnr,std_psnr,mean_baseline_psnr,runs\n";
  for (const auto& r : rows) {
    os << r.frames << ',' << recon::csv_real(r.mean_psnr) << ',' << recon::csv_real(r.std_psnr) << ','
       << recon::csv_real(r.mean_baseline_psnr) << ',' << r.psnrs.size() << '\n';
  }
}

std::vector<StrengthSweepRow> run_strength_sweep(const ExperimentConfig& config, const std::function<void(const std::string&)>& log) {
  const Image scene = load_scene(config.scene);
  const FrameStack stack = simulate(config, scene, config.simulation.frames, derive_key(config.seed, 0x464736));
  const auto& inits = config.experiment.inits;
  const int runs = static_cast<int>(2 * inits.size());
  std::vector<StrengthSweepRow> rows(runs);
  parallel_for(runs, config.experiment.threads, [&](int r) {
    ExperimentConfig c = config;
    const bool learn = r < static_cast<int>(inits.size());
    const double init = inits[r % inits.size()];
    c.recon.config.learn_d_over_r0 = learn;
    c.recon.config.d_over_r0_init = init;
    const auto out = reconstruct(c, stack, config.seed, scene);
    rows[r] = {learn, init, out.psnr_db, out.d_over_r0};
    if (log) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "strength_sweep learn=%d init=%.2f psnr=%.3f d_over_r0=%.3f (%.0fs)", learn ? 1 : 0, init,
                    out.psnr_db, out.d_over_r0, out.seconds);
      log(buf);
    }
  });
  return rows;
}

void write_strength_sweep_csv(const std::vector<StrengthSweepRow>& rows, const std::filesystem::path& path) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "learn,init_d_over_r0,final_psnr,final_d_over_r0\n";
  for (const auto& r : rows) {
    os << (r.learn ? 1 : 0) << ',' << recon::csv_real(r.init) << ',' << recon::csv_real(r.final_psnr) << ','
       << recon::csv_real(r.final_d_over_r0) << '\n';
  }
}

bool is_nondecreasing(const std::vector<double>& values, int inversions, double tolerance) {
  int drops = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    const double d = values[i - 1] - values[i];
    if (d <= 0.0) continue;
    if (d > tolerance || ++drops > inversions) return false;
  }
  return true;
}

}  // namespace turbuforge::harness
