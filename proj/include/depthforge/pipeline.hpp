#pragma once

#include <algorithm>
#include <atomic>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "depthforge/correspondence.hpp"
#include "depthforge/errors.hpp"
#include "depthforge/frame_store.hpp"
#include "depthforge/fusion.hpp"
#include "depthforge/metrics.hpp"
#include "depthforge/noise_sim.hpp"
#include "depthforge/png_io.hpp"
#include "depthforge/registration.hpp"

#ifndef DEPTHFORGE_VERSION
#define DEPTHFORGE_VERSION "0.1.0"
#endif

namespace depthforge::pipeline {

using nlohmann::json;

inline constexpr const char* kVersion = DEPTHFORGE_VERSION;

// Structure-loss weight the enhancement network is trained with downstream.
// Only recorded in manifests; nothing here consumes it.
inline constexpr double kAdvisoryLambdaS = 5.0;

struct PipelineConfig {
  StreamOptions stream;
  FrameSetOptions frame_sets;
  RegistrationConfig registration;
  FusionOptions fusion;
  PatchOptions patches;
  sim::NoiseModel noise;
  MetricsOptions metrics;
  std::uint64_t seed = 0;
  int workers = 1;
  double val_fraction = 0.1;
  bool write_weight_maps = true;
  bool write_diagnostics = true;

  void validate() const;
  // `with_runtime` adds the worker count, which never influences outputs.
  json to_json(bool with_runtime = true) const;
  static PipelineConfig from_json(const json& j);
};

namespace detail {

inline void check(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("config: " + what);
}

// Rejects keys outside `allowed` so typos do not silently fall back to defaults.
inline void expect_keys(const json& j, const std::string& section, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError("config: '" + section + "' must be an object");
  for (const auto& [key, value] : j.items()) {
    (void)value;
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; })) {
      throw ConfigError("config: unknown key '" + key + "' in '" + section + "'");
    }
  }
}

template <class T>
void read(const json& j, const char* key, T& into) {
  if (!j.contains(key)) return;
  try {
    into = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: bad value for '") + key + "': " + e.what());
  }
}

inline json finite_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

inline json breakdown_json(const LossBreakdown& b) {
  return {{"depth", finite_or_null(b.depth)},
          {"photometric", finite_or_null(b.photometric)},
          {"correspondence", finite_or_null(b.correspondence)},
          {"total", finite_or_null(b.total)}};
}

}  // namespace detail

inline void PipelineConfig::validate() const {
  using detail::check;
  check((stream.working_width >= 1 && stream.working_height >= 1) ||
            (stream.working_width == 0 && stream.working_height == 0),
        "working size must be >= 1 (or 0x0 for native)");
  check(frame_sets.k_half >= 1 && frame_sets.interval >= 1 && frame_sets.target_stride >= 1,
        "k_half, interval and target_stride must be >= 1");
  check(frame_sets.max_target_missing >= 0.0 && frame_sets.max_target_missing <= 1.0,
        "max_target_missing must lie in [0, 1]");
  const auto& r = registration;
  check(r.outer_iterations >= 1 && r.irls_iterations >= 1 && r.refine_steps >= 1 && r.top_k >= 1,
        "registration iteration counts and top_k must be >= 1");
  check(r.match_target_stride >= 1 && r.match_source_stride >= 1, "match strides must be >= 1");
  check(r.radius_start > 0.0 && r.radius_end > 0.0, "match radii must be > 0");
  check(r.fd_step > 0.0 && r.initial_step > 0.0, "fd_step and initial_step must be > 0");
  check(r.max_backtracks >= 0 && r.convergence_window >= 1, "line search and convergence counts out of range");
  check(r.weights.depth >= 0.0 && r.weights.photometric >= 0.0 && r.weights.correspondence >= 0.0,
        "loss weights must be >= 0");
  check(r.render.radius > 0.0 && r.render.max_splats >= 1, "render radius must be > 0 and max_splats >= 1");
  check(r.descriptor.dim >= 1, "descriptor dim must be >= 1");
  check(fusion.radius > 0.0 && fusion.max_splats >= 1 && fusion.z_gate >= 0.0,
        "fusion radius must be > 0, max_splats >= 1, z_gate >= 0");
  check(patches.n_crops >= 1 && patches.patch_size >= 1 && patches.max_retries >= 0,
        "patch counts must be >= 1");
  check(patches.max_missing_ratio >= 0.0 && patches.max_missing_ratio <= 1.0,
        "patch max_missing_ratio must lie in [0, 1]");
  check(noise.sigma_disparity >= 0.0 && noise.speckle_rate >= 0.0 && noise.speckle_rate <= 1.0 &&
            noise.baseline > 0.0,
        "noise sigma must be >= 0, speckle_rate in [0, 1], baseline > 0");
  check(metrics.ssim.window >= 1 && metrics.ssim.window % 2 == 1 && metrics.ssim.sigma > 0.0,
        "ssim window must be odd and sigma > 0");
  check(metrics.ssim.min_coverage >= 0.0 && metrics.ssim.min_coverage <= 1.0, "ssim min_coverage must lie in [0, 1]");
  check(metrics.structure_window >= 1, "structure window must be >= 1");
  check(workers >= 1, "workers must be >= 1");
  check(val_fraction >= 0.0 && val_fraction <= 1.0, "val_fraction must lie in [0, 1]");
}

inline json PipelineConfig::to_json(bool with_runtime) const {
  const auto& r = registration;
  json j = {
      {"working_size", {stream.working_width, stream.working_height}},
      {"frame_sets",
       {{"k_half", frame_sets.k_half},
        {"interval", frame_sets.interval},
        {"target_stride", frame_sets.target_stride},
        {"max_target_missing", frame_sets.max_target_missing}}},
      {"registration",
       {{"outer_iterations", r.outer_iterations},
        {"irls_iterations", r.irls_iterations},
        {"refine_steps", r.refine_steps},
        {"weights", {{"depth", r.weights.depth}, {"photometric", r.weights.photometric}, {"correspondence", r.weights.correspondence}}},
        {"top_k", r.top_k},
        {"match_target_stride", r.match_target_stride},
        {"match_source_stride", r.match_source_stride},
        {"radius_start", r.radius_start},
        {"radius_end", r.radius_end},
        {"fd_step", r.fd_step},
        {"initial_step", r.initial_step},
        {"max_backtracks", r.max_backtracks},
        {"convergence_tol", r.convergence_tol},
        {"convergence_window", r.convergence_window},
        {"huber_scale", "median"},
        {"pairwise_full", r.pairwise_full},
        {"render", {{"radius", r.render.radius}, {"max_splats", r.render.max_splats}}},
        {"descriptor", {{"dim", r.descriptor.dim}, {"projection_seed", r.descriptor.projection_seed}}}}},
      {"fusion", {{"radius", fusion.radius}, {"max_splats", fusion.max_splats}, {"z_gate", fusion.z_gate}}},
      {"patches",
       {{"n_crops", patches.n_crops},
        {"patch_size", patches.patch_size},
        {"max_missing_ratio", patches.max_missing_ratio},
        {"max_retries", patches.max_retries}}},
      {"noise",
       {{"sigma_disparity", noise.sigma_disparity},
        {"dropout_grazing_deg", noise.dropout_grazing_deg},
        {"speckle_rate", noise.speckle_rate},
        {"baseline", noise.baseline}}},
      {"metrics",
       {{"ssim_window", metrics.ssim.window},
        {"ssim_sigma", metrics.ssim.sigma},
        {"ssim_min_coverage", metrics.ssim.min_coverage},
        {"structure_window", metrics.structure_window}}},
      {"seed", seed},
      {"val_fraction", val_fraction},
      {"write_weight_maps", write_weight_maps},
      {"write_diagnostics", write_diagnostics}};
  if (with_runtime) j["workers"] = workers;
  return j;
}

inline PipelineConfig PipelineConfig::from_json(const json& j) {
  using detail::expect_keys;
  using detail::read;
  PipelineConfig c;
  expect_keys(j, "config",
              {"working_size", "frame_sets", "registration", "fusion", "patches", "noise", "metrics", "seed",
               "workers", "val_fraction", "write_weight_maps", "write_diagnostics"});
  if (j.contains("working_size")) {
    const json& ws = j.at("working_size");
    if (!ws.is_array() || ws.size() != 2) throw ConfigError("config: working_size must be [width, height]");
    c.stream.working_width = ws.at(0).get<int>();
    c.stream.working_height = ws.at(1).get<int>();
  }
  if (j.contains("frame_sets")) {
    const json& f = j.at("frame_sets");
    expect_keys(f, "frame_sets", {"k_half", "interval", "target_stride", "max_target_missing"});
    read(f, "k_half", c.frame_sets.k_half);
    read(f, "interval", c.frame_sets.interval);
    read(f, "target_stride", c.frame_sets.target_stride);
    read(f, "max_target_missing", c.frame_sets.max_target_missing);
  }
  if (j.contains("registration")) {
    const json& r = j.at("registration");
    auto& o = c.registration;
    expect_keys(r, "registration",
                {"outer_iterations", "irls_iterations", "refine_steps", "weights", "top_k", "match_target_stride",
                 "match_source_stride", "radius_start", "radius_end", "fd_step", "initial_step", "max_backtracks",
                 "convergence_tol", "convergence_window", "huber_scale", "pairwise_full", "render", "descriptor"});
    read(r, "outer_iterations", o.outer_iterations);
    read(r, "irls_iterations", o.irls_iterations);
    read(r, "refine_steps", o.refine_steps);
    read(r, "top_k", o.top_k);
    read(r, "match_target_stride", o.match_target_stride);
    read(r, "match_source_stride", o.match_source_stride);
    read(r, "radius_start", o.radius_start);
    read(r, "radius_end", o.radius_end);
    read(r, "fd_step", o.fd_step);
    read(r, "initial_step", o.initial_step);
    read(r, "max_backtracks", o.max_backtracks);
    read(r, "convergence_tol", o.convergence_tol);
    read(r, "convergence_window", o.convergence_window);
    read(r, "pairwise_full", o.pairwise_full);
    if (r.contains("huber_scale") && r.at("huber_scale") != "median") {
      throw ConfigError("config: only the 'median' Huber scale policy is supported");
    }
    if (r.contains("weights")) {
      const json& w = r.at("weights");
      expect_keys(w, "registration.weights", {"depth", "photometric", "correspondence"});
      read(w, "depth", o.weights.depth);
      read(w, "photometric", o.weights.photometric);
      read(w, "correspondence", o.weights.correspondence);
    }
    if (r.contains("render")) {
      const json& w = r.at("render");
      expect_keys(w, "registration.render", {"radius", "max_splats"});
      read(w, "radius", o.render.radius);
      read(w, "max_splats", o.render.max_splats);
    }
    if (r.contains("descriptor")) {
      const json& w = r.at("descriptor");
      expect_keys(w, "registration.descriptor", {"dim", "projection_seed"});
      read(w, "dim", o.descriptor.dim);
      read(w, "projection_seed", o.descriptor.projection_seed);
    }
  }
  if (j.contains("fusion")) {
    const json& f = j.at("fusion");
    expect_keys(f, "fusion", {"radius", "max_splats", "z_gate"});
    read(f, "radius", c.fusion.radius);
    read(f, "max_splats", c.fusion.max_splats);
    read(f, "z_gate", c.fusion.z_gate);
  }
  if (j.contains("patches")) {
    const json& p = j.at("patches");
    expect_keys(p, "patches", {"n_crops", "patch_size", "max_missing_ratio", "max_retries"});
    read(p, "n_crops", c.patches.n_crops);
    read(p, "patch_size", c.patches.patch_size);
    read(p, "max_missing_ratio", c.patches.max_missing_ratio);
    read(p, "max_retries", c.patches.max_retries);
  }
  if (j.contains("noise")) {
    const json& n = j.at("noise");
    expect_keys(n, "noise", {"sigma_disparity", "dropout_grazing_deg", "speckle_rate", "baseline"});
    read(n, "sigma_disparity", c.noise.sigma_disparity);
    read(n, "dropout_grazing_deg", c.noise.dropout_grazing_deg);
    read(n, "speckle_rate", c.noise.speckle_rate);
    read(n, "baseline", c.noise.baseline);
  }
  if (j.contains("metrics")) {
    const json& m = j.at("metrics");
    expect_keys(m, "metrics", {"ssim_window", "ssim_sigma", "ssim_min_coverage", "structure_window"});
    read(m, "ssim_window", c.metrics.ssim.window);
    read(m, "ssim_sigma", c.metrics.ssim.sigma);
    read(m, "ssim_min_coverage", c.metrics.ssim.min_coverage);
    read(m, "structure_window", c.metrics.structure_window);
  }
  read(j, "seed", c.seed);
  read(j, "workers", c.workers);
  read(j, "val_fraction", c.val_fraction);
  read(j, "write_weight_maps", c.write_weight_maps);
  read(j, "write_diagnostics", c.write_diagnostics);
  c.validate();
  return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return PipelineConfig::from_json(j);
}

// Weight map: "DFWM", u32 width, u32 height, then width*height float32, all little-endian.
inline void write_weight_map(const std::filesystem::path& path, const Image<double>& weights) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  auto put_u32 = [&](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  out.write("DFWM", 4);
  put_u32(static_cast<std::uint32_t>(weights.width()));
  put_u32(static_cast<std::uint32_t>(weights.height()));
  for (double w : weights) put_u32(std::bit_cast<std::uint32_t>(static_cast<float>(w)));
  if (!out) throw Error("failed writing " + path.string());
}

inline Image<double> read_weight_map(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError(-1, "cannot open weight map " + path.string());
  auto get_u32 = [&]() {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4)) throw LoadError(-1, "truncated weight map " + path.string());
    return static_cast<std::uint32_t>(b[0]) | static_cast<std::uint32_t>(b[1]) << 8 |
           static_cast<std::uint32_t>(b[2]) << 16 | static_cast<std::uint32_t>(b[3]) << 24;
  };
  char magic[4];
  if (!in.read(magic, 4) || std::string(magic, 4) != "DFWM") throw LoadError(-1, "not a DFWM file: " + path.string());
  const auto w = static_cast<int>(get_u32());
  const auto h = static_cast<int>(get_u32());
  Image<double> out(w, h);
  for (double& v : out) v = std::bit_cast<float>(get_u32());
  return out;
}

// Progress messages go to stderr when verbose; warnings always do.
class Logger {
 public:
  explicit Logger(bool verbose = false, std::ostream* sink = &std::cerr) : verbose_(verbose), sink_(sink) {}

  void info(const std::string& msg) {
    if (verbose_) emit("info", msg);
  }
  void warn(const std::string& msg) { emit("warning", msg); }

 private:
  void emit(const char* level, const std::string& msg) {
    if (!sink_) return;
    std::lock_guard lock(mutex_);
    *sink_ << "depthforge " << level << ": " << msg << '\n';
  }

  bool verbose_;
  std::ostream* sink_;
  std::mutex mutex_;
};

struct SetRecord {
  long target_id = 0;
  std::string status;  // ok | excluded-neighbors | failed
  std::string split;   // train | val
  std::string error;
  std::vector<int> excluded_offsets;
  int iterations = 0;
  std::optional<LossBreakdown> loss;
  std::optional<double> ssim;            // GT vs input depth
  std::optional<double> structure_loss;  // GT vs input depth
  double coverage = 0.0;
  std::vector<std::string> files;

  json to_json() const {
    json j = {{"target_id", target_id}, {"status", status}, {"split", split}, {"excluded_offsets", excluded_offsets},
              {"iterations", iterations}, {"coverage", coverage}, {"files", files}};
    j["loss"] = loss ? detail::breakdown_json(*loss) : json(nullptr);
    j["ssim"] = ssim ? detail::finite_or_null(*ssim) : json(nullptr);
    j["structure_loss"] = structure_loss ? detail::finite_or_null(*structure_loss) : json(nullptr);
    if (!error.empty()) j["error"] = error;
    return j;
  }
};

// Everything except the "runtime" block is independent of worker count and timing.
struct RunManifest {
  std::string command;
  json config;
  json inputs = json::object();
  std::vector<SetRecord> sets;
  json summary = json::object();
  std::vector<std::string> files;
  std::vector<std::string> warnings;
  int workers = 1;
  std::map<std::string, double> stage_seconds;
  std::map<std::string, double> item_seconds;

  json to_json() const {
    json j = {{"tool", "depthforge"}, {"version", kVersion}, {"command", command}, {"config", config}, {"inputs", inputs}};
    j["advisory"] = {{"lambda_s", kAdvisoryLambdaS},
                     {"note", "structure-loss weight for downstream enhancement training; not used by this tool"}};
    json sets_json = json::array();
    for (const auto& s : sets) sets_json.push_back(s.to_json());
    j["sets"] = std::move(sets_json);
    j["summary"] = summary;
    j["files"] = files;
    j["warnings"] = warnings;
    j["runtime"] = {{"workers", workers}, {"stage_seconds", stage_seconds}, {"item_seconds", item_seconds}};
    return j;
  }
};

// Drops the timing block so manifests from different runs can be compared.
inline json without_runtime(json manifest) {
  manifest.erase("runtime");
  return manifest;
}

// Serializes every write under one lock and remembers what was written.
class OutputWriter {
 public:
  explicit OutputWriter(std::filesystem::path root) : root_(std::move(root)) {}

  const std::filesystem::path& root() const noexcept { return root_; }

  void depth_png(const std::string& rel, const DepthImage& depth) {
    write(rel, [&](const std::filesystem::path& p) { io::write_depth_png(p, depth); });
  }
  void color_png(const std::string& rel, const ColorImage& color) {
    write(rel, [&](const std::filesystem::path& p) { io::write_color_png(p, color); });
  }
  void weight_map(const std::string& rel, const Image<double>& weights) {
    write(rel, [&](const std::filesystem::path& p) { write_weight_map(p, weights); });
  }
  void json_file(const std::string& rel, const json& j) {
    write(rel, [&](const std::filesystem::path& p) {
      std::ofstream out(p);
      out << j.dump(2) << '\n';
      if (!out) throw Error("failed writing " + p.string());
    });
  }
  void intrinsics(const std::string& rel, const Intrinsics& intr) {
    write(rel, [&](const std::filesystem::path& p) { write_intrinsics_file(p, intr); });
  }

  std::vector<std::string> files() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out(files_.begin(), files_.end());
    return out;
  }

 private:
  template <class F>
  void write(const std::string& rel, F&& f) {
    std::lock_guard lock(mutex_);
    const std::filesystem::path path = root_ / rel;
    std::filesystem::create_directories(path.parent_path());
    f(path);
    files_.insert(rel);
  }

  std::filesystem::path root_;
  mutable std::mutex mutex_;
  std::set<std::string> files_;
};

inline std::string split_of(std::uint64_t seed, long id, double val_fraction) {
  const std::uint64_t h = sim::frame_seed(seed ^ 0x5b1e5b1e5b1e5b1eULL, id);
  return static_cast<double>(h >> 11) * 0x1.0p-53 < val_fraction ? "val" : "train";
}

namespace detail {

using Clock = std::chrono::steady_clock;

inline double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Runs `task(i)` for i in [0, n) on up to `workers` threads; indices are handed
// out in order, results land wherever `task` puts them.
template <class Task>
void parallel_for(std::size_t n, int workers, Task&& task) {
  std::atomic<std::size_t> next{0};
  auto loop = [&] {
    for (std::size_t i = next.fetch_add(1); i < n; i = next.fetch_add(1)) task(i);
  };
  const std::size_t extra = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers))) - (n > 0 ? 1 : 0);
  std::vector<std::jthread> pool;
  pool.reserve(extra);
  for (std::size_t w = 0; w < extra; ++w) pool.emplace_back(loop);
  loop();
}

inline json diagnostics_json(const LocalFrameSet& set, const RegistrationResult& reg) {
  json trace = json::array();
  for (const auto& b : reg.trace) trace.push_back(breakdown_json(b));
  json neighbors = json::array();
  for (std::size_t j = 0; j < reg.neighbors.size(); ++j) {
    const auto& n = reg.neighbors[j];
    const Vector6d& tw = n.twist.coeffs;
    neighbors.push_back({{"frame_id", set.neighbors[j].id},
                         {"offset", n.offset},
                         {"excluded", n.excluded},
                         {"correspondences", n.correspondences},
                         {"overlap", n.overlap},
                         {"twist", {tw[0], tw[1], tw[2], tw[3], tw[4], tw[5]}},
                         {"pose", sim::pose_to_json(reg.poses.neighbor_to_target[j])}});
  }
  json pairwise = json::array();
  for (const auto& row : reg.pairwise_depth_consistency) {
    json r = json::array();
    for (double v : row) r.push_back(finite_or_null(v));
    pairwise.push_back(std::move(r));
  }
  return {{"target_id", set.target.id}, {"iterations", reg.iterations_run}, {"trace", std::move(trace)},
          {"final", breakdown_json(reg.loss)}, {"neighbors", std::move(neighbors)},
          {"pairwise_depth_consistency", std::move(pairwise)}};
}

}  // namespace detail

// Registers and fuses every eligible frame set of the stream under `input_dir`
// and writes gt_depth/, weights/, diagnostics/ and manifest.json to `output_dir`.
inline RunManifest cmd_generate(const std::filesystem::path& input_dir, const std::filesystem::path& output_dir,
                                const PipelineConfig& cfg, Logger* log = nullptr) {
  cfg.validate();
  const auto t_start = detail::Clock::now();
  RunManifest manifest;
  manifest.command = "generate";
  manifest.config = cfg.to_json(false);
  manifest.workers = cfg.workers;
  manifest.inputs = {{"input", input_dir.filename().string()}};

  auto t0 = detail::Clock::now();
  const std::vector<RgbdFrame> stream = load_stream(input_dir, cfg.stream);
  const std::vector<LocalFrameSet> sets = build_frame_sets(stream, cfg.frame_sets);
  manifest.stage_seconds["load"] = detail::seconds_since(t0);
  if (log) log->info("loaded " + std::to_string(stream.size()) + " frames, " + std::to_string(sets.size()) + " frame sets");

  OutputWriter writer(output_dir);
  std::filesystem::create_directories(output_dir);
  std::vector<SetRecord> records(sets.size());
  std::vector<double> set_seconds(sets.size(), 0.0);

  t0 = detail::Clock::now();
  detail::parallel_for(sets.size(), cfg.workers, [&](std::size_t i) {
    const auto ts = detail::Clock::now();
    const LocalFrameSet& set = sets[i];
    SetRecord& rec = records[i];
    rec.target_id = set.target.id;
    rec.split = split_of(cfg.seed, set.target.id, cfg.val_fraction);
    const std::string name = frame_filename(set.target.id);
    const std::string stem = name.substr(0, name.size() - 4);
    try {
      const RegistrationResult reg = register_frame_set(set, cfg.registration);
      rec.iterations = reg.iterations_run;
      rec.loss = reg.loss;
      for (std::size_t j = 0; j < set.size(); ++j) {
        if (reg.poses.excluded[j]) rec.excluded_offsets.push_back(set.offsets[j]);
      }
      if (cfg.write_diagnostics) {
        const std::string rel = "diagnostics/" + stem + ".json";
        writer.json_file(rel, detail::diagnostics_json(set, reg));
        rec.files.push_back(rel);
      }
      if (rec.excluded_offsets.size() == set.size()) {
        rec.status = "failed";
        rec.error = "every neighbor was excluded";
      } else {
        const GtDepth gt = generate_gt_depth(set, reg.poses, cfg.fusion);
        rec.coverage = gt.fused.coverage;
        const std::string rel = "gt_depth/" + name;
        writer.depth_png(rel, gt.fused.depth);
        rec.files.push_back(rel);
        if (cfg.write_weight_maps) {
          const std::string wrel = "weights/" + stem + ".bin";
          writer.weight_map(wrel, gt.fused.weight_sum);
          rec.files.push_back(wrel);
        }
        try {
          rec.ssim = ssim(gt.fused.depth, set.target.depth, cfg.metrics.ssim);
        } catch (const UndefinedMetricError&) {
        }
        rec.structure_loss = structure_loss(gt.fused.depth, set.target.depth, cfg.metrics.structure_window);
        rec.status = rec.excluded_offsets.empty() ? "ok" : "excluded-neighbors";
      }
    } catch (const Error& e) {
      rec.status = "failed";
      rec.error = e.what();
    } catch (const std::exception& e) {
      rec.status = "failed";
      rec.error = std::string("unexpected: ") + e.what();
    }
    std::sort(rec.files.begin(), rec.files.end());
    set_seconds[i] = detail::seconds_since(ts);
    if (log) {
      if (rec.status == "failed") log->warn("set " + std::to_string(rec.target_id) + " failed: " + rec.error);
      else log->info("set " + std::to_string(rec.target_id) + " " + rec.status);
    }
  });
  manifest.stage_seconds["register_and_fuse"] = detail::seconds_since(t0);

  std::map<std::string, int> counts{{"ok", 0}, {"excluded-neighbors", 0}, {"failed", 0}};
  std::vector<double> ssims;
  std::vector<double> structure;
  for (std::size_t i = 0; i < records.size(); ++i) {
    ++counts[records[i].status];
    if (records[i].ssim) ssims.push_back(*records[i].ssim);
    if (records[i].structure_loss) structure.push_back(*records[i].structure_loss);
    manifest.item_seconds[std::to_string(records[i].target_id)] = set_seconds[i];
    if (records[i].status == "failed") {
      manifest.warnings.push_back("set " + std::to_string(records[i].target_id) + ": " + records[i].error);
    }
  }
  auto mean = [](const std::vector<double>& v) { return v.empty() ? json(nullptr) : json(std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size())); };
  manifest.summary = {{"frames", stream.size()},
                      {"sets", sets.size()},
                      {"status_counts", counts},
                      {"mean_ssim_gt_vs_input", mean(ssims)},
                      {"mean_structure_loss_gt_vs_input", mean(structure)}};
  manifest.sets = std::move(records);
  manifest.files = writer.files();
  manifest.stage_seconds["total"] = detail::seconds_since(t_start);
  writer.json_file("manifest.json", manifest.to_json());
  return manifest;
}

struct EvaluationReport {
  std::string mask_policy = "intersection";
  std::map<std::string, MetricsReport> images;
  std::map<std::string, std::string> skipped;  // file -> reason
  MetricsReport mean;
  MetricsReport median;

  json to_json() const {
    json per = json::object();
    for (const auto& [name, r] : images) per[name] = r.to_json();
    return {{"mask_policy", mask_policy}, {"count", images.size()}, {"images", per},
            {"mean", mean.to_json()},     {"median", median.to_json()}, {"skipped", skipped}};
  }
};

namespace detail {

inline double median_of_values(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline std::set<std::string> png_names(const std::filesystem::path& dir) {
  std::set<std::string> names;
  if (!std::filesystem::is_directory(dir)) throw LoadError(-1, "not a directory: " + dir.string());
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") names.insert(e.path().filename().string());
  }
  return names;
}

}  // namespace detail

// Compares same-named depth PNGs in two directories.
inline EvaluationReport cmd_evaluate(const std::filesystem::path& pred_dir, const std::filesystem::path& ref_dir,
                                     const std::string& mask_policy = "intersection",
                                     const MetricsOptions& opts = {}, Logger* log = nullptr) {
  if (mask_policy != "intersection") throw ConfigError("unsupported mask policy '" + mask_policy + "'");
  const auto pred = detail::png_names(pred_dir);
  const auto ref = detail::png_names(ref_dir);
  std::vector<std::string> common;
  std::set_intersection(pred.begin(), pred.end(), ref.begin(), ref.end(), std::back_inserter(common));
  if (common.empty()) throw EmptyComparisonError("no depth images with matching names in both directories");

  EvaluationReport report;
  report.mask_policy = mask_policy;
  for (const auto& name : common) {
    DepthImage p = io::read_depth_png(pred_dir / name);
    DepthImage r = io::read_depth_png(ref_dir / name);
    if (!p.same_shape(r)) {
      report.skipped[name] = "size mismatch";
      if (log) log->warn(name + ": size mismatch, skipped");
      continue;
    }
    try {
      report.images[name] = evaluate_pair(p, r, opts);
    } catch (const UndefinedMetricError& e) {
      report.skipped[name] = e.what();
      if (log) log->warn(name + ": " + e.what());
    }
  }
  if (report.images.empty()) throw EmptyComparisonError("no image pair produced defined metrics");

  std::vector<double> s, rm, ma, sl, vp;
  for (const auto& [name, r] : report.images) {
    s.push_back(r.ssim);
    rm.push_back(r.rmse);
    ma.push_back(r.mae);
    sl.push_back(r.structure_loss);
    vp.push_back(static_cast<double>(r.valid_pixels));
  }
  auto mean = [](const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); };
  report.mean = {mean(s), mean(rm), mean(ma), mean(sl), static_cast<std::size_t>(std::llround(mean(vp))), mask_policy};
  report.median = {detail::median_of_values(s), detail::median_of_values(rm), detail::median_of_values(ma),
                   detail::median_of_values(sl), static_cast<std::size_t>(std::llround(detail::median_of_values(vp))),
                   mask_policy};
  return report;
}

// Renders a scene spec into a frame-store stream: color/, depth/ (noisy),
// clean_depth/, intrinsics.txt and poses.json (camera-to-world, 4x4 row-major).
inline RunManifest cmd_simulate(const sim::SceneSpec& spec, const std::filesystem::path& output_dir,
                                const PipelineConfig& cfg, Logger* log = nullptr) {
  cfg.validate();
  const auto t_start = detail::Clock::now();
  sim::validate(spec);
  RunManifest manifest;
  manifest.command = "simulate";
  manifest.config = cfg.to_json(false);
  manifest.workers = cfg.workers;
  manifest.inputs = {{"frames", spec.trajectory.size()}, {"primitives", spec.primitives.size()}};

  OutputWriter writer(output_dir);
  std::filesystem::create_directories(output_dir);
  const std::size_t n = spec.trajectory.size();
  detail::parallel_for(n, cfg.workers, [&](std::size_t f) {
    const long id = static_cast<long>(f);
    const RgbdFrame frame = sim::render_view(spec, spec.trajectory[f], id);
    sim::NoiseModel model = cfg.noise;
    model.seed = sim::frame_seed(cfg.seed, id);
    const DepthImage noisy = sim::simulate_kinect_noise(frame.depth, frame.intr, model);
    const std::string name = frame_filename(id);
    writer.color_png("color/" + name, frame.color);
    writer.depth_png("clean_depth/" + name, frame.depth);
    writer.depth_png("depth/" + name, noisy);
  });
  writer.intrinsics("intrinsics.txt", spec.intr);
  json poses = json::array();
  for (std::size_t f = 0; f < n; ++f) poses.push_back({{"id", f}, {"matrix", sim::pose_to_json(spec.trajectory[f])}});
  writer.json_file("poses.json", {{"convention", "camera_to_world"}, {"layout", "row-major 4x4"}, {"poses", poses}});
  if (log) log->info("rendered " + std::to_string(n) + " frames");

  manifest.summary = {{"frames", n}, {"noise", sim::noise_to_json(cfg.noise)}};
  manifest.files = writer.files();
  manifest.stage_seconds["total"] = detail::seconds_since(t_start);
  writer.json_file("manifest.json", manifest.to_json());
  return manifest;
}

inline PoseSE3 pose_from_rows(const json& matrix) { return sim::pose_from_json(matrix); }

// Reads poses.json as written by cmd_simulate; index = frame id.
inline std::vector<PoseSE3> read_poses(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError(-1, "cannot open " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw LoadError(-1, path.string() + " is not valid JSON: " + e.what());
  }
  std::vector<PoseSE3> out;
  for (const auto& p : j.at("poses")) out.push_back(sim::pose_from_json(p.at("matrix")));
  return out;
}

namespace detail {

// Accepts either a directory of depth PNGs or a root holding `sub`/.
inline std::filesystem::path depth_dir(const std::filesystem::path& dir, const char* sub) {
  const auto nested = dir / sub;
  return std::filesystem::is_directory(nested) ? nested : dir;
}

}  // namespace detail

// Cuts seeded training patches from paired input/GT depth images.
inline RunManifest cmd_patches(const std::filesystem::path& input_dir, const std::filesystem::path& gt_dir,
                               const std::filesystem::path& output_dir, const PipelineConfig& cfg,
                               Logger* log = nullptr) {
  cfg.validate();
  const auto t_start = detail::Clock::now();
  const auto in_dir = detail::depth_dir(input_dir, "depth");
  const auto g_dir = detail::depth_dir(gt_dir, "gt_depth");
  if (!std::filesystem::is_directory(in_dir)) throw LoadError(-1, "not a directory: " + in_dir.string());
  if (!std::filesystem::is_directory(g_dir)) throw LoadError(-1, "not a directory: " + g_dir.string());

  RunManifest manifest;
  manifest.command = "patches";
  manifest.config = cfg.to_json(false);
  manifest.workers = cfg.workers;
  manifest.inputs = {{"input", in_dir.filename().string()}, {"gt", g_dir.filename().string()}};

  const std::vector<long> in_ids = list_frame_ids(in_dir);
  const std::vector<long> gt_ids = list_frame_ids(g_dir);
  std::vector<long> paired;
  std::set_intersection(in_ids.begin(), in_ids.end(), gt_ids.begin(), gt_ids.end(), std::back_inserter(paired));
  for (long id : gt_ids) {
    if (!std::binary_search(paired.begin(), paired.end(), id)) manifest.warnings.push_back("gt " + frame_filename(id) + " has no input, skipped");
  }
  for (long id : in_ids) {
    if (!std::binary_search(paired.begin(), paired.end(), id)) manifest.warnings.push_back("input " + frame_filename(id) + " has no gt, skipped");
  }

  OutputWriter writer(output_dir);
  std::filesystem::create_directories(output_dir);
  std::vector<std::vector<PatchPair>> patches(paired.size());
  std::vector<std::string> errors(paired.size());
  detail::parallel_for(paired.size(), cfg.workers, [&](std::size_t i) {
    const long id = paired[i];
    try {
      const DepthImage gt = io::read_depth_png(g_dir / frame_filename(id));
      DepthImage input = io::read_depth_png(in_dir / frame_filename(id));
      if (!input.same_shape(gt)) input = resize_depth(input, gt.width(), gt.height());
      PatchOptions opts = cfg.patches;
      opts.seed = sim::frame_seed(cfg.seed, id);
      patches[i] = extract_patches(input, gt, opts, id);
      for (std::size_t c = 0; c < patches[i].size(); ++c) {
        char name[48];
        std::snprintf(name, sizeof name, "%06ld_%02zu.png", id, c);
        writer.depth_png(std::string("input/") + name, patches[i][c].input_patch);
        writer.depth_png(std::string("gt/") + name, patches[i][c].gt_patch);
      }
    } catch (const Error& e) {
      errors[i] = e.what();
    }
  });

  json index = json::array();
  std::size_t total = 0;
  for (std::size_t i = 0; i < paired.size(); ++i) {
    const long id = paired[i];
    if (!errors[i].empty()) {
      manifest.warnings.push_back(frame_filename(id) + ": " + errors[i]);
      continue;
    }
    if (patches[i].empty()) manifest.warnings.push_back(frame_filename(id) + ": no crop met the missing-depth limit");
    for (std::size_t c = 0; c < patches[i].size(); ++c) {
      char name[48];
      std::snprintf(name, sizeof name, "%06ld_%02zu.png", id, c);
      index.push_back({{"source_id", id}, {"crop", c}, {"origin_x", patches[i][c].origin_x},
                       {"origin_y", patches[i][c].origin_y}, {"input", std::string("input/") + name},
                       {"gt", std::string("gt/") + name}, {"split", split_of(cfg.seed, id, cfg.val_fraction)}});
      ++total;
    }
  }
  writer.json_file("index.json", index);
  if (log) {
    for (const auto& w : manifest.warnings) log->warn(w);
    log->info("wrote " + std::to_string(total) + " patch pairs");
  }
  manifest.summary = {{"pairs", paired.size()}, {"patches", total}};
  manifest.files = writer.files();
  manifest.stage_seconds["total"] = detail::seconds_since(t_start);
  writer.json_file("manifest.json", manifest.to_json());
  return manifest;
}

}  // namespace depthforge::pipeline
