#pragma once

// Implementations behind the beatkit command-line tool. Each command is a
// plain function so tests and the acceptance runner can call it in-process.

#include <array>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "beatkit/checkpoint.hpp"
#include "beatkit/dbn.hpp"
#include "beatkit/dsa.hpp"
#include "beatkit/encoder.hpp"
#include "beatkit/io.hpp"
#include "beatkit/markov.hpp"
#include "beatkit/metrics.hpp"
#include "beatkit/synth.hpp"
#include "beatkit/training.hpp"

namespace beatkit::cli {

namespace fs = std::filesystem;

// ---- threading ----

// BEATKIT_THREADS caps worker threads; unset or invalid means all cores.
inline std::size_t thread_budget() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("BEATKIT_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) n = static_cast<std::size_t>(v);
  }
  return n;
}

// Runs fn(i) for i in [0, n). Results must go to per-index slots so the
// thread count never changes output. The lowest-index failure is rethrown.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn) {
  const std::size_t workers = std::min(thread_budget(), n);
  std::vector<std::exception_ptr> errors(n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i; (i = next++) < n;) {
          try {
            fn(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---- configuration ----

inline EncoderConfig profile_config(const std::string& profile) {
  if (profile == "desk") return EncoderConfig::desk();
  if (profile == "paper") return EncoderConfig::paper();
  throw ConfigError("unknown profile '" + profile + "' (expected desk or paper)");
}

inline std::map<std::string, std::string> split_overrides(const std::vector<std::string>& items) {
  std::map<std::string, std::string> kv;
  for (const std::string& s : items) {
    const auto eq = s.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + s + "' is not key=value");
    kv[s.substr(0, eq)] = s.substr(eq + 1);
  }
  return kv;
}

inline DBNConfig apply_dbn_config(DBNConfig c, const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "min_bpm") c.min_bpm = detail::config_real(k, v);
    else if (k == "max_bpm") c.max_bpm = detail::config_real(k, v);
    else if (k == "observation_lambda") c.observation_lambda = detail::config_real(k, v);
    else if (k == "transition_lambda") c.transition_lambda = detail::config_real(k, v);
    else if (k == "threshold") c.threshold = detail::config_real(k, v);
    else if (k == "floor") c.floor = detail::config_real(k, v);
    else if (k == "meters") {
      c.meters.clear();
      for (const auto& m : detail::config_list(v, ',')) c.meters.push_back(static_cast<int>(detail::config_size(k, m)));
    } else if (k == "correct") {
      if (v != "0" && v != "1" && v != "true" && v != "false") throw ConfigError("dbn key 'correct' expects true/false");
      c.correct = v == "1" || v == "true";
    } else {
      throw ConfigError("unknown dbn key '" + k + "'");
    }
  }
  c.validate();
  return c;
}

// Shortest text that reads back to the same double.
inline std::string num(double x) {
  char buf[32];
  for (int p = 6; p <= 17; ++p) {
    std::snprintf(buf, sizeof buf, "%.*g", p, x);
    if (std::strtod(buf, nullptr) == x) break;
  }
  return buf;
}

inline std::map<std::string, std::string> dbn_config_map(const DBNConfig& c) {
  std::ostringstream meters;
  for (std::size_t i = 0; i < c.meters.size(); ++i) meters << (i ? "," : "") << c.meters[i];
  return {{"dbn.min_bpm", num(c.min_bpm)},
          {"dbn.max_bpm", num(c.max_bpm)},
          {"dbn.meters", meters.str()},
          {"dbn.observation_lambda", num(c.observation_lambda)},
          {"dbn.transition_lambda", num(c.transition_lambda)},
          {"dbn.threshold", num(c.threshold)},
          {"dbn.floor", num(c.floor)},
          {"dbn.correct", c.correct ? "true" : "false"}};
}

inline std::map<std::string, std::string> model_config_map(const EncoderConfig& c) {
  std::map<std::string, std::string> out;
  for (const auto& [k, v] : parse_key_values(to_config_text(c))) out["model." + k] = v;
  return out;
}

struct SynthSettings {
  SynthParams base;
  SynthRanges ranges;
};

inline SynthSettings apply_synth_config(SynthSettings s, const std::map<std::string, std::string>& kv) {
  for (const auto& [k, v] : kv) {
    if (k == "frames") s.base.frames = detail::config_size(k, v);
    else if (k == "mel_bins") s.base.mel_bins = detail::config_size(k, v);
    else if (k == "fps") s.base.fps = detail::config_real(k, v);
    else if (k == "noise") s.base.noise = detail::config_real(k, v);
    else if (k == "min_bpm") s.ranges.min_bpm = detail::config_real(k, v);
    else if (k == "max_bpm") s.ranges.max_bpm = detail::config_real(k, v);
    else throw ConfigError("unknown synth key '" + k + "'");
  }
  if (!(s.ranges.min_bpm >= 40 && s.ranges.min_bpm <= s.ranges.max_bpm && s.ranges.max_bpm <= 240))
    throw ConfigError("synth: need 40 <= min_bpm <= max_bpm <= 240");
  s.base.validate();
  return s;
}

// ---- run manifests ----

inline std::string run_manifest_path_for_file(const std::string& output) { return output + ".run.json"; }

inline void write_run_manifest(const std::string& path, const RunManifest& m) { write_file(path, m.str()); }

inline void add_digest(std::map<std::string, std::string>& into, const std::string& path) {
  into[path] = sha256_file(path);
}

inline void ensure_directory(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) throw IoError("cannot create directory " + dir.string());
}

inline void ensure_parent(const std::string& file) {
  const fs::path parent = fs::path(file).parent_path();
  if (!parent.empty()) ensure_directory(parent);
}

// ---- gen-data ----

struct GenDataOptions {
  std::size_t count = 32;
  std::string out_dir;
  std::uint64_t seed = 0;
  SynthSettings synth;
};

inline std::string clip_stem(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "clip_%04zu", i);
  return buf;
}

// Clip i depends only on (seed, i).
inline SynthClip generate_clip(const SynthSettings& s, std::uint64_t seed, std::size_t i) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(i >> 32)};
  std::mt19937_64 rng(seq);
  const SynthParams p = random_synth_params(s.base, s.ranges, rng);
  return synth_clip(p, rng);
}

inline Manifest gen_data(const GenDataOptions& o) {
  if (o.out_dir.empty()) throw ConfigError("gen-data: output directory required");
  ensure_directory(o.out_dir);
  std::vector<std::array<std::pair<std::string, std::string>, 2>> entries(o.count);
  parallel_for(o.count, [&](std::size_t i) {
    const SynthClip s = generate_clip(o.synth, o.seed, i);
    const std::string stem = clip_stem(i);
    const std::string clip_bytes = encode_clip(s.clip), ann = format_annotation(s.annotation);
    write_file((fs::path(o.out_dir) / (stem + ".bspc")).string(), clip_bytes);
    write_file((fs::path(o.out_dir) / (stem + ".beats")).string(), ann);
    entries[i] = {{{stem + ".bspc", sha256_hex(clip_bytes)}, {stem + ".beats", sha256_hex(ann)}}};
  });
  Manifest m;
  for (const auto& e : entries) m.entries.insert(m.entries.end(), e.begin(), e.end());
  const std::string manifest_path = (fs::path(o.out_dir) / kManifestName).string();
  write_file(manifest_path, m.str());

  RunManifest run;
  run.command = "gen-data";
  run.seed = o.seed;
  run.profile = "desk";
  run.config = {{"count", std::to_string(o.count)},
                {"synth.frames", std::to_string(o.synth.base.frames)},
                {"synth.mel_bins", std::to_string(o.synth.base.mel_bins)},
                {"synth.fps", num(o.synth.base.fps)},
                {"synth.noise", num(o.synth.base.noise)},
                {"synth.min_bpm", num(o.synth.ranges.min_bpm)},
                {"synth.max_bpm", num(o.synth.ranges.max_bpm)}};
  add_digest(run.outputs, manifest_path);
  write_run_manifest((fs::path(o.out_dir) / kRunManifestName).string(), run);
  return m;
}

struct Track {
  std::string name;
  DemixedClip clip;
  Annotation annotation;
};

// Reads every clip listed in the directory's manifest after checking digests.
inline std::vector<Track> load_dataset(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / kManifestName;
  if (!fs::exists(mpath)) throw DataError("no " + std::string(kManifestName) + " in " + dir);
  const Manifest m = Manifest::parse(read_file(mpath.string()), mpath.string());
  m.verify(dir);
  std::vector<std::string> stems;
  for (const auto& [file, digest] : m.entries)
    if (fs::path(file).extension() == ".bspc") stems.push_back(fs::path(file).stem().string());
  std::vector<Track> tracks(stems.size());
  parallel_for(stems.size(), [&](std::size_t i) {
    const fs::path base = fs::path(dir) / stems[i];
    tracks[i].name = stems[i];
    tracks[i].clip = load_clip(base.string() + ".bspc");
    tracks[i].annotation = load_annotation(base.string() + ".beats");
  });
  return tracks;
}

// ---- train-demo ----

struct TrainDemoOptions {
  std::string data_dir;
  std::string checkpoint;  // written after every epoch, with a .cfg sidecar
  std::string log_path;    // TSV; defaults to <checkpoint>.loss.tsv
  std::string resume;      // checkpoint to continue from
  std::string profile = "desk";
  std::map<std::string, std::string> model_overrides;
  TrainConfig train;
  std::function<void(const EpochStats&)> on_epoch;
};

struct TrainDemoResult {
  std::vector<EpochStats> history;
  Model model;
};

inline std::string config_sidecar(const std::string& checkpoint) { return checkpoint + ".cfg"; }

inline std::string loss_log_line(const EpochStats& s) {
  char buf[128];
  std::snprintf(buf, sizeof buf, "%zu\t%.17g\t%.17g\t%.17g\n", s.epoch, s.train_loss, s.val_loss, s.lr);
  return buf;
}

inline TrainDemoResult train_demo(const TrainDemoOptions& o) {
  if (o.checkpoint.empty()) throw ConfigError("train-demo: output checkpoint required");
  const EncoderConfig cfg = apply_config(profile_config(o.profile), o.model_overrides);
  const std::vector<Track> tracks = load_dataset(o.data_dir);
  if (tracks.empty()) throw DataError("train-demo: dataset " + o.data_dir + " holds no clips");
  std::vector<Example> examples;
  for (const Track& t : tracks) {
    auto parts = prepare_examples(t.name, t.clip, t.annotation, cfg.tempo_classes);
    for (auto& e : parts) examples.push_back(std::move(e));
  }
  Trainer trainer(Model::create(cfg, o.train.seed), std::move(examples), o.train);
  if (!o.resume.empty()) trainer.load_state(load_checkpoint(o.resume));

  ensure_parent(o.checkpoint);
  const std::string log_path = o.log_path.empty() ? o.checkpoint + ".loss.tsv" : o.log_path;
  ensure_parent(log_path);
  std::string log = "epoch\ttrain_loss\tval_loss\tlr\n";
  for (const EpochStats& s : trainer.history()) log += loss_log_line(s);
  write_file(log_path, log);
  write_file(config_sidecar(o.checkpoint), to_config_text(cfg));
  if (trainer.epoch() >= o.train.epochs) save_checkpoint(o.checkpoint, trainer.state_arrays());

  trainer.run([&](const EpochStats& s) {
    log += loss_log_line(s);
    write_file(log_path, log);
    save_checkpoint(o.checkpoint, trainer.state_arrays());
    if (o.on_epoch) o.on_epoch(s);
  });

  RunManifest run;
  run.command = "train-demo";
  run.seed = o.train.seed;
  run.profile = o.profile;
  run.config = model_config_map(cfg);
  run.config["train.epochs"] = std::to_string(o.train.epochs);
  run.config["train.lr"] = num(o.train.lr);
  run.config["train.lr_factor"] = num(o.train.lr_factor);
  run.config["train.patience"] = std::to_string(o.train.patience);
  run.config["train.val_fraction"] = num(o.train.val_fraction);
  run.config["train.augment"] = o.train.augment ? "true" : "false";
  add_digest(run.inputs, (fs::path(o.data_dir) / kManifestName).string());
  if (!o.resume.empty()) add_digest(run.inputs, o.resume);
  add_digest(run.outputs, o.checkpoint);
  add_digest(run.outputs, config_sidecar(o.checkpoint));
  add_digest(run.outputs, log_path);
  write_run_manifest(run_manifest_path_for_file(o.checkpoint), run);
  return {trainer.history(), trainer.model()};
}

// Model from a checkpoint; the architecture comes from `config_path`, else
// the checkpoint's .cfg sidecar, else the profile defaults.
inline Model load_model(const std::string& checkpoint, const std::string& config_path = {},
                        const std::string& profile = "desk") {
  EncoderConfig cfg = profile_config(profile);
  const std::string cpath = !config_path.empty() ? config_path : config_sidecar(checkpoint);
  if (!config_path.empty() || fs::exists(cpath)) cfg = parse_config_text(read_file(cpath), cfg);
  Model m = Model::create(cfg, 0);
  m.params.load(load_checkpoint(checkpoint));
  return m;
}

// ---- decode ----

struct DecodeOptions {
  std::string checkpoint, config, clip, out;
  std::string activations;  // defaults to <out> with extension .bact
  std::string profile = "desk";
  std::map<std::string, std::string> dbn_overrides;
};

inline BeatSequence decode(const DecodeOptions& o) {
  if (o.out.empty()) throw ConfigError("decode: output path required");
  const Model model = load_model(o.checkpoint, o.config, o.profile);
  const DemixedClip clip = load_clip(o.clip);
  const DBNConfig dbn = apply_dbn_config(DBNConfig{}, o.dbn_overrides);
  const ActivationTrack acts = infer(clip, model);
  const std::string act_path = o.activations.empty() ? fs::path(o.out).replace_extension(".bact").string() : o.activations;
  ensure_parent(o.out);
  ensure_parent(act_path);
  save_activations(act_path, acts);
  const BeatSequence seq = viterbi_decode(acts, dbn);
  write_file(o.out, format_annotation(seq));

  RunManifest run;
  run.command = "decode";
  run.profile = o.profile;
  run.config = model_config_map(model.config);
  for (const auto& [k, v] : dbn_config_map(dbn)) run.config[k] = v;
  add_digest(run.inputs, o.checkpoint);
  add_digest(run.inputs, o.clip);
  add_digest(run.outputs, act_path);
  add_digest(run.outputs, o.out);
  write_run_manifest(run_manifest_path_for_file(o.out), run);
  return seq;
}

// ---- bench-dsa ----

struct BenchOptions {
  std::vector<std::size_t> lengths = {1024, 2048, 4096, 8192};
  std::size_t trials = 5;
  std::size_t warmup = 1;
  std::size_t head_dim = 32;
  std::size_t m = 2, n = 2, dilation = 1;
  std::size_t oracle_max = 8192;  // the dense oracle is skipped above this length
  std::uint64_t seed = 0;
};

struct BenchRow {
  std::size_t T = 0;
  double kernel_ns = 0, oracle_ns = -1;
  std::int64_t kernel_peak_bytes = 0, oracle_peak_bytes = -1;
};

namespace detail {

template <class Fn>
std::pair<double, std::int64_t> measure(Fn&& fn, std::size_t warmup, std::size_t trials) {
  for (std::size_t i = 0; i < warmup; ++i) fn();
  std::vector<double> times;
  std::int64_t peak = 0;
  for (std::size_t i = 0; i < std::max<std::size_t>(trials, 1); ++i) {
    memory::reset_peak();
    const std::int64_t base = memory::live_bytes();
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    times.push_back(static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(t1 - t0).count()));
    peak = std::max(peak, memory::peak_bytes() - base);
  }
  std::sort(times.begin(), times.end());
  const std::size_t k = times.size();
  return {k % 2 ? times[k / 2] : 0.5 * (times[k / 2 - 1] + times[k / 2]), peak};
}

}  // namespace detail

inline std::vector<BenchRow> bench_dsa(const BenchOptions& o) {
#ifdef __GLIBC__
  // Keep freed buffers in the heap. Otherwise glibc hands large blocks back to
  // the kernel after every call and the timings measure page faults.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, -1);
#endif
  DSAConfig cfg;
  cfg.m = o.m;
  cfg.n = o.n;
  cfg.dilation = o.dilation;
  cfg.head_dim = o.head_dim;
  cfg.validate();
  std::mt19937_64 rng(o.seed);
  NoGradGuard guard;
  std::vector<BenchRow> rows;
  for (std::size_t T : o.lengths) {
    if (T == 0) throw ConfigError("bench-dsa: lengths must be positive");
    const Tensor q = Tensor::uniform({T, o.head_dim}, -1, 1, rng);
    const Tensor k = Tensor::uniform({T, o.head_dim}, -1, 1, rng);
    const Tensor v = Tensor::uniform({T, o.head_dim}, -1, 1, rng);
    BenchRow row;
    row.T = T;
    std::tie(row.kernel_ns, row.kernel_peak_bytes) =
        detail::measure([&] { (void)dsa_forward(q, k, v, cfg); }, o.warmup, o.trials);
    if (T <= o.oracle_max)
      std::tie(row.oracle_ns, row.oracle_peak_bytes) =
          detail::measure([&] { (void)reference::masked_attention(q, k, v, cfg); }, o.warmup, o.trials);
    rows.push_back(row);
  }
  return rows;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::string s = "T,kernel_ns,oracle_ns,kernel_peak_bytes,oracle_peak_bytes\n";
  char buf[160];
  for (const BenchRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.0f,%.0f,%lld,%lld\n", r.T, r.kernel_ns, r.oracle_ns,
                  static_cast<long long>(r.kernel_peak_bytes), static_cast<long long>(r.oracle_peak_bytes));
    s += buf;
  }
  return s;
}

// ---- export-attention ----

struct ExportOptions {
  std::string checkpoint, config, clip, out_dir;
  std::string profile = "desk";
  std::vector<std::size_t> steps;  // empty: 1, 3, 5, 9 capped at the layer count
  std::string channel = "drum";    // channel name or index
  std::optional<std::size_t> head;  // nullopt averages the heads
};

inline std::vector<std::size_t> default_export_steps(std::size_t n_ttl) {
  std::vector<std::size_t> s;
  for (std::size_t L : {1, 3, 5, 9})
    if (L <= n_ttl) s.push_back(L);
  if (s.back() != n_ttl && n_ttl < 9) s.push_back(n_ttl);
  return s;
}

inline std::size_t resolve_channel(const DemixedClip& clip, const std::string& channel) {
  const auto it = std::find(clip.channel_names.begin(), clip.channel_names.end(), channel);
  if (it != clip.channel_names.end()) return static_cast<std::size_t>(it - clip.channel_names.begin());
  if (!channel.empty() && channel.find_first_not_of("0123456789") == std::string::npos) {
    const std::size_t c = std::stoul(channel);
    if (c < clip.channels()) return c;
  }
  throw ConfigError("export-attention: clip has no channel '" + channel + "'");
}

inline std::vector<std::string> export_attention(const ExportOptions& o) {
  if (o.out_dir.empty()) throw ConfigError("export-attention: output directory required");
  const Model model = load_model(o.checkpoint, o.config, o.profile);
  const DemixedClip clip = load_clip(o.clip);
  const std::vector<std::size_t> steps = o.steps.empty() ? default_export_steps(model.config.n_ttl) : o.steps;
  for (std::size_t L : steps)
    if (L < 1 || L > model.config.n_ttl)
      throw ConfigError("export-attention: L=" + std::to_string(L) + " outside 1.." +
                        std::to_string(model.config.n_ttl));
  const std::size_t channel = resolve_channel(clip, o.channel);
  const auto ms = attention_matrices(clip, model, channel, o.head);
  ensure_directory(o.out_dir);
  std::vector<std::string> written;
  RunManifest run;
  run.command = "export-attention";
  run.profile = o.profile;
  run.config = model_config_map(model.config);
  run.config["channel"] = clip.channel_names[channel];
  run.config["head"] = o.head ? std::to_string(*o.head) : "avg";
  add_digest(run.inputs, o.checkpoint);
  add_digest(run.inputs, o.clip);
  for (std::size_t L : steps) {
    const TransitionMatrix P = multi_step_product(std::span(ms).first(L));
    if (P.stochastic_error() > 1e-6) throw NumericError("export-attention: P^(" + std::to_string(L) + ") rows do not sum to 1");
    for (MatrixFormat f : {MatrixFormat::csv, MatrixFormat::pgm}) {
      const std::string path = (fs::path(o.out_dir) / export_file_name(L, o.head, f)).string();
      export_matrix(P, path, f);
      add_digest(run.outputs, path);
      written.push_back(path);
    }
  }
  write_run_manifest((fs::path(o.out_dir) / kRunManifestName).string(), run);
  return written;
}

// ---- evaluate ----

struct EvaluateOptions {
  std::string est_dir, ref_dir;
  std::string out;  // TSV report; empty means no file
};

struct TrackRow {
  std::string name;
  MetricReport report;
};

struct EvaluateResult {
  std::vector<TrackRow> rows;
  MetricReport mean;
  std::vector<std::string> warnings;
};

inline std::vector<std::string> annotation_stems(const std::string& dir) {
  std::vector<std::string> stems;
  if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir);
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".beats") stems.push_back(e.path().stem().string());
  std::sort(stems.begin(), stems.end());
  return stems;
}

inline std::string evaluate_tsv(const EvaluateResult& r) {
  std::string s = "track\tbeat_f\tbeat_cmlt\tbeat_amlt\tdownbeat_f\tdownbeat_cmlt\tdownbeat_amlt\n";
  char buf[256];
  auto line = [&](const std::string& name, const MetricReport& m) {
    std::snprintf(buf, sizeof buf, "%s\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\t%.6f\n", name.c_str(), m.beat.f_measure,
                  m.beat.cmlt, m.beat.amlt, m.downbeat.f_measure, m.downbeat.cmlt, m.downbeat.amlt);
    s += buf;
  };
  for (const TrackRow& t : r.rows) line(t.name, t.report);
  if (!r.rows.empty()) line("mean", r.mean);
  return s;
}

inline EvaluateResult evaluate(const EvaluateOptions& o) {
  EvaluateResult r;
  const auto ref = annotation_stems(o.ref_dir);
  const auto est = annotation_stems(o.est_dir);
  std::vector<std::string> paired;
  for (const std::string& s : ref) {
    if (std::binary_search(est.begin(), est.end(), s)) paired.push_back(s);
    else r.warnings.push_back("no estimate for reference '" + s + "', skipped");
  }
  for (const std::string& s : est)
    if (!std::binary_search(ref.begin(), ref.end(), s))
      r.warnings.push_back("no reference for estimate '" + s + "', skipped");

  std::vector<std::optional<MetricReport>> reports(paired.size());
  std::vector<std::string> errors(paired.size());
  parallel_for(paired.size(), [&](std::size_t i) {
    try {
      reports[i] = evaluate_annotation(load_annotation((fs::path(o.est_dir) / (paired[i] + ".beats")).string(), false),
                                       load_annotation((fs::path(o.ref_dir) / (paired[i] + ".beats")).string()));
    } catch (const DataError& e) {
      errors[i] = e.what();
    }
  });
  for (std::size_t i = 0; i < paired.size(); ++i) {
    if (reports[i]) r.rows.push_back({paired[i], *reports[i]});
    else r.warnings.push_back("track '" + paired[i] + "' skipped: " + errors[i]);
  }
  if (r.rows.empty()) r.warnings.push_back("no tracks evaluated");
  const double n = static_cast<double>(r.rows.size());
  for (const TrackRow& t : r.rows) {
    for (auto [dst, src] : {std::pair{&r.mean.beat, &t.report.beat}, std::pair{&r.mean.downbeat, &t.report.downbeat}}) {
      dst->f_measure += src->f_measure / n;
      dst->cmlt += src->cmlt / n;
      dst->amlt += src->amlt / n;
      dst->counts.hits += src->counts.hits;
      dst->counts.false_positives += src->counts.false_positives;
      dst->counts.misses += src->counts.misses;
    }
  }
  if (!o.out.empty()) {
    ensure_parent(o.out);
    write_file(o.out, evaluate_tsv(r));
    RunManifest run;
    run.command = "evaluate";
    run.profile = "desk";
    run.config = {{"f_measure_window", "0.07"}, {"continuity_tolerance", "0.175"}};
    for (const std::string& s : paired) {
      add_digest(run.inputs, (fs::path(o.est_dir) / (s + ".beats")).string());
      add_digest(run.inputs, (fs::path(o.ref_dir) / (s + ".beats")).string());
    }
    add_digest(run.outputs, o.out);
    write_run_manifest(run_manifest_path_for_file(o.out), run);
  }
  return r;
}

}  // namespace beatkit::cli
