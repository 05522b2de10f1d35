#pragma once

// On-disk formats used by the command-line tool.
//
// Spectrogram clip ("BSPC"), little-endian:
//   magic | version u32 | T u64 | C u64 | F u64 | fps f64 |
//   per channel: name length u32 | UTF-8 name |
//   T x C x F f32 values, already log(1 + magnitude)
//
// Activation file ("BACT"):
//   magic | version u32 | T u64 | fps f64 | T x (beat, downbeat) f32 |
//   tempo distribution f32 (300 values for the standard head; the count is
//   whatever remains in the file)
//
// Annotation text: "<seconds>\t<position>" per line, '#' starts a comment.

#include <openssl/evp.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <sstream>
#include <string>
#include <vector>

#include "beatkit/binary_io.hpp"
#include "beatkit/dbn.hpp"
#include "beatkit/encoder.hpp"
#include "beatkit/error.hpp"
#include "beatkit/targets.hpp"

namespace beatkit {

inline constexpr std::uint32_t kClipVersion = 1;
inline constexpr std::uint32_t kActivationVersion = 1;

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path);
}

// ---- spectrogram clips ----

inline std::string encode_clip(const DemixedClip& clip) {
  clip.validate();
  io::ByteWriter w;
  w.bytes("BSPC");
  w.u32(kClipVersion);
  w.u64(clip.frames());
  w.u64(clip.channels());
  w.u64(clip.bins());
  w.f64(clip.fps);
  for (const std::string& name : clip.channel_names) {
    w.u32(static_cast<std::uint32_t>(name.size()));
    w.bytes(name);
  }
  for (double v : clip.values.data()) w.f32(static_cast<float>(v));
  return w.data();
}

inline DemixedClip decode_clip(io::ByteReader r) {
  r.expect_magic("BSPC");
  if (const auto v = r.u32(); v != kClipVersion)
    throw DataError(r.origin() + ": unsupported clip version " + std::to_string(v));
  const std::uint64_t T = r.u64(), C = r.u64(), F = r.u64();
  DemixedClip clip;
  clip.fps = r.f64();
  if (!(clip.fps > 0)) throw DataError(r.origin() + ": fps must be positive");
  if (C == 0 || F == 0 || C > 64 || F > (1u << 16)) throw DataError(r.origin() + ": implausible clip dimensions");
  for (std::uint64_t c = 0; c < C; ++c) clip.channel_names.push_back(r.bytes(r.u32()));
  if (r.remaining() != T * C * F * 4) throw DataError(r.origin() + ": payload size does not match T x C x F");
  Buffer values(T * C * F);
  for (double& v : values) {
    v = r.f32();
    if (!std::isfinite(v)) throw DataError(r.origin() + ": non-finite spectrogram value");
  }
  clip.values = Tensor::from({T, C, F}, std::move(values));
  return clip;
}

inline void save_clip(const std::string& path, const DemixedClip& clip) { write_file(path, encode_clip(clip)); }
inline DemixedClip load_clip(const std::string& path) { return decode_clip(io::ByteReader::from_file(path)); }

// ---- activations ----

inline std::string encode_activations(const ActivationTrack& a) {
  if (a.downbeat.size() != a.beat.size()) throw ShapeError("encode_activations: beat/downbeat length mismatch");
  io::ByteWriter w;
  w.bytes("BACT");
  w.u32(kActivationVersion);
  w.u64(a.beat.size());
  w.f64(a.fps);
  for (std::size_t t = 0; t < a.beat.size(); ++t) {
    w.f32(static_cast<float>(a.beat[t]));
    w.f32(static_cast<float>(a.downbeat[t]));
  }
  for (double v : a.tempo) w.f32(static_cast<float>(v));
  return w.data();
}

inline ActivationTrack decode_activations(io::ByteReader r) {
  r.expect_magic("BACT");
  if (const auto v = r.u32(); v != kActivationVersion)
    throw DataError(r.origin() + ": unsupported activation version " + std::to_string(v));
  const std::uint64_t T = r.u64();
  ActivationTrack a;
  a.fps = r.f64();
  if (r.remaining() < T * 8 || r.remaining() % 4 != 0) throw DataError(r.origin() + ": truncated activation file");
  for (std::uint64_t t = 0; t < T; ++t) {
    a.beat.push_back(r.f32());
    a.downbeat.push_back(r.f32());
  }
  while (!r.at_end()) a.tempo.push_back(r.f32());
  return a;
}

inline void save_activations(const std::string& path, const ActivationTrack& a) {
  write_file(path, encode_activations(a));
}
inline ActivationTrack load_activations(const std::string& path) {
  return decode_activations(io::ByteReader::from_file(path));
}

// ---- annotation text ----

inline std::string format_annotation(const std::vector<double>& times, const std::vector<int>& positions) {
  if (times.size() != positions.size()) throw ContractError("format_annotation: one position per beat required");
  std::string s;
  char line[64];
  for (std::size_t i = 0; i < times.size(); ++i) {
    std::snprintf(line, sizeof line, "%.6f\t%d\n", times[i], positions[i]);
    s += line;
  }
  return s;
}

inline std::string format_annotation(const Annotation& a) { return format_annotation(a.beat_times, a.beat_positions); }
inline std::string format_annotation(const BeatSequence& s) { return format_annotation(s.times, s.positions); }

// beats_per_bar is the largest position seen (4 for an empty file).
inline Annotation parse_annotation(const std::string& text, const std::string& origin = "<annotation>",
                                   bool require_cycle = true) {
  Annotation a;
  std::istringstream in(text);
  std::string line;
  int max_pos = 0;
  for (std::size_t no = 1; std::getline(in, line); ++no) {
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream fields(line);
    double t;
    int p;
    std::string rest;
    if (!(fields >> t)) {
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      throw DataError(origin + ":" + std::to_string(no) + ": expected '<seconds>\\t<position>'");
    }
    if (!(fields >> p) || (fields >> rest))
      throw DataError(origin + ":" + std::to_string(no) + ": expected '<seconds>\\t<position>'");
    a.beat_times.push_back(t);
    a.beat_positions.push_back(p);
    max_pos = std::max(max_pos, p);
  }
  a.beats_per_bar = max_pos > 0 ? max_pos : 4;
  try {
    a.validate(require_cycle);
  } catch (const DataError& e) {
    throw DataError(origin + ": " + e.what());
  }
  return a;
}

inline Annotation load_annotation(const std::string& path, bool require_cycle = true) {
  return parse_annotation(read_file(path), path, require_cycle);
}

inline Annotation to_annotation(const BeatSequence& s) {
  Annotation a;
  a.beat_times = s.times;
  a.beat_positions = s.positions;
  a.beats_per_bar = s.beats_per_bar > 0 ? s.beats_per_bar : 4;
  return a;
}

// ---- checksums and manifests ----

inline std::string sha256_hex(const std::string& bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
    throw Error("sha256: digest failed");
  static constexpr char hex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out += hex[digest[i] >> 4];
    out += hex[digest[i] & 15];
  }
  return out;
}

inline std::string sha256_file(const std::string& path) { return sha256_hex(read_file(path)); }

// Lines "<sha256>  <relative path>", the layout sha256sum -c accepts.
struct Manifest {
  std::vector<std::pair<std::string, std::string>> entries;  // (file, digest)

  std::string str() const {
    std::string s;
    for (const auto& [file, digest] : entries) s += digest + "  " + file + "\n";
    return s;
  }

  static Manifest parse(const std::string& text, const std::string& origin = "<manifest>") {
    Manifest m;
    std::istringstream in(text);
    std::string line;
    for (std::size_t no = 1; std::getline(in, line); ++no) {
      if (line.empty() || line[0] == '#') continue;
      const auto sep = line.find("  ");
      if (sep != 64 || line.size() <= sep + 2)
        throw DataError(origin + ":" + std::to_string(no) + ": expected '<sha256>  <file>'");
      m.entries.emplace_back(line.substr(sep + 2), line.substr(0, sep));
    }
    return m;
  }

  // Throws DataError naming the first missing or altered file.
  void verify(const std::filesystem::path& dir) const {
    for (const auto& [file, digest] : entries) {
      const auto p = dir / file;
      if (!std::filesystem::exists(p)) throw DataError("manifest: missing file " + p.string());
      if (sha256_file(p.string()) != digest) throw DataError("manifest: checksum mismatch for " + p.string());
    }
  }
};

inline constexpr const char* kManifestName = "manifest.sha256";
inline constexpr const char* kRunManifestName = "run_manifest.json";

// Resolved configuration and input digests of one command invocation. No
// timestamps, so identical runs write identical bytes.
struct RunManifest {
  std::string command;
  std::uint64_t seed = 0;
  std::string profile;
  std::map<std::string, std::string> config;
  std::map<std::string, std::string> inputs;   // path -> sha256
  std::map<std::string, std::string> outputs;  // path -> sha256

  std::string str() const {
    nlohmann::ordered_json j;
    j["tool"] = "beatkit";
    j["command"] = command;
    j["seed"] = seed;
    j["profile"] = profile;
    j["config"] = config;
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    return j.dump(2) + "\n";
  }

  static RunManifest parse(const std::string& text) {
    RunManifest m;
    try {
      const auto j = nlohmann::json::parse(text);
      m.command = j.at("command").get<std::string>();
      m.seed = j.at("seed").get<std::uint64_t>();
      m.profile = j.at("profile").get<std::string>();
      m.config = j.at("config").get<std::map<std::string, std::string>>();
      m.inputs = j.at("inputs").get<std::map<std::string, std::string>>();
      m.outputs = j.at("outputs").get<std::map<std::string, std::string>>();
    } catch (const nlohmann::json::exception& e) {
      throw DataError(std::string("run manifest: ") + e.what());
    }
    return m;
  }
};

}  // namespace beatkit
