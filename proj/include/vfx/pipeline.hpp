#pragma once

// Glue shared by the CLI and the smoke experiments: synthetic dataset sets,
// manifest loading into training records and evaluation references, and the
// run config that bundles model and training settings.

#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "vfx/checkpoint.hpp"
#include "vfx/dataset.hpp"
#include "vfx/diffusion.hpp"
#include "vfx/metrics.hpp"
#include "vfx/scenes.hpp"

namespace vfx {

// A set of random scenes. Effects cycle in order so mixed sets stay
// balanced. Intervals: "stratified" spreads durations evenly over
// [min_duration, T] with uniform starts, "random" draws both uniformly,
// "full" animates the whole clip (evaluation references).
struct SynthConfig {
  SceneConfig scenes;
  int count = 32;
  std::uint64_t seed = 0;
  std::string intervals = "stratified";
  std::string prompt;  // empty: "<effect> it"

  void validate() const {
    scenes.validate();
    require(count >= 1, "synth: count must be >= 1");
    require(intervals == "stratified" || intervals == "random" || intervals == "full",
            "synth: intervals must be stratified, random or full");
  }

  json to_json() const {
    return json{{"scenes", scenes.to_json()}, {"count", count}, {"seed", seed}, {"intervals", intervals}, {"prompt", prompt}};
  }

  static SynthConfig from_json(const json& j, const std::string& context = "synth") {
    SynthConfig c;
    ConfigReader r(j, context);
    if (r.has("scenes")) c.scenes = SceneConfig::from_json(r.child("scenes"), context + ".scenes");
    r.get("count", c.count).get("seed", c.seed).get("intervals", c.intervals).get("prompt", c.prompt);
    r.finish();
    c.validate();
    return c;
  }
};

struct SynthItem {
  SyntheticEffectSpec spec;
  SyntheticSample sample;
  std::string prompt;
  std::string category;
};

inline std::vector<SynthItem> synthesize(const SynthConfig& cfg) {
  cfg.validate();
  const SceneConfig& sc = cfg.scenes;
  Rng rng(cfg.seed);
  std::vector<SynthItem> out;
  for (int i = 0; i < cfg.count; ++i) {
    const EffectKind kind = sc.effects[static_cast<std::size_t>(i) % sc.effects.size()];
    TimestampAnnotation ann{0, sc.frames, sc.frames};
    if (cfg.intervals == "stratified") {
      const int span = sc.frames - sc.min_duration + 1;
      const int d = sc.min_duration + static_cast<int>(static_cast<long>(i) * span / cfg.count);
      const int s = static_cast<int>(rng.uniform_int(0, sc.frames - d));
      ann = {s, s + d, sc.frames};
    } else if (cfg.intervals == "random") {
      ann = random_interval(sc.frames, sc.min_duration, rng);
    }
    const bool two = rng.uniform() < sc.two_object_prob;
    SynthItem item;
    item.spec = random_effect_spec(sc, kind, ann, rng, two);
    item.sample = generate_synthetic_clip(item.spec);
    item.prompt = cfg.prompt.empty() ? default_prompt(kind) : cfg.prompt;
    item.category = to_string(kind);
    out.push_back(std::move(item));
  }
  return out;
}

inline std::string indexed_name(const char* prefix, std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%05zu", prefix, i);
  return buf;
}

// Writes clips/, masks/ and manifest.json under dir.
inline DatasetManifest write_dataset(const std::vector<ClipRecord>& recs, const fs::path& dir) {
  DatasetManifest m;
  m.base_dir = dir;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    const ClipRecord& c = recs[i];
    ManifestRecord r;
    r.clip = (fs::path("clips") / indexed_name("clip", i)).string();
    save_clip(c.clip, dir / r.clip);
    if (c.mask) {
      r.mask = (fs::path("masks") / indexed_name("mask", i)).string();
      save_mask(*c.mask, dir / *r.mask);
    }
    r.annotation = c.annotation;
    r.fps = c.clip.fps;
    r.prompt = c.prompt;
    r.category = c.category;
    m.records.push_back(std::move(r));
  }
  save_manifest(m, dir / "manifest.json");
  return m;
}

inline std::vector<ClipRecord> to_records(const std::vector<SynthItem>& items) {
  std::vector<ClipRecord> out;
  for (const auto& it : items) out.push_back({it.sample.clip, it.sample.annotation, it.sample.mask, it.prompt, it.category});
  return out;
}

inline std::vector<ClipRecord> load_records(const DatasetManifest& m) {
  std::vector<ClipRecord> out(m.size());
  parallel_for(static_cast<int>(m.size()), [&](int i) {
    const ManifestRecord& r = m.records[static_cast<std::size_t>(i)];
    ClipRecord& c = out[static_cast<std::size_t>(i)];
    c.clip = load_clip(m.resolve(r.clip), r.fps);
    if (c.clip.frames != r.annotation.total_frames)
      throw ValidationError("manifest record " + std::to_string(i) + ": clip has " + std::to_string(c.clip.frames) +
                            " frames, total_frames says " + std::to_string(r.annotation.total_frames));
    if (r.mask) {
      c.mask = load_mask(m.resolve(*r.mask));
      if (c.mask->frames != c.clip.frames || c.mask->height != c.clip.height || c.mask->width != c.clip.width)
        throw ValidationError("manifest record " + std::to_string(i) + ": mask shape does not match the clip");
    }
    c.annotation = r.annotation;
    c.prompt = r.prompt;
    c.category = r.category;
  });
  return out;
}

inline std::vector<EvalReference> to_references(const std::vector<ClipRecord>& recs) {
  std::vector<EvalReference> out;
  for (const auto& r : recs) out.push_back({r.clip, r.mask, r.prompt, r.category});
  return out;
}

// Training run: the model section builds a fresh base (stage "base"); the
// adapter stage starts from a base checkpoint instead.
struct RunConfig {
  std::optional<ModelConfig> model;
  TrainConfig train;
  std::string init;  // base checkpoint for the adapter stage

  void validate() const {
    train.validate();
    if (train.stage == "base") {
      if (!model) throw ValidationError("train config: base stage needs a 'model' section");
      if (model->strategy != TemporalStrategy::none || model->lora_rank != 0 || model->control)
        throw ValidationError("train config: base stage model must not carry adapters");
    } else {
      if (init.empty()) throw ValidationError("train config: adapter stage needs 'init' (a base checkpoint)");
      if (model) throw ValidationError("train config: adapter stage takes the model from 'init'; drop the 'model' section");
    }
  }

  json to_json() const {
    json j{{"train", train.to_json()}};
    if (model) j["model"] = model->to_json();
    if (!init.empty()) j["init"] = init;
    return j;
  }

  static RunConfig from_json(const json& j, const std::string& context = "train config") {
    RunConfig c;
    ConfigReader r(j, context);
    if (r.has("model")) c.model = ModelConfig::from_json(r.child("model"), context + ".model");
    if (r.has("train")) c.train = TrainConfig::from_json(r.child("train"), context + ".train");
    r.get("init", c.init);
    r.finish();
    return c;
  }
};

inline json read_json_file(const fs::path& path, const std::string& what) {
  if (!fs::exists(path)) throw ValidationError("missing file: " + what + " " + path.string());
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ValidationError(what + " is not valid JSON: " + path.string());
  }
}

inline void write_json_file(const fs::path& path, const json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << j.dump(2) << "\n";
  if (!out) throw RuntimeFailure("cannot write " + path.string());
}

}  // namespace vfx
