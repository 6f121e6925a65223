#pragma once

// Randomized synthetic scenes: draws effect specs whose whole trajectory
// stays inside the frame, optionally with a static second object.

#include <algorithm>
#include <string>
#include <vector>

#include "vfx/core/config.hpp"
#include "vfx/dataset.hpp"

namespace vfx {

struct SceneConfig {
  int frames = 32;
  int height = 32;
  int width = 32;
  int channels = 3;
  int fps = 8;
  double object_size = 10.0;
  double speed = 0.6;
  int min_duration = 4;
  std::vector<EffectKind> effects{EffectKind::levitate};
  double two_object_prob = 0.0;

  void validate() const {
    require(frames >= 2 && height >= 8 && width >= 8, "scene: frame dims too small");
    require(channels == 1 || channels == 3, "scene: channels must be 1 or 3");
    require(object_size >= 2 && 2 * object_size < width && object_size + 2 < height, "scene: object size does not fit");
    require(speed > 0, "scene: speed must be positive");
    require(min_duration >= 1 && min_duration <= frames, "scene: min_duration outside [1, frames]");
    require(!effects.empty(), "scene: need at least one effect");
    require(two_object_prob >= 0 && two_object_prob <= 1, "scene: two_object_prob outside [0,1]");
  }

  json to_json() const {
    std::vector<std::string> e;
    for (auto k : effects) e.push_back(to_string(k));
    return json{{"frames", frames}, {"height", height}, {"width", width}, {"channels", channels},
                {"fps", fps}, {"object_size", object_size}, {"speed", speed}, {"min_duration", min_duration},
                {"effects", e}, {"two_object_prob", two_object_prob}};
  }

  static SceneConfig from_json(const json& j, const std::string& context = "scenes") {
    SceneConfig c;
    std::vector<std::string> e;
    for (auto k : c.effects) e.push_back(to_string(k));
    ConfigReader r(j, context);
    r.get("frames", c.frames).get("height", c.height).get("width", c.width).get("channels", c.channels);
    r.get("fps", c.fps).get("object_size", c.object_size).get("speed", c.speed).get("min_duration", c.min_duration);
    r.get("effects", e).get("two_object_prob", c.two_object_prob);
    r.finish();
    c.effects.clear();
    for (const auto& s : e) c.effects.push_back(effect_from_string(s));
    c.validate();
    return c;
  }
};

inline TimestampAnnotation random_interval(int frames, int min_duration, Rng& rng) {
  const int d = static_cast<int>(rng.uniform_int(min_duration, frames));
  const int s = static_cast<int>(rng.uniform_int(0, frames - d));
  return {s, s + d, frames};
}

inline std::vector<float> random_color(int channels, double lo, double hi, Rng& rng) {
  std::vector<float> c(channels);
  for (auto& v : c) v = static_cast<float>(rng.uniform(lo, hi));
  return c;
}

// `mover_side` selects the half (0 left, 1 right) holding the animated object
// in two-object scenes; -1 draws it. Explode scenes are always single-object
// since the fragments need room on every side.
inline SyntheticEffectSpec random_effect_spec(const SceneConfig& c, EffectKind kind, const TimestampAnnotation& ann,
                                              Rng& rng, bool two_objects = false, int mover_side = -1) {
  c.validate();
  ann.validate();
  require(ann.total_frames == c.frames, "scene: annotation T does not match scene frames");
  SyntheticEffectSpec s;
  s.kind = kind;
  s.frames = c.frames;
  s.height = c.height;
  s.width = c.width;
  s.channels = c.channels;
  s.fps = c.fps;
  s.t_start = ann.t_start;
  s.t_end = ann.t_end;
  s.seed = rng.next_u64();
  s.speed = c.speed;
  const double S = c.object_size, W = c.width, H = c.height;
  const int D = ann.duration();
  two_objects = two_objects && kind != EffectKind::explode;

  double lo = 0, hi = W;
  if (two_objects) {
    const int side = mover_side >= 0 ? mover_side : static_cast<int>(rng.uniform_int(0, 1));
    lo = side == 0 ? 0 : W / 2;
    hi = side == 0 ? W / 2 : W;
  }
  s.object.size = S;
  s.object.color = random_color(c.channels, 0.5, 1.0, rng);
  s.background = random_color(c.channels, 0.0, 0.3, rng);
  switch (kind) {
    case EffectKind::levitate:
    case EffectKind::dissolve:
      s.object.x = rng.uniform(lo, hi - S);
      s.object.y = rng.uniform(H - S - 2, H - S);
      if (kind == EffectKind::levitate) s.speed = std::min(c.speed, s.object.y / D);
      break;
    case EffectKind::squish:
      s.object.x = rng.uniform(lo + S / 4, hi - S - S / 4);
      s.object.y = rng.uniform(H - S - 2, H - S);
      break;
    case EffectKind::explode: {
      s.object.x = rng.uniform((W - S) / 2 - 2, (W - S) / 2 + 2);
      s.object.y = rng.uniform((H - S) / 2 - 2, (H - S) / 2 + 2);
      const double margin = std::min({s.object.x, W - S - s.object.x, s.object.y, H - S - s.object.y});
      s.speed = std::min(c.speed, margin / D);
      break;
    }
  }
  if (two_objects) {
    Square d;
    d.size = S;
    d.color = random_color(c.channels, 0.5, 1.0, rng);
    const double olo = lo == 0 ? W / 2 : 0, ohi = olo + W / 2;
    d.x = rng.uniform(olo + S / 4, ohi - S - S / 4);
    d.y = rng.uniform(H - S - 2, H - S);
    s.distractor = d;
  }
  return s;
}

// The same scene with the roles of the two objects exchanged: the former
// distractor animates and the former mover stays static.
inline SyntheticEffectSpec swap_objects(const SyntheticEffectSpec& s) {
  require(s.distractor.has_value(), "swap_objects: scene has a single object");
  SyntheticEffectSpec o = s;
  o.object = *s.distractor;
  o.distractor = s.object;
  if (o.kind == EffectKind::levitate) o.speed = std::min(s.speed, o.object.y / (s.t_end - s.t_start));
  return o;
}

}  // namespace vfx
