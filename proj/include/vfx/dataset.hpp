#pragma once

// Clip, mask and timestamp types; the synthetic effect generator; temporal
// augmentation; frame-directory and manifest I/O.

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "vfx/core/error.hpp"
#include "vfx/core/rng.hpp"
#include "vfx/image_io.hpp"

namespace vfx {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Frames stored as [T, H, W, C] floats in [0, 1].
struct VideoClip {
  int frames = 0;
  int height = 0;
  int width = 0;
  int channels = 0;
  int fps = 8;
  std::vector<float> data;

  VideoClip() = default;
  VideoClip(int t, int h, int w, int c, int fps_ = 8)
      : frames(t), height(h), width(w), channels(c), fps(fps_), data(static_cast<std::size_t>(t) * h * w * c, 0.0f) {}

  std::size_t frame_size() const { return static_cast<std::size_t>(height) * width * channels; }
  std::size_t index(int t, int y, int x, int c) const {
    return ((static_cast<std::size_t>(t) * height + y) * width + x) * channels + c;
  }
  float& at(int t, int y, int x, int c) { return data[index(t, y, x, c)]; }
  float at(int t, int y, int x, int c) const { return data[index(t, y, x, c)]; }

  const float* frame_ptr(int t) const { return data.data() + static_cast<std::size_t>(t) * frame_size(); }
  float* frame_ptr(int t) { return data.data() + static_cast<std::size_t>(t) * frame_size(); }

  // Mean absolute difference between frames t+1 and t.
  double frame_change(int t) const {
    const float* a = frame_ptr(t);
    const float* b = frame_ptr(t + 1);
    double s = 0;
    for (std::size_t i = 0; i < frame_size(); ++i) s += std::abs(static_cast<double>(b[i]) - a[i]);
    return s / static_cast<double>(frame_size());
  }

  void validate() const {
    require(frames >= 1, "clip: need at least one frame");
    require(height >= 1 && width >= 1 && channels >= 1, "clip: empty spatial dims");
    require(fps >= 1, "clip: fps must be positive");
    require(data.size() == static_cast<std::size_t>(frames) * frame_size(), "clip: data size mismatch");
    for (float v : data) require(v >= 0.0f && v <= 1.0f && std::isfinite(v), "clip: pixel value outside [0,1]");
  }
};

// Binary per-frame masks [T, H, W], aligned to a clip.
struct MaskSequence {
  int frames = 0;
  int height = 0;
  int width = 0;
  std::string instance_id = "object";
  std::vector<std::uint8_t> data;

  MaskSequence() = default;
  MaskSequence(int t, int h, int w) : frames(t), height(h), width(w), data(static_cast<std::size_t>(t) * h * w, 0) {}

  std::uint8_t& at(int t, int y, int x) { return data[(static_cast<std::size_t>(t) * height + y) * width + x]; }
  std::uint8_t at(int t, int y, int x) const { return data[(static_cast<std::size_t>(t) * height + y) * width + x]; }

  std::size_t count(int t) const {
    std::size_t n = 0;
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) n += at(t, y, x);
    return n;
  }

  void validate_against(const VideoClip& clip) const {
    require(frames == clip.frames && height == clip.height && width == clip.width,
            "mask: shape does not match clip");
    for (auto v : data) require(v == 0 || v == 1, "mask: values must be 0 or 1");
  }
};

// Half-open motion interval [t_start, t_end) in frames of a T-frame clip.
struct TimestampAnnotation {
  int t_start = 0;
  int t_end = 1;
  int total_frames = 1;

  int duration() const { return t_end - t_start; }
  double start_normalized() const { return static_cast<double>(t_start) / total_frames; }
  double end_normalized() const { return static_cast<double>(t_end) / total_frames; }

  void validate() const {
    if (!(total_frames >= 1 && 0 <= t_start && t_start < t_end && t_end <= total_frames))
      throw ValidationError("annotation: need 0 <= start < end <= T, got start=" + std::to_string(t_start) +
                            " end=" + std::to_string(t_end) + " T=" + std::to_string(total_frames));
  }

  // Inverse of the normalization; rounds to the nearest frame.
  static TimestampAnnotation from_normalized(double start, double end, int total) {
    TimestampAnnotation a;
    a.total_frames = total;
    a.t_start = static_cast<int>(std::lround(start * total));
    a.t_end = static_cast<int>(std::lround(end * total));
    a.validate();
    return a;
  }

  bool operator==(const TimestampAnnotation&) const = default;
};

enum class EffectKind { levitate, dissolve, explode, squish };

inline const std::array<EffectKind, 4>& all_effects() {
  static const std::array<EffectKind, 4> kinds{EffectKind::levitate, EffectKind::dissolve, EffectKind::explode,
                                               EffectKind::squish};
  return kinds;
}

inline std::string to_string(EffectKind k) {
  switch (k) {
    case EffectKind::levitate: return "levitate";
    case EffectKind::dissolve: return "dissolve";
    case EffectKind::explode: return "explode";
    case EffectKind::squish: return "squish";
  }
  return "levitate";
}

inline EffectKind effect_from_string(const std::string& s) {
  for (auto k : all_effects())
    if (to_string(k) == s) return k;
  throw ValidationError("unknown effect kind: " + s);
}

inline std::string default_prompt(EffectKind k) { return to_string(k) + " it"; }

struct Square {
  double x = 0;  // top-left corner, pixels
  double y = 0;
  double size = 8;
  std::vector<float> color;
};

struct SyntheticEffectSpec {
  EffectKind kind = EffectKind::levitate;
  Square object;
  std::optional<Square> distractor;  // static second object
  std::vector<float> background;
  double speed = 0.6;                 // pixels per frame for levitate / explode
  double texture = 0.0;               // amplitude of a static seeded background texture
  int t_start = 0;
  int t_end = 1;
  int frames = 32;
  int height = 32;
  int width = 32;
  int channels = 3;
  int fps = 8;
  std::uint64_t seed = 0;
};

namespace detail {

struct Rect {
  double x, y, w, h;
  double alpha;
};

inline double overlap(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

// Geometry of the animated object at frame t.
inline std::vector<Rect> object_rects(const SyntheticEffectSpec& s, int t) {
  const int d = s.t_end - s.t_start;
  const double u = std::clamp(t - s.t_start, 0, d);
  const double p = u / d;
  const Square& o = s.object;
  switch (s.kind) {
    case EffectKind::levitate: return {{o.x, o.y - s.speed * u, o.size, o.size, 1.0}};
    case EffectKind::dissolve: return {{o.x, o.y, o.size, o.size, 1.0 - p}};
    case EffectKind::explode: {
      const double h = o.size / 2;
      const double m = s.speed * u;
      return {{o.x - m, o.y - m, h, h, 1.0},
              {o.x + h + m, o.y - m, h, h, 1.0},
              {o.x - m, o.y + h + m, h, h, 1.0},
              {o.x + h + m, o.y + h + m, h, h, 1.0}};
    }
    case EffectKind::squish: {
      const double w = o.size * (1.0 + 0.5 * p);
      const double h = o.size * (1.0 - 0.5 * p);
      const double cx = o.x + o.size / 2;
      const double bottom = o.y + o.size;
      return {{cx - w / 2, bottom - h, w, h, 1.0}};
    }
  }
  return {};
}

inline bool inside(const Rect& r, int width, int height) {
  constexpr double eps = 1e-9;
  return r.x >= -eps && r.y >= -eps && r.x + r.w <= width + eps && r.y + r.h <= height + eps;
}

inline double coverage(const Rect& r, int px, int py) {
  return overlap(px, px + 1.0, r.x, r.x + r.w) * overlap(py, py + 1.0, r.y, r.y + r.h);
}

inline void check_square(const Square& sq, int channels, const std::string& what) {
  require(sq.size > 0, what + ": size must be positive");
  require(static_cast<int>(sq.color.size()) == channels, what + ": color needs one value per channel");
  for (float c : sq.color) require(c >= 0.0f && c <= 1.0f, what + ": color outside [0,1]");
}

}  // namespace detail

inline void validate(const SyntheticEffectSpec& s) {
  require(s.frames >= 2 && s.height >= 1 && s.width >= 1, "synthetic spec: bad dimensions");
  require(s.channels == 1 || s.channels == 3, "synthetic spec: channels must be 1 or 3");
  require(s.fps >= 1, "synthetic spec: fps must be positive");
  TimestampAnnotation{s.t_start, s.t_end, s.frames}.validate();
  require(static_cast<int>(s.background.size()) == s.channels, "synthetic spec: background needs one value per channel");
  detail::check_square(s.object, s.channels, "object");
  if (s.distractor) detail::check_square(*s.distractor, s.channels, "distractor");
  require(s.speed > 0, "synthetic spec: speed must be positive");
  // The whole trajectory has to stay in frame, otherwise motion could leave
  // the image and the annotated interval would no longer match pixel changes.
  for (int t : {0, s.t_end}) {
    for (const auto& r : detail::object_rects(s, t))
      if (!detail::inside(r, s.width, s.height))
        throw ValidationError("object geometry out of frame at t=" + std::to_string(t));
  }
  if (s.distractor) {
    const auto& d = *s.distractor;
    if (!detail::inside({d.x, d.y, d.size, d.size, 1.0}, s.width, s.height))
      throw ValidationError("object geometry out of frame (distractor)");
  }
}

struct SyntheticSample {
  VideoClip clip;
  MaskSequence mask;
  TimestampAnnotation annotation;
};

inline SyntheticSample generate_synthetic_clip(const SyntheticEffectSpec& s) {
  validate(s);
  SyntheticSample out{VideoClip(s.frames, s.height, s.width, s.channels, s.fps), MaskSequence(s.frames, s.height, s.width),
                      TimestampAnnotation{s.t_start, s.t_end, s.frames}};
  // Static background layer.
  std::vector<float> bg(out.clip.frame_size());
  Rng rng(s.seed);
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      const double n = s.texture > 0 ? s.texture * (rng.uniform() - 0.5) : 0.0;
      for (int c = 0; c < s.channels; ++c) {
        double v = s.background[c] + n;
        if (s.distractor) {
          const auto& d = *s.distractor;
          const double cov = detail::coverage({d.x, d.y, d.size, d.size, 1.0}, x, y);
          v = v * (1 - cov) + d.color[c] * cov;
        }
        bg[(static_cast<std::size_t>(y) * s.width + x) * s.channels + c] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  for (int t = 0; t < s.frames; ++t) {
    const auto rects = detail::object_rects(s, t);
    float* f = out.clip.frame_ptr(t);
    for (int y = 0; y < s.height; ++y)
      for (int x = 0; x < s.width; ++x) {
        double cov = 0, footprint = 0;
        for (const auto& r : rects) {
          const double c = detail::coverage(r, x, y);
          cov = std::min(1.0, cov + c * r.alpha);
          if (r.alpha > 0) footprint = std::min(1.0, footprint + c);
        }
        out.mask.at(t, y, x) = footprint > 0.5 ? 1 : 0;
        for (int c = 0; c < s.channels; ++c) {
          const std::size_t i = (static_cast<std::size_t>(y) * s.width + x) * s.channels + c;
          f[i] = static_cast<float>(bg[i] * (1 - cov) + s.object.color[c] * cov);
        }
      }
  }
  return out;
}

// Moves the motion segment to a uniformly drawn start in [0, T - D] while
// keeping its duration. Frames before the new start hold the original
// pre-motion frame; frames at or after the new end hold the original
// post-motion frame (the last frame when the motion runs to the clip end).
struct AugmentResult {
  VideoClip clip;
  TimestampAnnotation annotation;
  std::optional<MaskSequence> mask;
};

inline int remap_frame(int t, const TimestampAnnotation& from, int new_start) {
  const int u = std::clamp(t - new_start, 0, from.duration());
  return std::min(from.t_start + u, from.total_frames - 1);
}

inline AugmentResult temporal_augment(const VideoClip& clip, const TimestampAnnotation& ann, Rng& rng,
                                      const MaskSequence* mask = nullptr) {
  ann.validate();
  require(ann.total_frames == clip.frames, "augment: annotation T does not match clip");
  const int T = clip.frames;
  const int D = ann.duration();
  if (D > T) throw ValidationError("augment: duration exceeds clip length");
  const int start = static_cast<int>(rng.uniform_int(0, T - D));
  AugmentResult r{VideoClip(T, clip.height, clip.width, clip.channels, clip.fps), {start, start + D, T}, std::nullopt};
  for (int t = 0; t < T; ++t) {
    const int src = remap_frame(t, ann, start);
    std::copy(clip.frame_ptr(src), clip.frame_ptr(src) + clip.frame_size(), r.clip.frame_ptr(t));
  }
  if (mask) {
    MaskSequence m(T, mask->height, mask->width);
    m.instance_id = mask->instance_id;
    const std::size_t fs = static_cast<std::size_t>(mask->height) * mask->width;
    for (int t = 0; t < T; ++t) {
      const int src = remap_frame(t, ann, start);
      std::copy(mask->data.begin() + src * fs, mask->data.begin() + (src + 1) * fs, m.data.begin() + t * fs);
    }
    r.mask = std::move(m);
  }
  return r;
}

// ---------------------------------------------------------------------------
// Frame directories

inline void save_clip(const VideoClip& clip, const fs::path& dir) {
  fs::create_directories(dir);
  require(clip.channels == 1 || clip.channels == 3, "save_clip: channels must be 1 or 3");
  for (int t = 0; t < clip.frames; ++t) {
    io::Image8 img{clip.width, clip.height, clip.channels, {}};
    img.pixels.resize(clip.frame_size());
    const float* f = clip.frame_ptr(t);
    for (std::size_t i = 0; i < clip.frame_size(); ++i) img.pixels[i] = io::to_byte(f[i]);
    io::write_png(dir / io::frame_name(t), img);
  }
}

inline VideoClip load_clip(const fs::path& dir, int fps = 8) {
  const auto files = io::list_frames(dir);
  VideoClip clip;
  for (std::size_t t = 0; t < files.size(); ++t) {
    const io::Image8 img = io::read_png(files[t]);
    if (t == 0) {
      clip = VideoClip(static_cast<int>(files.size()), img.height, img.width, img.channels, fps);
    } else if (img.width != clip.width || img.height != clip.height || img.channels != clip.channels) {
      throw ValidationError("inconsistent frame size in " + dir.string());
    }
    float* f = clip.frame_ptr(static_cast<int>(t));
    for (std::size_t i = 0; i < clip.frame_size(); ++i) f[i] = img.pixels[i] / 255.0f;
  }
  return clip;
}

inline void save_mask(const MaskSequence& m, const fs::path& dir) {
  fs::create_directories(dir);
  for (int t = 0; t < m.frames; ++t) {
    io::Image8 img{m.width, m.height, 1, {}};
    img.pixels.resize(static_cast<std::size_t>(m.width) * m.height);
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) img.pixels[static_cast<std::size_t>(y) * m.width + x] = m.at(t, y, x) ? 255 : 0;
    io::write_png(dir / io::frame_name(t), img);
  }
}

inline MaskSequence load_mask(const fs::path& dir) {
  const auto files = io::list_frames(dir);
  MaskSequence m;
  for (std::size_t t = 0; t < files.size(); ++t) {
    const io::Image8 img = io::read_png(files[t]);
    if (img.channels != 1) throw ValidationError("mask frames must be single-channel: " + files[t].string());
    if (t == 0) m = MaskSequence(static_cast<int>(files.size()), img.height, img.width);
    require(img.width == m.width && img.height == m.height, "inconsistent mask frame size in " + dir.string());
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) {
        const auto v = img.pixels[static_cast<std::size_t>(y) * m.width + x];
        if (v != 0 && v != 255) throw ValidationError("mask values must be 0 or 255: " + files[t].string());
        m.at(static_cast<int>(t), y, x) = v ? 1 : 0;
      }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Manifest

struct ManifestRecord {
  std::string clip;                 // as written in the file
  std::optional<std::string> mask;
  TimestampAnnotation annotation;
  int fps = 8;
  std::string prompt;
  std::string category;
};

struct DatasetManifest {
  fs::path base_dir;  // relative paths resolve against this
  std::vector<ManifestRecord> records;

  std::size_t size() const { return records.size(); }
  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : base_dir / path;
  }
};

inline json to_json(const ManifestRecord& r) {
  json j;
  j["clip"] = r.clip;
  j["mask"] = r.mask ? json(*r.mask) : json(nullptr);
  j["start"] = r.annotation.t_start;
  j["end"] = r.annotation.t_end;
  j["total_frames"] = r.annotation.total_frames;
  j["fps"] = r.fps;
  j["prompt"] = r.prompt;
  j["category"] = r.category;
  return j;
}

namespace detail {
inline const json& field(const json& rec, std::size_t i, const char* key) {
  if (!rec.contains(key)) throw ValidationError("manifest record " + std::to_string(i) + ": missing field '" + key + "'");
  return rec.at(key);
}
inline int int_field(const json& rec, std::size_t i, const char* key) {
  const json& v = field(rec, i, key);
  if (!v.is_number_integer())
    throw ValidationError("manifest record " + std::to_string(i) + ": field '" + key + "' must be an integer");
  return v.get<int>();
}
inline std::string str_field(const json& rec, std::size_t i, const char* key) {
  const json& v = field(rec, i, key);
  if (!v.is_string()) throw ValidationError("manifest record " + std::to_string(i) + ": field '" + key + "' must be a string");
  return v.get<std::string>();
}
}  // namespace detail

inline ManifestRecord record_from_json(const json& rec, std::size_t i) {
  static const std::set<std::string> known{"clip", "mask", "start", "end", "total_frames", "fps", "prompt", "category"};
  if (!rec.is_object()) throw ValidationError("manifest record " + std::to_string(i) + ": must be an object");
  for (auto it = rec.begin(); it != rec.end(); ++it)
    if (!known.count(it.key()))
      throw ValidationError("manifest record " + std::to_string(i) + ": unknown field '" + it.key() + "'");
  ManifestRecord r;
  r.clip = detail::str_field(rec, i, "clip");
  if (rec.contains("mask") && !rec.at("mask").is_null()) r.mask = detail::str_field(rec, i, "mask");
  r.annotation.t_start = detail::int_field(rec, i, "start");
  r.annotation.t_end = detail::int_field(rec, i, "end");
  r.annotation.total_frames = detail::int_field(rec, i, "total_frames");
  r.fps = detail::int_field(rec, i, "fps");
  r.prompt = detail::str_field(rec, i, "prompt");
  r.category = detail::str_field(rec, i, "category");
  try {
    r.annotation.validate();
  } catch (const ValidationError& e) {
    throw ValidationError("manifest record " + std::to_string(i) + ": field 'start'/'end': " + e.what());
  }
  if (r.fps <= 0) throw ValidationError("manifest record " + std::to_string(i) + ": field 'fps' must be positive");
  if (r.prompt.empty()) throw ValidationError("manifest record " + std::to_string(i) + ": field 'prompt' is empty");
  return r;
}

inline DatasetManifest load_manifest(const fs::path& path) {
  if (!fs::exists(path)) throw ValidationError("missing file: " + path.string());
  std::ifstream in(path);
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw ValidationError("manifest is not valid JSON: " + std::string(e.what()));
  }
  if (!doc.is_array()) throw ValidationError("manifest: top level must be a list of records");
  DatasetManifest m;
  m.base_dir = path.parent_path();
  for (std::size_t i = 0; i < doc.size(); ++i) {
    ManifestRecord r = record_from_json(doc[i], i);
    if (!fs::exists(m.resolve(r.clip)))
      throw ValidationError("missing file: manifest record " + std::to_string(i) + " clip '" + r.clip + "'");
    if (r.mask && !fs::exists(m.resolve(*r.mask)))
      throw ValidationError("missing file: manifest record " + std::to_string(i) + " mask '" + *r.mask + "'");
    m.records.push_back(std::move(r));
  }
  return m;
}

inline void save_manifest(const DatasetManifest& m, const fs::path& path) {
  json doc = json::array();
  for (const auto& r : m.records) doc.push_back(to_json(r));
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  out << doc.dump(2) << "\n";
  if (!out) throw RuntimeFailure("cannot write manifest: " + path.string());
}

}  // namespace vfx
