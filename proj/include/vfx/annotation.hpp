#pragma once

// Start/end timestamp extraction from point tracks, a block-matching
// fallback tracker, a frame-difference intensity detector for appearance-only
// effects, and a colour-key segmenter behind a pluggable interface.

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vfx/core/error.hpp"
#include "vfx/dataset.hpp"

namespace vfx {

// tracks [P, T, 2] as (x, y) pixel positions; visibility [P, T].
struct PointTrackSet {
  int points = 0;
  int frames = 0;
  std::vector<double> xy;
  std::vector<std::uint8_t> visible;

  PointTrackSet() = default;
  PointTrackSet(int p, int t) : points(p), frames(t), xy(static_cast<std::size_t>(p) * t * 2, 0.0), visible(static_cast<std::size_t>(p) * t, 1) {}

  double& x(int p, int t) { return xy[(static_cast<std::size_t>(p) * frames + t) * 2]; }
  double& y(int p, int t) { return xy[(static_cast<std::size_t>(p) * frames + t) * 2 + 1]; }
  double x(int p, int t) const { return xy[(static_cast<std::size_t>(p) * frames + t) * 2]; }
  double y(int p, int t) const { return xy[(static_cast<std::size_t>(p) * frames + t) * 2 + 1]; }
  std::uint8_t& vis(int p, int t) { return visible[static_cast<std::size_t>(p) * frames + t]; }
  bool vis(int p, int t) const { return visible[static_cast<std::size_t>(p) * frames + t] != 0; }

  void validate() const {
    require(points >= 1, "tracks: need at least one point");
    require(frames >= 1, "tracks: need at least one frame");
    require(xy.size() == static_cast<std::size_t>(points) * frames * 2, "tracks: position array size mismatch");
    require(visible.size() == static_cast<std::size_t>(points) * frames, "tracks: visibility array size mismatch");
    for (double v : xy) require(std::isfinite(v), "tracks: non-finite coordinate");
  }
};

struct Region {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;  // half-open box in pixels
};

class Tracker {
 public:
  virtual ~Tracker() = default;
  virtual PointTrackSet track(const VideoClip& clip) const = 0;
};

class Segmenter {
 public:
  virtual ~Segmenter() = default;
  virtual MaskSequence segment(const VideoClip& clip, const Region& region) const = 0;
};

// Turns per-transition motion flags (flag t covers frames t -> t+1) into a
// half-open interval. Motion reaching the last transition is taken to run to
// the end of the clip.
inline std::optional<TimestampAnnotation> interval_from_motion(const std::vector<bool>& moving, int total_frames) {
  int first = -1, last = -1;
  for (int t = 0; t < static_cast<int>(moving.size()); ++t)
    if (moving[t]) {
      if (first < 0) first = t;
      last = t;
    }
  if (first < 0) return std::nullopt;
  const int end = last == total_frames - 2 ? total_frames : last + 1;
  return TimestampAnnotation{first, end, total_frames};
}

inline std::vector<bool> track_motion(const PointTrackSet& tracks, double threshold) {
  tracks.validate();
  if (!(threshold > 0)) throw ValidationError("motion threshold must be positive");
  bool any_visible = false;
  std::vector<bool> moving(std::max(0, tracks.frames - 1), false);
  for (int t = 0; t + 1 < tracks.frames; ++t) {
    double best = 0;
    for (int p = 0; p < tracks.points; ++p) {
      if (!tracks.vis(p, t) || !tracks.vis(p, t + 1)) continue;
      any_visible = true;
      best = std::max(best, std::hypot(tracks.x(p, t + 1) - tracks.x(p, t), tracks.y(p, t + 1) - tracks.y(p, t)));
    }
    moving[t] = best > threshold;
  }
  if (!any_visible) throw ValidationError("all points invisible");
  return moving;
}

inline TimestampAnnotation extract_timestamps(const PointTrackSet& tracks, double motion_threshold = 0.5) {
  auto ann = interval_from_motion(track_motion(tracks, motion_threshold), tracks.frames);
  if (!ann) throw ValidationError("no motion detected");
  return *ann;
}

// Flags transitions whose mean absolute frame difference exceeds
// max(absolute, relative * largest difference in the clip).
struct IntensityDetector {
  double absolute = 1e-6;
  double relative = 0.0;

  std::vector<bool> operator()(const VideoClip& clip) const {
    require(clip.frames >= 2, "intensity detector: clip shorter than 2 frames");
    std::vector<double> diff(clip.frames - 1);
    for (int t = 0; t + 1 < clip.frames; ++t) diff[t] = clip.frame_change(t);
    const double thr = std::max(absolute, relative * *std::max_element(diff.begin(), diff.end()));
    std::vector<bool> moving(diff.size());
    for (std::size_t t = 0; t < diff.size(); ++t) moving[t] = diff[t] > thr;
    return moving;
  }
};

// Grid points seeded on frame 0 and advanced by exhaustive block matching
// over integer displacements, refined to sub-pixel precision with a parabola
// through the SSD minimum and its neighbours.
class BlockMatchTracker : public Tracker {
 public:
  explicit BlockMatchTracker(int grid_step = 4, int patch_radius = 3, int search_radius = 3)
      : grid_step_(grid_step), patch_radius_(patch_radius), search_radius_(search_radius) {
    require(grid_step >= 1, "grid_step must be >= 1");
    require(patch_radius >= 1 && search_radius >= 1, "tracker radii must be >= 1");
  }

  PointTrackSet track(const VideoClip& clip) const override {
    if (clip.frames < 2) throw ValidationError("fallback_track: clip shorter than 2 frames");
    std::vector<std::pair<double, double>> seeds;
    for (int y = grid_step_ / 2; y < clip.height; y += grid_step_)
      for (int x = grid_step_ / 2; x < clip.width; x += grid_step_) seeds.emplace_back(x, y);
    PointTrackSet tr(static_cast<int>(seeds.size()), clip.frames);
    for (int p = 0; p < tr.points; ++p) {
      tr.x(p, 0) = seeds[p].first;
      tr.y(p, 0) = seeds[p].second;
    }
    const int side = 2 * patch_radius_ + 1;
    std::vector<double> ref(static_cast<std::size_t>(side) * side * clip.channels);
    std::vector<double> ssd(static_cast<std::size_t>(2 * search_radius_ + 1) * (2 * search_radius_ + 1));
    for (int t = 0; t + 1 < clip.frames; ++t) {
      for (int p = 0; p < tr.points; ++p) {
        const double px = tr.x(p, t), py = tr.y(p, t);
        tr.x(p, t + 1) = px;
        tr.y(p, t + 1) = py;
        tr.vis(p, t + 1) = tr.vis(p, t);
        if (!tr.vis(p, t)) continue;
        sample_patch(clip, t, px, py, ref);
        const int n = 2 * search_radius_ + 1;
        for (int dy = -search_radius_; dy <= search_radius_; ++dy)
          for (int dx = -search_radius_; dx <= search_radius_; ++dx)
            ssd[(dy + search_radius_) * n + dx + search_radius_] = patch_ssd(clip, t + 1, px + dx, py + dy, ref);
        auto at = [&](int dx, int dy) { return ssd[(dy + search_radius_) * n + dx + search_radius_]; };
        if (at(0, 0) == 0.0) continue;  // identical neighbourhood: no displacement
        int bx = 0, by = 0;
        for (int dy = -search_radius_; dy <= search_radius_; ++dy)
          for (int dx = -search_radius_; dx <= search_radius_; ++dx) {
            const double v = at(dx, dy), b = at(bx, by);
            if (v < b || (v == b && dx * dx + dy * dy < bx * bx + by * by)) {
              bx = dx;
              by = dy;
            }
          }
        auto refine = [](double lo, double mid, double hi) {
          const double den = lo - 2 * mid + hi;
          return den > 0 ? std::clamp(0.5 * (lo - hi) / den, -0.5, 0.5) : 0.0;
        };
        double fx = bx, fy = by;
        if (std::abs(bx) < search_radius_) fx += refine(at(bx - 1, by), at(bx, by), at(bx + 1, by));
        if (std::abs(by) < search_radius_) fy += refine(at(bx, by - 1), at(bx, by), at(bx, by + 1));
        const double nx = px + fx, ny = py + fy;
        tr.x(p, t + 1) = nx;
        tr.y(p, t + 1) = ny;
        if (nx < 0 || ny < 0 || nx > clip.width - 1 || ny > clip.height - 1) tr.vis(p, t + 1) = 0;
      }
    }
    return tr;
  }

 private:
  // Bilinear sample with edge clamping.
  static double sample(const VideoClip& clip, int t, double x, double y, int c) {
    x = std::clamp(x, 0.0, static_cast<double>(clip.width - 1));
    y = std::clamp(y, 0.0, static_cast<double>(clip.height - 1));
    const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
    const int x1 = std::min(x0 + 1, clip.width - 1), y1 = std::min(y0 + 1, clip.height - 1);
    const double ax = x - x0, ay = y - y0;
    return (1 - ay) * ((1 - ax) * clip.at(t, y0, x0, c) + ax * clip.at(t, y0, x1, c)) +
           ay * ((1 - ax) * clip.at(t, y1, x0, c) + ax * clip.at(t, y1, x1, c));
  }

  void sample_patch(const VideoClip& clip, int t, double x, double y, std::vector<double>& out) const {
    std::size_t i = 0;
    for (int dy = -patch_radius_; dy <= patch_radius_; ++dy)
      for (int dx = -patch_radius_; dx <= patch_radius_; ++dx)
        for (int c = 0; c < clip.channels; ++c) out[i++] = sample(clip, t, x + dx, y + dy, c);
  }

  double patch_ssd(const VideoClip& clip, int t, double x, double y, const std::vector<double>& ref) const {
    double s = 0;
    std::size_t i = 0;
    for (int dy = -patch_radius_; dy <= patch_radius_; ++dy)
      for (int dx = -patch_radius_; dx <= patch_radius_; ++dx)
        for (int c = 0; c < clip.channels; ++c) {
          const double d = sample(clip, t, x + dx, y + dy, c) - ref[i++];
          s += d * d;
        }
    return s;
  }

  int grid_step_, patch_radius_, search_radius_;
};

inline PointTrackSet fallback_track(const VideoClip& clip, int grid_step = 4) {
  return BlockMatchTracker(grid_step).track(clip);
}

struct ExtractorConfig {
  double motion_threshold = 0.5;  // pixels per frame
  int grid_step = 4;
  bool use_tracker = true;
  bool use_intensity = true;
  IntensityDetector intensity;
};

// Tracker displacement OR intensity change; either detector may be disabled.
inline std::optional<TimestampAnnotation> detect_motion_interval(const VideoClip& clip, const ExtractorConfig& cfg,
                                                                 const Tracker* tracker = nullptr) {
  require(cfg.use_tracker || cfg.use_intensity, "extractor: enable at least one detector");
  require(clip.frames >= 2, "extractor: clip shorter than 2 frames");
  std::vector<bool> moving(clip.frames - 1, false);
  if (cfg.use_tracker) {
    const PointTrackSet tr = tracker ? tracker->track(clip) : BlockMatchTracker(cfg.grid_step).track(clip);
    const auto m = track_motion(tr, cfg.motion_threshold);
    for (std::size_t t = 0; t < moving.size(); ++t) moving[t] = moving[t] || m[t];
  }
  if (cfg.use_intensity) {
    const auto m = cfg.intensity(clip);
    for (std::size_t t = 0; t < moving.size(); ++t) moving[t] = moving[t] || m[t];
  }
  return interval_from_motion(moving, clip.frames);
}

inline TimestampAnnotation annotate_clip(const VideoClip& clip, const ExtractorConfig& cfg = {},
                                         const Tracker* tracker = nullptr) {
  auto ann = detect_motion_interval(clip, cfg, tracker);
  if (!ann) throw ValidationError("no motion detected");
  return *ann;
}

// Object colour is estimated inside the region on frame 0 against the colour
// of the region's border; every frame is then keyed on that colour.
class ColorKeySegmenter : public Segmenter {
 public:
  explicit ColorKeySegmenter(double tolerance = 0.15) : tol_(tolerance) {}

  MaskSequence segment(const VideoClip& clip, const Region& r) const override {
    require(r.x0 >= 0 && r.y0 >= 0 && r.x1 <= clip.width && r.y1 <= clip.height && r.x0 < r.x1 && r.y0 < r.y1,
            "segmenter: region outside frame or empty");
    const int C = clip.channels;
    std::vector<double> border(C, 0.0);
    int nb = 0;
    for (int y = r.y0; y < r.y1; ++y)
      for (int x = r.x0; x < r.x1; ++x)
        if (y == r.y0 || y == r.y1 - 1 || x == r.x0 || x == r.x1 - 1) {
          for (int c = 0; c < C; ++c) border[c] += clip.at(0, y, x, c);
          ++nb;
        }
    for (auto& v : border) v /= nb;
    auto dist = [&](int t, int y, int x, const std::vector<double>& ref) {
      double s = 0;
      for (int c = 0; c < C; ++c) s = std::max(s, std::abs(clip.at(t, y, x, c) - ref[c]));
      return s;
    };
    std::vector<double> object(C, 0.0);
    int no = 0;
    for (int y = r.y0; y < r.y1; ++y)
      for (int x = r.x0; x < r.x1; ++x)
        if (dist(0, y, x, border) > tol_) {
          for (int c = 0; c < C; ++c) object[c] += clip.at(0, y, x, c);
          ++no;
        }
    if (no == 0) throw ValidationError("segmenter: region contains no object");
    for (auto& v : object) v /= no;
    MaskSequence m(clip.frames, clip.height, clip.width);
    for (int t = 0; t < clip.frames; ++t)
      for (int y = 0; y < clip.height; ++y)
        for (int x = 0; x < clip.width; ++x) m.at(t, y, x) = dist(t, y, x, object) < dist(t, y, x, border) && dist(t, y, x, object) <= tol_;
    return m;
  }

 private:
  double tol_;
};

}  // namespace vfx
