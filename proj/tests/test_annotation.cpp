#include <gtest/gtest.h>

#include "support.hpp"

using namespace vfx;

namespace {

// Independent scan: collect every transition whose largest visible step
// exceeds the threshold and read the interval off its ends.
std::optional<std::pair<int, int>> brute_force(const PointTrackSet& tr, double thr) {
  std::vector<int> moving;
  for (int t = 0; t + 1 < tr.frames; ++t) {
    bool any = false;
    for (int p = 0; p < tr.points; ++p) {
      if (!tr.vis(p, t) || !tr.vis(p, t + 1)) continue;
      const double dx = tr.x(p, t + 1) - tr.x(p, t), dy = tr.y(p, t + 1) - tr.y(p, t);
      any = any || std::sqrt(dx * dx + dy * dy) > thr;
    }
    if (any) moving.push_back(t);
  }
  if (moving.empty()) return std::nullopt;
  const int last = moving.back();
  return std::make_pair(moving.front(), last == tr.frames - 2 ? tr.frames : last + 1);
}

PointTrackSet single_point(const std::vector<double>& ys) {
  PointTrackSet tr(1, static_cast<int>(ys.size()));
  for (int t = 0; t < tr.frames; ++t) {
    tr.x(0, t) = 5.0;
    tr.y(0, t) = ys[t];
  }
  return tr;
}

PointTrackSet random_tracks(int P, int T, Rng& rng) {
  PointTrackSet tr(P, T);
  for (int p = 0; p < P; ++p) {
    double x = rng.uniform(0, 30), y = rng.uniform(0, 30);
    for (int t = 0; t < T; ++t) {
      if (rng.uniform() < 0.3) {
        x += rng.normal() * 0.8;
        y += rng.normal() * 0.8;
      }
      tr.x(p, t) = x;
      tr.y(p, t) = y;
      tr.vis(p, t) = rng.uniform() < 0.9;
    }
  }
  return tr;
}

// Ends at T-1 and T cannot be told apart from frames (see README), so the
// ground truth is drawn from [start+1, T-2] or T.
TimestampAnnotation distinguishable_interval(int T, Rng& rng) {
  const int s = static_cast<int>(rng.uniform_int(0, T - 4));
  const int e = rng.uniform() < 0.15 ? T : static_cast<int>(rng.uniform_int(s + 2, T - 2));
  return {s, e, T};
}

}  // namespace

TEST(ExtractTimestamps, StepTwoBetweenTenAndThirty) {
  std::vector<double> ys(48);
  double y = 40;
  for (int t = 0; t < 48; ++t) {
    ys[t] = y;
    if (t >= 10 && t < 30) y -= 2;
  }
  const auto tr = single_point(ys);
  const auto bf = brute_force(tr, 0.5);
  ASSERT_TRUE(bf);
  EXPECT_EQ(*bf, std::make_pair(10, 30));
  EXPECT_EQ(extract_timestamps(tr, 0.5), (TimestampAnnotation{10, 30, 48}));
}

TEST(ExtractTimestamps, StaticTracksHaveNoMotion) {
  const auto tr = single_point(std::vector<double>(12, 3.0));
  try {
    extract_timestamps(tr);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("no motion"), std::string::npos);
  }
}

TEST(ExtractTimestamps, MotionThroughLastFrameRunsToEnd) {
  std::vector<double> ys(16);
  for (int t = 0; t < 16; ++t) ys[t] = 30 - t;
  EXPECT_EQ(extract_timestamps(single_point(ys)), (TimestampAnnotation{0, 16, 16}));
}

TEST(ExtractTimestamps, InvisibleAndBadThreshold) {
  auto tr = single_point({1, 2, 3, 4});
  std::fill(tr.visible.begin(), tr.visible.end(), 0);
  EXPECT_THROW(extract_timestamps(tr), ValidationError);
  EXPECT_THROW(extract_timestamps(single_point({1, 2, 3}), 0.0), ValidationError);
}

TEST(ExtractTimestamps, InvisiblePointsAreIgnored) {
  PointTrackSet tr(2, 8);
  for (int t = 0; t < 8; ++t) {
    tr.x(0, t) = 0;
    tr.y(0, t) = t >= 2 && t <= 3 ? 5.0 * t : 0;  // jumps into and out of view
    tr.vis(0, t) = t < 2 || t > 3;
    tr.x(1, t) = t == 4 ? 1.0 : 0.0;
  }
  EXPECT_EQ(extract_timestamps(tr), (TimestampAnnotation{3, 5, 8}));
}

TEST(ExtractTimestamps, MatchesBruteForceOnRandomTracks) {
  Rng rng(21);
  int checked = 0;
  for (int i = 0; i < 300; ++i) {
    const auto tr = random_tracks(1 + i % 5, 3 + i % 30, rng);
    const double thr = rng.uniform(0.1, 1.5);
    bool any_visible = false;
    for (int p = 0; p < tr.points; ++p)
      for (int t = 0; t + 1 < tr.frames; ++t) any_visible = any_visible || (tr.vis(p, t) && tr.vis(p, t + 1));
    if (!any_visible) continue;
    const auto bf = brute_force(tr, thr);
    const auto got = interval_from_motion(track_motion(tr, thr), tr.frames);
    ASSERT_EQ(bf.has_value(), got.has_value());
    if (bf) EXPECT_EQ(*bf, std::make_pair(got->t_start, got->t_end));
    ++checked;
  }
  EXPECT_GT(checked, 250);
}

TEST(ExtractTimestamps, StaticPointsDoNotChangeResult) {
  Rng rng(22);
  for (int i = 0; i < 50; ++i) {
    const auto tr = random_tracks(3, 20, rng);
    const auto base = interval_from_motion(track_motion(tr, 0.5), tr.frames);
    PointTrackSet more(tr.points + 4, tr.frames);
    for (int p = 0; p < more.points; ++p)
      for (int t = 0; t < tr.frames; ++t) {
        const bool orig = p < tr.points;
        more.x(p, t) = orig ? tr.x(p, t) : 7.0 * p;
        more.y(p, t) = orig ? tr.y(p, t) : 3.0;
        more.vis(p, t) = orig ? tr.vis(p, t) : 1;
      }
    EXPECT_EQ(base, interval_from_motion(track_motion(more, 0.5), more.frames));
  }
}

TEST(ExtractTimestamps, ScaleInvariance) {
  Rng rng(23);
  for (int i = 0; i < 50; ++i) {
    auto tr = random_tracks(3, 20, rng);
    const double k = std::pow(2.0, rng.uniform_int(-3, 3));  // exact scaling
    const auto base = interval_from_motion(track_motion(tr, 0.5), tr.frames);
    for (auto& v : tr.xy) v *= k;
    EXPECT_EQ(base, interval_from_motion(track_motion(tr, 0.5 * k), tr.frames));
  }
}

TEST(FallbackTrack, StaticClipHasZeroDisplacement) {
  VideoClip clip(6, 24, 24, 3);
  Rng rng(24);
  for (int y = 0; y < 24; ++y)
    for (int x = 0; x < 24; ++x)
      for (int c = 0; c < 3; ++c) {
        const float v = static_cast<float>(rng.uniform());
        for (int t = 0; t < 6; ++t) clip.at(t, y, x, c) = v;
      }
  const auto tr = fallback_track(clip, 4);
  EXPECT_EQ(tr.points, 36);
  for (int p = 0; p < tr.points; ++p)
    for (int t = 1; t < tr.frames; ++t) {
      EXPECT_EQ(tr.x(p, t), tr.x(p, 0));
      EXPECT_EQ(tr.y(p, t), tr.y(p, 0));
    }
}

TEST(FallbackTrack, RejectsShortClipAndBadGrid) {
  EXPECT_THROW(fallback_track(VideoClip(1, 8, 8, 3)), ValidationError);
  EXPECT_THROW(fallback_track(VideoClip(4, 8, 8, 3), 0), ValidationError);
}

TEST(FallbackTrack, IsDeterministic) {
  SceneConfig sc;
  Rng rng(25);
  const auto spec = random_effect_spec(sc, EffectKind::levitate, {4, 20, 32}, rng);
  const auto clip = generate_synthetic_clip(spec).clip;
  EXPECT_EQ(fallback_track(clip).xy, fallback_track(clip).xy);
}

TEST(FallbackTrack, TranslatingSquareMatchesGroundTruth) {
  SyntheticEffectSpec spec;
  spec.frames = 40;
  spec.height = 48;
  spec.width = 48;
  spec.object = {18, 34, 10, {0.9f, 0.8f, 0.3f}};
  spec.background = {0.1f, 0.1f, 0.2f};
  spec.speed = 1.0;
  spec.t_start = 8;
  spec.t_end = 28;
  const auto out = generate_synthetic_clip(spec);
  ExtractorConfig cfg;
  cfg.use_intensity = false;
  EXPECT_EQ(annotate_clip(out.clip, cfg), out.annotation);
  EXPECT_EQ(extract_timestamps(fallback_track(out.clip, cfg.grid_step), 0.5), out.annotation);
}

TEST(FallbackTrack, DissolveNeedsIntensityDetector) {
  SyntheticEffectSpec spec;
  spec.kind = EffectKind::dissolve;
  spec.object = {10, 10, 10, {0.9f, 0.8f, 0.3f}};
  spec.background = {0.1f, 0.1f, 0.2f};
  spec.t_start = 5;
  spec.t_end = 20;
  const auto out = generate_synthetic_clip(spec);
  ExtractorConfig tracker_only;
  tracker_only.use_intensity = false;
  const auto tracked = detect_motion_interval(out.clip, tracker_only);
  EXPECT_TRUE(!tracked || *tracked != out.annotation);
  ExtractorConfig both;
  EXPECT_EQ(annotate_clip(out.clip, both), out.annotation);
}

TEST(Extractor, RecoversAllEffectsExactly) {
  SceneConfig sc;
  Rng rng(26);
  for (int i = 0; i < 50; ++i) {
    const EffectKind kind = all_effects()[i % 4];
    const auto ann = distinguishable_interval(sc.frames, rng);
    const auto out = generate_synthetic_clip(random_effect_spec(sc, kind, ann, rng, i % 2 == 1));
    EXPECT_EQ(annotate_clip(out.clip), ann) << to_string(kind) << " " << ann.t_start << "-" << ann.t_end;
  }
}

TEST(Extractor, EndAtTMinusOneReadsAsT) {
  SceneConfig sc;
  Rng rng(27);
  const auto out = generate_synthetic_clip(random_effect_spec(sc, EffectKind::levitate, {3, 31, 32}, rng));
  EXPECT_EQ(annotate_clip(out.clip), (TimestampAnnotation{3, 32, 32}));
}

TEST(Extractor, NeedsADetector) {
  ExtractorConfig cfg;
  cfg.use_tracker = cfg.use_intensity = false;
  EXPECT_THROW(detect_motion_interval(VideoClip(4, 8, 8, 3), cfg), ValidationError);
}

TEST(Segmenter, ColorKeyRecoversGeneratorMask) {
  SceneConfig sc;
  Rng rng(28);
  for (EffectKind kind : {EffectKind::levitate, EffectKind::squish, EffectKind::explode}) {
    const auto out = generate_synthetic_clip(random_effect_spec(sc, kind, {4, 24, 32}, rng));
    int x0 = sc.width, y0 = sc.height, x1 = 0, y1 = 0;
    for (int y = 0; y < sc.height; ++y)
      for (int x = 0; x < sc.width; ++x)
        if (out.mask.at(0, y, x)) {
          x0 = std::min(x0, x);
          y0 = std::min(y0, y);
          x1 = std::max(x1, x + 1);
          y1 = std::max(y1, y + 1);
        }
    const Region region{std::max(0, x0 - 2), std::max(0, y0 - 2), std::min(sc.width, x1 + 2),
                        std::min(sc.height, y1 + 2)};
    const MaskSequence m = ColorKeySegmenter().segment(out.clip, region);
    m.validate_against(out.clip);
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < m.data.size(); ++i) {
      inter += m.data[i] && out.mask.data[i];
      uni += m.data[i] || out.mask.data[i];
    }
    EXPECT_GT(static_cast<double>(inter) / uni, 0.8) << to_string(kind);
  }
}

TEST(Segmenter, RejectsBadRegion) {
  VideoClip clip(2, 8, 8, 3);
  EXPECT_THROW(ColorKeySegmenter().segment(clip, {0, 0, 9, 4}), ValidationError);
  EXPECT_THROW(ColorKeySegmenter().segment(clip, {0, 0, 4, 4}), ValidationError);
}
