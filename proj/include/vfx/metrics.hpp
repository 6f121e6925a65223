#pragma once

// Temporal-control metrics and the evaluation protocol, plus the dynamic
// degree proxy and the motion-energy localization ratio.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vfx/annotation.hpp"
#include "vfx/diffusion.hpp"

namespace vfx {

struct SegmentPair {
  TimestampAnnotation pred;
  TimestampAnnotation gt;
  double fps = 8;
};

inline double frame_error(const std::vector<SegmentPair>& pairs) {
  if (pairs.empty()) throw ValidationError("frame_error: empty pair list");
  double s = 0;
  for (const auto& p : pairs) {
    p.pred.validate();
    p.gt.validate();
    s += std::abs(p.pred.t_start - p.gt.t_start) + std::abs(p.pred.t_end - p.gt.t_end);
  }
  return s / static_cast<double>(pairs.size());
}

// E_f / FPS; every pair must share the same FPS.
inline double second_error(const std::vector<SegmentPair>& pairs) {
  const double ef = frame_error(pairs);
  const double fps = pairs.front().fps;
  for (const auto& p : pairs) {
    require(p.fps > 0, "second_error: fps must be positive");
    require(p.fps == fps, "second_error: mixed fps in one pair list");
  }
  return ef / fps;
}

// IoU of half-open frame intervals.
inline double temporal_iou(const TimestampAnnotation& a, const TimestampAnnotation& b) {
  a.validate();
  b.validate();
  const int inter = std::max(0, std::min(a.t_end, b.t_end) - std::max(a.t_start, b.t_start));
  const int uni = a.duration() + b.duration() - inter;
  return static_cast<double>(inter) / uni;
}

struct EvalProtocolConfig {
  int pairs = 5;            // per reference
  int start_max = 2;        // start drawn from frames [0, start_max]
  int end_min = 2;          // end drawn from frames [max(start+1, end_min), T]
  std::uint64_t seed = 3;
  int sample_steps = 50;
  ExtractorConfig extractor = default_extractor();

  static ExtractorConfig default_extractor() {
    ExtractorConfig e;
    e.use_tracker = false;
    e.use_intensity = true;
    e.intensity.absolute = 2e-3;
    e.intensity.relative = 0.5;
    return e;
  }

  void validate(int frames) const {
    require(pairs >= 1, "eval: pairs must be >= 1");
    require(start_max >= 0 && start_max < frames, "eval: start range outside the clip");
    require(end_min >= 1 && end_min <= frames, "eval: end range outside the clip");
    require(sample_steps >= 1, "eval: sample_steps must be >= 1");
  }

  json to_json() const {
    return json{{"pairs", pairs},
                {"start_max", start_max},
                {"end_min", end_min},
                {"seed", seed},
                {"sample_steps", sample_steps},
                {"motion_threshold", extractor.motion_threshold},
                {"grid_step", extractor.grid_step},
                {"use_tracker", extractor.use_tracker},
                {"use_intensity", extractor.use_intensity},
                {"intensity_absolute", extractor.intensity.absolute},
                {"intensity_relative", extractor.intensity.relative}};
  }

  static EvalProtocolConfig from_json(const json& j, const std::string& context = "eval") {
    EvalProtocolConfig c;
    ConfigReader r(j, context);
    r.get("pairs", c.pairs).get("start_max", c.start_max).get("end_min", c.end_min).get("seed", c.seed);
    r.get("sample_steps", c.sample_steps).get("motion_threshold", c.extractor.motion_threshold);
    r.get("grid_step", c.extractor.grid_step).get("use_tracker", c.extractor.use_tracker);
    r.get("use_intensity", c.extractor.use_intensity).get("intensity_absolute", c.extractor.intensity.absolute);
    r.get("intensity_relative", c.extractor.intensity.relative);
    r.finish();
    return c;
  }
};

struct EvalReference {
  VideoClip clip;  // frame 0 is the reference image; masks are aligned to it
  std::optional<MaskSequence> mask;
  std::string prompt;
  std::string category;
};

struct EvalJob {
  std::size_t reference = 0;
  TimestampAnnotation target;
  std::uint64_t seed = 0;
};

struct EvalRow {
  std::string category;
  double t_iou = 0;
  double e_f = 0;
  double e_s = 0;
  int samples = 0;
  int failures = 0;

  json to_json() const {
    return json{{"category", category}, {"T_IoU", t_iou}, {"E_f", e_f}, {"E_s", e_s}, {"samples", samples},
                {"extraction_failures", failures}};
  }
};

struct EvalReport {
  std::vector<EvalRow> rows;  // one per category, sorted by name
  EvalRow average;
  std::vector<json> samples;

  json to_json() const {
    json j;
    j["rows"] = json::array();
    for (const auto& r : rows) j["rows"].push_back(r.to_json());
    j["average"] = average.to_json();
    j["samples"] = samples;
    return j;
  }
};

using EvalSampler = std::function<std::vector<VideoClip>(const std::vector<EvalJob>&)>;

inline std::vector<EvalJob> protocol_jobs(const std::vector<EvalReference>& refs, const EvalProtocolConfig& cfg) {
  require(!refs.empty(), "eval: no reference samples");
  std::vector<EvalJob> jobs;
  Rng rng(cfg.seed);
  for (std::size_t i = 0; i < refs.size(); ++i) {
    const int T = refs[i].clip.frames;
    cfg.validate(T);
    for (int k = 0; k < cfg.pairs; ++k) {
      const int s = static_cast<int>(rng.uniform_int(0, cfg.start_max));
      const int e = static_cast<int>(rng.uniform_int(std::max(s + 1, cfg.end_min), T));
      jobs.push_back({i, {s, e, T}, mix_seed(cfg.seed, i, static_cast<std::uint64_t>(k), 7)});
    }
  }
  return jobs;
}

// Extraction failures score T_IoU 0 and an endpoint error of T frames.
inline EvalReport run_eval_protocol(const EvalSampler& sampler, const std::vector<EvalReference>& refs,
                                    const EvalProtocolConfig& cfg) {
  const std::vector<EvalJob> jobs = protocol_jobs(refs, cfg);
  const std::vector<VideoClip> clips = sampler(jobs);
  if (clips.size() != jobs.size()) throw RuntimeFailure("eval: sampler returned the wrong number of clips");
  std::vector<std::optional<TimestampAnnotation>> found(jobs.size());
  parallel_for(static_cast<int>(jobs.size()), [&](int i) { found[i] = detect_motion_interval(clips[i], cfg.extractor); });

  std::map<std::string, std::vector<std::size_t>> by_cat;
  for (std::size_t i = 0; i < jobs.size(); ++i) by_cat[refs[jobs[i].reference].category].push_back(i);
  EvalReport rep;
  auto aggregate = [&](const std::string& name, const std::vector<std::size_t>& idx) {
    EvalRow row;
    row.category = name;
    double iou = 0, ef = 0, es = 0;
    for (std::size_t i : idx) {
      const auto& gt = jobs[i].target;
      const double fps = clips[i].fps;
      if (found[i]) {
        const SegmentPair p{*found[i], gt, fps};
        iou += temporal_iou(*found[i], gt);
        ef += frame_error({p});
        es += second_error({p});
      } else {
        ++row.failures;
        ef += gt.total_frames;
        es += gt.total_frames / fps;
      }
    }
    row.samples = static_cast<int>(idx.size());
    row.t_iou = iou / row.samples;
    row.e_f = ef / row.samples;
    row.e_s = es / row.samples;
    return row;
  };
  std::vector<std::size_t> all;
  for (const auto& [cat, idx] : by_cat) {
    rep.rows.push_back(aggregate(cat, idx));
    all.insert(all.end(), idx.begin(), idx.end());
  }
  std::sort(all.begin(), all.end());
  rep.average = aggregate("average", all);
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    json s{{"reference", jobs[i].reference},
           {"category", refs[jobs[i].reference].category},
           {"target", {jobs[i].target.t_start, jobs[i].target.t_end}},
           {"seed", jobs[i].seed}};
    s["extracted"] = found[i] ? json{found[i]->t_start, found[i]->t_end} : json(nullptr);
    rep.samples.push_back(s);
  }
  return rep;
}

// Sampler backed by a trained model: reference frame 0, prompt and, for the
// control branch, the reference's mask trimmed at the requested start.
template <class T>
EvalSampler model_sampler(const Model<T>& model, const std::vector<EvalReference>& refs, int sample_steps) {
  return [&model, &refs, sample_steps](const std::vector<EvalJob>& jobs) {
    const ModelConfig& mc = model.config();
    TextCache text(mc);
    std::vector<SampleRequest> reqs;
    for (const auto& j : jobs) {
      const EvalReference& r = refs[j.reference];
      SampleRequest q;
      q.reference = mc.codec().encode_reference(r.clip, 0);
      q.cond = make_condition(mc, text.get(r.prompt), j.target, r.mask ? &*r.mask : nullptr);
      q.seed = j.seed;
      reqs.push_back(std::move(q));
    }
    return sample_clips(model, reqs, sample_steps, refs.front().clip.fps);
  };
}

// Fraction of transitions whose mean absolute frame difference exceeds the
// threshold.
inline double dynamic_degree_proxy(const VideoClip& clip, double threshold = 1e-3) {
  if (clip.frames < 2) throw ValidationError("dynamic_degree_proxy: clip needs at least 2 frames");
  int moving = 0;
  for (int t = 0; t + 1 < clip.frames; ++t) moving += clip.frame_change(t) > threshold;
  return static_cast<double>(moving) / (clip.frames - 1);
}

// Binary [H, W] region.
struct RegionMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> data;

  static RegionMask from_frame(const MaskSequence& m, int t) {
    RegionMask r{m.height, m.width, {}};
    const std::size_t fs = static_cast<std::size_t>(m.height) * m.width;
    r.data.assign(m.data.begin() + t * fs, m.data.begin() + (t + 1) * fs);
    return r;
  }
};

inline double motion_energy(const VideoClip& clip, const RegionMask& r) {
  require(r.height == clip.height && r.width == clip.width, "motion_energy: region shape mismatch");
  double s = 0;
  std::size_t n = 0;
  for (int t = 0; t + 1 < clip.frames; ++t)
    for (int y = 0; y < clip.height; ++y)
      for (int x = 0; x < clip.width; ++x) {
        if (!r.data[static_cast<std::size_t>(y) * r.width + x]) continue;
        for (int c = 0; c < clip.channels; ++c) s += std::abs(clip.at(t + 1, y, x, c) - clip.at(t, y, x, c));
        n += static_cast<std::size_t>(clip.channels);
      }
  return s / static_cast<double>(n);
}

inline double motion_energy_ratio(const VideoClip& clip, const RegionMask& a, const RegionMask& b, double eps = 1e-6) {
  require(clip.frames >= 2, "motion_energy_ratio: clip needs at least 2 frames");
  bool any_a = false, any_b = false;
  for (std::size_t i = 0; i < a.data.size() && i < b.data.size(); ++i) {
    if (a.data[i] && b.data[i]) throw ValidationError("motion_energy_ratio: regions overlap");
    any_a = any_a || a.data[i];
    any_b = any_b || b.data[i];
  }
  if (!any_a || !any_b) throw ValidationError("motion_energy_ratio: empty region");
  return motion_energy(clip, a) / std::max(motion_energy(clip, b), eps);
}

}  // namespace vfx
