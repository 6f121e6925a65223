#pragma once

// Noise schedule, condition bundles, training examples and sources, the
// AdamW trainer with warmup + cosine decay, and the deterministic DDIM
// sampler.

#include <array>
#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "vfx/core/parallel.hpp"
#include "vfx/model.hpp"
#include "vfx/scenes.hpp"

namespace vfx {

// Cosine law: alpha_bar(t) = f(t) / f(0), f(u) = cos^2(((u/N) + s) / (1 + s) * pi/2).
class NoiseSchedule {
 public:
  explicit NoiseSchedule(int steps = 1000, double offset = 0.008) {
    require(steps >= 2, "noise schedule: need at least 2 steps");
    auto f = [&](double u) {
      const double c = std::cos((u / steps + offset) / (1 + offset) * M_PI / 2);
      return c * c;
    };
    alpha_bar_.resize(steps);
    for (int t = 0; t < steps; ++t) alpha_bar_[t] = f(t) / f(0);
  }

  int steps() const { return static_cast<int>(alpha_bar_.size()); }
  double alpha_bar(int t) const {
    require(t >= 0 && t < steps(), "noise schedule: step out of range");
    return alpha_bar_[t];
  }
  double snr(int t) const { return alpha_bar(t) / (1 - alpha_bar(t)); }

  // n evenly spaced steps from N-1 down to 0.
  std::vector<int> sampling_steps(int n) const {
    if (n < 1 || n > steps()) throw ValidationError("sample steps must be in [1, " + std::to_string(steps()) + "]");
    std::vector<int> ts(n);
    for (int j = 0; j < n; ++j)
      ts[j] = n == 1 ? steps() - 1 : static_cast<int>(std::lround((steps() - 1) * (1.0 - static_cast<double>(j) / (n - 1))));
    return ts;
  }

 private:
  std::vector<double> alpha_bar_;
};

template <class T>
Mat<T> add_noise(const Mat<T>& x0, const Mat<T>& eps, double alpha_bar) {
  require(x0.rows() == eps.rows() && x0.cols() == eps.cols(), "add_noise: shape mismatch");
  return T(std::sqrt(alpha_bar)) * x0 + T(std::sqrt(1 - alpha_bar)) * eps;
}

// Everything the denoiser consumes for one sample besides the noisy latent.
struct ConditionBundle {
  Mat<float> text;                             // [L_text, d_tau]
  std::optional<std::array<double, 2>> range;  // strategy II: normalized (start, end)
  std::vector<float> temporal_mask;            // strategy I: one entry per latent frame
  Mat<float> spatial;                          // control: [N, patch^2] latent-grid cells
  int step = 0;
};

inline ConditionBundle make_condition(const ModelConfig& cfg, const Mat<float>& text, const TimestampAnnotation& ann,
                                      const MaskSequence* mask = nullptr) {
  ann.validate();
  ConditionBundle c;
  c.text = text;
  if (cfg.strategy == TemporalStrategy::timestamp_tokens) c.range = std::array<double, 2>{ann.start_normalized(), ann.end_normalized()};
  if (cfg.strategy == TemporalStrategy::mask_embedding)
    c.temporal_mask = build_temporal_mask(ann, cfg.latent_frames(), cfg.temporal_factor);
  if (cfg.control) {
    if (!mask) throw ValidationError("control branch needs a mask for every sample");
    const Latent grid = downsample_condition(build_spatial_condition(*mask, ann), cfg.temporal_factor, cfg.spatial_factor);
    c.spatial = patchify<float>(grid, cfg.patch);
  }
  return c;
}

// Latent tokens mapped from [0,1] to [-1,1].
inline Mat<float> normalized_tokens(const Latent& z, int patch) { return patchify<float>(z, patch).array() * 2.0f - 1.0f; }

// Reference latent (one frame) repeated over every latent frame.
inline Mat<float> reference_tokens(const ModelConfig& cfg, const Latent& ref) {
  require(ref.frames == 1 && ref.height == cfg.latent_height() && ref.width == cfg.latent_width() && ref.channels == cfg.channels,
          "reference latent does not match the model grid");
  Latent rep(cfg.latent_frames(), ref.height, ref.width, ref.channels);
  const std::size_t fs = ref.data.size();
  for (int t = 0; t < rep.frames; ++t) std::copy(ref.data.begin(), ref.data.end(), rep.data.begin() + t * fs);
  return normalized_tokens(rep, cfg.patch);
}

struct TrainExample {
  Mat<float> x0;         // [N, token_dim], normalized
  Mat<float> reference;  // [N, token_dim], normalized
  ConditionBundle cond;
};

struct ClipRecord {
  VideoClip clip;
  TimestampAnnotation annotation;
  std::optional<MaskSequence> mask;
  std::string prompt;
  std::string category;
};

class TextCache {
 public:
  explicit TextCache(const ModelConfig& cfg) : dim_(cfg.d_tau), len_(cfg.text_len) {}
  const Mat<float>& get(const std::string& prompt) const {
    std::lock_guard<std::mutex> lock(mu_);
    auto it = cache_.find(prompt);
    if (it == cache_.end()) it = cache_.emplace(prompt, encode_text<float>(prompt, dim_, len_)).first;
    return it->second;
  }

 private:
  Index dim_, len_;
  mutable std::mutex mu_;
  mutable std::map<std::string, Mat<float>> cache_;
};

inline TrainExample make_example(const ModelConfig& cfg, const TextCache& text, const VideoClip& clip,
                                 const TimestampAnnotation& ann, const MaskSequence* mask, const std::string& prompt) {
  if (clip.frames != cfg.frames || clip.height != cfg.height || clip.width != cfg.width || clip.channels != cfg.channels)
    throw ValidationError("clip shape " + std::to_string(clip.frames) + "x" + std::to_string(clip.height) + "x" +
                          std::to_string(clip.width) + "x" + std::to_string(clip.channels) + " does not match the model config");
  const LatentCodec codec = cfg.codec();
  TrainExample ex;
  ex.x0 = normalized_tokens(codec.encode(clip), cfg.patch);
  ex.reference = reference_tokens(cfg, codec.encode_reference(clip, 0));
  ex.cond = make_condition(cfg, text.get(prompt), ann, mask);
  return ex;
}

class ExampleSource {
 public:
  virtual ~ExampleSource() = default;
  virtual TrainExample draw(Rng& rng) const = 0;
};

// Fixed clips, re-timed on every draw by temporal_augment when enabled.
class ClipSetSource : public ExampleSource {
 public:
  ClipSetSource(const ModelConfig& cfg, std::vector<ClipRecord> clips, bool augment = true)
      : cfg_(cfg), text_(cfg), clips_(std::move(clips)), augment_(augment) {
    require(!clips_.empty(), "training data: no clips");
    for (const auto& c : clips_) {
      c.annotation.validate();
      if (cfg_.control && !c.mask) throw ValidationError("training data: control branch needs masks for every clip");
    }
  }

  TrainExample draw(Rng& rng) const override {
    const auto& rec = clips_[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(clips_.size()) - 1))];
    if (!augment_) return make_example(cfg_, text_, rec.clip, rec.annotation, rec.mask ? &*rec.mask : nullptr, rec.prompt);
    const AugmentResult a = temporal_augment(rec.clip, rec.annotation, rng, rec.mask ? &*rec.mask : nullptr);
    return make_example(cfg_, text_, a.clip, a.annotation, a.mask ? &*a.mask : nullptr, rec.prompt);
  }

  std::size_t size() const { return clips_.size(); }

 private:
  ModelConfig cfg_;
  TextCache text_;
  std::vector<ClipRecord> clips_;
  bool augment_;
};

// Fresh random scenes on every draw.
class SceneSource : public ExampleSource {
 public:
  SceneSource(const ModelConfig& cfg, SceneConfig scenes) : cfg_(cfg), text_(cfg), scenes_(std::move(scenes)) {
    scenes_.validate();
  }

  TrainExample draw(Rng& rng) const override {
    const EffectKind kind = scenes_.effects[static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(scenes_.effects.size()) - 1))];
    const TimestampAnnotation ann = random_interval(scenes_.frames, scenes_.min_duration, rng);
    const bool two = rng.uniform() < scenes_.two_object_prob;
    const SyntheticSample s = generate_synthetic_clip(random_effect_spec(scenes_, kind, ann, rng, two));
    return make_example(cfg_, text_, s.clip, s.annotation, &s.mask, default_prompt(kind));
  }

 private:
  ModelConfig cfg_;
  TextCache text_;
  SceneConfig scenes_;
};

struct TrainConfig {
  double lr = 1e-4;
  int steps = 3000;
  int warmup = 100;
  std::string decay = "cosine";  // cosine | constant
  double decay_floor = 0.1;      // final lr as a fraction of the peak
  int batch = 4;
  std::uint64_t seed = 0;
  double weight_decay = 0.01;
  double grad_clip = 0.0;  // 0 disables
  std::string stage = "adapter";  // base | adapter
  TemporalStrategy strategy = TemporalStrategy::timestamp_tokens;
  bool control = false;
  int lora_rank = 8;
  double lora_alpha = 1.0;
  bool augment = true;

  void validate() const {
    require(lr > 0 && steps >= 1 && warmup >= 0 && batch >= 1, "train: lr, steps and batch must be positive");
    require(decay == "cosine" || decay == "constant", "train: decay must be cosine or constant");
    require(decay_floor >= 0 && decay_floor <= 1, "train: decay_floor outside [0,1]");
    require(weight_decay >= 0 && grad_clip >= 0, "train: weight_decay and grad_clip must be non-negative");
    require(stage == "base" || stage == "adapter", "train: stage must be base or adapter");
    require(lora_rank >= 0 && lora_alpha > 0, "train: invalid LoRA settings");
    if (stage == "base")
      require(strategy == TemporalStrategy::none && !control && lora_rank == 0,
              "train: base stage trains the plain backbone (strategy none, no control, lora_rank 0)");
  }

  double lr_at(int step) const {
    const double warm = warmup > 0 ? std::min(1.0, (step + 1.0) / warmup) : 1.0;
    if (decay == "constant") return lr * warm;
    const double cosine = 0.5 * (1 + std::cos(M_PI * step / steps));
    return lr * warm * (decay_floor + (1 - decay_floor) * cosine);
  }

  json to_json() const {
    return json{{"lr", lr}, {"steps", steps}, {"warmup", warmup}, {"decay", decay}, {"decay_floor", decay_floor},
                {"batch", batch}, {"seed", seed}, {"weight_decay", weight_decay}, {"grad_clip", grad_clip},
                {"stage", stage}, {"strategy", to_string(strategy)}, {"control", control}, {"lora_rank", lora_rank},
                {"lora_alpha", lora_alpha}, {"augment", augment}};
  }

  static TrainConfig from_json(const json& j, const std::string& context = "train") {
    TrainConfig c;
    std::string strat = to_string(c.strategy);
    ConfigReader r(j, context);
    r.get("lr", c.lr).get("steps", c.steps).get("warmup", c.warmup).get("decay", c.decay);
    r.get("decay_floor", c.decay_floor).get("batch", c.batch).get("seed", c.seed).get("weight_decay", c.weight_decay);
    r.get("grad_clip", c.grad_clip).get("stage", c.stage).get("strategy", strat).get("control", c.control);
    r.get("lora_rank", c.lora_rank).get("lora_alpha", c.lora_alpha).get("augment", c.augment);
    r.finish();
    c.strategy = strategy_from_string(strat);
    c.validate();
    return c;
  }
};

// Attaches the adapters a training config asks for to a base model and
// freezes the base weights.
template <class T>
void prepare_adapters(Model<T>& model, const TrainConfig& tc) {
  if (tc.stage == "base") return;
  model.freeze_base();
  if (tc.lora_rank > 0 && model.config().lora_rank == 0) model.attach_lora(tc.lora_rank, tc.lora_alpha, model.config().lora_targets);
  if (tc.strategy != TemporalStrategy::none && model.config().strategy == TemporalStrategy::none) model.attach_temporal(tc.strategy);
  if (tc.control && !model.config().control) model.attach_control();
  if (model.config().strategy != tc.strategy)
    throw ValidationError("model already carries temporal strategy " + to_string(model.config().strategy));
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t h = seed ^ 0x9E3779B97F4A7C15ULL;
  for (std::uint64_t v : {a, b, c}) {
    h ^= v + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2);
    h = (h ^ (h >> 31)) * 0xBF58476D1CE4E5B9ULL;
  }
  return h;
}

// Stacks per-sample tensors into one batched forward input.
template <class T>
ForwardBatch<T> stack_batch(const ModelConfig& cfg, const std::vector<const ConditionBundle*>& conds,
                            const std::vector<const Mat<float>*>& xs, const std::vector<const Mat<float>*>& refs) {
  const Index B = static_cast<Index>(conds.size()), N = cfg.tokens(), L = cfg.text_len, TL = cfg.latent_frames();
  ForwardBatch<T> in;
  in.batch = B;
  in.x.resize(B * N, cfg.token_dim());
  in.reference.resize(B * N, cfg.token_dim());
  in.text.resize(B * L, cfg.d_tau);
  if (cfg.strategy == TemporalStrategy::timestamp_tokens) in.ranges.resize(B, 2);
  if (cfg.strategy == TemporalStrategy::mask_embedding) in.temporal_mask.resize(B * TL, 1);
  if (cfg.control) in.control.resize(B * N, cfg.patch * cfg.patch);
  for (Index b = 0; b < B; ++b) {
    const ConditionBundle& c = *conds[static_cast<std::size_t>(b)];
    in.steps.push_back(c.step);
    in.x.middleRows(b * N, N) = xs[static_cast<std::size_t>(b)]->template cast<T>();
    in.reference.middleRows(b * N, N) = refs[static_cast<std::size_t>(b)]->template cast<T>();
    require(c.text.rows() == L && c.text.cols() == cfg.d_tau, "condition: text tokens shape mismatch");
    in.text.middleRows(b * L, L) = c.text.template cast<T>();
    if (cfg.strategy == TemporalStrategy::timestamp_tokens) {
      if (!c.range) throw ValidationError("condition: strategy II needs a timestamp range");
      in.ranges(b, 0) = static_cast<T>((*c.range)[0]);
      in.ranges(b, 1) = static_cast<T>((*c.range)[1]);
    }
    if (cfg.strategy == TemporalStrategy::mask_embedding) {
      if (static_cast<Index>(c.temporal_mask.size()) != TL) throw ValidationError("condition: strategy I needs a temporal mask");
      for (Index g = 0; g < TL; ++g) in.temporal_mask(b * TL + g, 0) = static_cast<T>(c.temporal_mask[static_cast<std::size_t>(g)]);
    }
    if (cfg.control) {
      if (c.spatial.rows() != N) throw ValidationError("condition: control branch needs a spatial condition");
      in.control.middleRows(b * N, N) = c.spatial.template cast<T>();
    }
  }
  return in;
}

struct StepStats {
  int step = 0;
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;

  json to_json() const { return json{{"step", step}, {"loss", loss}, {"lr", lr}, {"grad_norm", grad_norm}}; }
};

template <class T>
class Trainer {
 public:
  Trainer(Model<T>& model, TrainConfig cfg, const ExampleSource& source)
      : model_(model), cfg_(std::move(cfg)), source_(source), schedule_(model.config().diffusion_steps),
        opt_(AdamWConfig{0.9, 0.999, 1e-8, cfg_.weight_decay}) {
    cfg_.validate();
  }

  // Draws a batch, takes one optimizer step and returns its statistics.
  StepStats step() {
    const ModelConfig& mc = model_.config();
    const int B = cfg_.batch, s = step_;
    std::vector<TrainExample> ex(B);
    std::vector<Mat<float>> noisy(B), targets(B);
    parallel_for(B, [&](int b) {
      Rng data(mix_seed(cfg_.seed, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(b), 1));
      ex[b] = source_.draw(data);
      Rng noise(mix_seed(cfg_.seed, static_cast<std::uint64_t>(s), static_cast<std::uint64_t>(b), 2));
      ex[b].cond.step = static_cast<int>(noise.uniform_int(0, schedule_.steps() - 1));
      Mat<float> eps = randn<float>(ex[b].x0.rows(), ex[b].x0.cols(), 1.0, noise);
      noisy[b] = add_noise(ex[b].x0, eps, schedule_.alpha_bar(ex[b].cond.step));
      targets[b] = mc.prediction == Prediction::epsilon ? eps : ex[b].x0;
    });
    std::vector<const ConditionBundle*> conds;
    std::vector<const Mat<float>*> xs, refs;
    Mat<T> target(static_cast<Index>(B) * mc.tokens(), mc.token_dim());
    for (int b = 0; b < B; ++b) {
      conds.push_back(&ex[b].cond);
      xs.push_back(&noisy[b]);
      refs.push_back(&ex[b].reference);
      target.middleRows(static_cast<Index>(b) * mc.tokens(), mc.tokens()) = targets[b].template cast<T>();
    }
    const ForwardBatch<T> in = stack_batch<T>(mc, conds, xs, refs);

    model_.params().zero_grad();
    Tape<T> tape;
    Var<T> loss = ad::mse(model_.forward(tape, in), target);
    const double lv = static_cast<double>(loss.value()(0, 0));
    if (!std::isfinite(lv))
      throw RuntimeFailure("non-finite loss at step " + std::to_string(s) + " (lr " + std::to_string(cfg_.lr_at(s)) + ")");
    tape.backward(loss);
    StepStats st;
    st.step = s;
    st.loss = lv;
    st.lr = cfg_.lr_at(s);
    st.grad_norm = grad_norm(model_.params());
    if (!std::isfinite(st.grad_norm)) throw RuntimeFailure("non-finite gradient norm at step " + std::to_string(s));
    if (cfg_.grad_clip > 0 && st.grad_norm > cfg_.grad_clip) scale_grads(model_.params(), cfg_.grad_clip / st.grad_norm);
    opt_.step(model_.params(), st.lr);
    ++step_;
    return st;
  }

  std::vector<StepStats> run(const std::function<void(const StepStats&)>& on_step = {}) {
    std::vector<StepStats> log;
    while (step_ < cfg_.steps) {
      log.push_back(step());
      if (on_step) on_step(log.back());
    }
    return log;
  }

  int steps_done() const { return step_; }

 private:
  Model<T>& model_;
  TrainConfig cfg_;
  const ExampleSource& source_;
  NoiseSchedule schedule_;
  AdamW<T> opt_;
  int step_ = 0;
};

struct SampleRequest {
  Latent reference;  // one latent frame in [0,1]
  ConditionBundle cond;
  std::uint64_t seed = 0;
};

// Deterministic DDIM (eta = 0). The clean-sample estimate is clamped to
// [-1, 1] at every step. Requests are run `chunk` at a time; each request's
// initial noise depends only on its own seed.
template <class T>
std::vector<Latent> sample_latents(const Model<T>& model, const std::vector<SampleRequest>& reqs, int n_steps,
                                   int chunk = 8) {
  const ModelConfig& mc = model.config();
  const NoiseSchedule schedule(mc.diffusion_steps);
  const std::vector<int> ts = schedule.sampling_steps(n_steps);
  const Index N = mc.tokens(), D = mc.token_dim();
  std::vector<Latent> out(reqs.size());
  for (std::size_t c0 = 0; c0 < reqs.size(); c0 += static_cast<std::size_t>(chunk)) {
    const std::size_t c1 = std::min(reqs.size(), c0 + static_cast<std::size_t>(chunk));
    const int B = static_cast<int>(c1 - c0);
    std::vector<Mat<float>> x(B), x0(B), refs(B);
    std::vector<ConditionBundle> conds(B);
    for (int b = 0; b < B; ++b) {
      Rng rng(reqs[c0 + b].seed);
      x[b] = randn<float>(N, D, 1.0, rng);
      refs[b] = reference_tokens(mc, reqs[c0 + b].reference);
      conds[b] = reqs[c0 + b].cond;
    }
    for (std::size_t j = 0; j < ts.size(); ++j) {
      const int t = ts[j];
      const double ab = schedule.alpha_bar(t);
      const double ab_prev = j + 1 < ts.size() ? schedule.alpha_bar(ts[j + 1]) : 1.0;
      std::vector<const ConditionBundle*> cp;
      std::vector<const Mat<float>*> xp, rp;
      for (int b = 0; b < B; ++b) {
        conds[b].step = t;
        cp.push_back(&conds[b]);
        xp.push_back(&x[b]);
        rp.push_back(&refs[b]);
      }
      Tape<T> tape(false);
      const Mat<T> pred = model.forward(tape, stack_batch<T>(mc, cp, xp, rp)).value();
      for (int b = 0; b < B; ++b) {
        const Mat<float> p = pred.middleRows(static_cast<Index>(b) * N, N).template cast<float>();
        if (mc.prediction == Prediction::sample)
          x0[b] = p;
        else
          x0[b] = (x[b] - static_cast<float>(std::sqrt(1 - ab)) * p) / static_cast<float>(std::sqrt(ab));
        x0[b] = x0[b].cwiseMax(-1.0f).cwiseMin(1.0f);
        const Mat<float> eps = (x[b] - static_cast<float>(std::sqrt(ab)) * x0[b]) / static_cast<float>(std::max(std::sqrt(1 - ab), 1e-4));
        x[b] = static_cast<float>(std::sqrt(ab_prev)) * x0[b] + static_cast<float>(std::sqrt(1 - ab_prev)) * eps;
      }
    }
    for (int b = 0; b < B; ++b) {
      const Mat<float> unit = ((x0[b].array() + 1.0f) * 0.5f).cwiseMax(0.0f).cwiseMin(1.0f);
      out[c0 + b] = unpatchify(unit, mc.latent_frames(), mc.latent_height(), mc.latent_width(), mc.channels, mc.patch);
    }
  }
  return out;
}

template <class T>
std::vector<VideoClip> sample_clips(const Model<T>& model, const std::vector<SampleRequest>& reqs, int n_steps, int fps = 8,
                                    int chunk = 8) {
  std::vector<VideoClip> clips;
  for (const auto& z : sample_latents(model, reqs, n_steps, chunk)) clips.push_back(model.config().codec().decode(z, fps));
  return clips;
}

}  // namespace vfx
