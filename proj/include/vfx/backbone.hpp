#pragma once

// Toy latent codec and the pieces of the diffusion transformer: config,
// patchification, rotary tables and the adaLN transformer block.

#include <algorithm>
#include <cmath>
#include <set>
#include <string>
#include <vector>

#include "vfx/core/config.hpp"
#include "vfx/dataset.hpp"
#include "vfx/nn.hpp"

namespace vfx {

using ad::Index;
using ad::Tape;
using ad::Var;

// [frames, height, width, channels] latent grid.
struct Latent {
  int frames = 0;
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  Latent() = default;
  Latent(int t, int h, int w, int c) : frames(t), height(h), width(w), channels(c), data(static_cast<std::size_t>(t) * h * w * c, 0.0f) {}

  float& at(int t, int y, int x, int c) { return data[((static_cast<std::size_t>(t) * height + y) * width + x) * channels + c]; }
  float at(int t, int y, int x, int c) const {
    return data[((static_cast<std::size_t>(t) * height + y) * width + x) * channels + c];
  }
};

// Block-average pooling over f_t frames and f_s x f_s pixels; decoding
// repeats each latent cell.
struct LatentCodec {
  int temporal_factor = 4;
  int spatial_factor = 8;

  void check(int frames, int height, int width) const {
    require(temporal_factor >= 1 && spatial_factor >= 1, "codec: factors must be positive");
    if (frames % temporal_factor != 0)
      throw ValidationError("codec: frame count " + std::to_string(frames) + " not divisible by temporal factor " +
                            std::to_string(temporal_factor));
    if (height % spatial_factor != 0 || width % spatial_factor != 0)
      throw ValidationError("codec: frame size " + std::to_string(height) + "x" + std::to_string(width) +
                            " not divisible by spatial factor " + std::to_string(spatial_factor));
  }

  Latent encode(const VideoClip& clip) const {
    check(clip.frames, clip.height, clip.width);
    Latent z(clip.frames / temporal_factor, clip.height / spatial_factor, clip.width / spatial_factor, clip.channels);
    const double inv = 1.0 / (static_cast<double>(temporal_factor) * spatial_factor * spatial_factor);
    for (int g = 0; g < z.frames; ++g)
      for (int y = 0; y < z.height; ++y)
        for (int x = 0; x < z.width; ++x)
          for (int c = 0; c < z.channels; ++c) {
            double s = 0;
            for (int dt = 0; dt < temporal_factor; ++dt)
              for (int dy = 0; dy < spatial_factor; ++dy)
                for (int dx = 0; dx < spatial_factor; ++dx)
                  s += clip.at(g * temporal_factor + dt, y * spatial_factor + dy, x * spatial_factor + dx, c);
            z.at(g, y, x, c) = static_cast<float>(s * inv);
          }
    return z;
  }

  // Spatial pooling of a single frame; one latent frame.
  Latent encode_reference(const VideoClip& clip, int frame = 0) const {
    require(frame >= 0 && frame < clip.frames, "codec: reference frame out of range");
    check(temporal_factor, clip.height, clip.width);
    Latent z(1, clip.height / spatial_factor, clip.width / spatial_factor, clip.channels);
    const double inv = 1.0 / (static_cast<double>(spatial_factor) * spatial_factor);
    for (int y = 0; y < z.height; ++y)
      for (int x = 0; x < z.width; ++x)
        for (int c = 0; c < z.channels; ++c) {
          double s = 0;
          for (int dy = 0; dy < spatial_factor; ++dy)
            for (int dx = 0; dx < spatial_factor; ++dx) s += clip.at(frame, y * spatial_factor + dy, x * spatial_factor + dx, c);
          z.at(0, y, x, c) = static_cast<float>(s * inv);
        }
    return z;
  }

  VideoClip decode(const Latent& z, int fps = 8) const {
    VideoClip clip(z.frames * temporal_factor, z.height * spatial_factor, z.width * spatial_factor, z.channels, fps);
    for (int t = 0; t < clip.frames; ++t)
      for (int y = 0; y < clip.height; ++y)
        for (int x = 0; x < clip.width; ++x)
          for (int c = 0; c < clip.channels; ++c)
            clip.at(t, y, x, c) = std::clamp(z.at(t / temporal_factor, y / spatial_factor, x / spatial_factor, c), 0.0f, 1.0f);
    return clip;
  }
};

enum class TemporalStrategy { none, mask_embedding, timestamp_tokens };
enum class Prediction { epsilon, sample };

inline std::string to_string(TemporalStrategy s) {
  switch (s) {
    case TemporalStrategy::none: return "none";
    case TemporalStrategy::mask_embedding: return "I";
    case TemporalStrategy::timestamp_tokens: return "II";
  }
  return "none";
}

inline TemporalStrategy strategy_from_string(const std::string& s) {
  if (s == "none") return TemporalStrategy::none;
  if (s == "I") return TemporalStrategy::mask_embedding;
  if (s == "II") return TemporalStrategy::timestamp_tokens;
  throw ValidationError("unknown temporal strategy '" + s + "' (expected none, I or II)");
}

inline std::string to_string(Prediction p) { return p == Prediction::epsilon ? "epsilon" : "sample"; }

inline Prediction prediction_from_string(const std::string& s) {
  if (s == "epsilon") return Prediction::epsilon;
  if (s == "sample") return Prediction::sample;
  throw ValidationError("unknown prediction type '" + s + "' (expected epsilon or sample)");
}

inline const std::vector<std::string>& attention_projections() {
  static const std::vector<std::string> names{"attn.q", "attn.k", "attn.v", "attn.o",
                                              "cross.q", "cross.k", "cross.v", "cross.o"};
  return names;
}

struct ModelConfig {
  int frames = 48;
  int height = 64;
  int width = 64;
  int channels = 3;
  int temporal_factor = 4;
  int spatial_factor = 8;
  int patch = 1;

  int d_model = 128;
  int n_blocks = 4;
  int n_heads = 4;
  int d_tau = 64;
  int mlp_ratio = 4;
  int text_len = 16;
  bool rope = true;
  double rope_base = 100.0;
  bool temporal_position = true;

  int diffusion_steps = 1000;
  Prediction prediction = Prediction::epsilon;

  TemporalStrategy strategy = TemporalStrategy::none;
  int timestamp_tokens = 4;
  int cond_hidden = 64;
  int lora_rank = 0;  // 0 = no adapters
  double lora_alpha = 1.0;
  std::vector<std::string> lora_targets = attention_projections();
  bool control = false;

  LatentCodec codec() const { return {temporal_factor, spatial_factor}; }
  int latent_frames() const { return frames / temporal_factor; }
  int latent_height() const { return height / spatial_factor; }
  int latent_width() const { return width / spatial_factor; }
  int grid_height() const { return latent_height() / patch; }
  int grid_width() const { return latent_width() / patch; }
  int tokens_per_frame() const { return grid_height() * grid_width(); }
  int tokens() const { return latent_frames() * tokens_per_frame(); }
  int token_dim() const { return patch * patch * channels; }
  int head_dim() const { return d_model / n_heads; }

  void validate() const {
    require(frames >= 1 && height >= 1 && width >= 1 && channels >= 1, "model: data dims must be positive");
    codec().check(frames, height, width);
    require(patch >= 1 && latent_height() % patch == 0 && latent_width() % patch == 0,
            "model: latent grid not divisible by patch size");
    require(d_model >= 2 && n_blocks >= 1 && n_heads >= 1 && d_tau >= 1 && mlp_ratio >= 1 && text_len >= 1,
            "model: transformer dims must be positive");
    require(d_model % n_heads == 0, "model: d_model must be divisible by n_heads");
    require(head_dim() % 2 == 0, "model: head dim must be even for rotary encoding");
    require(diffusion_steps >= 2, "model: diffusion_steps must be >= 2");
    require(timestamp_tokens >= 1 && cond_hidden >= 1, "model: conditioning dims must be positive");
    require(lora_rank >= 0 && lora_alpha > 0, "model: invalid LoRA settings");
    for (const auto& t : lora_targets)
      if (std::find(attention_projections().begin(), attention_projections().end(), t) == attention_projections().end())
        throw ValidationError("model: unknown LoRA target '" + t + "'");
  }

  json to_json() const {
    return json{{"frames", frames},
                {"height", height},
                {"width", width},
                {"channels", channels},
                {"temporal_factor", temporal_factor},
                {"spatial_factor", spatial_factor},
                {"patch", patch},
                {"d_model", d_model},
                {"n_blocks", n_blocks},
                {"n_heads", n_heads},
                {"d_tau", d_tau},
                {"mlp_ratio", mlp_ratio},
                {"text_len", text_len},
                {"rope", rope},
                {"rope_base", rope_base},
                {"temporal_position", temporal_position},
                {"diffusion_steps", diffusion_steps},
                {"prediction", to_string(prediction)},
                {"strategy", to_string(strategy)},
                {"timestamp_tokens", timestamp_tokens},
                {"cond_hidden", cond_hidden},
                {"lora_rank", lora_rank},
                {"lora_alpha", lora_alpha},
                {"lora_targets", lora_targets},
                {"control", control}};
  }

  static ModelConfig from_json(const json& j, const std::string& context = "model") {
    ModelConfig c;
    ConfigReader r(j, context);
    std::string pred = to_string(c.prediction), strat = to_string(c.strategy);
    r.get("frames", c.frames).get("height", c.height).get("width", c.width).get("channels", c.channels);
    r.get("temporal_factor", c.temporal_factor).get("spatial_factor", c.spatial_factor).get("patch", c.patch);
    r.get("d_model", c.d_model).get("n_blocks", c.n_blocks).get("n_heads", c.n_heads).get("d_tau", c.d_tau);
    r.get("mlp_ratio", c.mlp_ratio).get("text_len", c.text_len).get("rope", c.rope).get("rope_base", c.rope_base);
    r.get("temporal_position", c.temporal_position).get("diffusion_steps", c.diffusion_steps).get("prediction", pred);
    r.get("strategy", strat).get("timestamp_tokens", c.timestamp_tokens).get("cond_hidden", c.cond_hidden);
    r.get("lora_rank", c.lora_rank).get("lora_alpha", c.lora_alpha).get("lora_targets", c.lora_targets);
    r.get("control", c.control);
    r.finish();
    c.prediction = prediction_from_string(pred);
    c.strategy = strategy_from_string(strat);
    c.validate();
    return c;
  }
};

// Latent grid -> [tokens, patch*patch*C]; token order is (t, gy, gx).
template <class T>
Mat<T> patchify(const Latent& z, int patch) {
  const int gh = z.height / patch, gw = z.width / patch;
  Mat<T> m(static_cast<Index>(z.frames) * gh * gw, static_cast<Index>(patch) * patch * z.channels);
  for (int t = 0; t < z.frames; ++t)
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        const Index row = (static_cast<Index>(t) * gh + gy) * gw + gx;
        Index col = 0;
        for (int py = 0; py < patch; ++py)
          for (int px = 0; px < patch; ++px)
            for (int c = 0; c < z.channels; ++c) m(row, col++) = static_cast<T>(z.at(t, gy * patch + py, gx * patch + px, c));
      }
  return m;
}

template <class T>
Latent unpatchify(const Mat<T>& m, int frames, int height, int width, int channels, int patch) {
  Latent z(frames, height, width, channels);
  const int gh = height / patch, gw = width / patch;
  require(m.rows() == static_cast<Index>(frames) * gh * gw && m.cols() == static_cast<Index>(patch) * patch * channels,
          "unpatchify: token matrix shape mismatch");
  for (int t = 0; t < frames; ++t)
    for (int gy = 0; gy < gh; ++gy)
      for (int gx = 0; gx < gw; ++gx) {
        const Index row = (static_cast<Index>(t) * gh + gy) * gw + gx;
        Index col = 0;
        for (int py = 0; py < patch; ++py)
          for (int px = 0; px < patch; ++px)
            for (int c = 0; c < channels; ++c) z.at(t, gy * patch + py, gx * patch + px, c) = static_cast<float>(m(row, col++));
      }
  return z;
}

// Rotary angle tables [tokens, head_dim/2]. Pairs are split into a temporal,
// a vertical and a horizontal group; pair j of a group with n pairs turns by
// coord * base^(-j/n).
template <class T>
void rope_tables(const ModelConfig& cfg, Mat<T>& cos, Mat<T>& sin) {
  const int pairs = cfg.head_dim() / 2;
  const int pt = pairs / 3, ph = (pairs - pt) / 2, pw = pairs - pt - ph;
  const Index n = cfg.tokens();
  cos.resize(n, pairs);
  sin.resize(n, pairs);
  for (Index r = 0; r < n; ++r) {
    const int t = static_cast<int>(r / cfg.tokens_per_frame());
    const int gy = static_cast<int>((r % cfg.tokens_per_frame()) / cfg.grid_width());
    const int gx = static_cast<int>(r % cfg.grid_width());
    int k = 0;
    for (auto [count, coord] : {std::pair{pt, t}, std::pair{ph, gy}, std::pair{pw, gx}})
      for (int j = 0; j < count; ++j, ++k) {
        const double a = coord * std::pow(cfg.rope_base, -static_cast<double>(j) / count);
        cos(r, k) = static_cast<T>(std::cos(a));
        sin(r, k) = static_cast<T>(std::sin(a));
      }
  }
}

template <class T>
struct DitBlock {
  nn::Linear<T> ada;  // 9 modulations: shift/scale/gate for attention, cross-attention and MLP
  nn::Linear<T> q, k, v, o;
  nn::Linear<T> cq, ck, cv, co;
  nn::Linear<T> m1, m2;

  static DitBlock make(ParamStore<T>& store, const std::string& p, const ModelConfig& cfg, Rng& rng) {
    const Index d = cfg.d_model;
    DitBlock b;
    b.ada = nn::Linear<T>::make(store, p + ".ada", d, 9 * d, rng, true);
    b.q = nn::Linear<T>::make(store, p + ".attn.q", d, d, rng);
    b.k = nn::Linear<T>::make(store, p + ".attn.k", d, d, rng);
    b.v = nn::Linear<T>::make(store, p + ".attn.v", d, d, rng);
    b.o = nn::Linear<T>::make(store, p + ".attn.o", d, d, rng);
    b.cq = nn::Linear<T>::make(store, p + ".cross.q", d, d, rng);
    b.ck = nn::Linear<T>::make(store, p + ".cross.k", cfg.d_tau, d, rng);
    b.cv = nn::Linear<T>::make(store, p + ".cross.v", cfg.d_tau, d, rng);
    b.co = nn::Linear<T>::make(store, p + ".cross.o", d, d, rng);
    b.m1 = nn::Linear<T>::make(store, p + ".mlp.fc1", d, cfg.mlp_ratio * d, rng);
    b.m2 = nn::Linear<T>::make(store, p + ".mlp.fc2", cfg.mlp_ratio * d, d, rng);
    return b;
  }

  static DitBlock bind(ParamStore<T>& store, const std::string& p) {
    DitBlock b;
    b.ada = nn::Linear<T>::bind(store, p + ".ada");
    b.q = nn::Linear<T>::bind(store, p + ".attn.q");
    b.k = nn::Linear<T>::bind(store, p + ".attn.k");
    b.v = nn::Linear<T>::bind(store, p + ".attn.v");
    b.o = nn::Linear<T>::bind(store, p + ".attn.o");
    b.cq = nn::Linear<T>::bind(store, p + ".cross.q");
    b.ck = nn::Linear<T>::bind(store, p + ".cross.k");
    b.cv = nn::Linear<T>::bind(store, p + ".cross.v");
    b.co = nn::Linear<T>::bind(store, p + ".cross.o");
    b.m1 = nn::Linear<T>::bind(store, p + ".mlp.fc1");
    b.m2 = nn::Linear<T>::bind(store, p + ".mlp.fc2");
    return b;
  }

  nn::Linear<T>& projection(const std::string& name) {
    if (name == "attn.q") return q;
    if (name == "attn.k") return k;
    if (name == "attn.v") return v;
    if (name == "attn.o") return o;
    if (name == "cross.q") return cq;
    if (name == "cross.k") return ck;
    if (name == "cross.v") return cv;
    if (name == "cross.o") return co;
    throw ValidationError("unknown LoRA target '" + name + "'");
  }
};

// Per-forward state shared by every block.
template <class T>
struct BlockContext {
  Index batch = 1;
  int heads = 1;
  Var<T> modulation;              // silu(timestep embedding), one row per (sample, latent frame)
  const std::vector<int>* token_frame = nullptr;  // token row -> modulation row
  const Mat<T>* cos = nullptr;    // null disables rotary encoding
  const Mat<T>* sin = nullptr;
  Var<T> context;                 // cross-attention keys/values source, sample-major
  std::vector<Mat<T>>* cross_probs = nullptr;
};

template <class T>
Var<T> modulate(Var<T> x, Var<T> shift, Var<T> scale) {
  return ad::add(ad::mul(ad::layer_norm(x), ad::add_scalar(scale, T(1))), shift);
}

template <class T>
Var<T> block_forward(Tape<T>& tp, const DitBlock<T>& b, Var<T> x, const BlockContext<T>& ctx) {
  const Index d = x.cols();
  Var<T> mods = ad::gather_rows(b.ada(tp, ctx.modulation), *ctx.token_frame);
  auto m = [&](int i) { return ad::slice_cols(mods, i * d, d); };
  auto gated = [&](Var<T> base, int gate, Var<T> y) { return ad::add(base, ad::mul(ad::add_scalar(m(gate), T(1)), y)); };

  Var<T> h = modulate(x, m(0), m(1));
  Var<T> q = b.q(tp, h), k = b.k(tp, h), v = b.v(tp, h);
  if (ctx.cos) {
    q = ad::rope(q, *ctx.cos, *ctx.sin, ctx.heads);
    k = ad::rope(k, *ctx.cos, *ctx.sin, ctx.heads);
  }
  x = gated(x, 2, b.o(tp, ad::attention(q, k, v, ctx.heads, ctx.batch)));

  h = modulate(x, m(3), m(4));
  Var<T> cq = b.cq(tp, h), ck = b.ck(tp, ctx.context), cv = b.cv(tp, ctx.context);
  std::vector<Mat<T>> probs;
  Var<T> cross = ad::attention(cq, ck, cv, ctx.heads, ctx.batch, ctx.cross_probs ? &probs : nullptr);
  if (ctx.cross_probs)
    for (auto& p : probs) ctx.cross_probs->push_back(std::move(p));
  x = gated(x, 5, b.co(tp, cross));

  h = modulate(x, m(6), m(7));
  return gated(x, 8, b.m2(tp, ad::gelu(b.m1(tp, h))));
}

}  // namespace vfx
