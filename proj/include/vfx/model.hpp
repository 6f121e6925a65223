#pragma once

// The full model graph: base DiT plus optional LoRA adapters, temporal
// conditioning head and control branch, all sharing one ParamStore.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "vfx/backbone.hpp"
#include "vfx/conditioning.hpp"
#include "vfx/spatial_control.hpp"

namespace vfx {

// Inputs of one batched forward pass; rows are sample-major.
template <class T>
struct ForwardBatch {
  Index batch = 1;
  Mat<T> x;              // [B*N, token_dim] noisy latent tokens
  Mat<T> reference;      // [B*N, token_dim] reference latent broadcast over frames
  std::vector<int> steps;  // [B] diffusion steps
  Mat<T> text;           // [B*L, d_tau]
  Mat<T> ranges;         // [B, 2] normalized (start, end), strategy II
  Mat<T> temporal_mask;  // [B*T_latent, 1], strategy I
  Mat<T> control;        // [B*N, patch^2], control branch
};

template <class T>
struct ForwardTrace {
  std::vector<Mat<T>> cross_probs;      // main branch, per (block, sample, head)
  std::vector<Mat<T>> control_residuals;
};

template <class T>
class Model {
 public:
  // Builds the base model and whatever adapters the config asks for.
  Model(const ModelConfig& cfg, std::uint64_t seed) : cfg_(cfg), rng_(seed) {
    cfg_.validate();
    const TemporalStrategy strategy = cfg_.strategy;
    const int rank = cfg_.lora_rank;
    const bool control = cfg_.control;
    cfg_.strategy = TemporalStrategy::none;
    cfg_.lora_rank = 0;
    cfg_.control = false;
    build_base();
    if (rank > 0) attach_lora(rank, cfg.lora_alpha, cfg.lora_targets);
    if (strategy != TemporalStrategy::none) attach_temporal(strategy);
    if (control) attach_control();
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  void freeze_base() {
    for (auto& p : store_)
      if (is_base(p->name)) p->frozen = true;
  }

  static bool is_base(const std::string& name) {
    return name.find(".lora_") == std::string::npos && name.rfind("control.", 0) != 0 &&
           name.rfind(TimestampEncoder<T>::prefix, 0) != 0 && name.rfind(TemporalMaskEmbedder<T>::prefix, 0) != 0;
  }

  // Adds W' = W + alpha A B^T to the targeted projections of every main
  // block and freezes the base weights.
  void attach_lora(int rank, double alpha, const std::vector<std::string>& targets) {
    if (cfg_.lora_rank > 0) throw ValidationError("LoRA already attached");
    require(rank >= 1, "LoRA rank must be >= 1");
    for (const auto& t : targets) blocks_[0].projection(t);  // rejects unknown names
    freeze_base();
    for (std::size_t i = 0; i < blocks_.size(); ++i)
      for (const auto& t : targets) {
        nn::Linear<T>& lin = blocks_[i].projection(t);
        const Index n = lin.in(), m = lin.out();
        if (rank >= n || rank >= m)
          throw ValidationError("LoRA rank " + std::to_string(rank) + " must be smaller than both dims of " + t + " (" +
                                std::to_string(n) + "x" + std::to_string(m) + ")");
        const std::string p = "blocks." + std::to_string(i) + "." + t;
        nn::LoraAdapter<T> ad;
        ad.a = &store_.add(p + ".lora_a", randn<T>(n, rank, 1.0 / std::sqrt(static_cast<double>(n)), rng_));
        ad.b = &store_.add(p + ".lora_b", zeros<T>(m, rank));
        ad.alpha = alpha;
        ad.rank = rank;
        lin.lora = ad;
      }
    cfg_.lora_rank = rank;
    cfg_.lora_alpha = alpha;
    cfg_.lora_targets = targets;
  }

  void detach_lora() {
    for (auto& b : blocks_)
      for (const auto& t : attention_projections()) b.projection(t).lora.reset();
    store_.remove_if([](const std::string& n) { return n.find(".lora_") != std::string::npos; });
    cfg_.lora_rank = 0;
    rebind();
  }

  void set_lora_alpha(double alpha) {
    for (auto& b : blocks_)
      for (const auto& t : attention_projections())
        if (b.projection(t).lora) b.projection(t).lora->alpha = alpha;
    cfg_.lora_alpha = alpha;
  }

  void attach_temporal(TemporalStrategy s) {
    if (cfg_.strategy != TemporalStrategy::none) throw ValidationError("temporal conditioning already attached");
    if (s == TemporalStrategy::timestamp_tokens)
      ts_ = TimestampEncoder<T>::make(store_, cfg_.timestamp_tokens, cfg_.d_tau, cfg_.cond_hidden, rng_);
    else if (s == TemporalStrategy::mask_embedding)
      tm_ = TemporalMaskEmbedder<T>::make(store_, cfg_.d_model, cfg_.cond_hidden, rng_);
    cfg_.strategy = s;
  }

  void attach_control() {
    if (cfg_.control) throw ValidationError("control branch already attached");
    freeze_base();
    control_ = ControlBranch<T>::make(store_, cfg_, rng_);
    cfg_.control = true;
  }

  void detach_control() {
    store_.remove_prefix("control.");
    cfg_.control = false;
    control_.reset();
    rebind();
  }

  const std::optional<TimestampEncoder<T>>& timestamp_encoder() const { return ts_; }
  const std::optional<TemporalMaskEmbedder<T>>& temporal_mask_embedder() const { return tm_; }

  Var<T> forward(Tape<T>& tp, const ForwardBatch<T>& in, ForwardTrace<T>* trace = nullptr) const {
    const Index B = in.batch, N = cfg_.tokens(), d = cfg_.d_model;
    check_inputs(in);
    const Index TL = cfg_.latent_frames();

    Var<T> x = ad::add(in_x_(tp, tp.constant(in.x)), in_ref_(tp, tp.constant(in.reference)));
    if (cfg_.temporal_position) x = ad::add(x, tp.constant(tile(frame_position_, B)));

    std::vector<double> steps(in.steps.begin(), in.steps.end());
    Var<T> temb = t2_(tp, ad::silu(t1_(tp, tp.constant(nn::sinusoid<T>(steps, d)))));
    std::vector<int> frame_sample(static_cast<std::size_t>(B * TL));
    for (Index r = 0; r < B * TL; ++r) frame_sample[static_cast<std::size_t>(r)] = static_cast<int>(r / TL);
    Var<T> temb_frames = ad::gather_rows(temb, frame_sample);
    if (cfg_.strategy == TemporalStrategy::mask_embedding)
      temb_frames = ad::add(temb_frames, (*tm_)(tp, tp.constant(in.temporal_mask)));

    std::vector<int> token_frame(static_cast<std::size_t>(B * N));
    for (Index r = 0; r < B * N; ++r)
      token_frame[static_cast<std::size_t>(r)] = static_cast<int>((r / N) * TL + (r % N) / cfg_.tokens_per_frame());

    // M timestamp slots always precede the text; they stay zero unless the
    // timestamp encoder is attached.
    Var<T> slots = cfg_.strategy == TemporalStrategy::timestamp_tokens
                       ? (*ts_)(tp, tp.constant(in.ranges))
                       : tp.constant(Mat<T>::Zero(B * cfg_.timestamp_tokens, cfg_.d_tau));
    Var<T> context = concat_condition_tokens(slots, tp.constant(in.text), B);

    Mat<T> cos, sin;
    if (cfg_.rope) {
      cos = tile(rope_cos_, B);
      sin = tile(rope_sin_, B);
    }
    BlockContext<T> ctx;
    ctx.batch = B;
    ctx.heads = cfg_.n_heads;
    ctx.modulation = ad::silu(temb_frames);
    ctx.token_frame = &token_frame;
    ctx.cos = cfg_.rope ? &cos : nullptr;
    ctx.sin = cfg_.rope ? &sin : nullptr;
    ctx.context = context;

    std::vector<Var<T>> residuals;
    if (control_) {
      residuals = (*control_)(tp, x, tp.constant(in.control), ctx);
      if (trace)
        for (const auto& r : residuals) trace->control_residuals.push_back(r.value());
    }
    ctx.cross_probs = trace ? &trace->cross_probs : nullptr;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
      x = block_forward(tp, blocks_[i], x, ctx);
      if (i < residuals.size()) x = ad::add(x, residuals[i]);
    }
    Var<T> f = ad::gather_rows(final_ada_(tp, ctx.modulation), token_frame);
    x = modulate(x, ad::slice_cols(f, 0, d), ad::slice_cols(f, d, d));
    return out_(tp, x);
  }

  // Re-creates every module view after parameters were added or removed.
  void rebind() {
    in_x_ = nn::Linear<T>::bind(store_, "in.x");
    in_ref_ = nn::Linear<T>::bind(store_, "in.ref");
    t1_ = nn::Linear<T>::bind(store_, "time.fc1");
    t2_ = nn::Linear<T>::bind(store_, "time.fc2");
    final_ada_ = nn::Linear<T>::bind(store_, "final.ada");
    out_ = nn::Linear<T>::bind(store_, "final.out");
    blocks_.clear();
    for (int i = 0; i < cfg_.n_blocks; ++i) {
      blocks_.push_back(DitBlock<T>::bind(store_, "blocks." + std::to_string(i)));
      for (const auto& t : attention_projections()) {
        const std::string p = "blocks." + std::to_string(i) + "." + t;
        if (Param<T>* a = store_.find(p + ".lora_a")) {
          nn::LoraAdapter<T> ad;
          ad.a = a;
          ad.b = &store_.at(p + ".lora_b");
          ad.alpha = cfg_.lora_alpha;
          ad.rank = static_cast<int>(a->value.cols());
          blocks_.back().projection(t).lora = ad;
        }
      }
    }
    ts_.reset();
    tm_.reset();
    if (cfg_.strategy == TemporalStrategy::timestamp_tokens)
      ts_ = TimestampEncoder<T>::bind(store_, cfg_.timestamp_tokens, cfg_.d_tau);
    if (cfg_.strategy == TemporalStrategy::mask_embedding) tm_ = TemporalMaskEmbedder<T>::bind(store_);
    control_.reset();
    if (cfg_.control) control_ = ControlBranch<T>::bind(store_, cfg_);
  }

 private:
  void build_base() {
    const Index d = cfg_.d_model, td = cfg_.token_dim();
    nn::Linear<T>::make(store_, "in.x", td, d, rng_);
    nn::Linear<T>::make(store_, "in.ref", td, d, rng_, true, false);
    nn::Linear<T>::make(store_, "time.fc1", d, d, rng_);
    nn::Linear<T>::make(store_, "time.fc2", d, d, rng_);
    for (int i = 0; i < cfg_.n_blocks; ++i) DitBlock<T>::make(store_, "blocks." + std::to_string(i), cfg_, rng_);
    nn::Linear<T>::make(store_, "final.ada", d, 2 * d, rng_, true);
    nn::Linear<T>::make(store_, "final.out", d, td, rng_);
    rebind();

    const Index TL = cfg_.latent_frames(), N = cfg_.tokens();
    std::vector<double> t(static_cast<std::size_t>(TL));
    for (Index i = 0; i < TL; ++i) t[static_cast<std::size_t>(i)] = static_cast<double>(i);
    const Mat<T> per_frame = nn::sinusoid<T>(t, d);
    frame_position_.resize(N, d);
    for (Index r = 0; r < N; ++r) frame_position_.row(r) = per_frame.row(r / cfg_.tokens_per_frame());
    rope_tables(cfg_, rope_cos_, rope_sin_);
  }

  static Mat<T> tile(const Mat<T>& m, Index times) {
    Mat<T> out(m.rows() * times, m.cols());
    for (Index b = 0; b < times; ++b) out.middleRows(b * m.rows(), m.rows()) = m;
    return out;
  }

  void check_inputs(const ForwardBatch<T>& in) const {
    const Index B = in.batch, N = cfg_.tokens();
    require(B >= 1, "forward: batch must be positive");
    if (in.x.rows() != B * N || in.x.cols() != cfg_.token_dim())
      throw ValidationError("forward: latent tokens have shape " + std::to_string(in.x.rows()) + "x" +
                            std::to_string(in.x.cols()) + ", expected " + std::to_string(B * N) + "x" +
                            std::to_string(cfg_.token_dim()));
    require(in.reference.rows() == in.x.rows() && in.reference.cols() == in.x.cols(), "forward: reference shape mismatch");
    require(static_cast<Index>(in.steps.size()) == B, "forward: need one diffusion step per sample");
    for (int s : in.steps)
      if (s < 0 || s >= cfg_.diffusion_steps) throw ValidationError("forward: diffusion step out of range");
    require(in.text.cols() == cfg_.d_tau && in.text.rows() == B * cfg_.text_len, "forward: text tokens shape mismatch");
    if (cfg_.strategy == TemporalStrategy::timestamp_tokens)
      require(in.ranges.rows() == B && in.ranges.cols() == 2, "forward: strategy II needs [B, 2] timestamp ranges");
    if (cfg_.strategy == TemporalStrategy::mask_embedding)
      require(in.temporal_mask.rows() == B * cfg_.latent_frames() && in.temporal_mask.cols() == 1,
              "forward: strategy I needs a temporal mask per latent frame");
    if (cfg_.control)
      require(in.control.rows() == B * N && in.control.cols() == cfg_.patch * cfg_.patch,
              "forward: control condition does not match the latent grid");
  }

  ModelConfig cfg_;
  Rng rng_;
  ParamStore<T> store_;
  nn::Linear<T> in_x_, in_ref_, t1_, t2_, final_ada_, out_;
  std::vector<DitBlock<T>> blocks_;
  std::optional<TimestampEncoder<T>> ts_;
  std::optional<TemporalMaskEmbedder<T>> tm_;
  std::optional<ControlBranch<T>> control_;
  Mat<T> frame_position_, rope_cos_, rope_sin_;
};

}  // namespace vfx
