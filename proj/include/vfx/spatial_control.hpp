#pragma once

// Mask ControlNet: trainable copies of the first half of the backbone blocks
// fed with the latent-grid spatial condition and bridged into the main branch
// through zero-initialized per-token linear taps.

#include <string>
#include <vector>

#include "vfx/backbone.hpp"
#include "vfx/conditioning.hpp"

namespace vfx {

// Max-pools a pixel-grid condition onto the latent grid: a cell is 1 if any
// pixel it covers is 1. Returned as a single-channel latent.
inline Latent downsample_condition(const SpatialCondition& c, int temporal_factor, int spatial_factor) {
  LatentCodec{temporal_factor, spatial_factor}.check(c.frames, c.height, c.width);
  Latent z(c.frames / temporal_factor, c.height / spatial_factor, c.width / spatial_factor, 1);
  for (int t = 0; t < c.frames; ++t)
    for (int y = 0; y < c.height; ++y)
      for (int x = 0; x < c.width; ++x)
        if (c.at(t, y, x)) z.at(t / temporal_factor, y / spatial_factor, x / spatial_factor, 0) = 1.0f;
  return z;
}

inline int control_depth(int n_blocks) { return (n_blocks + 1) / 2; }

template <class T>
struct ControlBranch {
  nn::Linear<T> embed;               // binary cell values -> token space
  std::vector<DitBlock<T>> blocks;   // copies of the first ceil(n/2) main blocks
  std::vector<nn::Linear<T>> taps;   // zero-initialized bridges

  static constexpr const char* prefix = "control";

  // Copies block weights (without LoRA deltas) from the main branch.
  static ControlBranch make(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
    ControlBranch cb;
    const int p2 = cfg.patch * cfg.patch;
    cb.embed = nn::Linear<T>::make(store, std::string(prefix) + ".embed", p2, cfg.d_model, rng);
    std::vector<std::pair<std::string, Mat<T>>> copies;
    for (int i = 0; i < control_depth(cfg.n_blocks); ++i) {
      const std::string src = "blocks." + std::to_string(i) + ".";
      for (const auto& p : store)
        if (p->name.rfind(src, 0) == 0 && p->name.find(".lora_") == std::string::npos)
          copies.emplace_back(std::string(prefix) + "." + p->name, p->value);
    }
    for (auto& [name, value] : copies) store.add(name, std::move(value));
    for (int i = 0; i < control_depth(cfg.n_blocks); ++i) {
      cb.blocks.push_back(DitBlock<T>::bind(store, std::string(prefix) + ".blocks." + std::to_string(i)));
      cb.taps.push_back(nn::Linear<T>::make(store, std::string(prefix) + ".zero." + std::to_string(i), cfg.d_model,
                                            cfg.d_model, rng, true));
    }
    return cb;
  }

  static ControlBranch bind(ParamStore<T>& store, const ModelConfig& cfg) {
    ControlBranch cb;
    cb.embed = nn::Linear<T>::bind(store, std::string(prefix) + ".embed");
    for (int i = 0; i < control_depth(cfg.n_blocks); ++i) {
      cb.blocks.push_back(DitBlock<T>::bind(store, std::string(prefix) + ".blocks." + std::to_string(i)));
      cb.taps.push_back(nn::Linear<T>::bind(store, std::string(prefix) + ".zero." + std::to_string(i)));
    }
    return cb;
  }

  // One residual per copied block, to be added to the matching main block
  // output. `x` are the main branch input tokens, `cond` is [B*N, patch^2].
  std::vector<Var<T>> operator()(Tape<T>& tp, Var<T> x, Var<T> cond, const BlockContext<T>& ctx) const {
    if (cond.rows() != x.rows() || cond.cols() != embed.in())
      throw ValidationError("control: condition grid does not match the latent token grid");
    Var<T> h = ad::add(x, embed(tp, cond));
    std::vector<Var<T>> res;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
      h = block_forward(tp, blocks[i], h, ctx);
      res.push_back(taps[i](tp, h));
    }
    return res;
  }
};

}  // namespace vfx
