#pragma once

// Conditioning signals: toy text tokens, timestamp tokens, the latent-frame
// temporal mask and its timestep-space embedding, and the spatial condition.

#include <algorithm>
#include <cctype>
#include <sstream>
#include <string>
#include <vector>

#include "vfx/core/error.hpp"
#include "vfx/dataset.hpp"
#include "vfx/nn.hpp"

namespace vfx {

using ad::Index;

inline std::vector<std::string> tokenize(const std::string& prompt) {
  std::istringstream in(prompt);
  std::vector<std::string> words;
  for (std::string w; in >> w;) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    words.push_back(w);
  }
  return words;
}

// Frozen hash-seeded embedding per whitespace token. Shorter prompts are
// zero-padded to `length` rows, longer ones truncated.
template <class T>
Mat<T> encode_text(const std::string& prompt, Index dim, Index length) {
  const auto words = tokenize(prompt);
  if (words.empty()) throw ValidationError("empty prompt");
  require(dim >= 1 && length >= 1, "encode_text: dim and length must be positive");
  Mat<T> out = Mat<T>::Zero(length, dim);
  for (Index i = 0; i < std::min<Index>(length, static_cast<Index>(words.size())); ++i) {
    Rng rng(fnv1a(words[static_cast<std::size_t>(i)]));
    for (Index j = 0; j < dim; ++j) out(i, j) = static_cast<T>(rng.normal());
  }
  return out;
}

inline void check_normalized_range(double start, double end) {
  if (!(start >= 0.0 && start < end && end <= 1.0))
    throw ValidationError("timestamp range must satisfy 0 <= start < end <= 1, got " + std::to_string(start) + ", " +
                          std::to_string(end));
}

// Maps normalized (start, end) to M tokens of width d_tau.
template <class T>
struct TimestampEncoder {
  nn::Mlp<T> mlp;
  Index tokens = 4;
  Index dim = 32;

  static constexpr const char* prefix = "timestamp_encoder";

  static TimestampEncoder make(ParamStore<T>& store, Index tokens, Index dim, Index hidden, Rng& rng) {
    return {nn::Mlp<T>::make(store, prefix, 2, hidden, tokens * dim, rng), tokens, dim};
  }
  static TimestampEncoder bind(ParamStore<T>& store, Index tokens, Index dim) {
    return {nn::Mlp<T>::bind(store, prefix), tokens, dim};
  }

  // `ranges` is [B, 2]; returns [B * M, d_tau], sample-major.
  ad::Var<T> operator()(ad::Tape<T>& tape, ad::Var<T> ranges) const {
    require(ranges.cols() == 2, "timestamp encoder: expected [B, 2] input");
    for (Index b = 0; b < ranges.rows(); ++b)
      check_normalized_range(static_cast<double>(ranges.value()(b, 0)), static_cast<double>(ranges.value()(b, 1)));
    ad::Var<T> flat = mlp(tape, ranges);
    return ad::reshape(flat, ranges.rows() * tokens, dim);
  }
};

// Per-sample [M + L, d] sequences: timestamp tokens first, then text tokens.
template <class T>
ad::Var<T> concat_condition_tokens(ad::Var<T> ts, ad::Var<T> text, Index batch) {
  if (ts.cols() != text.cols()) throw ValidationError("condition tokens: d_tau mismatch between timestamp and text tokens");
  require(batch >= 1 && ts.rows() % batch == 0 && text.rows() % batch == 0, "condition tokens: batch layout mismatch");
  const Index m = ts.rows() / batch, l = text.rows() / batch;
  std::vector<ad::Var<T>> parts;
  for (Index b = 0; b < batch; ++b) {
    parts.push_back(ad::slice_rows(ts, b * m, m));
    parts.push_back(ad::slice_rows(text, b * l, l));
  }
  return ad::concat_rows(parts);
}

// One entry per latent frame: 1 iff the frame's pixel span overlaps the
// motion interval.
inline std::vector<float> build_temporal_mask(const TimestampAnnotation& ann, int latent_frames, int temporal_factor) {
  ann.validate();
  require(latent_frames >= 1 && temporal_factor >= 1, "temporal mask: sizes must be positive");
  std::vector<float> m(latent_frames, 0.0f);
  for (int g = 0; g < latent_frames; ++g) {
    const int lo = g * temporal_factor, hi = lo + temporal_factor;
    m[g] = (lo < ann.t_end && hi > ann.t_start) ? 1.0f : 0.0f;
  }
  return m;
}

// Projects each temporal-mask entry into the timestep-embedding space.
template <class T>
struct TemporalMaskEmbedder {
  nn::Mlp<T> mlp;

  static constexpr const char* prefix = "temporal_mask";

  static TemporalMaskEmbedder make(ParamStore<T>& store, Index d_emb, Index hidden, Rng& rng) {
    return {nn::Mlp<T>::make(store, prefix, 1, hidden, d_emb, rng)};
  }
  static TemporalMaskEmbedder bind(ParamStore<T>& store) { return {nn::Mlp<T>::bind(store, prefix)}; }

  // `mask` is [rows, 1]; returns [rows, d_emb].
  ad::Var<T> operator()(ad::Tape<T>& tape, ad::Var<T> mask) const {
    require(mask.cols() == 1, "temporal mask embedder: expected a column of mask entries");
    return mlp(tape, mask);
  }
};

using SpatialCondition = MaskSequence;

// Keeps the mask before the motion start and zeroes the rest.
inline SpatialCondition build_spatial_condition(const MaskSequence& mask, const TimestampAnnotation& ann) {
  ann.validate();
  if (mask.frames != ann.total_frames) throw ValidationError("spatial condition: mask has " + std::to_string(mask.frames) +
                                                             " frames but annotation T=" + std::to_string(ann.total_frames));
  SpatialCondition c(mask.frames, mask.height, mask.width);
  c.instance_id = mask.instance_id;
  const std::size_t fs = static_cast<std::size_t>(mask.height) * mask.width;
  std::copy(mask.data.begin(), mask.data.begin() + ann.t_start * fs, c.data.begin());
  return c;
}

}  // namespace vfx
