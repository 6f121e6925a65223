#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "vfx/vfx.hpp"

namespace vfx::test {

// Tiny model for gradient checks and fast property tests: 8 frames of
// 16x16 pixels -> 2 x 2 x 2 latent grid, 8 tokens.
inline ModelConfig tiny_config() {
  ModelConfig c;
  c.frames = 8;
  c.height = 16;
  c.width = 16;
  c.channels = 3;
  c.d_model = 16;
  c.n_blocks = 2;
  c.n_heads = 2;
  c.d_tau = 16;
  c.text_len = 3;
  c.cond_hidden = 16;
  c.timestamp_tokens = 4;
  return c;
}

// Smoke geometry used by the acceptance runs: 32 frames of 32x32 pixels.
inline ModelConfig smoke_config() {
  ModelConfig c;
  c.frames = 32;
  c.height = 32;
  c.width = 32;
  c.d_model = 32;
  c.n_blocks = 2;
  c.n_heads = 2;
  c.d_tau = 32;
  c.text_len = 4;
  c.prediction = Prediction::sample;
  return c;
}

template <class T>
void perturb(ParamStore<T>& store, double stddev, Rng& rng) {
  for (auto& p : store)
    for (ad::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += static_cast<T>(stddev * rng.normal());
}

// Random forward input matching the model config.
template <class T>
ForwardBatch<T> random_batch(const ModelConfig& cfg, ad::Index batch, Rng& rng) {
  ForwardBatch<T> in;
  const ad::Index N = cfg.tokens();
  in.batch = batch;
  in.x = randn<T>(batch * N, cfg.token_dim(), 1.0, rng);
  in.reference = randn<T>(batch * N, cfg.token_dim(), 0.5, rng);
  for (ad::Index b = 0; b < batch; ++b) in.steps.push_back(static_cast<int>(rng.uniform_int(0, cfg.diffusion_steps - 1)));
  in.text = randn<T>(batch * cfg.text_len, cfg.d_tau, 1.0, rng);
  in.ranges.resize(batch, 2);
  for (ad::Index b = 0; b < batch; ++b) {
    const double s = rng.uniform(0.0, 0.6);
    in.ranges(b, 0) = static_cast<T>(s);
    in.ranges(b, 1) = static_cast<T>(rng.uniform(s + 0.1, 1.0));
  }
  in.temporal_mask.resize(batch * cfg.latent_frames(), 1);
  for (ad::Index i = 0; i < in.temporal_mask.rows(); ++i) in.temporal_mask(i, 0) = static_cast<T>(rng.uniform_int(0, 1));
  in.control.resize(batch * N, cfg.patch * cfg.patch);
  for (ad::Index i = 0; i < in.control.size(); ++i) in.control.data()[i] = static_cast<T>(rng.uniform_int(0, 1));
  return in;
}

struct GradCheckResult {
  std::string name;
  ad::Index index = 0;
  double analytic = 0;
  double numeric = 0;
  double rel_error = 0;
};

// The floor keeps structurally zero gradients (e.g. key biases under the
// softmax) from turning finite-difference round-off into large ratios.
inline double relative_error(double a, double n) {
  const double scale = std::max({std::abs(a), std::abs(n), 1e-6});
  return std::abs(a - n) / scale;
}

// Central differences on selected (param, flat index) entries of a scalar
// loss built on a fresh tape.
inline std::vector<GradCheckResult> grad_check(ParamStore<double>& store,
                                               const std::function<ad::Var<double>(ad::Tape<double>&)>& loss,
                                               const std::vector<std::pair<std::string, ad::Index>>& entries,
                                               double h = 1e-5) {
  store.zero_grad();
  {
    ad::Tape<double> tape;
    tape.backward(loss(tape));
  }
  auto eval = [&] {
    ad::Tape<double> tape(false);
    return loss(tape).value()(0, 0);
  };
  std::vector<GradCheckResult> out;
  for (const auto& [name, idx] : entries) {
    Param<double>& p = store.at(name);
    const double orig = p.value.data()[idx];
    p.value.data()[idx] = orig + h;
    const double up = eval();
    p.value.data()[idx] = orig - h;
    const double down = eval();
    p.value.data()[idx] = orig;
    GradCheckResult r;
    r.name = name;
    r.index = idx;
    r.analytic = p.grad.data()[idx];
    r.numeric = (up - down) / (2 * h);
    r.rel_error = relative_error(r.analytic, r.numeric);
    out.push_back(r);
  }
  return out;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("vfx_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace vfx::test
