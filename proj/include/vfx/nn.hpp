#pragma once

// Building blocks shared by the backbone, the conditioning heads and the
// control branch.

#include <cmath>
#include <optional>
#include <string>

#include "vfx/core/autograd.hpp"
#include "vfx/core/params.hpp"

namespace vfx::nn {

using ad::Index;
using ad::Tape;
using ad::Var;

// Low-rank update W' = W + alpha * A * B^T for a weight W of shape
// [in, out]; A is [in, rank], B is [out, rank] and starts at zero.
template <class T>
struct LoraAdapter {
  Param<T>* a = nullptr;
  Param<T>* b = nullptr;
  double alpha = 1.0;
  int rank = 0;
};

// y = x W + b, with W stored as [in, out].
template <class T>
struct Linear {
  Param<T>* weight = nullptr;
  Param<T>* bias = nullptr;
  std::optional<LoraAdapter<T>> lora;

  Index in() const { return weight->value.rows(); }
  Index out() const { return weight->value.cols(); }

  static Linear make(ParamStore<T>& store, const std::string& name, Index in, Index out, Rng& rng,
                     bool zero_init = false, bool with_bias = true) {
    Linear l;
    const double std = zero_init ? 0.0 : 1.0 / std::sqrt(static_cast<double>(in));
    l.weight = &store.add(name + ".weight", zero_init ? zeros<T>(in, out) : randn<T>(in, out, std, rng));
    if (with_bias) l.bias = &store.add(name + ".bias", zeros<T>(1, out));
    return l;
  }

  // Rebinds to parameters already present in the store (checkpoint load).
  static Linear bind(ParamStore<T>& store, const std::string& name) {
    Linear l;
    l.weight = &store.at(name + ".weight");
    l.bias = store.find(name + ".bias");
    return l;
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    Var<T> y = ad::matmul(x, tape.param(*weight));
    if (bias) y = ad::add_row(y, tape.param(*bias));
    if (lora) {
      Var<T> low = ad::matmul(x, tape.param(*lora->a));
      Var<T> delta = ad::matmul_nt(low, tape.param(*lora->b));
      y = ad::add(y, ad::scale(delta, static_cast<T>(lora->alpha)));
    }
    return y;
  }

  // Effective weight including the low-rank update.
  Mat<T> effective_weight() const {
    Mat<T> w = weight->value;
    if (lora) w += static_cast<T>(lora->alpha) * lora->a->value * lora->b->value.transpose();
    return w;
  }
};

// Two-layer perceptron with SiLU after each hidden layer and a configurable
// zero-initialized output layer; used for the conditioning heads.
template <class T>
struct Mlp {
  Linear<T> l1, l2, l3;

  static Mlp make(ParamStore<T>& store, const std::string& name, Index in, Index hidden, Index out, Rng& rng,
                  bool zero_out = true) {
    Mlp m;
    m.l1 = Linear<T>::make(store, name + ".fc1", in, hidden, rng);
    m.l2 = Linear<T>::make(store, name + ".fc2", hidden, hidden, rng);
    m.l3 = Linear<T>::make(store, name + ".fc3", hidden, out, rng, zero_out);
    return m;
  }

  static Mlp bind(ParamStore<T>& store, const std::string& name) {
    return Mlp{Linear<T>::bind(store, name + ".fc1"), Linear<T>::bind(store, name + ".fc2"),
               Linear<T>::bind(store, name + ".fc3")};
  }

  Var<T> operator()(Tape<T>& tape, Var<T> x) const {
    Var<T> h = ad::silu(l1(tape, x));
    h = ad::silu(l2(tape, h));
    return l3(tape, h);
  }
};

// Sinusoidal features of a scalar: [sin(x w_0..w_{h-1}), cos(x w_0..)] with
// w_i = base^(-i/h), h = dim/2.
template <class T>
Mat<T> sinusoid(const std::vector<double>& xs, Index dim, double base = 10000.0) {
  const Index half = dim / 2;
  Mat<T> m = Mat<T>::Zero(static_cast<Index>(xs.size()), dim);
  for (std::size_t r = 0; r < xs.size(); ++r)
    for (Index i = 0; i < half; ++i) {
      const double w = std::pow(base, -static_cast<double>(i) / static_cast<double>(half));
      m(static_cast<Index>(r), i) = static_cast<T>(std::sin(xs[r] * w));
      m(static_cast<Index>(r), half + i) = static_cast<T>(std::cos(xs[r] * w));
    }
  return m;
}

}  // namespace vfx::nn
