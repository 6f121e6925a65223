#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "vfx/core/autograd.hpp"
#include "vfx/core/error.hpp"
#include "vfx/core/rng.hpp"

namespace vfx {

using ad::Mat;
using ad::Param;

// Owns every named parameter of a model. Insertion order is preserved; it is
// also the on-disk order of checkpoint blobs. Param addresses are stable for
// the lifetime of the store.
template <class T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, Mat<T> value, bool frozen = false) {
    if (index_.count(name)) throw ValidationError("duplicate parameter name: " + name);
    auto p = std::make_unique<Param<T>>();
    p->name = name;
    p->value = std::move(value);
    p->frozen = frozen;
    p->zero_grad();
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  Param<T>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }
  const Param<T>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : params_[it->second].get();
  }

  Param<T>& at(const std::string& name) {
    Param<T>* p = find(name);
    if (!p) throw ValidationError("unknown parameter: " + name);
    return *p;
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  // Drops every parameter whose name starts with `prefix` (or matches the
  // predicate); returns the count.
  std::size_t remove_prefix(const std::string& prefix) {
    return remove_if([&](const std::string& n) { return n.rfind(prefix, 0) == 0; });
  }

  template <class Pred>
  std::size_t remove_if(Pred pred) {
    std::vector<std::unique_ptr<Param<T>>> kept;
    std::size_t removed = 0;
    for (auto& p : params_) {
      if (pred(p->name))
        ++removed;
      else
        kept.push_back(std::move(p));
    }
    params_ = std::move(kept);
    index_.clear();
    for (std::size_t i = 0; i < params_.size(); ++i) index_[params_[i]->name] = i;
    return removed;
  }

  std::size_t size() const { return params_.size(); }
  Param<T>& operator[](std::size_t i) { return *params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return *params_[i]; }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  std::int64_t count(bool trainable_only = false) const {
    std::int64_t n = 0;
    for (const auto& p : params_)
      if (!trainable_only || !p->frozen) n += p->size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->zero_grad();
  }

  void freeze_all() {
    for (auto& p : params_) p->frozen = true;
  }

 private:
  std::vector<std::unique_ptr<Param<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

// FNV-1a over the float32 image of every parameter matching the filter.
template <class T, class Pred>
std::uint64_t checksum(const ParamStore<T>& store, Pred pred) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : store) {
    if (!pred(*p)) continue;
    for (ad::Index i = 0; i < p->value.size(); ++i) {
      const float f = static_cast<float>(p->value.data()[i]);
      std::uint32_t bits;
      std::memcpy(&bits, &f, sizeof bits);
      for (int b = 0; b < 4; ++b) {
        h ^= (bits >> (8 * b)) & 0xFFu;
        h *= 0x100000001b3ULL;
      }
    }
  }
  return h;
}

template <class T>
Mat<T> randn(ad::Index rows, ad::Index cols, double stddev, Rng& rng) {
  Mat<T> m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(stddev * rng.normal());
  return m;
}

template <class T>
Mat<T> zeros(ad::Index rows, ad::Index cols) {
  return Mat<T>::Zero(rows, cols);
}

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay Adam. Only parameters with frozen == false move.
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  void step(ParamStore<T>& store, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& up : store) {
      Param<T>& p = *up;
      if (p.frozen) continue;
      auto& s = state_[p.name];
      if (s.m.rows() != p.value.rows() || s.m.cols() != p.value.cols()) {
        s.m.setZero(p.value.rows(), p.value.cols());
        s.v.setZero(p.value.rows(), p.value.cols());
      }
      s.m = T(cfg_.beta1) * s.m + T(1 - cfg_.beta1) * p.grad;
      s.v = T(cfg_.beta2) * s.v + T(1 - cfg_.beta2) * p.grad.cwiseProduct(p.grad);
      p.value *= T(1 - lr * cfg_.weight_decay);
      const T step = T(lr / bc1);
      const T inv_bc2 = T(1.0 / bc2);
      const T eps = T(cfg_.eps);
      p.value.array() -= step * s.m.array() / ((s.v.array() * inv_bc2).sqrt() + eps);
    }
  }

  std::int64_t steps_taken() const { return t_; }

 private:
  struct Moments {
    Mat<T> m, v;
  };
  AdamWConfig cfg_;
  std::int64_t t_ = 0;
  std::map<std::string, Moments> state_;
};

template <class T>
double grad_norm(const ParamStore<T>& store) {
  double s = 0;
  for (const auto& p : store)
    if (!p->frozen) s += static_cast<double>(p->grad.squaredNorm());
  return std::sqrt(s);
}

template <class T>
void scale_grads(ParamStore<T>& store, double factor) {
  for (auto& p : store)
    if (!p->frozen) p->grad *= T(factor);
}

}  // namespace vfx
