#pragma once

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "ftmtl/rng.hpp"
#include "ftmtl/tensor.hpp"

namespace ftmtl {

/// A named learnable tensor plus its momentum buffer.
template <typename S>
struct Parameter {
  std::string name;
  Tensor<S> tensor;
  ArrayX<S> velocity;

  Parameter(std::string n, Shape shape) : name(std::move(n)), tensor(shape) {
    tensor.set_requires_grad(true);
    velocity = ArrayX<S>::Zero(tensor.size());
  }
};

/// Registry of parameters in registration order; names must be unique.
template <typename S>
class ParamStore {
 public:
  Parameter<S>& add(const std::string& name, Shape shape) {
    if (by_name_.count(name)) throw std::invalid_argument("ParamStore: duplicate parameter name " + name);
    auto p = std::make_shared<Parameter<S>>(name, std::move(shape));
    params_.push_back(p);
    by_name_[name] = p;
    return *p;
  }

  const std::vector<std::shared_ptr<Parameter<S>>>& all() const { return params_; }

  Parameter<S>& at(const std::string& name) {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("ParamStore: unknown parameter " + name);
    return *it->second;
  }

  bool has(const std::string& name) const { return by_name_.count(name) != 0; }
  std::size_t count() const { return params_.size(); }

 private:
  std::vector<std::shared_ptr<Parameter<S>>> params_;
  std::map<std::string, std::shared_ptr<Parameter<S>>> by_name_;
};

/// v <- momentum*v - lr*g ; w <- w + v ; gradients cleared afterwards.
template <typename S>
void sgd_momentum_step(const std::vector<std::shared_ptr<Parameter<S>>>& params, double lr, double momentum) {
  for (const auto& p : params) {
    if (p->tensor.has_grad()) {
      p->velocity = static_cast<S>(momentum) * p->velocity - static_cast<S>(lr) * p->tensor.grad();
    } else {
      p->velocity *= static_cast<S>(momentum);
    }
    p->tensor.value() += p->velocity;
    p->tensor.zero_grad();
  }
}

template <typename S>
void zero_all_grads(const std::vector<std::shared_ptr<Parameter<S>>>& params) {
  for (const auto& p : params) p->tensor.zero_grad();
}

// ---------------------------------------------------------------------------
// Layer modules (thin parameter holders over the free-function ops)
// ---------------------------------------------------------------------------

template <typename S>
struct Conv2dLayer {
  Parameter<S>*weight = nullptr, *bias = nullptr;
  int stride = 1, pad = 0;

  Conv2dLayer() = default;
  Conv2dLayer(ParamStore<S>& store, const std::string& name, int cin, int cout, int k, int stride_, int pad_)
      : stride(stride_), pad(pad_) {
    weight = &store.add(name + ".weight", {cout, cin, k, k});
    bias = &store.add(name + ".bias", {cout});
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return conv2d(x, weight->tensor, bias->tensor, stride, pad); }
};

template <typename S>
struct ConvTranspose2dLayer {
  Parameter<S>*weight = nullptr, *bias = nullptr;

  ConvTranspose2dLayer() = default;
  ConvTranspose2dLayer(ParamStore<S>& store, const std::string& name, int cin, int cout, int k = 2) {
    weight = &store.add(name + ".weight", {cout, cin, k, k});
    bias = &store.add(name + ".bias", {cout});
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return conv_transpose2d(x, weight->tensor, bias->tensor, 2); }
};

template <typename S>
struct LinearLayer {
  Parameter<S>*weight = nullptr, *bias = nullptr;

  LinearLayer() = default;
  LinearLayer(ParamStore<S>& store, const std::string& name, int in, int out) {
    weight = &store.add(name + ".weight", {out, in});
    bias = &store.add(name + ".bias", {out});
  }

  Tensor<S> operator()(const Tensor<S>& x) const { return linear(x, weight->tensor, bias->tensor); }
};

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// He-style init: N(0, sqrt(2 / fan_in)) on weights, zero biases.
template <typename S>
void init_he(Parameter<S>& p, Rng& rng) {
  const Shape& s = p.tensor.shape();
  long fan_in = 1;
  for (std::size_t i = 1; i < s.size(); ++i) fan_in *= s[i];
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (long i = 0; i < p.tensor.size(); ++i) p.tensor.value()[i] = static_cast<S>(rng.normal(0.0, std));
}

/// Plain N(0, stddev) init.
template <typename S>
void init_normal(Parameter<S>& p, Rng& rng, double stddev) {
  for (long i = 0; i < p.tensor.size(); ++i) p.tensor.value()[i] = static_cast<S>(rng.normal(0.0, stddev));
}

template <typename S>
void init_zero(Parameter<S>& p) {
  p.tensor.value().setZero();
}

}  // namespace ftmtl
