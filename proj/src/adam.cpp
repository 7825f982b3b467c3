#include "slrf/adam.hpp"

#include <cmath>

#include "slrf/parallel.hpp"

namespace slrf {

Array& ParamStore::create(const std::string& name, std::vector<int64_t> shape,
                          Dtype dt) {
  return add(name, Array::zeros(std::move(shape), dt));
}

Array& ParamStore::add(const std::string& name, Array value) {
  if (has(name)) fail_usage("duplicate parameter name: " + name);
  value.set_requires_grad(true);
  entries_.push_back(Entry{name, std::move(value), {}, {}});
  return entries_.back().value;
}

bool ParamStore::has(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return true;
  return false;
}

Array& ParamStore::get(const std::string& name) {
  for (auto& e : entries_)
    if (e.name == name) return e.value;
  fail_usage("unknown parameter: " + name);
}

const Array& ParamStore::get(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return e.value;
  fail_usage("unknown parameter: " + name);
}

int64_t ParamStore::total_params() const {
  int64_t n = 0;
  for (const auto& e : entries_) n += e.value.numel();
  return n;
}

double AdamState::effective_lr() const {
  int64_t decays = cfg_.decay_every > 0 ? step_ / cfg_.decay_every : 0;
  return cfg_.lr * std::pow(cfg_.decay_factor, static_cast<double>(decays));
}

namespace {

template <class T>
void adam_kernel(T* p, T* m, T* v, const T* g, int64_t n, double b1, double b2,
                 double lr_t, double eps, double bc1, double bc2) {
  ThreadPool::instance().parallel_for(n, 1 << 14, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i) {
      double gi = g[i];
      double mi = b1 * m[i] + (1.0 - b1) * gi;
      double vi = b2 * v[i] + (1.0 - b2) * gi * gi;
      m[i] = static_cast<T>(mi);
      v[i] = static_cast<T>(vi);
      double mhat = mi / bc1;
      double vhat = vi / bc2;
      p[i] = static_cast<T>(p[i] - lr_t * mhat / (std::sqrt(vhat) + eps));
    }
  });
}

}  // namespace

void AdamState::step(ParamStore& params, const Gradients& grads) {
  // validate first so a bad gradient leaves every parameter untouched
  for (auto& e : params.entries()) {
    if (!grads.has(e.value)) continue;
    if (!grads.get(e.value).all_finite())
      fail_numeric("non-finite gradient for parameter '" + e.name +
                   "'; update aborted");
  }

  ++step_;
  double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  double lr_t = effective_lr();

  for (auto& e : params.entries()) {
    if (!e.m.defined()) {
      e.m = Array::zeros(e.value.shape(), e.value.dtype());
      e.v = Array::zeros(e.value.shape(), e.value.dtype());
    }
    Array g = grads.get_or_zeros(e.value);
    int64_t n = e.value.numel();
    if (e.value.dtype() == Dtype::F32) {
      adam_kernel<float>(e.value.data<float>().data(), e.m.data<float>().data(),
                         e.v.data<float>().data(), g.cdata<float>().data(), n,
                         cfg_.beta1, cfg_.beta2, lr_t, cfg_.eps, bc1, bc2);
    } else {
      adam_kernel<double>(e.value.data<double>().data(),
                          e.m.data<double>().data(), e.v.data<double>().data(),
                          g.cdata<double>().data(), n, cfg_.beta1, cfg_.beta2,
                          lr_t, cfg_.eps, bc1, bc2);
    }
  }
}

}  // namespace slrf
