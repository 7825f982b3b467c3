#pragma once

#include <string>
#include <vector>

#include "slrf/array.hpp"

namespace slrf {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double decay_factor = 0.5;   // applied every decay_every steps
  int64_t decay_every = 20000;
};

// Named trainable parameters plus the matching Adam moment accumulators.
class ParamStore {
 public:
  Array& create(const std::string& name, std::vector<int64_t> shape, Dtype dt);
  Array& add(const std::string& name, Array value);

  bool has(const std::string& name) const;
  Array& get(const std::string& name);
  const Array& get(const std::string& name) const;

  struct Entry {
    std::string name;
    Array value;
    Array m, v;  // Adam moments, lazily allocated on first step
  };

  std::vector<Entry>& entries() { return entries_; }
  const std::vector<Entry>& entries() const { return entries_; }
  int64_t total_params() const;

 private:
  std::vector<Entry> entries_;
};

class AdamState {
 public:
  explicit AdamState(AdamConfig cfg) : cfg_(cfg) {}

  int64_t step_count() const { return step_; }
  void set_step_count(int64_t s) { step_ = s; }
  double effective_lr() const;  // after the decay schedule
  const AdamConfig& config() const { return cfg_; }

  // One update over every entry, gradients looked up per parameter; missing
  // gradients count as zero. A non-finite gradient aborts before touching
  // any parameter and names the offender.
  void step(ParamStore& params, const Gradients& grads);

 private:
  AdamConfig cfg_;
  int64_t step_ = 0;
};

}  // namespace slrf
