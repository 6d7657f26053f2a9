#pragma once

#include <map>
#include <string>
#include <vector>

#include "arra/container.hpp"
#include "arra/tensor.hpp"

namespace arra::num {

struct AdamWConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;  // decoupled; applied to tensors of rank >= 2 only
  double clip_norm = 1.0;      // global gradient norm; <= 0 disables
  int64_t warmup_steps = 100;  // linear ramp from 0 to lr

  nlohmann::json to_json() const;
  static AdamWConfig from_json(const nlohmann::json& j);
};

// AdamW with global-norm clipping and linear warmup. Moments are kept in
// double regardless of parameter dtype and serialized as f64, so an
// interrupted-and-resumed run is bitwise identical to an uninterrupted one.
class AdamW {
 public:
  explicit AdamW(AdamWConfig config) : config_(config) {}

  // updates params in place (map order, deterministic); grads keyed like params
  void step(Params& params, const std::map<std::string, std::vector<double>>& grads);

  int64_t steps_taken() const { return t_; }
  double current_lr() const;  // lr after warmup scaling at the next step
  const AdamWConfig& config() const { return config_; }

  void save_state(Container& out) const;
  void load_state(const Container& in, const Params& params);

 private:
  AdamWConfig config_;
  int64_t t_ = 0;
  std::map<std::string, std::vector<double>> m_, v_;
};

}  // namespace arra::num
