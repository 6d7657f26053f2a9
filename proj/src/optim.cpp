#include "arra/optim.hpp"

#include <algorithm>
#include <cmath>

#include "arra/error.hpp"

namespace arra::num {

nlohmann::json AdamWConfig::to_json() const {
  return {{"lr", lr},
          {"beta1", beta1},
          {"beta2", beta2},
          {"eps", eps},
          {"weight_decay", weight_decay},
          {"clip_norm", clip_norm},
          {"warmup_steps", warmup_steps}};
}

AdamWConfig AdamWConfig::from_json(const nlohmann::json& j) {
  AdamWConfig c;
  c.lr = j.at("lr").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.eps = j.at("eps").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.clip_norm = j.at("clip_norm").get<double>();
  c.warmup_steps = j.at("warmup_steps").get<int64_t>();
  return c;
}

double AdamW::current_lr() const {
  const int64_t next = t_ + 1;
  if (config_.warmup_steps > 0 && next < config_.warmup_steps)
    return config_.lr * static_cast<double>(next) / static_cast<double>(config_.warmup_steps);
  return config_.lr;
}

void AdamW::step(Params& params, const std::map<std::string, std::vector<double>>& grads) {
  const double lr = current_lr();
  ++t_;

  double sq_norm = 0.0;
  for (const auto& [name, p] : params) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ConfigError("optimizer: no gradient for parameter '" + name + "'");
    if (it->second.size() != static_cast<size_t>(p.numel()))
      throw ShapeError("optimizer: gradient size mismatch for '" + name + "'");
    for (double g : it->second) sq_norm += g * g;
  }
  if (!std::isfinite(sq_norm)) throw NumericalError("optimizer: non-finite gradient norm");
  double scale = 1.0;
  if (config_.clip_norm > 0.0) {
    const double norm = std::sqrt(sq_norm);
    if (norm > config_.clip_norm) scale = config_.clip_norm / norm;
  }

  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    const auto& g = grads.at(name);
    auto& m = m_[name];
    auto& v = v_[name];
    if (m.empty()) m.assign(g.size(), 0.0);
    if (v.empty()) v.assign(g.size(), 0.0);
    const bool decay = p.shape().size() >= 2;
    auto data = p.mutable_data();
    for (size_t i = 0; i < g.size(); ++i) {
      const double gi = g[i] * scale;
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gi;
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gi * gi;
      const double update = (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
      if (decay) data[i] -= lr * config_.weight_decay * data[i];
      data[i] -= lr * update;
    }
    p.round_to_dtype();
  }
}

void AdamW::save_state(Container& out) const {
  out.meta["optimizer"] = {{"t", t_}};
  for (const auto& [name, m] : m_) {
    out.add("opt/m/" + name, Tensor::from_data({static_cast<int64_t>(m.size())}, m, Dtype::f64));
    out.add("opt/v/" + name, Tensor::from_data({static_cast<int64_t>(v_.at(name).size())}, v_.at(name), Dtype::f64));
  }
}

void AdamW::load_state(const Container& in, const Params& params) {
  if (!in.meta.contains("optimizer")) throw IntegrityError("optimizer: checkpoint has no optimizer state");
  t_ = in.meta.at("optimizer").at("t").get<int64_t>();
  m_.clear();
  v_.clear();
  for (const auto& [name, p] : params) {
    const Tensor& m = in.at("opt/m/" + name);
    const Tensor& v = in.at("opt/v/" + name);
    if (m.numel() != p.numel() || v.numel() != p.numel())
      throw IntegrityError("optimizer: state size mismatch for '" + name + "'");
    m_[name].assign(m.data().begin(), m.data().end());
    v_[name].assign(v.data().begin(), v.data().end());
  }
}

}  // namespace arra::num
