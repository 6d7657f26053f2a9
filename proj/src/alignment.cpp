#include "arra/alignment.hpp"

#include <cmath>

#include "arra/error.hpp"

namespace arra::align {

using num::Tensor;

std::string to_string(Objective o) { return o == Objective::cosine ? "cosine" : "mse"; }
std::string to_string(Projection p) { return p == Projection::mlp2 ? "mlp2" : "maxpool"; }

Objective objective_from_string(const std::string& s) {
  if (s == "cosine") return Objective::cosine;
  if (s == "mse") return Objective::mse;
  throw ConfigError("unknown alignment objective '" + s + "'");
}

Projection projection_from_string(const std::string& s) {
  if (s == "mlp2") return Projection::mlp2;
  if (s == "maxpool") return Projection::maxpool;
  throw ConfigError("unknown projection '" + s + "'");
}

void AlignmentConfig::validate(int model_layers) const {
  if (lambda < 0.0) throw ConfigError("lambda must be nonnegative");
  if (depth < 1 || depth > model_layers)
    throw ConfigError("alignment depth " + std::to_string(depth) + " outside [1, " + std::to_string(model_layers) +
                      "]");
  if (aggregation == found::AggMode::cls && encoder == found::EncoderKind::vision_only)
    throw ConfigError("cls aggregation needs the cross-modal encoder");
  if (aggregation == found::AggMode::concat && encoder == found::EncoderKind::vision_only)
    throw ConfigError("concat aggregation needs the cross-modal encoder");
}

nlohmann::json AlignmentConfig::to_json() const {
  return {{"mechanism", ar::to_string(mechanism)},
          {"aggregation", found::to_string(aggregation)},
          {"encoder", found::to_string(encoder)},
          {"depth", depth},
          {"lambda", lambda},
          {"objective", to_string(objective)},
          {"projection", to_string(projection)}};
}

AlignmentConfig AlignmentConfig::from_json(const nlohmann::json& j) {
  AlignmentConfig c;
  c.mechanism = ar::mechanism_from_string(j.at("mechanism").get<std::string>());
  c.aggregation = found::agg_mode_from_string(j.at("aggregation").get<std::string>());
  c.encoder = found::encoder_kind_from_string(j.at("encoder").get<std::string>());
  c.depth = j.at("depth").get<int>();
  c.lambda = j.at("lambda").get<double>();
  c.objective = objective_from_string(j.at("objective").get<std::string>());
  c.projection = projection_from_string(j.at("projection").get<std::string>());
  return c;
}

std::vector<int64_t> select_alignment_positions(const ar::TokenSequence& seq, ar::Mechanism mechanism) {
  std::vector<int64_t> out;
  if (mechanism == ar::Mechanism::none) return out;
  if (mechanism == ar::Mechanism::rep) {
    for (int64_t t = 0; t < seq.size(); ++t)
      if (seq.roles[static_cast<size_t>(t)] == ar::Role::rep) {
        out.push_back(t);
        return out;
      }
    throw ConfigError("rep mechanism on a sequence without a <REP> token");
  }
  for (int64_t t = 0; t + 1 < seq.size(); ++t)
    if (seq.roles[static_cast<size_t>(t + 1)] == ar::Role::image) out.push_back(t);
  return out;
}

void init_projection(num::Params& params, Projection kind, int h_model, int d_out, num::Rng& rng, num::Dtype dtype) {
  if (h_model <= 0 || d_out <= 0) throw ConfigError("projection widths must be positive");
  if (kind == Projection::maxpool) {
    if (h_model % d_out != 0)
      throw ConfigError("maxpool projection needs h_model divisible by d_out, got " + std::to_string(h_model) +
                        " / " + std::to_string(d_out));
    return;  // parameter-free
  }
  const double s1 = 1.0 / std::sqrt(static_cast<double>(h_model));
  params["proj/w1"] = Tensor::randn({h_model, h_model}, rng, "init/proj/w1", s1, dtype, true);
  params["proj/b1"] = Tensor::zeros({1, h_model}, dtype, true);
  params["proj/w2"] = Tensor::randn({h_model, d_out}, rng, "init/proj/w2", s1, dtype, true);
  params["proj/b2"] = Tensor::zeros({1, d_out}, dtype, true);
}

Tensor project(const Tensor& rows, const num::Params& p, Projection kind, int d_out) {
  if (rows.dim(1) <= 0) throw ShapeError("project: empty rows");
  if (kind == Projection::maxpool) {
    if (rows.dim(1) % d_out != 0)
      throw ConfigError("maxpool projection needs width divisible by " + std::to_string(d_out) + ", got " +
                        num::Tensor::shape_str(rows.shape()));
    return maxpool_cols(rows, rows.dim(1) / d_out);
  }
  Tensor mid = gelu(add_rowvec(matmul(rows, p.at("proj/w1")), p.at("proj/b1")));
  Tensor out = add_rowvec(matmul(mid, p.at("proj/w2")), p.at("proj/b2"));
  if (out.dim(1) != d_out)
    throw ShapeError("project: head emits width " + std::to_string(out.dim(1)) + ", expected " +
                     std::to_string(d_out));
  return out;
}

Tensor gva_loss(const ar::ForwardOutput& fwd, const std::vector<int64_t>& positions, const Tensor& f_gf,
                const AlignmentConfig& config, const num::Params& p) {
  if (config.mechanism == ar::Mechanism::none)
    throw ConfigError("gva_loss is undefined for mechanism none");
  if (positions.empty()) throw ConfigError("gva_loss: empty position set");
  if (config.depth < 1 || config.depth >= static_cast<int>(fwd.hidden.size()))
    throw ConfigError("gva_loss: depth " + std::to_string(config.depth) + " outside the recorded hidden states");
  if (f_gf.dim(0) != 1) throw ShapeError("gva_loss: f_gf must be a single row");

  Tensor h = select_rows(fwd.hidden[static_cast<size_t>(config.depth)], positions);
  Tensor fa = project(h, p, config.projection, static_cast<int>(f_gf.dim(1)));
  if (fa.dim(1) != f_gf.dim(1))
    throw ShapeError("gva_loss: projected width " + std::to_string(fa.dim(1)) + " vs target " +
                     std::to_string(f_gf.dim(1)));
  if (config.objective == Objective::cosine) {
    Tensor cos = cosine_rows(fa, f_gf);
    return mean_all(sub(Tensor::full({fa.dim(0), 1}, 1.0, fa.dtype()), cos));
  }
  Tensor diff = add_rowvec(fa, mul_scalar(f_gf, -1.0));
  return mean_all(mul(diff, diff));
}

Tensor composite_loss(const Tensor& ar_term, const Tensor& gva_term, const Tensor& z_term,
                      const AlignmentConfig& config) {
  Tensor out = add(ar_term, mul_scalar(z_term, 1e-5));
  if (config.mechanism != ar::Mechanism::none && config.lambda != 0.0) {
    if (!gva_term.defined()) throw ConfigError("composite_loss: GVA term required for this config");
    out = add(out, mul_scalar(gva_term, config.lambda));
  }
  return out;
}

double mean_alignment_cosine(const ar::ForwardOutput& fwd, const std::vector<int64_t>& positions,
                             const Tensor& f_gf, const AlignmentConfig& config, const num::Params& p) {
  if (positions.empty()) throw ConfigError("mean_alignment_cosine: empty position set");
  if (config.depth < 1 || config.depth >= static_cast<int>(fwd.hidden.size()))
    throw ConfigError("mean_alignment_cosine: depth " + std::to_string(config.depth) +
                      " outside the recorded hidden states");
  num::Params dp;
  for (const char* k : {"proj/w1", "proj/b1", "proj/w2", "proj/b2"})
    if (auto it = p.find(k); it != p.end()) dp.emplace(k, it->second.detach());
  Tensor h = select_rows(fwd.hidden[static_cast<size_t>(config.depth)].detach(), positions);
  Tensor fa = project(h, dp, config.projection, static_cast<int>(f_gf.dim(1)));
  Tensor cos = cosine_rows(fa, f_gf.detach());
  double total = 0.0;
  for (double v : cos.data()) total += v;
  return total / static_cast<double>(cos.data().size());
}

}  // namespace arra::align
