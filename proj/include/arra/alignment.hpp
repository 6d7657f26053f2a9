#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "arra/armodel.hpp"
#include "arra/foundation.hpp"
#include "arra/rng.hpp"
#include "arra/tensor.hpp"

namespace arra::align {

enum class Objective { cosine, mse };
enum class Projection { mlp2, maxpool };

std::string to_string(Objective o);
std::string to_string(Projection p);
Objective objective_from_string(const std::string& s);
Projection projection_from_string(const std::string& s);

struct AlignmentConfig {
  ar::Mechanism mechanism = ar::Mechanism::hybnext;
  found::AggMode aggregation = found::AggMode::cls;
  found::EncoderKind encoder = found::EncoderKind::cross_modal;
  int depth = 1;         // hidden-state layer index i
  double lambda = 1.0;   // GVA weight
  Objective objective = Objective::cosine;
  Projection projection = Projection::mlp2;

  void validate(int model_layers) const;
  int d_out(int encoder_dim) const {
    return aggregation == found::AggMode::concat ? 2 * encoder_dim : encoder_dim;
  }
  nlohmann::json to_json() const;
  static AlignmentConfig from_json(const nlohmann::json& j);
};

// HYBNEXT: every position whose next-token target is an image token;
// REP: the <REP> position; none: empty.
std::vector<int64_t> select_alignment_positions(const ar::TokenSequence& seq, ar::Mechanism mechanism);

// mlp2 parameters "proj/w1 b1 w2 b2"; maxpool adds none.
void init_projection(num::Params& params, Projection kind, int h_model, int d_out, num::Rng& rng, num::Dtype dtype);

// rows: m x h_model -> m x d_out
num::Tensor project(const num::Tensor& rows, const num::Params& p, Projection kind, int d_out);

// Mean alignment loss over the selected positions against the single global
// target f_gf (1 x d_out). Uses hidden layer `config.depth`.
num::Tensor gva_loss(const ar::ForwardOutput& fwd, const std::vector<int64_t>& positions, const num::Tensor& f_gf,
                     const AlignmentConfig& config, const num::Params& p);

// L_AR + lambda * L_GVA + 1e-5 * L_z. The GVA term is skipped entirely when
// mechanism is none or lambda is 0, keeping those graphs identical to a plain
// next-token run.
num::Tensor composite_loss(const num::Tensor& ar_term, const num::Tensor& gva_term, const num::Tensor& z_term,
                           const AlignmentConfig& config);

// Diagnostic: mean cosine between projected hidden states and f_gf.
// No graph is needed, so inputs are read through detached values.
double mean_alignment_cosine(const ar::ForwardOutput& fwd, const std::vector<int64_t>& positions,
                             const num::Tensor& f_gf, const AlignmentConfig& config, const num::Params& p);

}  // namespace arra::align
