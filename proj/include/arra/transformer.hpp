#pragma once

#include <string>

#include "arra/rng.hpp"
#include "arra/tensor.hpp"

namespace arra::num {

// Multi-head self-attention over x (n x h) using parameters
// {prefix}/attn/{wq,wk,wv,wo,bq,bk,bv,bo}. `mask` (n x n), when given, is
// added to the pre-softmax scores; callers encode causality or padding as
// large negative entries.
Tensor multihead_attention(const Tensor& x, const Params& p, const std::string& prefix, int heads,
                           const Tensor* mask = nullptr);

// Pre-norm block: x + attn(norm(x)), then + mlp(norm(·)). Normalization is
// parameter-free row standardization throughout this codebase. The MLP uses
// {prefix}/mlp/{w1,b1,w2,b2} with a GELU between.
Tensor transformer_block(const Tensor& x, const Params& p, const std::string& prefix, int heads,
                         const Tensor* mask = nullptr);

// Fresh parameters for one block: weights N(0, 1/sqrt(fan_in)) drawn from
// "init/{prefix}/..." streams, biases zero.
void init_block_params(Params& params, const std::string& prefix, int64_t h, int64_t mlp_mult, Rng& rng, Dtype dtype);

}  // namespace arra::num
