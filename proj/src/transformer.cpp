#include "arra/transformer.hpp"

#include <cmath>

#include "arra/error.hpp"

namespace arra::num {

Tensor multihead_attention(const Tensor& x, const Params& p, const std::string& prefix, int heads,
                           const Tensor* mask) {
  const int64_t h = x.dim(1);
  if (heads <= 0 || h % heads != 0)
    throw ConfigError("attention: width " + std::to_string(h) + " not divisible by " + std::to_string(heads) +
                      " heads");
  const int64_t hd = h / heads;
  Tensor q = add_rowvec(matmul(x, p.at(prefix + "/attn/wq")), p.at(prefix + "/attn/bq"));
  Tensor k = add_rowvec(matmul(x, p.at(prefix + "/attn/wk")), p.at(prefix + "/attn/bk"));
  Tensor v = add_rowvec(matmul(x, p.at(prefix + "/attn/wv")), p.at(prefix + "/attn/bv"));
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  std::vector<Tensor> contexts;
  contexts.reserve(static_cast<size_t>(heads));
  for (int i = 0; i < heads; ++i) {
    Tensor qi = slice_cols(q, i * hd, (i + 1) * hd);
    Tensor ki = slice_cols(k, i * hd, (i + 1) * hd);
    Tensor vi = slice_cols(v, i * hd, (i + 1) * hd);
    Tensor scores = mul_scalar(matmul(qi, transpose(ki)), scale);
    if (mask) scores = add(scores, *mask);
    contexts.push_back(matmul(softmax_rows(scores), vi));
  }
  Tensor ctx = concat_cols(contexts);
  return add_rowvec(matmul(ctx, p.at(prefix + "/attn/wo")), p.at(prefix + "/attn/bo"));
}

Tensor transformer_block(const Tensor& x, const Params& p, const std::string& prefix, int heads, const Tensor* mask) {
  Tensor x1 = add(x, multihead_attention(layer_norm_rows(x), p, prefix, heads, mask));
  Tensor mid = gelu(add_rowvec(matmul(layer_norm_rows(x1), p.at(prefix + "/mlp/w1")), p.at(prefix + "/mlp/b1")));
  Tensor m = add_rowvec(matmul(mid, p.at(prefix + "/mlp/w2")), p.at(prefix + "/mlp/b2"));
  return add(x1, m);
}

void init_block_params(Params& params, const std::string& prefix, int64_t h, int64_t mlp_mult, Rng& rng, Dtype dtype) {
  auto weight = [&](const std::string& name, int64_t rows, int64_t cols) {
    params[prefix + "/" + name] = Tensor::randn({rows, cols}, rng, "init/" + prefix + "/" + name,
                                                1.0 / std::sqrt(static_cast<double>(rows)), dtype, true);
  };
  auto bias = [&](const std::string& name, int64_t cols) {
    params[prefix + "/" + name] = Tensor::zeros({1, cols}, dtype, true);
  };
  weight("attn/wq", h, h);
  weight("attn/wk", h, h);
  weight("attn/wv", h, h);
  weight("attn/wo", h, h);
  bias("attn/bq", h);
  bias("attn/bk", h);
  bias("attn/bv", h);
  bias("attn/bo", h);
  weight("mlp/w1", h, h * mlp_mult);
  weight("mlp/w2", h * mlp_mult, h);
  bias("mlp/b1", h * mlp_mult);
  bias("mlp/b2", h);
}

}  // namespace arra::num
