#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "arra/error.hpp"
#include "arra/rng.hpp"

namespace arra::num {

// Two execution modes share one code path: every tensor stores doubles, and in
// f32 mode each primitive's result is rounded through IEEE float32, so values
// are exactly float-representable while accumulations inside a primitive run
// in double. f64 is the verification mode; gradient checks require it.
enum class Dtype { f32, f64 };

inline const char* dtype_name(Dtype d) { return d == Dtype::f32 ? "f32" : "f64"; }

struct TensorImpl;
class Tensor;

// Gradients live in a per-backward-call table keyed by node identity, never in
// the nodes themselves. Concurrent backward passes over graphs that share
// parameter leaves are therefore safe.
using GradTable = std::unordered_map<const TensorImpl*, std::vector<double>>;

using BackpropFn = std::function<void(const TensorImpl& self, const std::vector<double>& grad_out, GradTable&)>;

struct TensorImpl {
  std::vector<int64_t> shape;
  std::vector<double> data;
  Dtype dtype = Dtype::f32;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<Tensor> parents;
  BackpropFn backprop;

  int64_t numel() const;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int64_t> shape, Dtype dtype = Dtype::f32, bool requires_grad = false);
  static Tensor full(std::vector<int64_t> shape, double value, Dtype dtype = Dtype::f32, bool requires_grad = false);
  static Tensor from_data(std::vector<int64_t> shape, std::vector<double> values, Dtype dtype = Dtype::f32,
                          bool requires_grad = false);
  static Tensor from_floats(std::vector<int64_t> shape, std::span<const float> values, bool requires_grad = false);
  static Tensor randn(std::vector<int64_t> shape, Rng& rng, std::string_view stream, double stddev = 1.0,
                      Dtype dtype = Dtype::f32, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int64_t>& shape() const;
  int64_t dim(size_t i) const;
  int64_t numel() const;
  Dtype dtype() const;
  bool requires_grad() const;
  const char* op() const;

  std::span<const double> data() const;
  // In-place access for leaves (parameter updates, constant building). Caller
  // must re-round via round_to_dtype() after writing in f32 mode.
  std::span<double> mutable_data();
  void round_to_dtype();

  double item() const;  // scalar tensors only
  double at(std::initializer_list<int64_t> index) const;

  Tensor detach() const;           // value copy, no graph, requires_grad off
  Tensor to_dtype(Dtype d) const;  // value copy in the target mode, no graph

  const TensorImpl* impl() const { return impl_.get(); }
  TensorImpl* impl() { return impl_.get(); }

  static std::string shape_str(const std::vector<int64_t>& shape);

 private:
  friend Tensor make_node(std::vector<int64_t>, Dtype, const char*, std::vector<Tensor>, BackpropFn);
  std::shared_ptr<TensorImpl> impl_;
};

// ---- primitives --------------------------------------------------------
// This list is the complete op vocabulary of the substrate; graphs are built
// only from these, so an unsupported primitive is a compile error at the call
// site.

// elementwise / broadcast
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_rowvec(const Tensor& a, const Tensor& v);  // N×C + 1×C
Tensor mul_rowvec(const Tensor& a, const Tensor& v);  // N×C * 1×C
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor scale_by(const Tensor& a, const Tensor& s);  // s is a 1-element tensor
Tensor gelu(const Tensor& a);                       // tanh approximation

// linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

// row-wise
Tensor softmax_rows(const Tensor& a);
Tensor logsumexp_rows(const Tensor& a);                             // N×C -> N×1
Tensor layer_norm_rows(const Tensor& a, double eps = 1e-5);         // per-row standardization
Tensor l2_normalize_rows(const Tensor& a, double min_norm = 1e-8);  // raises below min_norm
Tensor cosine_rows(const Tensor& a, const Tensor& b);               // b: N×D or 1×D -> N×1
Tensor maxpool_cols(const Tensor& a, int64_t window);               // N×C -> N×(C/window)

// reductions
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);

// indexing / structure
Tensor embedding(const Tensor& table, const std::vector<int>& ids);
Tensor select_rows(const Tensor& a, const std::vector<int64_t>& rows);
Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1);
Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor reshape(const Tensor& a, std::vector<int64_t> shape);
Tensor patchify(const Tensor& image, int64_t patch);  // H×W×3 -> (H/p·W/p) × (p·p·3)
Tensor unpatchify(const Tensor& t, int64_t height, int64_t width, int64_t patch);

// losses
Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets, const std::vector<double>& weights);

// nearest-neighbor lookup with straight-through gradient: forward output is
// the selected codebook row exactly; grad w.r.t. `f` is the output grad
// unchanged; the codebook receives no gradient through this op.
struct QuantizeResult {
  std::vector<int> indices;
  Tensor quantized;
};
QuantizeResult nearest_code_st(const Tensor& f, const Tensor& codebook);

// ---- autodiff drivers --------------------------------------------------

GradTable backward(const Tensor& loss);

using Params = std::map<std::string, Tensor>;
using GraphFn = std::function<Tensor(const Params&)>;

struct LossAndGrads {
  double loss = 0.0;
  std::map<std::string, std::vector<double>> grads;  // same keys/shapes as params
};
LossAndGrads forward_backward(const GraphFn& fn, const Params& params);

struct GradReport {
  struct Entry {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    int64_t checked = 0;
  };
  double max_rel_err = 0.0;
  double max_abs_err = 0.0;
  std::vector<Entry> per_param;
  bool passed(double rel_tol) const { return max_rel_err < rel_tol; }
};

// Central differences against analytic gradients, element by element (seeded
// subsample of 10^4 above 10^4 elements). rel = |a-n| / max(|a|, |n|, 1e-6).
// Requires every parameter in f64 mode and a pure fn.
GradReport finite_difference_check(const GraphFn& fn, const Params& params, double eps = 1e-5);

}  // namespace arra::num
