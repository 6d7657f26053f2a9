#include "arra/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace arra::num {

namespace {

double to_mode(double x, Dtype d) { return d == Dtype::f32 ? static_cast<double>(static_cast<float>(x)) : x; }

void round_vec(std::vector<double>& v, Dtype d) {
  if (d == Dtype::f32) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  }
}

int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t s : shape) n *= s;
  return n;
}

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_2d(const char* op, const Tensor& t) {
  if (t.shape().size() != 2) shape_fail(op, "expected a 2-d tensor, got " + Tensor::shape_str(t.shape()));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    shape_fail(op, "shape mismatch " + Tensor::shape_str(a.shape()) + " vs " + Tensor::shape_str(b.shape()));
}

void require_same_dtype(const char* op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype())
    shape_fail(op, std::string("dtype mismatch ") + dtype_name(a.dtype()) + " vs " + dtype_name(b.dtype()));
}

// C(N×M) += A(N×K) · B(K×M). ikj loop order: row i of C is a function of row i
// of A and all of B, with a fixed left-to-right accumulation order per output
// element. Appending rows to A can never change earlier rows of C, which is
// what makes incremental decoding bitwise-equal to full recomputation.
void gemm_acc(double* c, const double* a, const double* b, int64_t n, int64_t k, int64_t m) {
  for (int64_t i = 0; i < n; ++i) {
    double* ci = c + i * m;
    const double* ai = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const double av = ai[p];
      const double* bp = b + p * m;
      for (int64_t j = 0; j < m; ++j) ci[j] += av * bp[j];
    }
  }
}

std::vector<double> transposed(const std::vector<double>& a, int64_t rows, int64_t cols) {
  std::vector<double> t(a.size());
  for (int64_t i = 0; i < rows; ++i)
    for (int64_t j = 0; j < cols; ++j) t[j * rows + i] = a[i * cols + j];
  return t;
}

std::vector<double>& grad_slot(GradTable& table, const TensorImpl* node) {
  auto [it, fresh] = table.try_emplace(node);
  if (fresh) it->second.assign(static_cast<size_t>(node->numel()), 0.0);
  return it->second;
}

bool wants_grad(const Tensor& t) { return t.requires_grad(); }

}  // namespace

int64_t TensorImpl::numel() const { return shape_numel(shape); }

Tensor make_node(std::vector<int64_t> shape, Dtype dtype, const char* op, std::vector<Tensor> parents,
                 BackpropFn backprop) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(shape_numel(impl->shape)), 0.0);
  impl->dtype = dtype;
  impl->op = op;
  bool rg = false;
  for (const Tensor& p : parents) rg = rg || p.requires_grad();
  impl->requires_grad = rg;
  if (rg) {
    impl->parents = std::move(parents);
    impl->backprop = std::move(backprop);
  }
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

std::string Tensor::shape_str(const std::vector<int64_t>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor Tensor::zeros(std::vector<int64_t> shape, Dtype dtype, bool requires_grad) {
  return full(std::move(shape), 0.0, dtype, requires_grad);
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, Dtype dtype, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(static_cast<size_t>(shape_numel(impl->shape)), to_mode(value, dtype));
  impl->dtype = dtype;
  impl->requires_grad = requires_grad;
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::from_data(std::vector<int64_t> shape, std::vector<double> values, Dtype dtype, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size()))
    throw ShapeError("from_data: " + std::to_string(values.size()) + " values for shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  round_vec(impl->data, dtype);
  impl->dtype = dtype;
  impl->requires_grad = requires_grad;
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::from_floats(std::vector<int64_t> shape, std::span<const float> values, bool requires_grad) {
  std::vector<double> v(values.begin(), values.end());
  return from_data(std::move(shape), std::move(v), Dtype::f32, requires_grad);
}

Tensor Tensor::randn(std::vector<int64_t> shape, Rng& rng, std::string_view stream, double stddev, Dtype dtype,
                     bool requires_grad) {
  int64_t n = shape_numel(shape);
  std::vector<double> v(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) v[static_cast<size_t>(i)] = stddev * rng.normal(stream);
  return from_data(std::move(shape), std::move(v), dtype, requires_grad);
}

const std::vector<int64_t>& Tensor::shape() const { return impl_->shape; }
int64_t Tensor::dim(size_t i) const { return impl_->shape.at(i); }
int64_t Tensor::numel() const { return impl_->numel(); }
Dtype Tensor::dtype() const { return impl_->dtype; }
bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }
const char* Tensor::op() const { return impl_->op; }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }
void Tensor::round_to_dtype() { round_vec(impl_->data, impl_->dtype); }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has shape " + shape_str(impl_->shape));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
  if (index.size() != impl_->shape.size()) throw ShapeError("at: rank mismatch");
  int64_t flat = 0;
  size_t k = 0;
  for (int64_t i : index) {
    if (i < 0 || i >= impl_->shape[k]) throw ShapeError("at: index out of range");
    flat = flat * impl_->shape[k] + i;
    ++k;
  }
  return impl_->data[static_cast<size_t>(flat)];
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->dtype = impl_->dtype;
  Tensor t;
  t.impl_ = std::move(impl);
  return t;
}

Tensor Tensor::to_dtype(Dtype d) const {
  Tensor t = detach();
  t.impl_->dtype = d;
  round_vec(t.impl_->data, d);
  return t;
}

// ---- elementwise -------------------------------------------------------

namespace {

Tensor binary_elementwise(const char* name, const Tensor& a, const Tensor& b,
                          double (*fwd)(double, double),
                          void (*bwd)(double x, double y, double g, double& gx, double& gy)) {
  require_same_shape(name, a, b);
  require_same_dtype(name, a, b);
  Tensor out = make_node(a.shape(), a.dtype(), name, {a, b},
                         [bwd](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           const Tensor& pa = self.parents[0];
                           const Tensor& pb = self.parents[1];
                           std::vector<double>* ga = pa.requires_grad() ? &grad_slot(table, pa.impl()) : nullptr;
                           std::vector<double>* gb = pb.requires_grad() ? &grad_slot(table, pb.impl()) : nullptr;
                           for (size_t i = 0; i < g.size(); ++i) {
                             double gx = 0.0, gy = 0.0;
                             bwd(pa.data()[i], pb.data()[i], g[i], gx, gy);
                             if (ga) (*ga)[i] += gx;
                             if (gb) (*gb)[i] += gy;
                           }
                         });
  auto& d = out.impl()->data;
  for (size_t i = 0; i < d.size(); ++i) d[i] = fwd(a.data()[i], b.data()[i]);
  round_vec(d, out.dtype());
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double g, double& gx, double& gy) {
        gx = g;
        gy = g;
      });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double g, double& gx, double& gy) {
        gx = g;
        gy = -g;
      });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_elementwise(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double x, double y, double g, double& gx, double& gy) {
        gx = g * y;
        gy = g * x;
      });
}

namespace {

Tensor rowvec_op(const char* name, const Tensor& a, const Tensor& v, bool multiply) {
  require_2d(name, a);
  require_2d(name, v);
  require_same_dtype(name, a, v);
  if (v.dim(0) != 1 || v.dim(1) != a.dim(1))
    shape_fail(name, "row vector " + Tensor::shape_str(v.shape()) + " against " + Tensor::shape_str(a.shape()));
  const int64_t n = a.dim(0), c = a.dim(1);
  Tensor out = make_node({n, c}, a.dtype(), name, {a, v},
                         [multiply, n, c](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           const Tensor& pa = self.parents[0];
                           const Tensor& pv = self.parents[1];
                           if (pa.requires_grad()) {
                             auto& ga = grad_slot(table, pa.impl());
                             for (int64_t i = 0; i < n; ++i)
                               for (int64_t j = 0; j < c; ++j) {
                                 size_t k = static_cast<size_t>(i * c + j);
                                 ga[k] += multiply ? g[k] * pv.data()[static_cast<size_t>(j)] : g[k];
                               }
                           }
                           if (pv.requires_grad()) {
                             auto& gv = grad_slot(table, pv.impl());
                             for (int64_t i = 0; i < n; ++i)
                               for (int64_t j = 0; j < c; ++j) {
                                 size_t k = static_cast<size_t>(i * c + j);
                                 gv[static_cast<size_t>(j)] += multiply ? g[k] * pa.data()[k] : g[k];
                               }
                           }
                         });
  auto& d = out.impl()->data;
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < c; ++j) {
      size_t k = static_cast<size_t>(i * c + j);
      d[k] = multiply ? a.data()[k] * v.data()[static_cast<size_t>(j)] : a.data()[k] + v.data()[static_cast<size_t>(j)];
    }
  round_vec(d, out.dtype());
  return out;
}

}  // namespace

Tensor add_rowvec(const Tensor& a, const Tensor& v) { return rowvec_op("add_rowvec", a, v, false); }
Tensor mul_rowvec(const Tensor& a, const Tensor& v) { return rowvec_op("mul_rowvec", a, v, true); }

Tensor add_scalar(const Tensor& a, double s) {
  Tensor out = make_node(a.shape(), a.dtype(), "add_scalar", {a},
                         [](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         });
  auto& d = out.impl()->data;
  for (size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] + s;
  round_vec(d, out.dtype());
  return out;
}

Tensor mul_scalar(const Tensor& a, double s) {
  Tensor out = make_node(a.shape(), a.dtype(), "mul_scalar", {a},
                         [s](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
                         });
  auto& d = out.impl()->data;
  for (size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] * s;
  round_vec(d, out.dtype());
  return out;
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  if (s.numel() != 1) shape_fail("scale_by", "scale must have one element, got " + Tensor::shape_str(s.shape()));
  require_same_dtype("scale_by", a, s);
  Tensor out = make_node(a.shape(), a.dtype(), "scale_by", {a, s},
                         [](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           const Tensor& pa = self.parents[0];
                           const Tensor& ps = self.parents[1];
                           if (pa.requires_grad()) {
                             auto& ga = grad_slot(table, pa.impl());
                             const double sv = ps.data()[0];
                             for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv;
                           }
                           if (ps.requires_grad()) {
                             auto& gs = grad_slot(table, ps.impl());
                             double acc = 0.0;
                             for (size_t i = 0; i < g.size(); ++i) acc += g[i] * pa.data()[i];
                             gs[0] += acc;
                           }
                         });
  auto& d = out.impl()->data;
  const double sv = s.data()[0];
  for (size_t i = 0; i < d.size(); ++i) d[i] = a.data()[i] * sv;
  round_vec(d, out.dtype());
  return out;
}

Tensor gelu(const Tensor& a) {
  static constexpr double kC0 = 0.7978845608028654;  // sqrt(2/pi)
  static constexpr double kC1 = 0.044715;
  Tensor out = make_node(a.shape(), a.dtype(), "gelu", {a},
                         [](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           const auto x = self.parents[0].data();
                           for (size_t i = 0; i < g.size(); ++i) {
                             const double xi = x[i];
                             const double u = kC0 * (xi + kC1 * xi * xi * xi);
                             const double t = std::tanh(u);
                             const double du = kC0 * (1.0 + 3.0 * kC1 * xi * xi);
                             ga[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * xi * (1.0 - t * t) * du);
                           }
                         });
  auto& d = out.impl()->data;
  for (size_t i = 0; i < d.size(); ++i) {
    const double xi = a.data()[i];
    d[i] = 0.5 * xi * (1.0 + std::tanh(kC0 * (xi + kC1 * xi * xi * xi)));
  }
  round_vec(d, out.dtype());
  return out;
}

// ---- linear algebra ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d("matmul", a);
  require_2d("matmul", b);
  require_same_dtype("matmul", a, b);
  if (a.dim(1) != b.dim(0))
    shape_fail("matmul", "inner dimensions " + Tensor::shape_str(a.shape()) + " x " + Tensor::shape_str(b.shape()));
  const int64_t n = a.dim(0), k = a.dim(1), m = b.dim(1);
  Tensor out = make_node({n, m}, a.dtype(), "matmul", {a, b},
                         [n, k, m](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           const Tensor& pa = self.parents[0];
                           const Tensor& pb = self.parents[1];
                           if (pa.requires_grad()) {
                             // dA = g · Bᵀ
                             auto bt = transposed(pb.impl()->data, k, m);
                             gemm_acc(grad_slot(table, pa.impl()).data(), g.data(), bt.data(), n, m, k);
                           }
                           if (pb.requires_grad()) {
                             // dB = Aᵀ · g
                             auto at = transposed(pa.impl()->data, n, k);
                             gemm_acc(grad_slot(table, pb.impl()).data(), at.data(), g.data(), k, n, m);
                           }
                         });
  gemm_acc(out.impl()->data.data(), a.data().data(), b.data().data(), n, k, m);
  round_vec(out.impl()->data, out.dtype());
  return out;
}

Tensor transpose(const Tensor& a) {
  require_2d("transpose", a);
  const int64_t n = a.dim(0), c = a.dim(1);
  Tensor out = make_node({c, n}, a.dtype(), "transpose", {a},
                         [n, c](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           for (int64_t i = 0; i < n; ++i)
                             for (int64_t j = 0; j < c; ++j)
                               ga[static_cast<size_t>(i * c + j)] += g[static_cast<size_t>(j * n + i)];
                         });
  out.impl()->data = transposed(a.impl()->data, n, c);
  return out;
}

// ---- row-wise ----------------------------------------------------------

Tensor softmax_rows(const Tensor& a) {
  require_2d("softmax_rows", a);
  const int64_t n = a.dim(0), c = a.dim(1);
  Tensor out = make_node({n, c}, a.dtype(), "softmax_rows", {a},
                         [n, c](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           for (int64_t i = 0; i < n; ++i) {
                             const double* y = self.data.data() + i * c;
                             const double* gi = g.data() + i * c;
                             double dot = 0.0;
                             for (int64_t j = 0; j < c; ++j) dot += gi[j] * y[j];
                             for (int64_t j = 0; j < c; ++j) ga[static_cast<size_t>(i * c + j)] += y[j] * (gi[j] - dot);
                           }
                         });
  auto& d = out.impl()->data;
  for (int64_t i = 0; i < n; ++i) {
    const double* x = a.data().data() + i * c;
    double m = x[0];
    for (int64_t j = 1; j < c; ++j) m = std::max(m, x[j]);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(x[j] - m);
    for (int64_t j = 0; j < c; ++j) d[static_cast<size_t>(i * c + j)] = std::exp(x[j] - m) / z;
  }
  round_vec(d, out.dtype());
  return out;
}

Tensor logsumexp_rows(const Tensor& a) {
  require_2d("logsumexp_rows", a);
  const int64_t n = a.dim(0), c = a.dim(1);
  Tensor out = make_node({n, 1}, a.dtype(), "logsumexp_rows", {a},
                         [n, c](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           const auto x = self.parents[0].data();
                           for (int64_t i = 0; i < n; ++i) {
                             const double lse = self.data[static_cast<size_t>(i)];
                             for (int64_t j = 0; j < c; ++j) {
                               size_t k = static_cast<size_t>(i * c + j);
                               ga[k] += g[static_cast<size_t>(i)] * std::exp(x[k] - lse);
                             }
                           }
                         });
  auto& d = out.impl()->data;
  for (int64_t i = 0; i < n; ++i) {
    const double* x = a.data().data() + i * c;
    double m = x[0];
    for (int64_t j = 1; j < c; ++j) m = std::max(m, x[j]);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(x[j] - m);
    d[static_cast<size_t>(i)] = m + std::log(z);
  }
  round_vec(d, out.dtype());
  return out;
}

Tensor layer_norm_rows(const Tensor& a, double eps) {
  require_2d("layer_norm_rows", a);
  const int64_t n = a.dim(0), c = a.dim(1);
  Tensor out = make_node({n, c}, a.dtype(), "layer_norm_rows", {a},
                         [n, c, eps](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           const auto x = self.parents[0].data();
                           for (int64_t i = 0; i < n; ++i) {
                             const double* xi = x.data() + i * c;
                             const double* yi = self.data.data() + i * c;
                             const double* gi = g.data() + i * c;
                             double mean = 0.0;
                             for (int64_t j = 0; j < c; ++j) mean += xi[j];
                             mean /= static_cast<double>(c);
                             double var = 0.0;
                             for (int64_t j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
                             var /= static_cast<double>(c);
                             const double inv = 1.0 / std::sqrt(var + eps);
                             double gmean = 0.0, gydot = 0.0;
                             for (int64_t j = 0; j < c; ++j) {
                               gmean += gi[j];
                               gydot += gi[j] * yi[j];
                             }
                             gmean /= static_cast<double>(c);
                             gydot /= static_cast<double>(c);
                             for (int64_t j = 0; j < c; ++j)
                               ga[static_cast<size_t>(i * c + j)] += (gi[j] - gmean - yi[j] * gydot) * inv;
                           }
                         });
  auto& d = out.impl()->data;
  for (int64_t i = 0; i < n; ++i) {
    const double* xi = a.data().data() + i * c;
    double mean = 0.0;
    for (int64_t j = 0; j < c; ++j) mean += xi[j];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (int64_t j = 0; j < c; ++j) var += (xi[j] - mean) * (xi[j] - mean);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int64_t j = 0; j < c; ++j) d[static_cast<size_t>(i * c + j)] = (xi[j] - mean) * inv;
  }
  round_vec(d, out.dtype());
  return out;
}

Tensor l2_normalize_rows(const Tensor& a, double min_norm) {
  require_2d("l2_normalize_rows", a);
  const int64_t n = a.dim(0), c = a.dim(1);
  Tensor out = make_node({n, c}, a.dtype(), "l2_normalize_rows", {a},
                         [n, c](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           const auto x = self.parents[0].data();
                           for (int64_t i = 0; i < n; ++i) {
                             const double* xi = x.data() + i * c;
                             const double* yi = self.data.data() + i * c;
                             const double* gi = g.data() + i * c;
                             double norm = 0.0;
                             for (int64_t j = 0; j < c; ++j) norm += xi[j] * xi[j];
                             norm = std::sqrt(norm);
                             double dot = 0.0;
                             for (int64_t j = 0; j < c; ++j) dot += gi[j] * yi[j];
                             for (int64_t j = 0; j < c; ++j)
                               ga[static_cast<size_t>(i * c + j)] += (gi[j] - yi[j] * dot) / norm;
                           }
                         });
  auto& d = out.impl()->data;
  for (int64_t i = 0; i < n; ++i) {
    const double* xi = a.data().data() + i * c;
    double norm = 0.0;
    for (int64_t j = 0; j < c; ++j) norm += xi[j] * xi[j];
    norm = std::sqrt(norm);
    if (norm < min_norm)
      throw NumericalError("l2_normalize_rows: row " + std::to_string(i) + " has norm " + std::to_string(norm) +
                           " below " + std::to_string(min_norm));
    for (int64_t j = 0; j < c; ++j) d[static_cast<size_t>(i * c + j)] = xi[j] / norm;
  }
  round_vec(d, out.dtype());
  return out;
}

Tensor cosine_rows(const Tensor& a, const Tensor& b) {
  require_2d("cosine_rows", a);
  require_2d("cosine_rows", b);
  require_same_dtype("cosine_rows", a, b);
  if (b.dim(1) != a.dim(1) || (b.dim(0) != a.dim(0) && b.dim(0) != 1))
    shape_fail("cosine_rows", Tensor::shape_str(a.shape()) + " vs " + Tensor::shape_str(b.shape()));
  const int64_t n = a.dim(0), c = a.dim(1);
  const bool broadcast = b.dim(0) == 1;
  Tensor out =
      make_node({n, 1}, a.dtype(), "cosine_rows", {a, b},
                [n, c, broadcast](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                  const Tensor& pa = self.parents[0];
                  const Tensor& pb = self.parents[1];
                  std::vector<double>* ga = pa.requires_grad() ? &grad_slot(table, pa.impl()) : nullptr;
                  std::vector<double>* gb = pb.requires_grad() ? &grad_slot(table, pb.impl()) : nullptr;
                  for (int64_t i = 0; i < n; ++i) {
                    const double* xi = pa.data().data() + i * c;
                    const double* yi = pb.data().data() + (broadcast ? 0 : i * c);
                    double nx = 0.0, ny = 0.0, dot = 0.0;
                    for (int64_t j = 0; j < c; ++j) {
                      nx += xi[j] * xi[j];
                      ny += yi[j] * yi[j];
                      dot += xi[j] * yi[j];
                    }
                    nx = std::sqrt(nx);
                    ny = std::sqrt(ny);
                    const double cosv = dot / (nx * ny);
                    const double gi = g[static_cast<size_t>(i)];
                    for (int64_t j = 0; j < c; ++j) {
                      if (ga)
                        (*ga)[static_cast<size_t>(i * c + j)] += gi * (yi[j] / (nx * ny) - cosv * xi[j] / (nx * nx));
                      if (gb)
                        (*gb)[static_cast<size_t>((broadcast ? 0 : i) * c + j)] +=
                            gi * (xi[j] / (nx * ny) - cosv * yi[j] / (ny * ny));
                    }
                  }
                });
  auto& d = out.impl()->data;
  for (int64_t i = 0; i < n; ++i) {
    const double* xi = a.data().data() + i * c;
    const double* yi = b.data().data() + (broadcast ? 0 : i * c);
    double nx = 0.0, ny = 0.0, dot = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      nx += xi[j] * xi[j];
      ny += yi[j] * yi[j];
      dot += xi[j] * yi[j];
    }
    nx = std::sqrt(nx);
    ny = std::sqrt(ny);
    if (nx < 1e-12 || ny < 1e-12)
      throw NumericalError("cosine_rows: near-zero norm at row " + std::to_string(i));
    d[static_cast<size_t>(i)] = dot / (nx * ny);
  }
  round_vec(d, out.dtype());
  return out;
}

Tensor maxpool_cols(const Tensor& a, int64_t window) {
  require_2d("maxpool_cols", a);
  const int64_t n = a.dim(0), c = a.dim(1);
  if (window <= 0 || c % window != 0)
    shape_fail("maxpool_cols", std::to_string(c) + " columns not divisible by window " + std::to_string(window));
  const int64_t m = c / window;
  std::vector<int64_t> argmax(static_cast<size_t>(n * m));
  std::vector<double> values(static_cast<size_t>(n * m));
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < m; ++j) {
      int64_t best = i * c + j * window;
      for (int64_t w = 1; w < window; ++w) {
        int64_t k = i * c + j * window + w;
        if (a.data()[static_cast<size_t>(k)] > a.data()[static_cast<size_t>(best)]) best = k;
      }
      argmax[static_cast<size_t>(i * m + j)] = best;
      values[static_cast<size_t>(i * m + j)] = a.data()[static_cast<size_t>(best)];
    }
  Tensor out = make_node({n, m}, a.dtype(), "maxpool_cols", {a},
                         [argmax](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           for (size_t k = 0; k < g.size(); ++k) ga[static_cast<size_t>(argmax[k])] += g[k];
                         });
  out.impl()->data = std::move(values);
  return out;
}

// ---- reductions --------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  Tensor out = make_node({1}, a.dtype(), "sum_all", {a},
                         [](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           for (double& v : ga) v += g[0];
                         });
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  out.impl()->data[0] = to_mode(acc, out.dtype());
  return out;
}

Tensor mean_all(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean_all: empty tensor");
  const double inv = 1.0 / static_cast<double>(a.numel());
  Tensor out = make_node({1}, a.dtype(), "mean_all", {a},
                         [inv](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           for (double& v : ga) v += g[0] * inv;
                         });
  double acc = 0.0;
  for (double v : a.data()) acc += v;
  out.impl()->data[0] = to_mode(acc * inv, out.dtype());
  return out;
}

// ---- indexing / structure ----------------------------------------------

Tensor embedding(const Tensor& table, const std::vector<int>& ids) {
  require_2d("embedding", table);
  const int64_t v = table.dim(0), c = table.dim(1);
  for (int id : ids)
    if (id < 0 || id >= v)
      throw ShapeError("embedding: id " + std::to_string(id) + " outside table with " + std::to_string(v) + " rows");
  const int64_t n = static_cast<int64_t>(ids.size());
  Tensor out = make_node({n, c}, table.dtype(), "embedding", {table},
                         [ids, c](const TensorImpl& self, const std::vector<double>& g, GradTable& tb) {
                           auto& gt = grad_slot(tb, self.parents[0].impl());
                           for (size_t i = 0; i < ids.size(); ++i)
                             for (int64_t j = 0; j < c; ++j)
                               gt[static_cast<size_t>(ids[i] * c + j)] += g[i * static_cast<size_t>(c) + j];
                         });
  auto& d = out.impl()->data;
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(table.data().data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * c, c, d.data() + i * c);
  return out;
}

Tensor select_rows(const Tensor& a, const std::vector<int64_t>& rows) {
  require_2d("select_rows", a);
  const int64_t n = a.dim(0), c = a.dim(1);
  for (int64_t r : rows)
    if (r < 0 || r >= n) throw ShapeError("select_rows: row " + std::to_string(r) + " out of range");
  const int64_t m = static_cast<int64_t>(rows.size());
  Tensor out = make_node({m, c}, a.dtype(), "select_rows", {a},
                         [rows, c](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           for (size_t i = 0; i < rows.size(); ++i)
                             for (int64_t j = 0; j < c; ++j)
                               ga[static_cast<size_t>(rows[i] * c + j)] += g[i * static_cast<size_t>(c) + j];
                         });
  auto& d = out.impl()->data;
  for (int64_t i = 0; i < m; ++i) std::copy_n(a.data().data() + rows[static_cast<size_t>(i)] * c, c, d.data() + i * c);
  return out;
}

Tensor slice_rows(const Tensor& a, int64_t r0, int64_t r1) {
  require_2d("slice_rows", a);
  const int64_t n = a.dim(0), c = a.dim(1);
  if (r0 < 0 || r1 < r0 || r1 > n)
    shape_fail("slice_rows", "[" + std::to_string(r0) + "," + std::to_string(r1) + ") of " + std::to_string(n));
  const int64_t m = r1 - r0;
  Tensor out = make_node({m, c}, a.dtype(), "slice_rows", {a},
                         [r0, c](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           for (size_t i = 0; i < g.size(); ++i) ga[static_cast<size_t>(r0 * c) + i] += g[i];
                         });
  std::copy_n(a.data().data() + r0 * c, m * c, out.impl()->data.data());
  return out;
}

Tensor slice_cols(const Tensor& a, int64_t c0, int64_t c1) {
  require_2d("slice_cols", a);
  const int64_t n = a.dim(0), c = a.dim(1);
  if (c0 < 0 || c1 < c0 || c1 > c)
    shape_fail("slice_cols", "[" + std::to_string(c0) + "," + std::to_string(c1) + ") of " + std::to_string(c));
  const int64_t m = c1 - c0;
  Tensor out = make_node({n, m}, a.dtype(), "slice_cols", {a},
                         [n, c, c0, m](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           for (int64_t i = 0; i < n; ++i)
                             for (int64_t j = 0; j < m; ++j)
                               ga[static_cast<size_t>(i * c + c0 + j)] += g[static_cast<size_t>(i * m + j)];
                         });
  auto& d = out.impl()->data;
  for (int64_t i = 0; i < n; ++i) std::copy_n(a.data().data() + i * c + c0, m, d.data() + i * m);
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int64_t c = parts[0].dim(1);
  int64_t n = 0;
  for (const Tensor& p : parts) {
    require_2d("concat_rows", p);
    require_same_dtype("concat_rows", parts[0], p);
    if (p.dim(1) != c) shape_fail("concat_rows", "column mismatch");
    n += p.dim(0);
  }
  Tensor out = make_node({n, c}, parts[0].dtype(), "concat_rows", parts,
                         [c](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           size_t off = 0;
                           for (const Tensor& p : self.parents) {
                             const size_t len = static_cast<size_t>(p.numel());
                             if (p.requires_grad()) {
                               auto& gp = grad_slot(table, p.impl());
                               for (size_t i = 0; i < len; ++i) gp[i] += g[off + i];
                             }
                             off += len;
                           }
                         });
  auto& d = out.impl()->data;
  size_t off = 0;
  for (const Tensor& p : parts) {
    std::copy(p.data().begin(), p.data().end(), d.begin() + static_cast<int64_t>(off));
    off += static_cast<size_t>(p.numel());
  }
  return out;
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const int64_t n = parts[0].dim(0);
  int64_t c = 0;
  std::vector<int64_t> widths;
  for (const Tensor& p : parts) {
    require_2d("concat_cols", p);
    require_same_dtype("concat_cols", parts[0], p);
    if (p.dim(0) != n) shape_fail("concat_cols", "row mismatch");
    widths.push_back(p.dim(1));
    c += p.dim(1);
  }
  Tensor out = make_node({n, c}, parts[0].dtype(), "concat_cols", parts,
                         [n, c, widths](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           int64_t off = 0;
                           for (size_t k = 0; k < self.parents.size(); ++k) {
                             const Tensor& p = self.parents[k];
                             const int64_t w = widths[k];
                             if (p.requires_grad()) {
                               auto& gp = grad_slot(table, p.impl());
                               for (int64_t i = 0; i < n; ++i)
                                 for (int64_t j = 0; j < w; ++j)
                                   gp[static_cast<size_t>(i * w + j)] += g[static_cast<size_t>(i * c + off + j)];
                             }
                             off += w;
                           }
                         });
  auto& d = out.impl()->data;
  int64_t off = 0;
  for (const Tensor& p : parts) {
    const int64_t w = p.dim(1);
    for (int64_t i = 0; i < n; ++i) std::copy_n(p.data().data() + i * w, w, d.data() + i * c + off);
    off += w;
  }
  return out;
}

Tensor reshape(const Tensor& a, std::vector<int64_t> shape) {
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + Tensor::shape_str(a.shape()) + " to " + Tensor::shape_str(shape));
  Tensor out = make_node(std::move(shape), a.dtype(), "reshape", {a},
                         [](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& ga = grad_slot(table, self.parents[0].impl());
                           for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                         });
  out.impl()->data = a.impl()->data;
  return out;
}

namespace {

// patch row = gy·(W/p)+gx, patch col = (py·p+px)·3+ch, flat image index =
// ((gy·p+py)·W + gx·p+px)·3+ch
int64_t patch_source_index(int64_t row, int64_t col, int64_t width, int64_t patch) {
  const int64_t gw = width / patch;
  const int64_t gy = row / gw, gx = row % gw;
  const int64_t ch = col % 3;
  const int64_t within = col / 3;
  const int64_t py = within / patch, px = within % patch;
  return ((gy * patch + py) * width + gx * patch + px) * 3 + ch;
}

}  // namespace

Tensor patchify(const Tensor& image, int64_t patch) {
  if (image.shape().size() != 3 || image.dim(2) != 3)
    shape_fail("patchify", "expected HxWx3, got " + Tensor::shape_str(image.shape()));
  const int64_t h = image.dim(0), w = image.dim(1);
  if (patch <= 0 || h % patch != 0 || w % patch != 0)
    shape_fail("patchify", Tensor::shape_str(image.shape()) + " with patch " + std::to_string(patch));
  const int64_t rows = (h / patch) * (w / patch);
  const int64_t cols = patch * patch * 3;
  Tensor out = make_node({rows, cols}, image.dtype(), "patchify", {image},
                         [w, patch, rows, cols](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& gi = grad_slot(table, self.parents[0].impl());
                           for (int64_t r = 0; r < rows; ++r)
                             for (int64_t cc = 0; cc < cols; ++cc)
                               gi[static_cast<size_t>(patch_source_index(r, cc, w, patch))] +=
                                   g[static_cast<size_t>(r * cols + cc)];
                         });
  auto& d = out.impl()->data;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t cc = 0; cc < cols; ++cc)
      d[static_cast<size_t>(r * cols + cc)] = image.data()[static_cast<size_t>(patch_source_index(r, cc, w, patch))];
  return out;
}

Tensor unpatchify(const Tensor& t, int64_t height, int64_t width, int64_t patch) {
  require_2d("unpatchify", t);
  const int64_t rows = (height / patch) * (width / patch);
  const int64_t cols = patch * patch * 3;
  if (patch <= 0 || height % patch != 0 || width % patch != 0 || t.dim(0) != rows || t.dim(1) != cols)
    shape_fail("unpatchify", Tensor::shape_str(t.shape()) + " to " + std::to_string(height) + "x" +
                                 std::to_string(width) + " patch " + std::to_string(patch));
  Tensor out = make_node({height, width, 3}, t.dtype(), "unpatchify", {t},
                         [width, patch, rows, cols](const TensorImpl& self, const std::vector<double>& g,
                                                    GradTable& table) {
                           auto& gt = grad_slot(table, self.parents[0].impl());
                           for (int64_t r = 0; r < rows; ++r)
                             for (int64_t cc = 0; cc < cols; ++cc)
                               gt[static_cast<size_t>(r * cols + cc)] +=
                                   g[static_cast<size_t>(patch_source_index(r, cc, width, patch))];
                         });
  auto& d = out.impl()->data;
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t cc = 0; cc < cols; ++cc)
      d[static_cast<size_t>(patch_source_index(r, cc, width, patch))] = t.data()[static_cast<size_t>(r * cols + cc)];
  return out;
}

// ---- losses ------------------------------------------------------------

Tensor cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets, const std::vector<double>& weights) {
  require_2d("cross_entropy_rows", logits);
  const int64_t n = logits.dim(0), c = logits.dim(1);
  if (static_cast<int64_t>(targets.size()) != n || static_cast<int64_t>(weights.size()) != n)
    shape_fail("cross_entropy_rows", "need one target and one weight per row");
  for (int t : targets)
    if (t < 0 || t >= c) throw ShapeError("cross_entropy_rows: target " + std::to_string(t) + " out of range");
  double wsum = 0.0;
  for (double w : weights) wsum += w;
  if (wsum <= 0.0) throw NumericalError("cross_entropy_rows: weights sum to zero, empty loss mask");
  Tensor out = make_node(
      {1}, logits.dtype(), "cross_entropy_rows", {logits},
      [n, c, targets, weights, wsum](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
        auto& gl = grad_slot(table, self.parents[0].impl());
        const auto x = self.parents[0].data();
        for (int64_t i = 0; i < n; ++i) {
          const double coef = g[0] * weights[static_cast<size_t>(i)] / wsum;
          if (coef == 0.0) continue;
          const double* xi = x.data() + i * c;
          double m = xi[0];
          for (int64_t j = 1; j < c; ++j) m = std::max(m, xi[j]);
          double z = 0.0;
          for (int64_t j = 0; j < c; ++j) z += std::exp(xi[j] - m);
          for (int64_t j = 0; j < c; ++j) {
            const double p = std::exp(xi[j] - m) / z;
            const double ind = j == targets[static_cast<size_t>(i)] ? 1.0 : 0.0;
            gl[static_cast<size_t>(i * c + j)] += coef * (p - ind);
          }
        }
      });
  double loss = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double w = weights[static_cast<size_t>(i)];
    if (w == 0.0) continue;
    const double* xi = logits.data().data() + i * c;
    double m = xi[0];
    for (int64_t j = 1; j < c; ++j) m = std::max(m, xi[j]);
    double z = 0.0;
    for (int64_t j = 0; j < c; ++j) z += std::exp(xi[j] - m);
    loss += w * (m + std::log(z) - xi[targets[static_cast<size_t>(i)]]);
  }
  out.impl()->data[0] = to_mode(loss / wsum, out.dtype());
  return out;
}

QuantizeResult nearest_code_st(const Tensor& f, const Tensor& codebook) {
  require_2d("nearest_code_st", f);
  require_2d("nearest_code_st", codebook);
  require_same_dtype("nearest_code_st", f, codebook);
  if (f.dim(1) != codebook.dim(1)) shape_fail("nearest_code_st", "feature width mismatch");
  const int64_t n = f.dim(0), d = f.dim(1), k = codebook.dim(0);
  std::vector<int> idx(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const double* fi = f.data().data() + i * d;
    double best = 0.0;
    int best_j = 0;
    for (int64_t j = 0; j < k; ++j) {
      const double* zj = codebook.data().data() + j * d;
      double dist = 0.0;
      for (int64_t t = 0; t < d; ++t) dist += (fi[t] - zj[t]) * (fi[t] - zj[t]);
      // strict < keeps the lowest index on ties
      if (j == 0 || dist < best) {
        best = dist;
        best_j = static_cast<int>(j);
      }
    }
    idx[static_cast<size_t>(i)] = best_j;
  }
  Tensor out = make_node({n, d}, f.dtype(), "nearest_code_st", {f},
                         [](const TensorImpl& self, const std::vector<double>& g, GradTable& table) {
                           auto& gf = grad_slot(table, self.parents[0].impl());
                           for (size_t i = 0; i < g.size(); ++i) gf[i] += g[i];
                         });
  auto& dd = out.impl()->data;
  for (int64_t i = 0; i < n; ++i)
    std::copy_n(codebook.data().data() + static_cast<int64_t>(idx[static_cast<size_t>(i)]) * d, d, dd.data() + i * d);
  return {std::move(idx), std::move(out)};
}

// ---- autodiff drivers --------------------------------------------------

GradTable backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ShapeError("backward: loss must be scalar, got " + Tensor::shape_str(loss.shape()));
  GradTable table;
  if (!loss.requires_grad()) return table;
  table[loss.impl()] = {1.0};

  // iterative post-order over grad-requiring nodes
  std::vector<const TensorImpl*> order;
  std::unordered_set<const TensorImpl*> seen;
  std::vector<std::pair<const TensorImpl*, size_t>> stack;
  stack.emplace_back(loss.impl(), 0);
  seen.insert(loss.impl());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      const Tensor& p = node->parents[next++];
      if (p.requires_grad() && seen.insert(p.impl()).second) stack.emplace_back(p.impl(), 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const TensorImpl* node = *it;
    if (!node->backprop) continue;
    auto found = table.find(node);
    if (found == table.end()) continue;
    node->backprop(*node, found->second, table);
  }
  return table;
}

LossAndGrads forward_backward(const GraphFn& fn, const Params& params) {
  Tensor loss = fn(params);
  if (loss.numel() != 1) throw ShapeError("forward_backward: fn must return a scalar");
  if (!std::isfinite(loss.item())) throw NumericalError("forward_backward: non-finite loss");
  GradTable table = backward(loss);
  LossAndGrads out;
  out.loss = loss.item();
  for (const auto& [name, p] : params) {
    auto it = table.find(p.impl());
    if (it != table.end())
      out.grads.emplace(name, it->second);
    else
      out.grads.emplace(name, std::vector<double>(static_cast<size_t>(p.numel()), 0.0));
  }
  return out;
}

GradReport finite_difference_check(const GraphFn& fn, const Params& params, double eps) {
  if (eps <= 0.0) throw NumericalError("finite_difference_check: eps must be positive");
  for (const auto& [name, p] : params)
    if (p.dtype() != Dtype::f64)
      throw NumericalError("finite_difference_check: parameter '" + name + "' is not f64");

  LossAndGrads analytic = forward_backward(fn, params);

  constexpr int64_t kMaxChecked = 10000;
  Rng pick(0);
  GradReport report;
  for (const auto& [name, p] : params) {
    GradReport::Entry entry;
    entry.name = name;
    const int64_t n = p.numel();
    std::vector<int64_t> indices;
    if (n <= kMaxChecked) {
      indices.resize(static_cast<size_t>(n));
      for (int64_t i = 0; i < n; ++i) indices[static_cast<size_t>(i)] = i;
    } else {
      const std::string stream = "fd/" + name;
      indices.reserve(kMaxChecked);
      for (int64_t i = 0; i < kMaxChecked; ++i) indices.push_back(pick.uniform_int(stream, n));
    }
    Tensor param = params.at(name);  // shares storage with what fn sees
    for (int64_t i : indices) {
      auto d = param.mutable_data();
      const double saved = d[static_cast<size_t>(i)];
      d[static_cast<size_t>(i)] = saved + eps;
      const double up = fn(params).item();
      d[static_cast<size_t>(i)] = saved - eps;
      const double down = fn(params).item();
      d[static_cast<size_t>(i)] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic.grads.at(name)[static_cast<size_t>(i)];
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max({std::abs(a), std::abs(numeric), 1e-6});
      entry.max_abs_err = std::max(entry.max_abs_err, abs_err);
      entry.max_rel_err = std::max(entry.max_rel_err, rel);
      ++entry.checked;
    }
    report.max_abs_err = std::max(report.max_abs_err, entry.max_abs_err);
    report.max_rel_err = std::max(report.max_rel_err, entry.max_rel_err);
    report.per_param.push_back(std::move(entry));
  }
  return report;
}

}  // namespace arra::num
