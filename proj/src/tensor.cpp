#include "cdt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace cdt {

namespace {

thread_local Tape* g_active_tape = nullptr;

void ensure_grad(TensorData& t) {
  if (t.grad.size() == 0) t.grad = Eigen::ArrayXd::Zero(t.values.size());
}

void check_finite(const char* op, const Eigen::ArrayXd& values) {
  if (!values.allFinite()) {
    throw NumericError(std::string(op) + ": produced a non-finite value");
  }
}

// Backward closures receive the output record so they can read its
// gradient; they accumulate (never overwrite) into input gradients.
using BackwardFn = std::function<void(const TensorData& out)>;

Tensor make_result(const char* op, Shape shape, Eigen::ArrayXd values,
                   const std::vector<Tensor>& inputs, BackwardFn backward_fn) {
  if (values.size() != numel(shape)) {
    throw ShapeError(std::string(op) + ": value buffer of length " +
                     std::to_string(values.size()) + " does not fill shape " +
                     shape_to_string(shape));
  }
  check_finite(op, values);
  auto out = std::make_shared<TensorData>();
  out->shape = std::move(shape);
  out->values = std::move(values);
  for (const Tensor& in : inputs) {
    if (in.impl()->requires_grad) out->requires_grad = true;
  }
  Tape* tape = Tape::active();
  if (tape != nullptr && out->requires_grad) {
    Node node;
    node.inputs.reserve(inputs.size());
    for (const Tensor& in : inputs) node.inputs.push_back(in.impl());
    node.out = out;
    node.backward = [fn = std::move(backward_fn), raw = out.get()]() { fn(*raw); };
    out->node = tape->record(std::move(node));
    out->tape_token = tape->token();
  }
  return Tensor(out);
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shapes " + shape_to_string(a.shape()) +
                     " and " + shape_to_string(b.shape()) + " differ");
  }
}

void require_rank(const char* op, const Tensor& t, size_t rank) {
  if (t.shape().size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + shape_to_string(t.shape()));
  }
}

using ConstRowMap = Eigen::Map<const RowMat>;
using RowMap = Eigen::Map<RowMat>;

int conv_out_extent(int in, int k, int stride) {
  int pad = (k - 1) / 2;
  return (in + 2 * pad - k) / stride + 1;
}

// Unfolds one C x H x W image into a (C*k*k) x (OH*OW) matrix whose column
// j holds the receptive field of output position j; taps that fall into
// the zero padding read as zero.  col2im_add is the exact adjoint.
void im2col(const double* img, int C, int H, int W, int k, int stride,
            Eigen::MatrixXd& col) {
  const int pad = (k - 1) / 2;
  const int oh = conv_out_extent(H, k, stride);
  const int ow = conv_out_extent(W, k, stride);
  col.setZero(static_cast<int64_t>(C) * k * k, static_cast<int64_t>(oh) * ow);
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const int row = (c * k + ki) * k + kj;
        for (int i = 0; i < oh; ++i) {
          const int y = i * stride - pad + ki;
          if (y < 0 || y >= H) continue;
          for (int j = 0; j < ow; ++j) {
            const int x = j * stride - pad + kj;
            if (x < 0 || x >= W) continue;
            col(row, i * ow + j) = img[(c * H + y) * W + x];
          }
        }
      }
    }
  }
}

void col2im_add(const Eigen::MatrixXd& col, int C, int H, int W, int k,
                int stride, double* img) {
  const int pad = (k - 1) / 2;
  const int oh = conv_out_extent(H, k, stride);
  const int ow = conv_out_extent(W, k, stride);
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < k; ++ki) {
      for (int kj = 0; kj < k; ++kj) {
        const int row = (c * k + ki) * k + kj;
        for (int i = 0; i < oh; ++i) {
          const int y = i * stride - pad + ki;
          if (y < 0 || y >= H) continue;
          for (int j = 0; j < ow; ++j) {
            const int x = j * stride - pad + kj;
            if (x < 0 || x >= W) continue;
            img[(c * H + y) * W + x] += col(row, i * ow + j);
          }
        }
      }
    }
  }
}

void require_stride(const char* op, int stride) {
  if (stride != 1 && stride != 2) {
    throw ConfigError(std::string(op) + ": stride " + std::to_string(stride) +
                      " unsupported (must be 1 or 2)");
  }
}

void require_odd_square_kernel(const char* op, const Shape& ks) {
  if (ks.size() != 4 || ks[2] != ks[3] || ks[2] % 2 == 0 || ks[2] < 1) {
    throw ShapeError(std::string(op) + ": kernel shape " + shape_to_string(ks) +
                     " must be [*,*,k,k] with k odd");
  }
}

}  // namespace

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) {
      throw ShapeError("non-positive dimension in shape " + shape_to_string(shape));
    }
    n *= d;
  }
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::make(Shape shape, Eigen::ArrayXd values, bool requires_grad) {
  if (values.size() != numel(shape)) {
    throw ShapeError("tensor: " + std::to_string(values.size()) +
                     " values do not fill shape " + shape_to_string(shape));
  }
  check_finite("tensor", values);
  auto data = std::make_shared<TensorData>();
  data->shape = std::move(shape);
  data->values = std::move(values);
  data->requires_grad = requires_grad;
  return Tensor(std::move(data));
}

Tensor Tensor::make(Shape shape, const std::vector<double>& values, bool requires_grad) {
  Eigen::ArrayXd arr = Eigen::Map<const Eigen::ArrayXd>(
      values.data(), static_cast<int64_t>(values.size()));
  return make(std::move(shape), std::move(arr), requires_grad);
}

Tensor Tensor::make(Shape shape, std::initializer_list<double> values,
                    bool requires_grad) {
  return make(std::move(shape), std::vector<double>(values), requires_grad);
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Eigen::ArrayXd arr = Eigen::ArrayXd::Zero(numel(shape));
  return make(std::move(shape), std::move(arr), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Eigen::ArrayXd arr = Eigen::ArrayXd::Constant(numel(shape), value);
  return make(std::move(shape), std::move(arr), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return full({1}, value, requires_grad);
}

double Tensor::scalar_value() const {
  if (size() != 1) {
    throw ShapeError("scalar_value: tensor has shape " + shape_to_string(shape()));
  }
  return data_->values(0);
}

Tensor Tensor::grad() const {
  if (!data_->requires_grad) {
    throw ContractError("grad: tensor does not participate in differentiation");
  }
  Eigen::ArrayXd g = data_->grad.size() > 0
                         ? data_->grad
                         : Eigen::ArrayXd::Zero(data_->values.size());
  return Tensor::make(data_->shape, std::move(g));
}

const Eigen::ArrayXd& Tensor::grad_ref() const {
  if (data_->grad.size() == 0) {
    throw ContractError("grad_ref: gradient buffer not allocated");
  }
  return data_->grad;
}

void Tensor::zero_grad() { data_->grad.resize(0); }

void Tensor::accumulate_grad(const Eigen::ArrayXd& delta) {
  if (delta.size() != data_->values.size()) {
    throw ShapeError("accumulate_grad: delta length " + std::to_string(delta.size()) +
                     " vs tensor of " + std::to_string(data_->values.size()));
  }
  ensure_grad(*data_);
  data_->grad += delta;
}

Tape* Tape::active() { return g_active_tape; }

int Tape::record(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<int>(nodes_.size()) - 1;
}

void Tape::run_backward(const Tensor& loss) {
  TensorData& l = *loss.impl();
  if (l.values.size() != 1) {
    throw ContractError("backward: loss must be a scalar, got shape " +
                        shape_to_string(l.shape));
  }
  if (l.node < 0) {
    // A loss that is itself a leaf: only its own gradient is defined.
    if (!l.requires_grad) {
      throw ContractError("backward: loss is a constant with no inputs");
    }
    ensure_grad(l);
    l.grad(0) += 1.0;
    return;
  }
  if (l.tape_token.lock() != token_) {
    throw ContractError("backward: loss was not recorded on the active tape");
  }
  // Only ancestors of the loss participate: their intermediate gradients
  // are rebuilt per sweep, while leaf buffers are left alone so repeated
  // backward calls accumulate.  Tensors off the loss path stay untouched.
  std::vector<char> needed(nodes_.size(), 0);
  needed[l.node] = 1;
  for (int i = l.node; i >= 0; --i) {
    if (!needed[i]) continue;
    for (const auto& in : nodes_[i].inputs) {
      if (in->node >= 0 && in->tape_token.lock() == token_) needed[in->node] = 1;
    }
  }
  for (int i = 0; i <= l.node; ++i) {
    if (needed[i]) {
      nodes_[i].out->grad = Eigen::ArrayXd::Zero(nodes_[i].out->values.size());
    }
  }
  l.grad(0) = 1.0;
  for (int i = l.node; i >= 0; --i) {
    if (needed[i]) nodes_[i].backward();
  }
}

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }

TapeScope::~TapeScope() { g_active_tape = prev_; }

NoTapeScope::NoTapeScope() : prev_(g_active_tape) { g_active_tape = nullptr; }

NoTapeScope::~NoTapeScope() { g_active_tape = prev_; }

void backward(const Tensor& loss) {
  Tape* tape = Tape::active();
  if (tape == nullptr) {
    throw ContractError("backward: no tape is active");
  }
  tape->run_backward(loss);
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  auto ai = a.impl(), bi = b.impl();
  return make_result("add", a.shape(), ai->values + bi->values, {a, b},
                     [ai, bi](const TensorData& out) {
                       if (ai->requires_grad) {
                         ensure_grad(*ai);
                         ai->grad += out.grad;
                       }
                       if (bi->requires_grad) {
                         ensure_grad(*bi);
                         bi->grad += out.grad;
                       }
                     });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  auto ai = a.impl(), bi = b.impl();
  return make_result("sub", a.shape(), ai->values - bi->values, {a, b},
                     [ai, bi](const TensorData& out) {
                       if (ai->requires_grad) {
                         ensure_grad(*ai);
                         ai->grad += out.grad;
                       }
                       if (bi->requires_grad) {
                         ensure_grad(*bi);
                         bi->grad -= out.grad;
                       }
                     });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  auto ai = a.impl(), bi = b.impl();
  return make_result("mul", a.shape(), ai->values * bi->values, {a, b},
                     [ai, bi](const TensorData& out) {
                       if (ai->requires_grad) {
                         ensure_grad(*ai);
                         ai->grad += out.grad * bi->values;
                       }
                       if (bi->requires_grad) {
                         ensure_grad(*bi);
                         bi->grad += out.grad * ai->values;
                       }
                     });
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  auto ai = a.impl(), bi = b.impl();
  return make_result("div", a.shape(), ai->values / bi->values, {a, b},
                     [ai, bi](const TensorData& out) {
                       if (ai->requires_grad) {
                         ensure_grad(*ai);
                         ai->grad += out.grad / bi->values;
                       }
                       if (bi->requires_grad) {
                         ensure_grad(*bi);
                         bi->grad -= out.grad * ai->values / bi->values.square();
                       }
                     });
}

Tensor scale(const Tensor& t, double s) {
  auto ti = t.impl();
  return make_result("scale", t.shape(), ti->values * s, {t},
                     [ti, s](const TensorData& out) {
                       if (!ti->requires_grad) return;
                       ensure_grad(*ti);
                       ti->grad += out.grad * s;
                     });
}

Tensor add_scalar(const Tensor& t, double s) {
  auto ti = t.impl();
  return make_result("add_scalar", t.shape(), ti->values + s, {t},
                     [ti](const TensorData& out) {
                       if (!ti->requires_grad) return;
                       ensure_grad(*ti);
                       ti->grad += out.grad;
                     });
}

Tensor square(const Tensor& t) {
  auto ti = t.impl();
  return make_result("square", t.shape(), ti->values.square(), {t},
                     [ti](const TensorData& out) {
                       if (!ti->requires_grad) return;
                       ensure_grad(*ti);
                       ti->grad += 2.0 * ti->values * out.grad;
                     });
}

Tensor abs(const Tensor& t) {
  auto ti = t.impl();
  return make_result("abs", t.shape(), ti->values.abs(), {t},
                     [ti](const TensorData& out) {
                       if (!ti->requires_grad) return;
                       ensure_grad(*ti);
                       // sign(0) = 0: the subgradient at the kink.
                       ti->grad += ti->values.sign() * out.grad;
                     });
}

Tensor relu(const Tensor& t) {
  auto ti = t.impl();
  return make_result("relu", t.shape(), ti->values.max(0.0), {t},
                     [ti](const TensorData& out) {
                       if (!ti->requires_grad) return;
                       ensure_grad(*ti);
                       ti->grad += (ti->values > 0.0).cast<double>() * out.grad;
                     });
}

Tensor sigmoid(const Tensor& t) {
  auto ti = t.impl();
  // exp(-|x|) never overflows; both branches share it.
  Eigen::ArrayXd e = (-ti->values.abs()).exp();
  Eigen::ArrayXd v = (ti->values >= 0.0).select(1.0 / (1.0 + e), e / (1.0 + e));
  return make_result("sigmoid", t.shape(), std::move(v), {t},
                     [ti](const TensorData& out) {
                       if (!ti->requires_grad) return;
                       ensure_grad(*ti);
                       ti->grad += out.grad * out.values * (1.0 - out.values);
                     });
}

Tensor sum(const Tensor& t) {
  auto ti = t.impl();
  Eigen::ArrayXd v(1);
  v(0) = ti->values.sum();
  return make_result("sum", {1}, std::move(v), {t},
                     [ti](const TensorData& out) {
                       if (!ti->requires_grad) return;
                       ensure_grad(*ti);
                       ti->grad += out.grad(0);
                     });
}

Tensor mean(const Tensor& t) {
  auto ti = t.impl();
  const double n = static_cast<double>(ti->values.size());
  Eigen::ArrayXd v(1);
  v(0) = ti->values.mean();
  return make_result("mean", {1}, std::move(v), {t},
                     [ti, n](const TensorData& out) {
                       if (!ti->requires_grad) return;
                       ensure_grad(*ti);
                       ti->grad += out.grad(0) / n;
                     });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  require_same_shape("dot", a, b);
  auto ai = a.impl(), bi = b.impl();
  Eigen::ArrayXd v(1);
  v(0) = (ai->values * bi->values).sum();
  return make_result("dot", {1}, std::move(v), {a, b},
                     [ai, bi](const TensorData& out) {
                       const double g = out.grad(0);
                       if (ai->requires_grad) {
                         ensure_grad(*ai);
                         ai->grad += g * bi->values;
                       }
                       if (bi->requires_grad) {
                         ensure_grad(*bi);
                         bi->grad += g * ai->values;
                       }
                     });
}

Tensor l2_norm(const Tensor& t) {
  auto ti = t.impl();
  const double norm = std::sqrt(ti->values.square().sum());
  Eigen::ArrayXd v(1);
  v(0) = norm;
  return make_result("l2_norm", {1}, std::move(v), {t},
                     [ti, norm](const TensorData& out) {
                       if (!ti->requires_grad || norm < 1e-12) return;
                       ensure_grad(*ti);
                       ti->grad += out.grad(0) / norm * ti->values;
                     });
}

Tensor row_l2_norm(const Tensor& t) {
  require_rank("row_l2_norm", t, 2);
  auto ti = t.impl();
  const int n = t.shape()[0], d = t.shape()[1];
  Eigen::ArrayXd v(n);
  for (int i = 0; i < n; ++i) {
    v(i) = std::sqrt(ti->values.segment(static_cast<int64_t>(i) * d, d).square().sum());
  }
  return make_result("row_l2_norm", {n}, std::move(v), {t},
                     [ti, n, d](const TensorData& out) {
                       if (!ti->requires_grad) return;
                       ensure_grad(*ti);
                       for (int i = 0; i < n; ++i) {
                         const double norm = out.values(i);
                         if (norm < 1e-12) continue;  // flat at degenerate rows
                         ti->grad.segment(static_cast<int64_t>(i) * d, d) +=
                             out.grad(i) / norm *
                             ti->values.segment(static_cast<int64_t>(i) * d, d);
                       }
                     });
}

Tensor reshape(const Tensor& t, Shape new_shape) {
  if (numel(new_shape) != t.size()) {
    throw ShapeError("reshape: cannot view " + shape_to_string(t.shape()) + " as " +
                     shape_to_string(new_shape));
  }
  auto ti = t.impl();
  return make_result("reshape", std::move(new_shape), ti->values, {t},
                     [ti](const TensorData& out) {
                       if (!ti->requires_grad) return;
                       ensure_grad(*ti);
                       ti->grad += out.grad;
                     });
}

Tensor flatten(const Tensor& t) {
  if (t.shape().size() < 2) {
    throw ShapeError("flatten: need a batch dimension, got shape " +
                     shape_to_string(t.shape()));
  }
  const int n = t.shape()[0];
  return reshape(t, {n, static_cast<int>(t.size() / n)});
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank("matmul", a, 2);
  require_rank("matmul", b, 2);
  if (a.shape()[1] != b.shape()[0]) {
    throw ShapeError("matmul: inner dimensions of " + shape_to_string(a.shape()) +
                     " and " + shape_to_string(b.shape()) + " disagree");
  }
  auto ai = a.impl(), bi = b.impl();
  const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  ConstRowMap A(ai->values.data(), m, k);
  ConstRowMap B(bi->values.data(), k, n);
  Eigen::ArrayXd v(static_cast<int64_t>(m) * n);
  RowMap(v.data(), m, n) = A * B;
  return make_result("matmul", {m, n}, std::move(v), {a, b},
                     [ai, bi, m, k, n](const TensorData& out) {
                       ConstRowMap G(out.grad.data(), m, n);
                       if (ai->requires_grad) {
                         ensure_grad(*ai);
                         ConstRowMap B(bi->values.data(), k, n);
                         RowMap(ai->grad.data(), m, k) += G * B.transpose();
                       }
                       if (bi->requires_grad) {
                         ensure_grad(*bi);
                         ConstRowMap A(ai->values.data(), m, k);
                         RowMap(bi->grad.data(), k, n) += A.transpose() * G;
                       }
                     });
}

Tensor add_bias(const Tensor& x, const Tensor& b) {
  require_rank("add_bias", x, 2);
  require_rank("add_bias", b, 1);
  if (x.shape()[1] != b.shape()[0]) {
    throw ShapeError("add_bias: features " + shape_to_string(x.shape()) +
                     " vs bias " + shape_to_string(b.shape()));
  }
  auto xi = x.impl(), bi = b.impl();
  const int n = x.shape()[0], d = x.shape()[1];
  Eigen::ArrayXd v(x.size());
  ConstRowMap X(xi->values.data(), n, d);
  RowMap(v.data(), n, d) =
      X.rowwise() + Eigen::Map<const Eigen::RowVectorXd>(bi->values.data(), d);
  return make_result("add_bias", x.shape(), std::move(v), {x, b},
                     [xi, bi, n, d](const TensorData& out) {
                       if (xi->requires_grad) {
                         ensure_grad(*xi);
                         xi->grad += out.grad;
                       }
                       if (bi->requires_grad) {
                         ensure_grad(*bi);
                         ConstRowMap G(out.grad.data(), n, d);
                         Eigen::Map<Eigen::VectorXd>(bi->grad.data(), d) +=
                             G.colwise().sum().transpose();
                       }
                     });
}

Tensor add_channel_bias(const Tensor& x, const Tensor& b) {
  require_rank("add_channel_bias", x, 4);
  require_rank("add_channel_bias", b, 1);
  if (x.shape()[1] != b.shape()[0]) {
    throw ShapeError("add_channel_bias: channels of " + shape_to_string(x.shape()) +
                     " vs bias " + shape_to_string(b.shape()));
  }
  auto xi = x.impl(), bi = b.impl();
  const int n = x.shape()[0], c = x.shape()[1];
  const int64_t hw = static_cast<int64_t>(x.shape()[2]) * x.shape()[3];
  Eigen::ArrayXd v = xi->values;
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < c; ++j) {
      v.segment((static_cast<int64_t>(i) * c + j) * hw, hw) += bi->values(j);
    }
  }
  return make_result("add_channel_bias", x.shape(), std::move(v), {x, b},
                     [xi, bi, n, c, hw](const TensorData& out) {
                       if (xi->requires_grad) {
                         ensure_grad(*xi);
                         xi->grad += out.grad;
                       }
                       if (bi->requires_grad) {
                         ensure_grad(*bi);
                         for (int i = 0; i < n; ++i) {
                           for (int j = 0; j < c; ++j) {
                             bi->grad(j) += out.grad
                                 .segment((static_cast<int64_t>(i) * c + j) * hw, hw)
                                 .sum();
                           }
                         }
                       }
                     });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride) {
  require_rank("conv2d", x, 4);
  require_odd_square_kernel("conv2d", kernel.shape());
  require_rank("conv2d", bias, 1);
  require_stride("conv2d", stride);
  const int n = x.shape()[0], ci = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const int co = kernel.shape()[0], k = kernel.shape()[2];
  if (kernel.shape()[1] != ci) {
    throw ShapeError("conv2d: kernel " + shape_to_string(kernel.shape()) +
                     " does not accept " + std::to_string(ci) + " input channels");
  }
  if (bias.shape()[0] != co) {
    throw ShapeError("conv2d: bias " + shape_to_string(bias.shape()) + " vs " +
                     std::to_string(co) + " output channels");
  }
  const int oh = conv_out_extent(h, k, stride);
  const int ow = conv_out_extent(w, k, stride);
  const int64_t in_stride = static_cast<int64_t>(ci) * h * w;
  const int64_t out_stride = static_cast<int64_t>(co) * oh * ow;
  auto xi = x.impl(), ki = kernel.impl(), bi = bias.impl();
  ConstRowMap km(ki->values.data(), co, static_cast<int64_t>(ci) * k * k);
  Eigen::ArrayXd v(n * out_stride);
  Eigen::MatrixXd col;
  for (int i = 0; i < n; ++i) {
    im2col(xi->values.data() + i * in_stride, ci, h, w, k, stride, col);
    RowMap out_mat(v.data() + i * out_stride, co, static_cast<int64_t>(oh) * ow);
    out_mat = km * col;
    out_mat.colwise() += Eigen::Map<const Eigen::VectorXd>(bi->values.data(), co);
  }
  return make_result(
      "conv2d", {n, co, oh, ow}, std::move(v), {x, kernel, bias},
      [xi, ki, bi, n, ci, h, w, co, k, stride, oh, ow, in_stride,
       out_stride](const TensorData& out) {
        ConstRowMap km(ki->values.data(), co, static_cast<int64_t>(ci) * k * k);
        Eigen::MatrixXd col;
        for (int i = 0; i < n; ++i) {
          ConstRowMap g(out.grad.data() + i * out_stride, co,
                        static_cast<int64_t>(oh) * ow);
          if (ki->requires_grad) {
            ensure_grad(*ki);
            im2col(xi->values.data() + i * in_stride, ci, h, w, k, stride, col);
            RowMap(ki->grad.data(), co, static_cast<int64_t>(ci) * k * k) +=
                g * col.transpose();
          }
          if (xi->requires_grad) {
            ensure_grad(*xi);
            Eigen::MatrixXd colg = km.transpose() * g;
            col2im_add(colg, ci, h, w, k, stride, xi->grad.data() + i * in_stride);
          }
          if (bi->requires_grad) {
            ensure_grad(*bi);
            Eigen::Map<Eigen::VectorXd>(bi->grad.data(), co) += g.rowwise().sum();
          }
        }
      });
}

Tensor transposed_conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
                         int stride) {
  require_rank("transposed_conv2d", x, 4);
  require_odd_square_kernel("transposed_conv2d", kernel.shape());
  require_rank("transposed_conv2d", bias, 1);
  require_stride("transposed_conv2d", stride);
  const int n = x.shape()[0], ci = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const int co = kernel.shape()[1], k = kernel.shape()[2];
  if (kernel.shape()[0] != ci) {
    throw ShapeError("transposed_conv2d: kernel " + shape_to_string(kernel.shape()) +
                     " does not accept " + std::to_string(ci) + " input channels");
  }
  if (bias.shape()[0] != co) {
    throw ShapeError("transposed_conv2d: bias " + shape_to_string(bias.shape()) +
                     " vs " + std::to_string(co) + " output channels");
  }
  const int oh = stride * h, ow = stride * w;
  // The adjoint pairing requires the forward conv geometry to map the
  // upsampled extent back exactly; holds for any odd k with pad (k-1)/2.
  if (conv_out_extent(oh, k, stride) != h || conv_out_extent(ow, k, stride) != w) {
    throw ShapeError("transposed_conv2d: geometry mismatch for input " +
                     shape_to_string(x.shape()));
  }
  const int64_t in_stride = static_cast<int64_t>(ci) * h * w;
  const int64_t out_stride = static_cast<int64_t>(co) * oh * ow;
  auto xi = x.impl(), ki = kernel.impl(), bi = bias.impl();
  ConstRowMap km(ki->values.data(), ci, static_cast<int64_t>(co) * k * k);
  Eigen::ArrayXd v = Eigen::ArrayXd::Zero(n * out_stride);
  for (int i = 0; i < n; ++i) {
    ConstRowMap in_mat(xi->values.data() + i * in_stride, ci,
                       static_cast<int64_t>(h) * w);
    Eigen::MatrixXd colz = km.transpose() * in_mat;
    col2im_add(colz, co, oh, ow, k, stride, v.data() + i * out_stride);
    for (int j = 0; j < co; ++j) {
      v.segment(i * out_stride + static_cast<int64_t>(j) * oh * ow,
                static_cast<int64_t>(oh) * ow) += bi->values(j);
    }
  }
  return make_result(
      "transposed_conv2d", {n, co, oh, ow}, std::move(v), {x, kernel, bias},
      [xi, ki, bi, n, ci, h, w, co, k, stride, oh, ow, in_stride,
       out_stride](const TensorData& out) {
        ConstRowMap km(ki->values.data(), ci, static_cast<int64_t>(co) * k * k);
        Eigen::MatrixXd colg;
        for (int i = 0; i < n; ++i) {
          im2col(out.grad.data() + i * out_stride, co, oh, ow, k, stride, colg);
          if (xi->requires_grad) {
            ensure_grad(*xi);
            RowMap(xi->grad.data() + i * in_stride, ci, static_cast<int64_t>(h) * w) +=
                km * colg;
          }
          if (ki->requires_grad) {
            ensure_grad(*ki);
            ConstRowMap in_mat(xi->values.data() + i * in_stride, ci,
                               static_cast<int64_t>(h) * w);
            RowMap(ki->grad.data(), ci, static_cast<int64_t>(co) * k * k) +=
                in_mat * colg.transpose();
          }
          if (bi->requires_grad) {
            ensure_grad(*bi);
            for (int j = 0; j < co; ++j) {
              bi->grad(j) += out.grad
                  .segment(i * out_stride + static_cast<int64_t>(j) * oh * ow,
                           static_cast<int64_t>(oh) * ow)
                  .sum();
            }
          }
        }
      });
}

Tensor maxpool2d(const Tensor& x) {
  require_rank("maxpool2d", x, 4);
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (h % 2 != 0 || w % 2 != 0) {
    throw ShapeError("maxpool2d: spatial dims of " + shape_to_string(x.shape()) +
                     " must be even");
  }
  const int oh = h / 2, ow = w / 2;
  auto xi = x.impl();
  Eigen::ArrayXd v(static_cast<int64_t>(n) * c * oh * ow);
  auto winners = std::make_shared<std::vector<int64_t>>(v.size());
  int64_t o = 0;
  for (int64_t plane = 0; plane < static_cast<int64_t>(n) * c; ++plane) {
    const double* img = xi->values.data() + plane * h * w;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        // Row-major scan of the 2x2 window; only a strictly larger value
        // displaces the running winner, so ties keep the first position.
        int64_t best = static_cast<int64_t>(2 * i) * w + 2 * j;
        double best_v = img[best];
        const int64_t cand[3] = {best + 1, best + w, best + w + 1};
        for (int64_t idx : cand) {
          if (img[idx] > best_v) {
            best_v = img[idx];
            best = idx;
          }
        }
        v(o) = best_v;
        (*winners)[o] = plane * h * w + best;
        ++o;
      }
    }
  }
  return make_result("maxpool2d", {n, c, oh, ow}, std::move(v), {x},
                     [xi, winners](const TensorData& out) {
                       if (!xi->requires_grad) return;
                       ensure_grad(*xi);
                       for (int64_t i = 0; i < out.grad.size(); ++i) {
                         xi->grad((*winners)[i]) += out.grad(i);
                       }
                     });
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require_rank("softmax_cross_entropy", logits, 2);
  const int n = logits.shape()[0], c = logits.shape()[1];
  if (static_cast<int>(labels.size()) != n) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(n) + " rows");
  }
  auto li = logits.impl();
  auto probs = std::make_shared<Eigen::ArrayXd>(li->values.size());
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    if (labels[i] < 0 || labels[i] >= c) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(labels[i]) +
                       " outside [0," + std::to_string(c) + ")");
    }
    auto row = li->values.segment(static_cast<int64_t>(i) * c, c);
    const double m = row.maxCoeff();
    Eigen::ArrayXd z = row - m;
    const double lse = std::log(z.exp().sum());
    probs->segment(static_cast<int64_t>(i) * c, c) = (z - lse).exp();
    total += lse - z(labels[i]);
  }
  Eigen::ArrayXd v(1);
  v(0) = total / n;
  return make_result("softmax_cross_entropy", {1}, std::move(v), {logits},
                     [li, probs, labels, n, c](const TensorData& out) {
                       if (!li->requires_grad) return;
                       ensure_grad(*li);
                       const double g = out.grad(0) / n;
                       li->grad += g * *probs;
                       for (int i = 0; i < n; ++i) {
                         li->grad(static_cast<int64_t>(i) * c + labels[i]) -= g;
                       }
                     });
}

Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  require_same_shape("cosine_similarity", a, b);
  auto ai = a.impl(), bi = b.impl();
  const double na = std::sqrt(ai->values.square().sum());
  const double nb = std::sqrt(bi->values.square().sum());
  if (na < 1e-12 || nb < 1e-12) {
    throw NumericError("cosine_similarity: vector norm below 1e-12");
  }
  const double y = (ai->values * bi->values).sum() / (na * nb);
  Eigen::ArrayXd v(1);
  v(0) = y;
  return make_result("cosine_similarity", {1}, std::move(v), {a, b},
                     [ai, bi, na, nb, y](const TensorData& out) {
                       const double g = out.grad(0);
                       if (ai->requires_grad) {
                         ensure_grad(*ai);
                         ai->grad += g * (bi->values / (na * nb) -
                                          y * ai->values / (na * na));
                       }
                       if (bi->requires_grad) {
                         ensure_grad(*bi);
                         bi->grad += g * (ai->values / (na * nb) -
                                          y * bi->values / (nb * nb));
                       }
                     });
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double h) {
  Tensor leaf = Tensor::make(x.shape(), x.values(), true);
  Eigen::ArrayXd analytic;
  {
    Tape tape;
    TapeScope scope(tape);
    Tensor loss = f(leaf);
    if (loss.size() != 1) {
      throw ContractError("finite_difference_check: f must return a scalar");
    }
    backward(loss);
    analytic = leaf.grad().values();
  }
  double worst = 0.0;
  for (int64_t i = 0; i < x.size(); ++i) {
    Eigen::ArrayXd vp = x.values(), vm = x.values();
    vp(i) += h;
    vm(i) -= h;
    const double fp = f(Tensor::make(x.shape(), std::move(vp))).scalar_value();
    const double fm = f(Tensor::make(x.shape(), std::move(vm))).scalar_value();
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::fabs(analytic(i)), std::fabs(numeric), 1e-8});
    worst = std::max(worst, std::fabs(analytic(i) - numeric) / denom);
  }
  return worst;
}

}  // namespace cdt
