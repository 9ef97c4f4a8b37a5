#pragma once

#include <Eigen/Core>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "cdt/common.hpp"

namespace cdt {

using Shape = std::vector<int>;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

int64_t numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Flat row-major float64 storage plus the bookkeeping the tape needs.
// `node` is the index of the producing node on the recording tape, or -1
// for leaves and untraced results.  `grad` stays empty until a backward
// pass (or an accumulation) touches it; an empty buffer reads as zeros.
struct TensorData {
  Shape shape;
  Eigen::ArrayXd values;
  Eigen::ArrayXd grad;
  bool requires_grad = false;
  int node = -1;
  std::weak_ptr<void> tape_token;
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorData> data) : data_(std::move(data)) {}

  static Tensor make(Shape shape, Eigen::ArrayXd values, bool requires_grad = false);
  static Tensor make(Shape shape, const std::vector<double>& values,
                     bool requires_grad = false);
  static Tensor make(Shape shape, std::initializer_list<double> values,
                     bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return data_ != nullptr; }
  const Shape& shape() const { return data_->shape; }
  int64_t size() const { return data_->values.size(); }
  bool requires_grad() const { return data_->requires_grad; }

  const Eigen::ArrayXd& values() const { return data_->values; }
  // In-place mutation is reserved for optimizer updates on leaves between
  // tape lifetimes; mutating a traced tensor mid-step invalidates closures.
  Eigen::ArrayXd& values_mut() { return data_->values; }
  double value_at(int64_t i) const { return data_->values(i); }
  double scalar_value() const;

  bool has_grad() const { return data_->grad.size() > 0; }
  // Gradient as a plain tensor; an unallocated buffer reads as zeros.
  Tensor grad() const;
  const Eigen::ArrayXd& grad_ref() const;
  void zero_grad();
  void accumulate_grad(const Eigen::ArrayXd& delta);

  const std::shared_ptr<TensorData>& impl() const { return data_; }

 private:
  std::shared_ptr<TensorData> data_;
};

// One recorded operation: the closure pulls the upstream gradient out of
// `out->grad` and accumulates into each input's buffer.
struct Node {
  std::vector<std::shared_ptr<TensorData>> inputs;
  std::shared_ptr<TensorData> out;
  std::function<void()> backward;
};

class Tape {
 public:
  Tape() : token_(std::make_shared<int>(0)) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active();

  int record(Node node);
  size_t size() const { return nodes_.size(); }
  void run_backward(const Tensor& loss);
  std::shared_ptr<void> token() const { return token_; }

 private:
  std::vector<Node> nodes_;
  std::shared_ptr<void> token_;
};

// Installs a tape as the thread's recorder for its lifetime; scopes nest.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

// Suspends recording for its lifetime (frozen-model evaluation inside a
// training step must not grow the step's tape).
class NoTapeScope {
 public:
  NoTapeScope();
  ~NoTapeScope();
  NoTapeScope(const NoTapeScope&) = delete;
  NoTapeScope& operator=(const NoTapeScope&) = delete;

 private:
  Tape* prev_;
};

// Elementwise and reduction ops.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& t, double s);
Tensor add_scalar(const Tensor& t, double s);
Tensor square(const Tensor& t);
Tensor abs(const Tensor& t);
Tensor relu(const Tensor& t);
Tensor sigmoid(const Tensor& t);
Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor l2_norm(const Tensor& t);
// Per-row Euclidean norms of a [N,D] tensor -> [N].  Rows with norm below
// 1e-12 get a zero gradient rather than a blow-up.
Tensor row_l2_norm(const Tensor& t);

// Shape ops (data is shared layout-wise; values are copied, grads flow).
Tensor reshape(const Tensor& t, Shape new_shape);
Tensor flatten(const Tensor& t);  // [N, ...] -> [N, prod(rest)]

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k] x [k,n]
Tensor add_bias(const Tensor& x, const Tensor& b);        // [N,D] + [D]
Tensor add_channel_bias(const Tensor& x, const Tensor& b);  // [N,C,H,W] + [C]

// Spatial ops.  Kernels are [Cout,Cin,k,k] for conv2d and [Cin,Cout,k,k]
// for transposed_conv2d; k must be odd, padding is (k-1)/2, stride 1 or 2.
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias,
              int stride = 1);
Tensor transposed_conv2d(const Tensor& x, const Tensor& kernel,
                         const Tensor& bias, int stride);
Tensor maxpool2d(const Tensor& x);  // window 2, stride 2, ties -> first

// Fused heads.
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);
Tensor cosine_similarity(const Tensor& a, const Tensor& b);

// Runs the reverse sweep of the active tape from a scalar loss.
// Repeated calls keep accumulating into leaf gradients.
void backward(const Tensor& loss);

// Central-difference audit of reverse-mode gradients: rebuilds `f` under a
// fresh tape for the analytic pass, then perturbs every coordinate of `x`.
// Returns the maximum relative error with denominator max(|a|,|n|,1e-8).
double finite_difference_check(const std::function<Tensor(const Tensor&)>& f,
                               const Tensor& x, double h = 1e-5);

}  // namespace cdt
