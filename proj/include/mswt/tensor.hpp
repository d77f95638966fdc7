#pragma once

#include <functional>
#include <memory>

#include "mswt/common.hpp"

namespace mswt {

// One value in the autograd graph. Interior nodes carry a backward rule and
// the handles of their inputs; leaves carry neither. Gradients accumulate
// additively across fan-out. The graph a loss was computed through is torn
// down while backward() walks it, so each recorded graph is single-use.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  bool consumed = false;  // interior node already swept by backward()
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backprop;  // reads this->grad, feeds inputs' grads

  int64_t numel() const { return (int64_t)data.size(); }
  void accum_grad(const double* g, int64_t n);
  double* grad_buf();  // allocates zeroed grad on demand
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}

  // Leaf constructors.
  static Tensor from(std::vector<double> values, Shape shape, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int dim(int i) const { return n_->shape[i]; }
  int rank() const { return (int)n_->shape.size(); }
  int64_t numel() const { return n_->numel(); }
  double* data() { return n_->data.data(); }
  const double* data() const { return n_->data.data(); }
  double item() const;
  bool requires_grad() const { return n_->requires_grad; }
  void set_requires_grad(bool b) { n_->requires_grad = b; }

  bool has_grad() const { return !n_->grad.empty(); }
  double* grad() { return n_->grad.data(); }
  const double* grad() const { return n_->grad.data(); }
  void zero_grad();

  std::shared_ptr<Node>& node() { return n_; }
  const std::shared_ptr<Node>& node() const { return n_; }

 private:
  std::shared_ptr<Node> n_;
};

// Builds an interior node: requires_grad is inherited from the inputs, data is
// default-constructed to the given shape for the op to fill in.
Tensor make_op(Shape shape, std::vector<Tensor> inputs);

// Reverse-mode sweep from a scalar loss. Frees the recorded graph as it goes;
// leaf gradients survive. Throws std::invalid_argument on a non-scalar loss
// and numeric_error if the same graph is swept twice.
void backward(Tensor loss);

// When enabled, every op built through make_op verifies its output is finite
// and throws numeric_error otherwise. Off by default (training checks the
// loss each iteration instead); tests switch it on.
void set_strict_finite(bool enabled);
bool strict_finite();
void check_finite(const Tensor& t, const char* what);

// ---- basic differentiable ops ----------------------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scalar_mul(const Tensor& a, double s);
Tensor scalar_add(const Tensor& a, double s);
Tensor matmul(const Tensor& a, const Tensor& b);  // (m,k)x(k,n)
Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose2d(const Tensor& a);
Tensor concat_channel(const std::vector<Tensor>& parts);      // (B,C,H,W) along C
Tensor slice_channel(const Tensor& a, int from, int to);      // half-open
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scalar_mul(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scalar_mul(a, s); }

}  // namespace mswt
