#include "mswt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

#include "mswt/gemm.hpp"

namespace mswt {

namespace {
bool g_strict_finite = false;
}

void set_strict_finite(bool enabled) { g_strict_finite = enabled; }
bool strict_finite() { return g_strict_finite; }

void check_finite(const Tensor& t, const char* what) {
  const double* d = t.data();
  for (int64_t i = 0, n = t.numel(); i < n; ++i)
    if (!std::isfinite(d[i]))
      throw numeric_error(std::string(what) + ": non-finite value at flat index " +
                          std::to_string(i));
}

void Node::accum_grad(const double* g, int64_t n) {
  if (grad.empty()) {
    grad.assign(g, g + n);
    return;
  }
  for (int64_t i = 0; i < n; ++i) grad[i] += g[i];
}

double* Node::grad_buf() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad.data();
}

Tensor Tensor::from(std::vector<double> values, Shape shape, bool requires_grad) {
  if ((int64_t)values.size() != numel_of(shape))
    throw std::invalid_argument("tensor_from: " + std::to_string(values.size()) +
                                " values for shape " + shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto n = std::make_shared<Node>();
  n->data.assign(numel_of(shape), v);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return full({1}, v, requires_grad); }

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("item: tensor has " + std::to_string(numel()) +
                                                " elements");
  return n_->data[0];
}

void Tensor::zero_grad() {
  n_->grad.clear();
  n_->grad.shrink_to_fit();
}

Tensor make_op(Shape shape, std::vector<Tensor> inputs) {
  auto n = std::make_shared<Node>();
  n->data.resize(numel_of(shape));
  n->shape = std::move(shape);
  for (auto& t : inputs) {
    n->requires_grad = n->requires_grad || t.requires_grad();
    n->inputs.push_back(t.node());
  }
  return Tensor(std::move(n));
}

void backward(Tensor loss) {
  if (loss.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
  Node* root = loss.node().get();
  if (root->consumed) throw numeric_error("backward: graph already consumed");

  // Iterative post-order DFS; the post-order list is a topological order
  // (inputs before consumers), so walking it backwards visits every node
  // after all of its consumers. The list holds owning pointers: the sweep
  // below severs inter-node links while nodes later in the walk are still
  // pending, so it must keep every visited node alive itself.
  std::vector<std::shared_ptr<Node>> topo;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<std::shared_ptr<Node>, size_t>> stack{{loss.node(), 0}};
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      const std::shared_ptr<Node>& in = node->inputs[next++];
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back({in, 0});
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  root->grad.assign(1, 1.0);
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* node = it->get();
    if (node->backprop) {
      if (!node->grad.empty()) node->backprop(*node);
      node->backprop = nullptr;
    }
    if (!node->inputs.empty()) {
      // Interior node: its gradient has been consumed and its part of the
      // graph is done; release buffers and links eagerly to cap peak memory.
      // Post-order guarantees this node's own backprop (the only reader of
      // its buffers) has run, and every consumer reading them ran earlier.
      node->consumed = true;
      node->grad.clear();
      node->grad.shrink_to_fit();
      if (node != root) {  // keep the loss value readable after backward
        node->data.clear();
        node->data.shrink_to_fit();
      }
      node->inputs.clear();
    }
    it->reset();  // drop our reference immediately so freed nodes release now
  }
}

// ---- ops --------------------------------------------------------------------

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
}

Tensor finalize(Tensor out, const char* what) {
  if (g_strict_finite) check_finite(out, what);
  return out;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = make_op(a.shape(), {a, b});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + pb[i];
  if (out.requires_grad())
    out.node()->backprop = [n](Node& self) {
      if (self.inputs[0]->requires_grad) self.inputs[0]->accum_grad(self.grad.data(), n);
      if (self.inputs[1]->requires_grad) self.inputs[1]->accum_grad(self.grad.data(), n);
    };
  return finalize(out, "add");
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = make_op(a.shape(), {a, b});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] - pb[i];
  if (out.requires_grad())
    out.node()->backprop = [n](Node& self) {
      if (self.inputs[0]->requires_grad) self.inputs[0]->accum_grad(self.grad.data(), n);
      if (self.inputs[1]->requires_grad) {
        double* g = self.inputs[1]->grad_buf();
        for (int64_t i = 0; i < n; ++i) g[i] -= self.grad[i];
      }
    };
  return finalize(out, "sub");
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = make_op(a.shape(), {a, b});
  const double* pa = a.data();
  const double* pb = b.data();
  double* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * pb[i];
  if (out.requires_grad())
    out.node()->backprop = [n](Node& self) {
      const double* da = self.inputs[0]->data.data();
      const double* db = self.inputs[1]->data.data();
      if (self.inputs[0]->requires_grad) {
        double* g = self.inputs[0]->grad_buf();
        for (int64_t i = 0; i < n; ++i) g[i] += self.grad[i] * db[i];
      }
      if (self.inputs[1]->requires_grad) {
        double* g = self.inputs[1]->grad_buf();
        for (int64_t i = 0; i < n; ++i) g[i] += self.grad[i] * da[i];
      }
    };
  return finalize(out, "mul");
}

Tensor scalar_mul(const Tensor& a, double s) {
  Tensor out = make_op(a.shape(), {a});
  const double* pa = a.data();
  double* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] * s;
  if (out.requires_grad())
    out.node()->backprop = [n, s](Node& self) {
      double* g = self.inputs[0]->grad_buf();
      for (int64_t i = 0; i < n; ++i) g[i] += self.grad[i] * s;
    };
  return finalize(out, "scalar_mul");
}

Tensor scalar_add(const Tensor& a, double s) {
  Tensor out = make_op(a.shape(), {a});
  const double* pa = a.data();
  double* po = out.data();
  int64_t n = a.numel();
  for (int64_t i = 0; i < n; ++i) po[i] = pa[i] + s;
  if (out.requires_grad())
    out.node()->backprop = [n](Node& self) { self.inputs[0]->accum_grad(self.grad.data(), n); };
  return finalize(out, "scalar_add");
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = make_op({m, n}, {a, b});
  gemm(a.data(), b.data(), out.data(), m, k, n);
  if (out.requires_grad())
    out.node()->backprop = [m, k, n](Node& self) {
      // dA = dC * B^T ; dB = A^T * dC
      if (self.inputs[0]->requires_grad) {
        std::vector<double> da((size_t)m * k);
        gemm_nt(self.grad.data(), self.inputs[1]->data.data(), da.data(), m, n, k, n, n, k);
        self.inputs[0]->accum_grad(da.data(), (int64_t)m * k);
      }
      if (self.inputs[1]->requires_grad) {
        std::vector<double> db((size_t)k * n);
        gemm_tn(self.inputs[0]->data.data(), self.grad.data(), db.data(), k, m, n, k, n, n);
        self.inputs[1]->accum_grad(db.data(), (int64_t)k * n);
      }
    };
  return finalize(out, "matmul");
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (numel_of(shape) != a.numel())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " to " + shape_str(shape));
  Tensor out = make_op(shape, {a});
  std::memcpy(out.data(), a.data(), sizeof(double) * a.numel());
  if (out.requires_grad())
    out.node()->backprop = [n = a.numel()](Node& self) {
      self.inputs[0]->accum_grad(self.grad.data(), n);
    };
  return out;
}

Tensor transpose2d(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose2d: rank " + std::to_string(a.rank()));
  int r = a.dim(0), c = a.dim(1);
  Tensor out = make_op({c, r}, {a});
  transpose(a.data(), out.data(), r, c);
  if (out.requires_grad())
    out.node()->backprop = [r, c](Node& self) {
      std::vector<double> g((size_t)r * c);
      transpose(self.grad.data(), g.data(), c, r);
      self.inputs[0]->accum_grad(g.data(), (int64_t)r * c);
    };
  return out;
}

Tensor concat_channel(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_channel: no inputs");
  const Shape& s0 = parts[0].shape();
  if (s0.size() != 4) throw std::invalid_argument("concat_channel: expects (B,C,H,W)");
  int B = s0[0], H = s0[2], W = s0[3], C = 0;
  for (const auto& p : parts) {
    if (p.rank() != 4 || p.dim(0) != B || p.dim(2) != H || p.dim(3) != W)
      throw std::invalid_argument("concat_channel: mismatched part " + shape_str(p.shape()));
    C += p.dim(1);
  }
  Tensor out = make_op({B, C, H, W}, parts);
  int64_t hw = (int64_t)H * W;
  double* po = out.data();
  for (int b = 0; b < B; ++b) {
    int64_t coff = 0;
    for (const auto& p : parts) {
      int64_t pc = p.dim(1);
      std::memcpy(po + (b * (int64_t)C + coff) * hw, p.data() + b * pc * hw,
                  sizeof(double) * pc * hw);
      coff += pc;
    }
  }
  if (out.requires_grad())
    out.node()->backprop = [B, C, hw](Node& self) {
      for (int b = 0; b < B; ++b) {
        int64_t coff = 0;
        for (auto& in : self.inputs) {
          int64_t pc = in->shape[1];
          if (in->requires_grad) {
            double* g = in->grad_buf() + b * pc * hw;
            const double* src = self.grad.data() + (b * (int64_t)C + coff) * hw;
            for (int64_t i = 0; i < pc * hw; ++i) g[i] += src[i];
          }
          coff += pc;
        }
      }
    };
  return out;
}

Tensor slice_channel(const Tensor& a, int from, int to) {
  if (a.rank() != 4) throw std::invalid_argument("slice_channel: expects (B,C,H,W)");
  int B = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
  if (from < 0 || to > C || from >= to)
    throw std::invalid_argument("slice_channel: [" + std::to_string(from) + "," +
                                std::to_string(to) + ") of C=" + std::to_string(C));
  int Cs = to - from;
  Tensor out = make_op({B, Cs, H, W}, {a});
  int64_t hw = (int64_t)H * W;
  for (int b = 0; b < B; ++b)
    std::memcpy(out.data() + b * (int64_t)Cs * hw, a.data() + (b * (int64_t)C + from) * hw,
                sizeof(double) * Cs * hw);
  if (out.requires_grad())
    out.node()->backprop = [B, C, Cs, from, hw](Node& self) {
      double* g = self.inputs[0]->grad_buf();
      for (int b = 0; b < B; ++b) {
        const double* src = self.grad.data() + b * (int64_t)Cs * hw;
        double* dst = g + (b * (int64_t)C + from) * hw;
        for (int64_t i = 0; i < Cs * hw; ++i) dst[i] += src[i];
      }
    };
  return out;
}

Tensor sum(const Tensor& a) {
  Tensor out = make_op({1}, {a});
  const double* pa = a.data();
  double s = 0.0;
  for (int64_t i = 0, n = a.numel(); i < n; ++i) s += pa[i];
  out.data()[0] = s;
  if (out.requires_grad())
    out.node()->backprop = [n = a.numel()](Node& self) {
      double g = self.grad[0];
      double* gi = self.inputs[0]->grad_buf();
      for (int64_t i = 0; i < n; ++i) gi[i] += g;
    };
  return finalize(out, "sum");
}

Tensor mean(const Tensor& a) {
  int64_t n = a.numel();
  if (n == 0) throw std::invalid_argument("mean: empty tensor");
  Tensor out = make_op({1}, {a});
  const double* pa = a.data();
  double s = 0.0;
  for (int64_t i = 0; i < n; ++i) s += pa[i];
  out.data()[0] = s / (double)n;
  if (out.requires_grad())
    out.node()->backprop = [n](Node& self) {
      double g = self.grad[0] / (double)n;
      double* gi = self.inputs[0]->grad_buf();
      for (int64_t i = 0; i < n; ++i) gi[i] += g;
    };
  return finalize(out, "mean");
}

}  // namespace mswt
