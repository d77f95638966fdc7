#include "mswt/nn.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "mswt/gemm.hpp"

namespace mswt {

namespace {

// Grow-only scratch pads for the GEMM staging copies. Single training loop,
// so plain function-local statics (thread_local for safety) are fine.
thread_local std::vector<double> s_pack_a, s_pack_b, s_pack_c, s_pack_d;

double* scratch(std::vector<double>& s, size_t n) {
  if (s.size() < n) s.resize(n);
  return s.data();
}

Tensor finalize(Tensor out, const char* what) {
  if (strict_finite()) check_finite(out, what);
  return out;
}

}  // namespace

// ---- conv2d -----------------------------------------------------------------

namespace {

struct ConvDims {
  int B, Cin, H, W, Cout, kh, kw, Ho, Wo, stride, pad;
  int64_t K() const { return (int64_t)Cin * kh * kw; }
  int64_t N() const { return (int64_t)Ho * Wo; }
};

ConvDims conv_dims(const Tensor& x, const Conv2dParams& p) {
  if (x.rank() != 4) throw std::invalid_argument("conv2d: input must be (B,C,H,W)");
  if (p.weight.rank() != 4) throw std::invalid_argument("conv2d: weight must be (O,I,kh,kw)");
  ConvDims d;
  d.B = x.dim(0), d.Cin = x.dim(1), d.H = x.dim(2), d.W = x.dim(3);
  d.Cout = p.weight.dim(0), d.kh = p.weight.dim(2), d.kw = p.weight.dim(3);
  d.stride = p.stride, d.pad = p.pad;
  if (p.weight.dim(1) != d.Cin)
    throw std::invalid_argument("conv2d: weight expects " + std::to_string(p.weight.dim(1)) +
                                " input channels, got " + std::to_string(d.Cin));
  int eh = d.H + 2 * d.pad - d.kh, ew = d.W + 2 * d.pad - d.kw;
  if (eh < 0 || ew < 0 || eh % d.stride || ew % d.stride)
    throw std::invalid_argument("conv2d: non-integral output extent for H=" + std::to_string(d.H) +
                                " k=" + std::to_string(d.kh) + " stride=" +
                                std::to_string(d.stride) + " pad=" + std::to_string(d.pad));
  d.Ho = eh / d.stride + 1;
  d.Wo = ew / d.stride + 1;
  return d;
}

// Patch matrix for one sample: row per output position, column per
// (ci,ky,kx), zero padding outside the image.
void im2col(const double* xs, const ConvDims& d, double* P) {
  int64_t K = d.K();
  for (int oy = 0; oy < d.Ho; ++oy) {
    for (int ox = 0; ox < d.Wo; ++ox) {
      double* row = P + ((int64_t)oy * d.Wo + ox) * K;
      int iy0 = oy * d.stride - d.pad, ix0 = ox * d.stride - d.pad;
      int64_t col = 0;
      for (int ci = 0; ci < d.Cin; ++ci) {
        const double* plane = xs + (int64_t)ci * d.H * d.W;
        for (int ky = 0; ky < d.kh; ++ky) {
          int iy = iy0 + ky;
          if (iy < 0 || iy >= d.H) {
            for (int kx = 0; kx < d.kw; ++kx) row[col++] = 0.0;
            continue;
          }
          for (int kx = 0; kx < d.kw; ++kx) {
            int ix = ix0 + kx;
            row[col++] = (ix < 0 || ix >= d.W) ? 0.0 : plane[(int64_t)iy * d.W + ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* P, const ConvDims& d, double* gxs) {
  int64_t K = d.K();
  for (int oy = 0; oy < d.Ho; ++oy) {
    for (int ox = 0; ox < d.Wo; ++ox) {
      const double* row = P + ((int64_t)oy * d.Wo + ox) * K;
      int iy0 = oy * d.stride - d.pad, ix0 = ox * d.stride - d.pad;
      int64_t col = 0;
      for (int ci = 0; ci < d.Cin; ++ci) {
        double* plane = gxs + (int64_t)ci * d.H * d.W;
        for (int ky = 0; ky < d.kh; ++ky) {
          int iy = iy0 + ky;
          if (iy < 0 || iy >= d.H) {
            col += d.kw;
            continue;
          }
          for (int kx = 0; kx < d.kw; ++kx) {
            int ix = ix0 + kx;
            if (ix >= 0 && ix < d.W) plane[(int64_t)iy * d.W + ix] += row[col];
            ++col;
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Conv2dParams& p) {
  ConvDims d = conv_dims(x, p);
  int64_t K = d.K(), N = d.N();
  Tensor out = make_op({d.B, d.Cout, d.Ho, d.Wo}, {x, p.weight, p.bias});

  // out_sample (Cout,N) = W (Cout,K) . P^T: written straight into the output
  // layout, with the patch panel packed inside the kernel instead of staging
  // W^T and transposing the product back.
  double* P = scratch(s_pack_b, (size_t)(N * K));
  const double* bias = p.bias.data();
  for (int b = 0; b < d.B; ++b) {
    im2col(x.data() + b * (int64_t)d.Cin * d.H * d.W, d, P);
    double* ob = out.data() + b * (int64_t)d.Cout * N;
    gemm_nt(p.weight.data(), P, ob, d.Cout, (int)K, (int)N, (int)K, (int)K, (int)N);
    for (int c = 0; c < d.Cout; ++c) {
      double* r = ob + (int64_t)c * N;
      for (int64_t n = 0; n < N; ++n) r[n] += bias[c];
    }
  }

  if (out.requires_grad())
    out.node()->backprop = [d, K, N](Node& self) {
      Node& xn = *self.inputs[0];
      Node& wn = *self.inputs[1];
      Node& bn = *self.inputs[2];
      double* P = scratch(s_pack_b, (size_t)(N * K));
      double* tmp = scratch(s_pack_c, (size_t)std::max<int64_t>(K * d.Cout, N * K));
      std::vector<double> dW;  // (Cout,K), accumulated across samples
      if (wn.requires_grad) dW.assign((size_t)(d.Cout * K), 0.0);
      for (int b = 0; b < d.B; ++b) {
        const double* dOb = self.grad.data() + b * (int64_t)d.Cout * N;  // (Cout,N)
        if (bn.requires_grad) {
          double* g = bn.grad_buf();
          for (int c = 0; c < d.Cout; ++c) {
            const double* r = dOb + (int64_t)c * N;
            for (int64_t n = 0; n < N; ++n) g[c] += r[n];
          }
        }
        if (wn.requires_grad || xn.requires_grad)
          im2col(xn.data.data() + b * (int64_t)d.Cin * d.H * d.W, d, P);
        if (wn.requires_grad) {
          // dW_b (Cout,K) = dO_b (Cout,N) . P (N,K)
          gemm(dOb, P, tmp, d.Cout, (int)N, (int)K);
          for (int64_t i = 0; i < (int64_t)d.Cout * K; ++i) dW[i] += tmp[i];
        }
        if (xn.requires_grad) {
          // dP (N,K) = dO_b^T . W (Cout,K); reuse tmp as dP.
          gemm_tn(dOb, wn.data.data(), tmp, (int)N, d.Cout, (int)K, (int)N, (int)K, (int)K);
          col2im_add(tmp, d, xn.grad_buf() + b * (int64_t)d.Cin * d.H * d.W);
        }
      }
      if (wn.requires_grad) {
        double* g = wn.grad_buf();
        for (int64_t i = 0; i < (int64_t)d.Cout * K; ++i) g[i] += dW[i];
      }
    };
  return finalize(out, "conv2d");
}

// ---- batchnorm2d -------------------------------------------------------------

Tensor batchnorm2d(const Tensor& x, BatchNorm2d& bn, bool train) {
  if (x.rank() != 4) throw std::invalid_argument("batchnorm2d: input must be (B,C,H,W)");
  int B = x.dim(0), C = x.dim(1);
  int64_t HW = (int64_t)x.dim(2) * x.dim(3);
  int64_t N = (int64_t)B * HW;  // reduction count per channel
  if (bn.gamma.numel() != C)
    throw std::invalid_argument("batchnorm2d: channel mismatch");
  if ((size_t)C != bn.state.running_mean.size())
    throw std::invalid_argument("batchnorm2d: state size mismatch");

  std::vector<double> mean(C), var(C);
  if (train) {
    if (N < 2) throw std::invalid_argument("batchnorm2d: needs more than one value per channel");
    for (int c = 0; c < C; ++c) {
      double s = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* p = x.data() + (b * (int64_t)C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) s += p[i];
      }
      double mu = s / (double)N;
      double v = 0.0;
      for (int b = 0; b < B; ++b) {
        const double* p = x.data() + (b * (int64_t)C + c) * HW;
        for (int64_t i = 0; i < HW; ++i) v += (p[i] - mu) * (p[i] - mu);
      }
      mean[c] = mu;
      var[c] = v / (double)N;
      bn.state.running_mean[c] =
          (1.0 - bn.momentum) * bn.state.running_mean[c] + bn.momentum * mu;
      bn.state.running_var[c] = (1.0 - bn.momentum) * bn.state.running_var[c] +
                                bn.momentum * (v / (double)(N - 1));
    }
    bn.state.batches_tracked++;
  } else {
    if (bn.state.batches_tracked == 0)
      throw std::invalid_argument("batchnorm2d: eval mode before any batch statistics recorded");
    mean = bn.state.running_mean;
    var = bn.state.running_var;
  }

  Tensor out = make_op(x.shape(), {x, bn.gamma, bn.beta});
  std::vector<double> inv_std(C);
  for (int c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + bn.eps);
  const double* g = bn.gamma.data();
  const double* be = bn.beta.data();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* p = x.data() + (b * (int64_t)C + c) * HW;
      double* o = out.data() + (b * (int64_t)C + c) * HW;
      double a = g[c] * inv_std[c], sh = be[c] - a * mean[c];
      for (int64_t i = 0; i < HW; ++i) o[i] = a * p[i] + sh;
    }

  if (out.requires_grad())
    out.node()->backprop = [B, C, HW, N, train, mean, inv_std](Node& self) {
      Node& xn = *self.inputs[0];
      Node& gn = *self.inputs[1];
      Node& bn_ = *self.inputs[2];
      const double* gamma = gn.data.data();
      // Per channel: sums of dy and dy*xhat over the batch.
      for (int c = 0; c < C; ++c) {
        double sum_dy = 0.0, sum_dyx = 0.0;
        for (int b = 0; b < B; ++b) {
          const double* dy = self.grad.data() + (b * (int64_t)C + c) * HW;
          const double* xp = xn.data.data() + (b * (int64_t)C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) {
            double xh = (xp[i] - mean[c]) * inv_std[c];
            sum_dy += dy[i];
            sum_dyx += dy[i] * xh;
          }
        }
        if (gn.requires_grad) gn.grad_buf()[c] += sum_dyx;
        if (bn_.requires_grad) bn_.grad_buf()[c] += sum_dy;
        if (xn.requires_grad) {
          double* gx = xn.grad_buf();
          double k = gamma[c] * inv_std[c];
          if (train) {
            double m_dy = sum_dy / (double)N, m_dyx = sum_dyx / (double)N;
            for (int b = 0; b < B; ++b) {
              const double* dy = self.grad.data() + (b * (int64_t)C + c) * HW;
              const double* xp = xn.data.data() + (b * (int64_t)C + c) * HW;
              double* gxp = gx + (b * (int64_t)C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) {
                double xh = (xp[i] - mean[c]) * inv_std[c];
                gxp[i] += k * (dy[i] - m_dy - xh * m_dyx);
              }
            }
          } else {
            for (int b = 0; b < B; ++b) {
              const double* dy = self.grad.data() + (b * (int64_t)C + c) * HW;
              double* gxp = gx + (b * (int64_t)C + c) * HW;
              for (int64_t i = 0; i < HW; ++i) gxp[i] += k * dy[i];
            }
          }
        }
      }
    };
  return finalize(out, "batchnorm2d");
}

// ---- relu / pooling ------------------------------------------------------------

Tensor relu(const Tensor& x) {
  Tensor out = make_op(x.shape(), {x});
  const double* p = x.data();
  double* o = out.data();
  int64_t n = x.numel();
  for (int64_t i = 0; i < n; ++i) o[i] = p[i] > 0.0 ? p[i] : 0.0;
  if (out.requires_grad())
    out.node()->backprop = [n](Node& self) {
      double* g = self.inputs[0]->grad_buf();
      for (int64_t i = 0; i < n; ++i)
        if (self.data[i] > 0.0) g[i] += self.grad[i];
    };
  return finalize(out, "relu");
}

Tensor maxpool2d(const Tensor& x, int k, int stride) {
  if (x.rank() != 4) throw std::invalid_argument("maxpool2d: input must be (B,C,H,W)");
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  if ((H - k) % stride || (W - k) % stride || H < k || W < k)
    throw std::invalid_argument("maxpool2d: non-integral output extent");
  int Ho = (H - k) / stride + 1, Wo = (W - k) / stride + 1;
  Tensor out = make_op({B, C, Ho, Wo}, {x});
  auto argmax = std::make_shared<std::vector<int32_t>>((size_t)B * C * Ho * Wo);
  int64_t plane = (int64_t)H * W, oplane = (int64_t)Ho * Wo;
  for (int bc = 0; bc < B * C; ++bc) {
    const double* p = x.data() + bc * plane;
    double* o = out.data() + bc * oplane;
    int32_t* am = argmax->data() + bc * oplane;
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        int iy0 = oy * stride, ix0 = ox * stride;
        double best = p[(int64_t)iy0 * W + ix0];
        int32_t bi = iy0 * W + ix0;
        for (int ky = 0; ky < k; ++ky)
          for (int kx = 0; kx < k; ++kx) {
            int32_t idx = (iy0 + ky) * W + (ix0 + kx);
            if (p[idx] > best) {
              best = p[idx];
              bi = idx;
            }
          }
        o[(int64_t)oy * Wo + ox] = best;
        am[(int64_t)oy * Wo + ox] = bi;
      }
  }
  if (out.requires_grad())
    out.node()->backprop = [B, C, plane, oplane, argmax](Node& self) {
      double* g = self.inputs[0]->grad_buf();
      for (int bc = 0; bc < B * C; ++bc) {
        const int32_t* am = argmax->data() + bc * oplane;
        const double* dy = self.grad.data() + bc * oplane;
        double* gp = g + bc * plane;
        for (int64_t i = 0; i < oplane; ++i) gp[am[i]] += dy[i];
      }
    };
  return finalize(out, "maxpool2d");
}

Tensor global_avg_pool(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("global_avg_pool: input must be (B,C,H,W)");
  int B = x.dim(0), C = x.dim(1);
  int64_t HW = (int64_t)x.dim(2) * x.dim(3);
  Tensor out = make_op({B, C}, {x});
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      const double* p = x.data() + (b * (int64_t)C + c) * HW;
      double s = 0.0;
      for (int64_t i = 0; i < HW; ++i) s += p[i];
      out.data()[b * C + c] = s / (double)HW;
    }
  if (out.requires_grad())
    out.node()->backprop = [B, C, HW](Node& self) {
      double* g = self.inputs[0]->grad_buf();
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
          double dv = self.grad[b * C + c] / (double)HW;
          double* gp = g + (b * (int64_t)C + c) * HW;
          for (int64_t i = 0; i < HW; ++i) gp[i] += dv;
        }
    };
  return finalize(out, "global_avg_pool");
}

// ---- linear -------------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2) throw std::invalid_argument("linear: weight must be (din,dout)");
  int din = w.dim(0), dout = w.dim(1);
  if (x.dim(x.rank() - 1) != din)
    throw std::invalid_argument("linear: input features " + std::to_string(x.dim(x.rank() - 1)) +
                                " vs weight " + std::to_string(din));
  if (b.numel() != dout) throw std::invalid_argument("linear: bias size mismatch");
  int64_t M = x.numel() / din;
  Shape oshape = x.shape();
  oshape.back() = dout;
  Tensor out = make_op(oshape, {x, w, b});
  gemm(x.data(), w.data(), out.data(), (int)M, din, dout);
  const double* bp = b.data();
  for (int64_t i = 0; i < M; ++i) {
    double* r = out.data() + i * dout;
    for (int j = 0; j < dout; ++j) r[j] += bp[j];
  }
  if (out.requires_grad())
    out.node()->backprop = [M, din, dout](Node& self) {
      Node& xn = *self.inputs[0];
      Node& wn = *self.inputs[1];
      Node& bn = *self.inputs[2];
      if (bn.requires_grad) {
        double* g = bn.grad_buf();
        for (int64_t i = 0; i < M; ++i)
          for (int j = 0; j < dout; ++j) g[j] += self.grad[i * dout + j];
      }
      if (xn.requires_grad) {
        // dX = dY . W^T
        double* dx = scratch(s_pack_b, (size_t)M * din);
        gemm_nt(self.grad.data(), wn.data.data(), dx, (int)M, dout, din, dout, dout, din);
        xn.accum_grad(dx, M * din);
      }
      if (wn.requires_grad) {
        // dW = X^T . dY
        double* dw = scratch(s_pack_b, (size_t)din * dout);
        gemm_tn(xn.data.data(), self.grad.data(), dw, din, (int)M, dout, din, dout, dout);
        wn.accum_grad(dw, (int64_t)din * dout);
      }
    };
  return finalize(out, "linear");
}

// ---- layer norm ------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  int d = x.dim(x.rank() - 1);
  if (gamma.numel() != d || beta.numel() != d)
    throw std::invalid_argument("layer_norm: affine size mismatch");
  int64_t M = x.numel() / d;
  Tensor out = make_op(x.shape(), {x, gamma, beta});
  auto stats = std::make_shared<std::vector<double>>(2 * M);  // mean, inv_std per row
  const double* g = gamma.data();
  const double* be = beta.data();
  for (int64_t i = 0; i < M; ++i) {
    const double* p = x.data() + i * d;
    double* o = out.data() + i * d;
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += p[j];
    double mu = s / d;
    double v = 0.0;
    for (int j = 0; j < d; ++j) v += (p[j] - mu) * (p[j] - mu);
    double is = 1.0 / std::sqrt(v / d + eps);
    (*stats)[2 * i] = mu;
    (*stats)[2 * i + 1] = is;
    for (int j = 0; j < d; ++j) o[j] = g[j] * ((p[j] - mu) * is) + be[j];
  }
  if (out.requires_grad())
    out.node()->backprop = [M, d, stats](Node& self) {
      Node& xn = *self.inputs[0];
      Node& gn = *self.inputs[1];
      Node& bn = *self.inputs[2];
      const double* gamma = gn.data.data();
      for (int64_t i = 0; i < M; ++i) {
        const double* dy = self.grad.data() + i * d;
        const double* p = xn.data.data() + i * d;
        double mu = (*stats)[2 * i], is = (*stats)[2 * i + 1];
        if (gn.requires_grad || bn.requires_grad) {
          double* gg = gn.requires_grad ? gn.grad_buf() : nullptr;
          double* gb = bn.requires_grad ? bn.grad_buf() : nullptr;
          for (int j = 0; j < d; ++j) {
            double xh = (p[j] - mu) * is;
            if (gg) gg[j] += dy[j] * xh;
            if (gb) gb[j] += dy[j];
          }
        }
        if (xn.requires_grad) {
          double m_dxh = 0.0, m_dxx = 0.0;
          for (int j = 0; j < d; ++j) {
            double xh = (p[j] - mu) * is;
            double dxh = dy[j] * gamma[j];
            m_dxh += dxh;
            m_dxx += dxh * xh;
          }
          m_dxh /= d;
          m_dxx /= d;
          double* gx = xn.grad_buf() + i * d;
          for (int j = 0; j < d; ++j) {
            double xh = (p[j] - mu) * is;
            double dxh = dy[j] * gamma[j];
            gx[j] += is * (dxh - m_dxh - xh * m_dxx);
          }
        }
      }
    };
  return finalize(out, "layer_norm");
}

// ---- softmax -----------------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  if (axis < 0 || axis >= x.rank()) throw std::invalid_argument("softmax: bad axis");
  int d = x.dim(axis);
  int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  Tensor out = make_op(x.shape(), {x});
  std::vector<double> row(d);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      const double* p = x.data() + o * d * inner + in;
      double* op = out.data() + o * d * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < d; ++j) {
        double v = p[j * inner];
        // NaN compares false against everything, so a plain max scan would
        // silently skip it; test each element.
        if (std::isnan(v)) throw numeric_error("softmax: NaN input");
        mx = v > mx ? v : mx;
      }
      for (int j = 0; j < d; ++j) row[j] = p[j * inner] - mx;
      vexp(row.data(), d);
      double s = 0.0;
      for (int j = 0; j < d; ++j) s += row[j];
      for (int j = 0; j < d; ++j) op[j * inner] = row[j] / s;
    }
  if (out.requires_grad())
    out.node()->backprop = [d, inner, outer](Node& self) {
      double* gx = self.inputs[0]->grad_buf();
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          const double* pp = self.data.data() + o * d * inner + in;
          const double* dy = self.grad.data() + o * d * inner + in;
          double dot = 0.0;
          for (int j = 0; j < d; ++j) dot += pp[j * inner] * dy[j * inner];
          double* g = gx + o * d * inner + in;
          for (int j = 0; j < d; ++j) g[j * inner] += pp[j * inner] * (dy[j * inner] - dot);
        }
    };
  return finalize(out, "softmax");
}

// ---- token reshaping -----------------------------------------------------------------

Tensor tokens_from_nchw(const Tensor& x) {
  if (x.rank() != 4) throw std::invalid_argument("tokens_from_nchw: input must be (B,C,H,W)");
  int B = x.dim(0), C = x.dim(1);
  int64_t HW = (int64_t)x.dim(2) * x.dim(3);
  Tensor out = make_op({B, (int)HW, C}, {x});
  for (int b = 0; b < B; ++b)
    transpose(x.data() + b * C * HW, out.data() + b * C * HW, C, (int)HW);
  if (out.requires_grad())
    out.node()->backprop = [B, C, HW](Node& self) {
      Node& xn = *self.inputs[0];
      double* g = xn.grad_buf();
      std::vector<double> tmp((size_t)C * HW);
      for (int b = 0; b < B; ++b) {
        transpose(self.grad.data() + b * C * HW, tmp.data(), (int)HW, C);
        double* gp = g + b * C * HW;
        for (int64_t i = 0; i < C * HW; ++i) gp[i] += tmp[i];
      }
    };
  return out;
}

Tensor nchw_from_tokens(const Tensor& t, int h, int w) {
  if (t.rank() != 3) throw std::invalid_argument("nchw_from_tokens: input must be (B,T,d)");
  int B = t.dim(0), T = t.dim(1), d = t.dim(2);
  if (T != h * w) throw std::invalid_argument("nchw_from_tokens: T != h*w");
  Tensor out = make_op({B, d, h, w}, {t});
  int64_t Td = (int64_t)T * d;
  for (int b = 0; b < B; ++b)
    transpose(t.data() + b * Td, out.data() + b * Td, T, d);
  if (out.requires_grad())
    out.node()->backprop = [B, T, d, Td](Node& self) {
      Node& tn = *self.inputs[0];
      double* g = tn.grad_buf();
      std::vector<double> tmp((size_t)Td);
      for (int b = 0; b < B; ++b) {
        transpose(self.grad.data() + b * Td, tmp.data(), d, T);
        double* gp = g + b * Td;
        for (int64_t i = 0; i < Td; ++i) gp[i] += tmp[i];
      }
    };
  return out;
}

// ---- attention -------------------------------------------------------------------------

namespace {

// Total order on doubles via the sign-magnitude flip trick: orders like <,
// with -0.0 before +0.0, so only bit-identical rows ever tie.
inline uint64_t ordered_bits(double x) {
  uint64_t b;
  std::memcpy(&b, &x, 8);
  return (b & 0x8000000000000000ull) ? ~b : (b | 0x8000000000000000ull);
}

// Per batch element: indices of key/value rows sorted by content, key row
// first, value row as tie-break. Jointly permuting the rows of k and v leaves
// the sorted sequence (and everything computed in its order) unchanged.
std::vector<std::vector<int>> canonical_order(const Tensor& k, const Tensor& v) {
  int B = k.dim(0), S = k.dim(1), dk = k.dim(2), dv = v.dim(2);
  std::vector<std::vector<int>> order(B);
  for (int b = 0; b < B; ++b) {
    order[b].resize(S);
    std::iota(order[b].begin(), order[b].end(), 0);
    const double* kp = k.data() + (int64_t)b * S * dk;
    const double* vp = v.data() + (int64_t)b * S * dv;
    std::sort(order[b].begin(), order[b].end(), [&](int a, int c) {
      const double* ka = kp + (int64_t)a * dk;
      const double* kc = kp + (int64_t)c * dk;
      for (int j = 0; j < dk; ++j) {
        uint64_t x = ordered_bits(ka[j]), y = ordered_bits(kc[j]);
        if (x != y) return x < y;
      }
      const double* va = vp + (int64_t)a * dv;
      const double* vc = vp + (int64_t)c * dv;
      for (int j = 0; j < dv; ++j) {
        uint64_t x = ordered_bits(va[j]), y = ordered_bits(vc[j]);
        if (x != y) return x < y;
      }
      return false;
    });
  }
  return order;
}

Tensor gather_tokens(const Tensor& x, const std::vector<std::vector<int>>& order) {
  int B = x.dim(0), S = x.dim(1), d = x.dim(2);
  Tensor out = make_op(x.shape(), {x});
  for (int b = 0; b < B; ++b) {
    const double* src = x.data() + (int64_t)b * S * d;
    double* dst = out.data() + (int64_t)b * S * d;
    for (int s = 0; s < S; ++s)
      std::memcpy(dst + (int64_t)s * d, src + (int64_t)order[b][s] * d, sizeof(double) * d);
  }
  if (out.requires_grad())
    out.node()->backprop = [B, S, d, order](Node& self) {
      double* g = self.inputs[0]->grad_buf();
      for (int b = 0; b < B; ++b) {
        const double* src = self.grad.data() + (int64_t)b * S * d;
        double* dst = g + (int64_t)b * S * d;
        for (int s = 0; s < S; ++s) {
          double* row = dst + (int64_t)order[b][s] * d;
          const double* srow = src + (int64_t)s * d;
          for (int j = 0; j < d; ++j) row[j] += srow[j];
        }
      }
    };
  return out;
}

// Scaled dot-product attention over post-projection tokens. Returns the
// context tokens and the probability tensor (B,heads,T,S) in the key order it
// was given (callers pass canonically ordered keys/values).
std::pair<Tensor, std::shared_ptr<std::vector<double>>> attention_core(const Tensor& Q,
                                                                       const Tensor& K,
                                                                       const Tensor& V, int heads) {
  int B = Q.dim(0), T = Q.dim(1), d = Q.dim(2), S = K.dim(1);
  int dh = d / heads;
  double scale = 1.0 / std::sqrt((double)dh);
  auto probs = std::make_shared<std::vector<double>>((size_t)B * heads * T * S);
  Tensor ctx = make_op({B, T, d}, {Q, K, V});

  auto pack_head = [](const double* src, int rows, int d_full, int h0, int dh_, double mul,
                      double* dst) {
    for (int r = 0; r < rows; ++r) {
      const double* s = src + (int64_t)r * d_full + h0;
      double* o = dst + (int64_t)r * dh_;
      for (int j = 0; j < dh_; ++j) o[j] = s[j] * mul;
    }
  };

  for (int b = 0; b < B; ++b) {
    for (int h = 0; h < heads; ++h) {
      int h0 = h * dh;
      double* Qs = scratch(s_pack_a, (size_t)T * dh);
      pack_head(Q.data() + (int64_t)b * T * d, T, d, h0, dh, scale, Qs);
      // scores = Qs . K_head^T, reading the K head slice in place (row stride d)
      double* P = probs->data() + ((int64_t)b * heads + h) * T * S;
      gemm_nt(Qs, K.data() + (int64_t)b * S * d + h0, P, T, dh, S, dh, d, S);
      // softmax rows in place
      for (int t = 0; t < T; ++t) {
        double* row = P + (int64_t)t * S;
        double mx = -std::numeric_limits<double>::infinity();
        for (int s = 0; s < S; ++s) {
          // NaN compares false against everything, so a plain max scan would
          // silently skip it; test each element.
          if (std::isnan(row[s])) throw numeric_error("attention: NaN scores");
          mx = row[s] > mx ? row[s] : mx;
        }
        for (int s = 0; s < S; ++s) row[s] -= mx;
        vexp(row, S);
        double sum = 0.0;
        for (int s = 0; s < S; ++s) sum += row[s];
        double inv = 1.0 / sum;
        for (int s = 0; s < S; ++s) row[s] *= inv;
      }
      // ctx head = P . V_head, reading V in place and writing the ctx slice
      // directly (both with row stride d)
      gemm(P, V.data() + (int64_t)b * S * d + h0, ctx.data() + (int64_t)b * T * d + h0, T, S, dh,
           S, d, d);
    }
  }

  if (ctx.requires_grad())
    ctx.node()->backprop = [B, T, S, d, dh, heads, scale, probs](Node& self) {
      Node& qn = *self.inputs[0];
      Node& kn = *self.inputs[1];
      Node& vn = *self.inputs[2];
      auto pack_head = [](const double* src, int rows, int d_full, int h0, int dh_, double mul,
                          double* dst) {
        for (int r = 0; r < rows; ++r) {
          const double* s = src + (int64_t)r * d_full + h0;
          double* o = dst + (int64_t)r * dh_;
          for (int j = 0; j < dh_; ++j) o[j] = s[j] * mul;
        }
      };
      double* dP = scratch(s_pack_a, (size_t)T * S);
      for (int b = 0; b < B; ++b) {
        for (int h = 0; h < heads; ++h) {
          int h0 = h * dh;
          const double* P = probs->data() + ((int64_t)b * heads + h) * T * S;
          // dCtx head = self.grad slice (T,dh) with row stride d, read in place
          const double* dCh = self.grad.data() + (int64_t)b * T * d + h0;
          // dP = dCh . V_head^T
          gemm_nt(dCh, vn.data.data() + (int64_t)b * S * d + h0, dP, T, dh, S, d, d, S);
          if (vn.requires_grad) {
            // dVh = P^T . dCh
            double* dVh = scratch(s_pack_d, (size_t)S * dh);
            gemm_tn(P, dCh, dVh, S, T, dh, S, d, dh);
            double* gv = vn.grad_buf() + (int64_t)b * S * d;
            for (int s = 0; s < S; ++s)
              for (int j = 0; j < dh; ++j) gv[(int64_t)s * d + h0 + j] += dVh[(int64_t)s * dh + j];
          }
          // softmax backward in place on dP
          for (int t = 0; t < T; ++t) {
            const double* pr = P + (int64_t)t * S;
            double* dr = dP + (int64_t)t * S;
            double dot = 0.0;
            for (int s = 0; s < S; ++s) dot += pr[s] * dr[s];
            for (int s = 0; s < S; ++s) dr[s] = pr[s] * (dr[s] - dot);
          }
          if (qn.requires_grad) {
            // dQh = scale * dS . K_head, K read in place
            double* dQh = scratch(s_pack_d, (size_t)T * dh);
            gemm(dP, kn.data.data() + (int64_t)b * S * d + h0, dQh, T, S, dh, S, d, dh);
            double* gq = qn.grad_buf() + (int64_t)b * T * d;
            for (int t = 0; t < T; ++t)
              for (int j = 0; j < dh; ++j)
                gq[(int64_t)t * d + h0 + j] += dQh[(int64_t)t * dh + j] * scale;
          }
          if (kn.requires_grad) {
            // dKh = dS^T . (scale * Qh)
            double* Qs = scratch(s_pack_c, (size_t)T * dh);
            pack_head(qn.data.data() + (int64_t)b * T * d, T, d, h0, dh, scale, Qs);
            double* dKh = scratch(s_pack_d, (size_t)S * dh);
            gemm_tn(dP, Qs, dKh, S, T, dh, S, dh, dh);
            double* gk = kn.grad_buf() + (int64_t)b * S * d;
            for (int s = 0; s < S; ++s)
              for (int j = 0; j < dh; ++j) gk[(int64_t)s * d + h0 + j] += dKh[(int64_t)s * dh + j];
          }
        }
      }
    };
  return {finalize(ctx, "attention"), probs};
}

}  // namespace

Tensor AttnMaps::materialize() const {
  Tensor t = Tensor::zeros({B, heads, T, S});
  double* o = t.data();
  for (int b = 0; b < B; ++b)
    for (int h = 0; h < heads; ++h) {
      const double* src = probs->data() + ((int64_t)b * heads + h) * T * S;
      double* dst = o + ((int64_t)b * heads + h) * T * S;
      for (int tt = 0; tt < T; ++tt)
        for (int s = 0; s < S; ++s) dst[(int64_t)tt * S + order[b][s]] = src[(int64_t)tt * S + s];
    }
  return t;
}

double AttnMaps::at(int b, int h, int t, int s) const {
  // order maps canonical position -> original index; invert on the fly.
  for (int j = 0; j < S; ++j)
    if (order[b][j] == s) return (*probs)[(((int64_t)b * heads + h) * T + t) * S + j];
  throw std::invalid_argument("AttnMaps::at: index out of range");
}

MhaOutput mha(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const MhaParams& p) {
  if (q_in.rank() != 3 || k_in.rank() != 3 || v_in.rank() != 3)
    throw std::invalid_argument("mha: token tensors must be (B,T,d)");
  int d = p.d;
  if (d <= 0 || p.heads <= 0 || d % p.heads)
    throw std::invalid_argument("mha: embed dim " + std::to_string(d) +
                                " not divisible by heads " + std::to_string(p.heads));
  if (q_in.dim(2) != d || k_in.dim(2) != d || v_in.dim(2) != d)
    throw std::invalid_argument("mha: token dim mismatch with params");
  if (k_in.dim(0) != q_in.dim(0) || v_in.dim(0) != q_in.dim(0) || k_in.dim(1) != v_in.dim(1))
    throw std::invalid_argument("mha: batch/key-count mismatch");

  auto order = canonical_order(k_in, v_in);
  Tensor k_s = gather_tokens(k_in, order);
  Tensor v_s = gather_tokens(v_in, order);
  Tensor Q = linear(q_in, p.wq, p.bq);
  Tensor K = linear(k_s, p.wk, p.bk);
  Tensor V = linear(v_s, p.wv, p.bv);
  auto [ctx, probs] = attention_core(Q, K, V, p.heads);
  Tensor out = linear(ctx, p.wo, p.bo);

  AttnMaps maps;
  maps.probs = probs;
  maps.order = std::move(order);
  maps.B = q_in.dim(0);
  maps.heads = p.heads;
  maps.T = q_in.dim(1);
  maps.S = k_in.dim(1);
  return {out, std::move(maps)};
}

// ---- transformer block ---------------------------------------------------------

BlockOutput transformer_block(const Tensor& q, const Tensor& k, const Tensor& v,
                              const Tensor& residual, const TransformerParams& p) {
  if (residual.shape() != q.shape())
    throw std::invalid_argument("transformer_block: residual/query shape mismatch");
  MhaOutput att = mha(q, k, v, p.att);
  Tensor z = layer_norm(add(residual, att.out), p.ln1_g, p.ln1_b);
  Tensor f = linear(relu(linear(z, p.w1, p.b1)), p.w2, p.b2);
  Tensor out = layer_norm(add(z, f), p.ln2_g, p.ln2_b);
  return {out, std::move(att.attn)};
}

BlockOutput transformer_block(const Tensor& q, const Tensor& kv, const TransformerParams& p) {
  return transformer_block(q, kv, kv, q, p);
}

// ---- loss ----------------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be (B,2)");
  int B = logits.dim(0), C = logits.dim(1);
  if ((int)labels.size() != B) throw std::invalid_argument("cross_entropy: label count mismatch");
  for (int y : labels)
    if (y < 0 || y >= C) throw std::invalid_argument("cross_entropy: label out of range");
  Tensor out = make_op({1}, {logits});
  double total = 0.0;
  for (int b = 0; b < B; ++b) {
    const double* p = logits.data() + (int64_t)b * C;
    double mx = p[0];
    for (int j = 1; j < C; ++j) mx = p[j] > mx ? p[j] : mx;
    double s = 0.0;
    for (int j = 0; j < C; ++j) s += std::exp(p[j] - mx);
    total += (mx + std::log(s)) - p[labels[b]];
  }
  out.data()[0] = total / B;
  if (out.requires_grad())
    out.node()->backprop = [B, C, labels](Node& self) {
      Node& ln = *self.inputs[0];
      double g = self.grad[0] / B;
      double* gl = ln.grad_buf();
      for (int b = 0; b < B; ++b) {
        const double* p = ln.data.data() + (int64_t)b * C;
        double mx = p[0];
        for (int j = 1; j < C; ++j) mx = p[j] > mx ? p[j] : mx;
        double s = 0.0;
        for (int j = 0; j < C; ++j) s += std::exp(p[j] - mx);
        for (int j = 0; j < C; ++j) {
          double soft = std::exp(p[j] - mx) / s;
          gl[(int64_t)b * C + j] += g * (soft - (j == labels[b] ? 1.0 : 0.0));
        }
      }
    };
  return finalize(out, "cross_entropy");
}

// ---- optimizer -------------------------------------------------------------------

void AdamW::step(const std::vector<Tensor*>& params, double lr) {
  if (m.empty()) {
    m.resize(params.size());
    v.resize(params.size());
    for (size_t i = 0; i < params.size(); ++i) {
      m[i].assign(params[i]->numel(), 0.0);
      v[i].assign(params[i]->numel(), 0.0);
    }
  }
  if (m.size() != params.size()) throw std::invalid_argument("AdamW: parameter set changed");
  step_count++;
  double bc1 = 1.0 - std::pow(beta1, (double)step_count);
  double bc2 = 1.0 - std::pow(beta2, (double)step_count);
  for (size_t i = 0; i < params.size(); ++i) {
    Tensor& w = *params[i];
    if (w.numel() != (int64_t)m[i].size()) throw std::invalid_argument("AdamW: shape changed");
    const double* g = w.has_grad() ? w.grad() : nullptr;
    double* wd = w.data();
    for (int64_t j = 0, n = w.numel(); j < n; ++j) {
      double gj = g ? g[j] : 0.0;
      m[i][j] = beta1 * m[i][j] + (1.0 - beta1) * gj;
      v[i][j] = beta2 * v[i][j] + (1.0 - beta2) * gj * gj;
      double mhat = m[i][j] / bc1;
      double vhat = v[i][j] / bc2;
      wd[j] = wd[j] - lr * (mhat / (std::sqrt(vhat) + eps)) - lr * weight_decay * wd[j];
    }
  }
}

double step_lr(int64_t iter, double base_lr, int64_t step_size) {
  if (iter < 0 || step_size <= 0) throw std::invalid_argument("step_lr: bad arguments");
  return std::ldexp(base_lr, (int)-(iter / step_size));
}

// ---- init ------------------------------------------------------------------------

void kaiming_uniform(Tensor& w, int fan_in, Rng& rng) {
  double bound = std::sqrt(6.0 / fan_in);
  double* p = w.data();
  for (int64_t i = 0, n = w.numel(); i < n; ++i) p[i] = rng.uniform(-bound, bound);
}

void xavier_uniform(Tensor& w, int fan_in, int fan_out, Rng& rng) {
  double bound = std::sqrt(6.0 / (fan_in + fan_out));
  double* p = w.data();
  for (int64_t i = 0, n = w.numel(); i < n; ++i) p[i] = rng.uniform(-bound, bound);
}

Conv2dParams make_conv(int out_ch, int in_ch, int k, int stride, int pad, Rng& rng) {
  Conv2dParams p;
  p.weight = Tensor::zeros({out_ch, in_ch, k, k}, true);
  p.bias = Tensor::zeros({out_ch}, true);
  p.stride = stride;
  p.pad = pad;
  kaiming_uniform(p.weight, in_ch * k * k, rng);
  return p;
}

BatchNorm2d make_bn(int ch) {
  BatchNorm2d bn;
  bn.gamma = Tensor::full({ch}, 1.0, true);
  bn.beta = Tensor::zeros({ch}, true);
  bn.state.running_mean.assign(ch, 0.0);
  bn.state.running_var.assign(ch, 1.0);
  return bn;
}

MhaParams make_mha_params(int d, int heads, Rng& rng) {
  MhaParams p;
  p.d = d;
  p.heads = heads;
  for (Tensor* w : {&p.wq, &p.wk, &p.wv, &p.wo}) {
    *w = Tensor::zeros({d, d}, true);
    xavier_uniform(*w, d, d, rng);
  }
  for (Tensor* b : {&p.bq, &p.bk, &p.bv, &p.bo}) *b = Tensor::zeros({d}, true);
  return p;
}

TransformerParams make_transformer_params(int d, int heads, Rng& rng) {
  TransformerParams p;
  p.att = make_mha_params(d, heads, rng);
  p.ln1_g = Tensor::full({d}, 1.0, true);
  p.ln1_b = Tensor::zeros({d}, true);
  p.ln2_g = Tensor::full({d}, 1.0, true);
  p.ln2_b = Tensor::zeros({d}, true);
  p.w1 = Tensor::zeros({d, 2 * d}, true);
  p.b1 = Tensor::zeros({2 * d}, true);
  p.w2 = Tensor::zeros({2 * d, d}, true);
  p.b2 = Tensor::zeros({d}, true);
  xavier_uniform(p.w1, d, 2 * d, rng);
  xavier_uniform(p.w2, 2 * d, d, rng);
  return p;
}

}  // namespace mswt
