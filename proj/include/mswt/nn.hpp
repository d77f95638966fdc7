#pragma once

#include "mswt/rng.hpp"
#include "mswt/tensor.hpp"

namespace mswt {

// ---- convolution ------------------------------------------------------------

struct Conv2dParams {
  Tensor weight;  // (out_ch, in_ch, kh, kw)
  Tensor bias;    // (out_ch)
  int stride = 1;
  int pad = 0;
};

// Cross-correlation plus bias. Output extent (H + 2*pad - kh) / stride + 1
// must be integral or the call throws.
Tensor conv2d(const Tensor& x, const Conv2dParams& p);

// ---- batch norm ---------------------------------------------------------------

struct BnState {
  std::vector<double> running_mean, running_var;
  int64_t batches_tracked = 0;
};

struct BatchNorm2d {
  Tensor gamma, beta;  // (C)
  BnState state;
  double momentum = 0.1;
  double eps = 1e-5;
};

// Train mode normalizes with batch statistics and folds them into the running
// estimates (unbiased variance, like the usual framework convention); eval
// mode normalizes with the running estimates and refuses to run before any
// batch has been recorded.
Tensor batchnorm2d(const Tensor& x, BatchNorm2d& bn, bool train);

// ---- simple layers ------------------------------------------------------------

Tensor relu(const Tensor& x);
Tensor maxpool2d(const Tensor& x, int k = 2, int stride = 2);
Tensor global_avg_pool(const Tensor& x);  // (B,C,H,W) -> (B,C)

// x (..., din) by w (din, dout) plus bias; rank 2 or 3 inputs.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Normalizes the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// Max-subtracted softmax along `axis`; raises numeric_error if the input
// carries NaN.
Tensor softmax(const Tensor& x, int axis);

// (B,C,H,W) <-> (B,H*W,C) token views (physical copies).
Tensor tokens_from_nchw(const Tensor& x);
Tensor nchw_from_tokens(const Tensor& t, int h, int w);

// ---- attention ----------------------------------------------------------------

struct MhaParams {
  Tensor wq, wk, wv, wo;  // (d,d); layout is input-major so fwd is x . w + b
  Tensor bq, bk, bv, bo;  // (d)
  int heads = 1;
  int d = 0;
};

// Attention probabilities, stored over the canonical key order used
// internally (see mha below) together with the per-batch permutation mapping
// canonical position -> caller's key index.
struct AttnMaps {
  std::shared_ptr<std::vector<double>> probs;
  std::vector<std::vector<int>> order;
  int B = 0, heads = 0, T = 0, S = 0;

  // (B,heads,T,S) with key columns in the caller's original order.
  Tensor materialize() const;
  // Probability at (b,h,t,s) with s in the caller's original order.
  double at(int b, int h, int t, int s) const;
};

struct MhaOutput {
  Tensor out;  // (B,T,d)
  AttnMaps attn;
};

// Multi-head scaled dot-product attention. Per head h:
//   attn_h = softmax(Q_h K_h^T / sqrt(d/heads)),  out = concat_h(attn_h V_h) Wo + bo.
//
// Key/value tokens are internally processed in a content-canonical order
// (sorted by key row bytes, value row as tie-break) and every reduction over
// them runs in that order. Jointly permuting the key/value axis of the inputs
// therefore leaves the output bit-identical, and permuting the query axis
// permutes output rows bit-identically; the reported attention maps are
// always in the caller's index order.
MhaOutput mha(const Tensor& q_in, const Tensor& k_in, const Tensor& v_in, const MhaParams& p);

// ---- transformer block ----------------------------------------------------------

struct TransformerParams {
  MhaParams att;
  Tensor ln1_g, ln1_b, ln2_g, ln2_b;  // (d)
  Tensor w1, b1, w2, b2;              // FFN: (d,2d),(2d) then (2d,d),(d)
};

struct BlockOutput {
  Tensor out;
  AttnMaps attn;
};

// out = LN2(z + FFN(z)) with z = LN1(residual + MHA(q,k,v)); the FFN is two
// affine layers with expansion 2 and relu. No positional encodings anywhere.
BlockOutput transformer_block(const Tensor& q, const Tensor& k, const Tensor& v,
                              const Tensor& residual, const TransformerParams& p);

// Common self/cross form: kv supplies keys and values, q is also the residual
// stream.
BlockOutput transformer_block(const Tensor& q, const Tensor& kv, const TransformerParams& p);

// ---- loss / optimizer ------------------------------------------------------------

// Mean over the batch of -log softmax(logits)[label]; labels in {0,1}.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels);

struct AdamW {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8, weight_decay = 0.01;
  int64_t step_count = 0;
  std::vector<std::vector<double>> m, v;

  // w <- w - lr * mhat/(sqrt(vhat)+eps) - lr * weight_decay * w, with
  // bias-corrected moments. Parameters with no accumulated gradient are
  // treated as having zero gradient. Call zero_grad on the params afterwards.
  void step(const std::vector<Tensor*>& params, double lr);
};

// base * 0.5^floor(iter / step_size); exact powers of two via ldexp.
double step_lr(int64_t iter, double base_lr = 1e-4, int64_t step_size = 60000);

// ---- parameter factories ------------------------------------------------------

void kaiming_uniform(Tensor& w, int fan_in, Rng& rng);
void xavier_uniform(Tensor& w, int fan_in, int fan_out, Rng& rng);

Conv2dParams make_conv(int out_ch, int in_ch, int k, int stride, int pad, Rng& rng);
BatchNorm2d make_bn(int ch);
MhaParams make_mha_params(int d, int heads, Rng& rng);
TransformerParams make_transformer_params(int d, int heads, Rng& rng);

}  // namespace mswt
