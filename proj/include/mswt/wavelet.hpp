#pragma once

#include <vector>

#include "mswt/tensor.hpp"

namespace mswt {

// One level of a 2-D Haar decomposition of a (B,C,H,W) tensor: four subbands,
// each (B,C,H/2,W/2). LL is the coarse approximation; LH/HL/HH carry the
// horizontal/vertical/diagonal detail.
struct WaveletLevel {
  Tensor ll, lh, hl, hh;
};

// `levels[k]` is the decomposition of `levels[k-1].ll` (level 0 decomposes the
// input itself).
struct WaveletPyramid {
  std::vector<WaveletLevel> levels;
};

// Single orthonormal Haar analysis band over non-overlapping 2x2 blocks.
// `band` selects the filter pair: 0=LL, 1=LH, 2=HL, 3=HH. Input (B,C,H,W)
// with even H and W; output (B,C,H/2,W/2). Differentiable.
Tensor haar_band(const Tensor& x, int band);

// Full one-level analysis: {LL,LH,HL,HH}.
WaveletLevel dwt2(const Tensor& x);

// Exact inverse of dwt2 (orthonormal synthesis). Differentiable.
Tensor idwt2(const WaveletLevel& lvl);

// Multi-level pyramid: `levels` successive dwt2 applications to the running
// LL band. Requires the spatial extent to stay even at every level.
WaveletPyramid decompose(const Tensor& x, int levels);

}  // namespace mswt
