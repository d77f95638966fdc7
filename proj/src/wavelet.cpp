#include "mswt/wavelet.hpp"

#include <stdexcept>
#include <string>

namespace mswt {

namespace {

// Orthonormal Haar analysis weights for one 2x2 block laid out as
// [a b; c d]: coefficient = (wa*a + wb*b + wc*c + wd*d) / 2.
// The /2 makes each row of the 4x4 block transform unit-norm, so the whole
// transform is orthonormal (energy preserving, inverse = transpose).
struct BandW {
  double a, b, c, d;
};
constexpr BandW kBands[4] = {
    {1.0, 1.0, 1.0, 1.0},     // LL
    {1.0, 1.0, -1.0, -1.0},   // LH (low along x, high along y)
    {1.0, -1.0, 1.0, -1.0},   // HL (high along x, low along y)
    {1.0, -1.0, -1.0, 1.0},   // HH
};

void check_even(const Tensor& x, const char* who) {
  if (x.rank() != 4) throw std::invalid_argument(std::string(who) + ": input must be (B,C,H,W)");
  if (x.dim(2) % 2 || x.dim(3) % 2 || x.dim(2) == 0 || x.dim(3) == 0)
    throw std::invalid_argument(std::string(who) + ": spatial extent must be even, got " +
                                std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)));
}

}  // namespace

Tensor haar_band(const Tensor& x, int band) {
  check_even(x, "haar_band");
  if (band < 0 || band > 3) throw std::invalid_argument("haar_band: band must be 0..3");
  const BandW w = kBands[band];
  int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  int Ho = H / 2, Wo = W / 2;
  Tensor out = make_op({B, C, Ho, Wo}, {x});
  int64_t plane = (int64_t)H * W, oplane = (int64_t)Ho * Wo;
  for (int bc = 0; bc < B * C; ++bc) {
    const double* p = x.data() + bc * plane;
    double* o = out.data() + bc * oplane;
    for (int oy = 0; oy < Ho; ++oy) {
      const double* r0 = p + (int64_t)(2 * oy) * W;
      const double* r1 = r0 + W;
      double* orow = o + (int64_t)oy * Wo;
      for (int ox = 0; ox < Wo; ++ox) {
        int ix = 2 * ox;
        orow[ox] = 0.5 * (w.a * r0[ix] + w.b * r0[ix + 1] + w.c * r1[ix] + w.d * r1[ix + 1]);
      }
    }
  }
  if (out.requires_grad())
    out.node()->backprop = [B, C, H, W, Ho, Wo, w, plane, oplane](Node& self) {
      double* g = self.inputs[0]->grad_buf();
      for (int bc = 0; bc < B * C; ++bc) {
        const double* dy = self.grad.data() + bc * oplane;
        double* gp = g + bc * plane;
        for (int oy = 0; oy < Ho; ++oy) {
          double* r0 = gp + (int64_t)(2 * oy) * W;
          double* r1 = r0 + W;
          const double* drow = dy + (int64_t)oy * Wo;
          for (int ox = 0; ox < Wo; ++ox) {
            int ix = 2 * ox;
            double dv = 0.5 * drow[ox];
            r0[ix] += w.a * dv;
            r0[ix + 1] += w.b * dv;
            r1[ix] += w.c * dv;
            r1[ix + 1] += w.d * dv;
          }
        }
      }
    };
  return out;
}

WaveletLevel dwt2(const Tensor& x) {
  check_even(x, "dwt2");
  return {haar_band(x, 0), haar_band(x, 1), haar_band(x, 2), haar_band(x, 3)};
}

Tensor idwt2(const WaveletLevel& lvl) {
  const Tensor& ll = lvl.ll;
  for (const Tensor* t : {&lvl.lh, &lvl.hl, &lvl.hh})
    if (t->shape() != ll.shape()) throw std::invalid_argument("idwt2: subband shape mismatch");
  if (ll.rank() != 4) throw std::invalid_argument("idwt2: subbands must be (B,C,h,w)");
  int B = ll.dim(0), C = ll.dim(1), h = ll.dim(2), w = ll.dim(3);
  int H = 2 * h, W = 2 * w;
  Tensor out = make_op({B, C, H, W}, {lvl.ll, lvl.lh, lvl.hl, lvl.hh});
  int64_t plane = (int64_t)H * W, splane = (int64_t)h * w;
  for (int bc = 0; bc < B * C; ++bc) {
    const double* pll = lvl.ll.data() + bc * splane;
    const double* plh = lvl.lh.data() + bc * splane;
    const double* phl = lvl.hl.data() + bc * splane;
    const double* phh = lvl.hh.data() + bc * splane;
    double* o = out.data() + bc * plane;
    for (int sy = 0; sy < h; ++sy) {
      double* r0 = o + (int64_t)(2 * sy) * W;
      double* r1 = r0 + W;
      for (int sx = 0; sx < w; ++sx) {
        int64_t si = (int64_t)sy * w + sx;
        double LL = pll[si], LH = plh[si], HL = phl[si], HH = phh[si];
        // Synthesis = transpose of the orthonormal analysis block.
        r0[2 * sx] = 0.5 * (LL + LH + HL + HH);
        r0[2 * sx + 1] = 0.5 * (LL + LH - HL - HH);
        r1[2 * sx] = 0.5 * (LL - LH + HL - HH);
        r1[2 * sx + 1] = 0.5 * (LL - LH - HL + HH);
      }
    }
  }
  if (out.requires_grad())
    out.node()->backprop = [B, C, h, w, W, plane, splane](Node& self) {
      for (int band = 0; band < 4; ++band) {
        Node& sub = *self.inputs[band];
        if (!sub.requires_grad) continue;
        const BandW bw = kBands[band];
        double* g = sub.grad_buf();
        for (int bc = 0; bc < B * C; ++bc) {
          const double* dy = self.grad.data() + bc * plane;
          double* gp = g + bc * splane;
          for (int sy = 0; sy < h; ++sy) {
            const double* r0 = dy + (int64_t)(2 * sy) * W;
            const double* r1 = r0 + W;
            for (int sx = 0; sx < w; ++sx) {
              gp[(int64_t)sy * w + sx] += 0.5 * (bw.a * r0[2 * sx] + bw.b * r0[2 * sx + 1] +
                                                 bw.c * r1[2 * sx] + bw.d * r1[2 * sx + 1]);
            }
          }
        }
      }
    };
  return out;
}

WaveletPyramid decompose(const Tensor& x, int levels) {
  if (levels < 1) throw std::invalid_argument("decompose: levels must be >= 1");
  WaveletPyramid pyr;
  Tensor cur = x;
  for (int l = 0; l < levels; ++l) {
    check_even(cur, "decompose");
    pyr.levels.push_back(dwt2(cur));
    cur = pyr.levels.back().ll;
  }
  return pyr;
}

}  // namespace mswt
