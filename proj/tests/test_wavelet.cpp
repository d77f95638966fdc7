// Haar transform correctness: pinned coefficient values, exact round-trips,
// energy preservation, orthonormality of the analysis filters, and agreement
// with an independent strided-convolution oracle.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mswt/rng.hpp"
#include "mswt/tensor.hpp"
#include "mswt/wavelet.hpp"
#include "test_util.hpp"

using namespace mswt;
using testutil::fd_check;
using testutil::random_vec;
using testutil::same_bits;

namespace {

// Independent oracle: each band is a stride-2 correlation with its 2x2 filter.
// The filters are restated here from first principles (orthonormal Haar,
// [[a,b],[c,d]] order LL/LH/HL/HH) so the oracle does not echo library tables.
constexpr double kOracleBands[4][4] = {
    {0.5, 0.5, 0.5, 0.5},    // average
    {0.5, 0.5, -0.5, -0.5},  // horizontal detail (vertical difference)
    {0.5, -0.5, 0.5, -0.5},  // vertical detail (horizontal difference)
    {0.5, -0.5, -0.5, 0.5},  // diagonal detail
};

std::vector<double> band_oracle(const std::vector<double>& x, int B, int C, int H, int W,
                                int band) {
  std::vector<double> out((size_t)B * C * (H / 2) * (W / 2));
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < H / 2; ++oy)
        for (int ox = 0; ox < W / 2; ++ox) {
          double s = 0;
          for (int ky = 0; ky < 2; ++ky)
            for (int kx = 0; kx < 2; ++kx)
              s += kOracleBands[band][ky * 2 + kx] *
                   x[(((size_t)b * C + c) * H + 2 * oy + ky) * W + 2 * ox + kx];
          out[(((size_t)b * C + c) * (H / 2) + oy) * (W / 2) + ox] = s;
        }
  return out;
}

double sq_norm(const Tensor& t) {
  double s = 0;
  for (int64_t i = 0; i < t.numel(); ++i) s += t.data()[i] * t.data()[i];
  return s;
}

}  // namespace

TEST_CASE("the 2x2 block [[1,2],[3,4]] has pinned Haar coefficients") {
  Tensor x = Tensor::from({1, 2, 3, 4}, {1, 1, 2, 2});
  WaveletLevel lv = dwt2(x);
  CHECK(lv.ll.data()[0] == 5.0);
  CHECK(lv.lh.data()[0] == -2.0);
  CHECK(lv.hl.data()[0] == -1.0);
  CHECK(lv.hh.data()[0] == 0.0);
}

TEST_CASE("a constant image concentrates all energy in the approximation band") {
  Tensor x = Tensor::full({1, 2, 4, 4}, 3.0);
  WaveletLevel lv = dwt2(x);
  for (int64_t i = 0; i < lv.ll.numel(); ++i) CHECK(lv.ll.data()[i] == 6.0);  // 4*3*0.5
  for (const Tensor* t : {&lv.lh, &lv.hl, &lv.hh})
    for (int64_t i = 0; i < t->numel(); ++i) CHECK(t->data()[i] == 0.0);
}

TEST_CASE("each band matches the strided-correlation oracle") {
  Rng rng(60);
  const int B = 2, C = 3, H = 8, W = 6;
  std::vector<double> xv = random_vec((size_t)B * C * H * W, rng);
  Tensor x = Tensor::from(xv, {B, C, H, W});
  WaveletLevel lv = dwt2(x);
  const Tensor* bands[4] = {&lv.ll, &lv.lh, &lv.hl, &lv.hh};
  for (int band = 0; band < 4; ++band) {
    std::vector<double> ref = band_oracle(xv, B, C, H, W, band);
    REQUIRE(bands[band]->numel() == (int64_t)ref.size());
    for (size_t i = 0; i < ref.size(); ++i)
      CHECK(bands[band]->data()[i] == doctest::Approx(ref[i]).epsilon(1e-13));
  }
}

TEST_CASE("the transform is linear") {
  Rng rng(61);
  const int n = 1 * 2 * 4 * 4;
  std::vector<double> av = random_vec(n, rng), bv = random_vec(n, rng), cv(n);
  const double alpha = 1.75, beta = -0.5;
  for (int i = 0; i < n; ++i) cv[i] = alpha * av[i] + beta * bv[i];
  WaveletLevel la = dwt2(Tensor::from(av, {1, 2, 4, 4}));
  WaveletLevel lb = dwt2(Tensor::from(bv, {1, 2, 4, 4}));
  WaveletLevel lc = dwt2(Tensor::from(cv, {1, 2, 4, 4}));
  const Tensor* pa[4] = {&la.ll, &la.lh, &la.hl, &la.hh};
  const Tensor* pb[4] = {&lb.ll, &lb.lh, &lb.hl, &lb.hh};
  const Tensor* pc[4] = {&lc.ll, &lc.lh, &lc.hl, &lc.hh};
  for (int band = 0; band < 4; ++band)
    for (int64_t i = 0; i < pc[band]->numel(); ++i)
      CHECK(std::fabs(pc[band]->data()[i] -
                      (alpha * pa[band]->data()[i] + beta * pb[band]->data()[i])) < 1e-12);
}

TEST_CASE("analysis followed by synthesis reconstructs the input") {
  Rng rng(62);
  for (int trial = 0; trial < 20; ++trial) {
    int H = 2 * (1 + rng.uniform_int(8)), W = 2 * (1 + rng.uniform_int(8));
    std::vector<double> xv = random_vec((size_t)2 * H * W, rng, -4, 4);
    Tensor x = Tensor::from(xv, {1, 2, H, W});
    Tensor back = idwt2(dwt2(x));
    double worst = 0;
    for (int64_t i = 0; i < back.numel(); ++i)
      worst = std::max(worst, std::fabs(back.data()[i] - xv[i]));
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("the transform preserves squared energy") {
  Rng rng(63);
  Tensor x = Tensor::from(random_vec(2 * 3 * 16 * 16, rng, -3, 3), {2, 3, 16, 16});
  WaveletLevel lv = dwt2(x);
  double in = sq_norm(x);
  double out = sq_norm(lv.ll) + sq_norm(lv.lh) + sq_norm(lv.hl) + sq_norm(lv.hh);
  CHECK(std::fabs(in - out) <= 1e-9 * std::max(in, 1.0));
}

TEST_CASE("synthesis of a lone approximation coefficient spreads it evenly") {
  WaveletLevel lv{Tensor::from({2.0}, {1, 1, 1, 1}), Tensor::zeros({1, 1, 1, 1}),
                  Tensor::zeros({1, 1, 1, 1}), Tensor::zeros({1, 1, 1, 1})};
  Tensor x = idwt2(lv);
  REQUIRE(x.numel() == 4);
  for (int i = 0; i < 4; ++i) CHECK(x.data()[i] == 1.0);
}

TEST_CASE("synthesis of all-zero bands is the zero image") {
  WaveletLevel lv{Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1, 2, 2, 2}),
                  Tensor::zeros({1, 2, 2, 2}), Tensor::zeros({1, 2, 2, 2})};
  Tensor x = idwt2(lv);
  for (int64_t i = 0; i < x.numel(); ++i) CHECK(x.data()[i] == 0.0);
}

TEST_CASE("the analysis filter bank is orthonormal") {
  // Impulse responses: transform each of the four unit images of a 2x2 block
  // and check the resulting coefficient vectors form an orthonormal basis
  // (rows of the filter matrix scaled by 0.5 each have unit norm and are
  // mutually orthogonal).
  double mat[4][4];
  for (int pos = 0; pos < 4; ++pos) {
    std::vector<double> e(4, 0.0);
    e[pos] = 1.0;
    WaveletLevel lv = dwt2(Tensor::from(e, {1, 1, 2, 2}));
    mat[0][pos] = lv.ll.data()[0];
    mat[1][pos] = lv.lh.data()[0];
    mat[2][pos] = lv.hl.data()[0];
    mat[3][pos] = lv.hh.data()[0];
  }
  for (int r = 0; r < 4; ++r)
    for (int c = 0; c < 4; ++c) {
      double dot = 0;
      for (int k = 0; k < 4; ++k) dot += mat[r][k] * mat[c][k];
      CHECK(dot == doctest::Approx(r == c ? 1.0 : 0.0).epsilon(1e-15));
    }
}

TEST_CASE("odd extents are rejected") {
  CHECK_THROWS_AS(dwt2(Tensor::zeros({1, 1, 3, 4})), std::invalid_argument);
  CHECK_THROWS_AS(dwt2(Tensor::zeros({1, 1, 4, 5})), std::invalid_argument);
  CHECK_THROWS_AS(decompose(Tensor::zeros({1, 1, 4, 4}), 3), std::invalid_argument);
}

TEST_CASE("decompose produces the recursive pyramid") {
  Rng rng(64);
  std::vector<double> xv = random_vec((size_t)1 * 2 * 8 * 8, rng);
  Tensor x = Tensor::from(xv, {1, 2, 8, 8});
  WaveletPyramid pyr = decompose(x, 3);
  REQUIRE(pyr.levels.size() == 3);
  CHECK(pyr.levels[0].ll.dim(2) == 4);
  CHECK(pyr.levels[1].ll.dim(2) == 2);
  CHECK(pyr.levels[2].ll.dim(2) == 1);
  // Depth 1 is exactly one dwt2.
  WaveletPyramid d1 = decompose(x, 1);
  WaveletLevel direct = dwt2(x);
  CHECK(same_bits(d1.levels[0].ll, direct.ll));
  CHECK(same_bits(d1.levels[0].hh, direct.hh));
  // Level 2 equals a manual transform of the level-1 approximation.
  WaveletLevel manual2 = dwt2(pyr.levels[0].ll);
  CHECK(same_bits(pyr.levels[1].ll, manual2.ll));
  CHECK(same_bits(pyr.levels[1].lh, manual2.lh));
  CHECK(same_bits(pyr.levels[1].hl, manual2.hl));
  CHECK(same_bits(pyr.levels[1].hh, manual2.hh));
}

TEST_CASE("smoothing an image strictly reduces detail-band energy") {
  Rng rng(65);
  const int H = 16, W = 16;
  std::vector<double> xv = random_vec((size_t)H * W, rng);
  // In-test 3x3 box blur with clamped borders — an independent smoother.
  std::vector<double> sm((size_t)H * W);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      double s = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int yy = std::min(std::max(y + dy, 0), H - 1);
          int xx = std::min(std::max(x + dx, 0), W - 1);
          s += xv[(size_t)yy * W + xx];
        }
      sm[(size_t)y * W + x] = s / 9.0;
    }
  WaveletLevel a = dwt2(Tensor::from(xv, {1, 1, H, W}));
  WaveletLevel b = dwt2(Tensor::from(sm, {1, 1, H, W}));
  double ha = sq_norm(a.lh) + sq_norm(a.hl) + sq_norm(a.hh);
  double hb = sq_norm(b.lh) + sq_norm(b.hl) + sq_norm(b.hh);
  CHECK(hb < ha);
  CHECK(hb < 0.5 * ha);  // a box blur kills most of the top-octave energy
}

TEST_CASE("analysis and synthesis gradients match finite differences") {
  Rng rng(66);
  Tensor x = Tensor::from(random_vec(1 * 2 * 4 * 4, rng), {1, 2, 4, 4}, true);
  Tensor w0 = Tensor::from(random_vec(1 * 2 * 2 * 2, rng), {1, 2, 2, 2});
  Tensor w1 = Tensor::from(random_vec(1 * 2 * 2 * 2, rng), {1, 2, 2, 2});
  fd_check({&x}, [&] {
    WaveletLevel lv = dwt2(x);
    return add(sum(mul(lv.ll, w0)), sum(mul(lv.hh, w1)));
  });
  Tensor w2 = Tensor::from(random_vec(1 * 2 * 4 * 4, rng), {1, 2, 4, 4});
  fd_check({&x}, [&] { return sum(mul(idwt2(dwt2(x)), w2)); });
}

TEST_CASE("haar_band extracts the same coefficients as the full transform") {
  Rng rng(67);
  std::vector<double> xv = random_vec((size_t)2 * 1 * 6 * 6, rng);
  Tensor x = Tensor::from(xv, {2, 1, 6, 6});
  WaveletLevel lv = dwt2(x);
  CHECK(same_bits(haar_band(x, 0), lv.ll));
  CHECK(same_bits(haar_band(x, 1), lv.lh));
  CHECK(same_bits(haar_band(x, 2), lv.hl));
  CHECK(same_bits(haar_band(x, 3), lv.hh));
  CHECK_THROWS_AS(haar_band(x, 4), std::invalid_argument);
}
