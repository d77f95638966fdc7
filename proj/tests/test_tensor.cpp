// Tensor + autograd behavior: layout, kernel correctness against naive
// oracles, reverse-mode gradients against central finite differences, and the
// graph lifecycle rules (single sweep, fan-out accumulation, determinism).
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <vector>

#include "mswt/rng.hpp"
#include "mswt/tensor.hpp"
#include "test_util.hpp"

using namespace mswt;
using testutil::fd_check;
using testutil::random_vec;
using testutil::same_bits;

namespace {

// Plain triple-loop product; every matmul assertion compares against this.
std::vector<double> matmul_oracle(const std::vector<double>& a, const std::vector<double>& b,
                                  int m, int k, int n) {
  std::vector<double> c((size_t)m * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int t = 0; t < k; ++t) s += a[(size_t)i * k + t] * b[(size_t)t * n + j];
      c[(size_t)i * n + j] = s;
    }
  return c;
}

}  // namespace

// ---- construction ------------------------------------------------------------

TEST_CASE("construction pins row-major layout") {
  Tensor t = Tensor::from({1, 2, 3, 4}, {2, 2});
  CHECK(t.rank() == 2);
  CHECK(t.numel() == 4);
  CHECK(t.data()[0] == 1.0);
  CHECK(t.data()[1] == 2.0);
  CHECK(t.data()[3] == 4.0);
}

TEST_CASE("empty extent gives an empty tensor") {
  Tensor t = Tensor::from({}, {0});
  CHECK(t.numel() == 0);
  CHECK(t.rank() == 1);
}

TEST_CASE("construction rejects a shape/data mismatch") {
  CHECK_THROWS_AS(Tensor::from({1, 2, 3}, {2, 2}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor::from({1, 2, 3, 4, 5}, {2, 2}), std::invalid_argument);
}

TEST_CASE("construction round-trips random payloads") {
  Rng rng(11);
  for (int rep = 0; rep < 100; ++rep) {
    int a = 1 + rng.uniform_int(5), b = 1 + rng.uniform_int(5), c = 1 + rng.uniform_int(4);
    std::vector<double> v = random_vec((size_t)a * b * c, rng, -10, 10);
    Tensor t = Tensor::from(v, {a, b, c});
    REQUIRE(t.numel() == (int64_t)v.size());
    CHECK(same_bits(t.data(), v.data(), t.numel()));
  }
}

// ---- matmul -------------------------------------------------------------------

TEST_CASE("matmul times identity is the identity") {
  Rng rng(12);
  std::vector<double> xv = random_vec(12, rng);
  Tensor eye = Tensor::zeros({3, 3});
  for (int i = 0; i < 3; ++i) eye.data()[i * 3 + i] = 1.0;
  Tensor x = Tensor::from(xv, {3, 4});
  Tensor y = matmul(eye, x);
  for (int i = 0; i < 12; ++i) CHECK(y.data()[i] == xv[i]);
}

TEST_CASE("matmul of a zero row annihilates") {
  Rng rng(13);
  Tensor z = Tensor::zeros({1, 7});
  Tensor b = Tensor::from(random_vec(7 * 5, rng), {7, 5});
  Tensor c = matmul(z, b);
  for (int i = 0; i < 5; ++i) CHECK(c.data()[i] == 0.0);
}

TEST_CASE("matmul matches the triple-loop oracle") {
  Rng rng(14);
  // Small case plus shapes that cross every micro-kernel edge path.
  const int dims[][3] = {{4, 5, 3}, {8, 16, 32}, {33, 47, 65}, {1, 3, 2}, {2, 1, 9}};
  for (auto& d : dims) {
    int m = d[0], k = d[1], n = d[2];
    std::vector<double> av = random_vec((size_t)m * k, rng), bv = random_vec((size_t)k * n, rng);
    Tensor c = matmul(Tensor::from(av, {m, k}), Tensor::from(bv, {k, n}));
    std::vector<double> ref = matmul_oracle(av, bv, m, k, n);
    double worst = 0;
    for (int64_t i = 0; i < c.numel(); ++i) worst = std::max(worst, std::fabs(c.data()[i] - ref[i]));
    INFO(m, "x", k, " * ", k, "x", n);
    CHECK(worst < 1e-12);
  }
}

TEST_CASE("matmul rejects an inner-extent mismatch") {
  Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({4, 2});
  CHECK_THROWS_AS(matmul(a, b), std::invalid_argument);
}

TEST_CASE("matmul backward matches the adjoint formulas") {
  Rng rng(15);
  const int m = 3, k = 4, n = 2;
  std::vector<double> av = random_vec((size_t)m * k, rng), bv = random_vec((size_t)k * n, rng);
  std::vector<double> wv = random_vec((size_t)m * n, rng);
  Tensor a = Tensor::from(av, {m, k}, true), b = Tensor::from(bv, {k, n}, true);
  Tensor w = Tensor::from(wv, {m, n});
  backward(sum(mul(matmul(a, b), w)));
  // dA = W B^T, dB = A^T W.
  for (int i = 0; i < m; ++i)
    for (int t = 0; t < k; ++t) {
      double s = 0;
      for (int j = 0; j < n; ++j) s += wv[(size_t)i * n + j] * bv[(size_t)t * n + j];
      CHECK(a.grad()[(size_t)i * k + t] == doctest::Approx(s).epsilon(1e-12));
    }
  for (int t = 0; t < k; ++t)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int i = 0; i < m; ++i) s += av[(size_t)i * k + t] * wv[(size_t)i * n + j];
      CHECK(b.grad()[(size_t)t * n + j] == doctest::Approx(s).epsilon(1e-12));
    }
}

// ---- backward basics ------------------------------------------------------------

TEST_CASE("backward on a plain sum gives all-ones gradients") {
  Tensor x = Tensor::from({1, -2, 3, 0.5, 7, -9}, {2, 3}, true);
  backward(sum(x));
  for (int i = 0; i < 6; ++i) CHECK(x.grad()[i] == 1.0);
}

TEST_CASE("backward on a sum of squares gives 2x") {
  Rng rng(16);
  std::vector<double> xv = random_vec(10, rng);
  Tensor x = Tensor::from(xv, {10}, true);
  backward(sum(mul(x, x)));
  for (int i = 0; i < 10; ++i) CHECK(x.grad()[i] == 2.0 * xv[i]);
}

TEST_CASE("fan-out accumulates the gradient of every path") {
  Rng rng(17);
  std::vector<double> xv = random_vec(6, rng);
  Tensor x = Tensor::from(xv, {6}, true);
  backward(sum(add(mul(x, x), x)));  // d/dx sum(x^2 + x) = 2x + 1
  for (int i = 0; i < 6; ++i) CHECK(x.grad()[i] == 2.0 * xv[i] + 1.0);
}

TEST_CASE("backward rejects a non-scalar loss") {
  Tensor x = Tensor::from({1, 2}, {2}, true);
  CHECK_THROWS_AS(backward(add(x, x)), std::invalid_argument);
}

TEST_CASE("a consumed graph cannot be swept twice") {
  Tensor x = Tensor::from({1, 2}, {2}, true);
  Tensor loss = sum(mul(x, x));
  backward(loss);
  CHECK_THROWS_AS(backward(loss), numeric_error);
}

TEST_CASE("the loss value stays readable after backward") {
  Tensor x = Tensor::from({3, 4}, {2}, true);
  Tensor loss = sum(mul(x, x));
  const double before = loss.item();
  backward(loss);
  CHECK(loss.item() == before);
  CHECK(before == 25.0);
}

TEST_CASE("leaves without requires_grad receive no gradient") {
  Tensor x = Tensor::from({1, 2}, {2}, true);
  Tensor y = Tensor::from({5, 6}, {2}, false);
  backward(sum(mul(x, y)));
  CHECK(x.has_grad());
  CHECK_FALSE(y.has_grad());
  CHECK(x.grad()[0] == 5.0);
  CHECK(x.grad()[1] == 6.0);
}

// ---- elementwise / shape ops ------------------------------------------------------

TEST_CASE("elementwise ops match scalar arithmetic") {
  Tensor a = Tensor::from({1, 2, 3, 4}, {4});
  Tensor b = Tensor::from({10, 20, 30, 40}, {4});
  Tensor s = add(a, b), d = sub(a, b), p = mul(a, b);
  Tensor sm = scalar_mul(a, 2.5), sa = scalar_add(a, -1.0);
  for (int i = 0; i < 4; ++i) {
    CHECK(s.data()[i] == a.data()[i] + b.data()[i]);
    CHECK(d.data()[i] == a.data()[i] - b.data()[i]);
    CHECK(p.data()[i] == a.data()[i] * b.data()[i]);
    CHECK(sm.data()[i] == a.data()[i] * 2.5);
    CHECK(sa.data()[i] == a.data()[i] - 1.0);
  }
}

TEST_CASE("elementwise ops reject shape mismatches") {
  Tensor a = Tensor::zeros({2, 2}), b = Tensor::zeros({4});
  CHECK_THROWS_AS(add(a, b), std::invalid_argument);
  CHECK_THROWS_AS(mul(a, b), std::invalid_argument);
}

TEST_CASE("reshape keeps bytes and transpose rearranges them") {
  Rng rng(18);
  std::vector<double> v = random_vec(12, rng);
  Tensor a = Tensor::from(v, {3, 4});
  Tensor r = reshape(a, {2, 6});
  CHECK(same_bits(r.data(), v.data(), 12));
  CHECK_THROWS_AS(reshape(a, {5, 3}), std::invalid_argument);

  Tensor t = transpose2d(a);
  REQUIRE(t.dim(0) == 4);
  REQUIRE(t.dim(1) == 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 4; ++j) CHECK(t.data()[(size_t)j * 3 + i] == v[(size_t)i * 4 + j]);
  Tensor tt = transpose2d(t);
  CHECK(same_bits(tt.data(), v.data(), 12));
}

TEST_CASE("sum and mean reduce correctly") {
  Tensor a = Tensor::from({1, 2, 3, 4, 5, 6}, {2, 3});
  CHECK(sum(a).item() == 21.0);
  CHECK(mean(a).item() == 3.5);
}

TEST_CASE("concat then slice returns each part bit for bit") {
  Rng rng(19);
  const int B = 2, H = 3, W = 2;
  std::vector<int> chans = {3, 1, 2};
  std::vector<std::vector<double>> payload;
  std::vector<Tensor> parts;
  for (int c : chans) {
    payload.push_back(random_vec((size_t)B * c * H * W, rng));
    parts.push_back(Tensor::from(payload.back(), {B, c, H, W}));
  }
  Tensor cat = concat_channel(parts);
  REQUIRE(cat.dim(1) == 6);
  int from = 0;
  for (size_t i = 0; i < parts.size(); ++i) {
    Tensor back = slice_channel(cat, from, from + chans[i]);
    REQUIRE(back.numel() == parts[i].numel());
    CHECK(same_bits(back.data(), payload[i].data(), back.numel()));
    from += chans[i];
  }
}

// ---- finite differences over composites ---------------------------------------------

TEST_CASE("finite differences agree for composed elementwise graphs") {
  Rng rng(20);
  Tensor a = Tensor::from(random_vec(6, rng), {2, 3}, true);
  Tensor b = Tensor::from(random_vec(6, rng), {2, 3}, true);
  fd_check({&a, &b}, [&] { return sum(mul(a, scalar_add(scalar_mul(b, 0.5), 1.0))); });
  fd_check({&a, &b}, [&] { return mean(mul(add(a, b), sub(a, b))); });
}

TEST_CASE("finite differences agree through matmul and transpose") {
  Rng rng(21);
  Tensor a = Tensor::from(random_vec(6, rng), {2, 3}, true);
  Tensor b = Tensor::from(random_vec(12, rng), {3, 4}, true);
  Tensor w = Tensor::from(random_vec(8, rng), {4, 2});
  fd_check({&a, &b}, [&] { return sum(mul(transpose2d(matmul(a, b)), w)); });
}

TEST_CASE("finite differences agree through concat and slice") {
  Rng rng(22);
  Tensor x = Tensor::from(random_vec(2 * 2 * 2 * 2, rng), {2, 2, 2, 2}, true);
  Tensor y = Tensor::from(random_vec(2 * 1 * 2 * 2, rng), {2, 1, 2, 2}, true);
  Tensor w = Tensor::from(random_vec(2 * 2 * 2 * 2, rng), {2, 2, 2, 2});
  fd_check({&x, &y}, [&] {
    Tensor cat = concat_channel({x, y});
    return sum(mul(slice_channel(cat, 1, 3), w));
  });
}

// ---- determinism / numeric policing --------------------------------------------------

TEST_CASE("identical graphs give bit-identical outputs and gradients") {
  auto run = [](std::vector<double>& out_data, std::vector<double>& out_grad) {
    Rng rng(23);
    Tensor a = Tensor::from(random_vec(20, rng), {4, 5}, true);
    Tensor b = Tensor::from(random_vec(15, rng), {5, 3}, true);
    Tensor c = matmul(a, b);
    out_data.assign(c.data(), c.data() + c.numel());
    backward(sum(mul(c, c)));
    out_grad.assign(a.grad(), a.grad() + a.numel());
    out_grad.insert(out_grad.end(), b.grad(), b.grad() + b.numel());
  };
  std::vector<double> d1, g1, d2, g2;
  run(d1, g1);
  run(d2, g2);
  CHECK(same_bits(d1.data(), d2.data(), (int64_t)d1.size()));
  CHECK(same_bits(g1.data(), g2.data(), (int64_t)g1.size()));
}

TEST_CASE("strict finite checking raises on overflow and NaN") {
  set_strict_finite(true);
  Tensor big = Tensor::from({1e308}, {1});
  CHECK_THROWS_AS(scalar_mul(big, 10.0), numeric_error);
  Tensor inf = Tensor::from({std::numeric_limits<double>::infinity()}, {1});
  Tensor zero = Tensor::from({0.0}, {1});
  CHECK_THROWS_AS(mul(inf, zero), numeric_error);
  set_strict_finite(false);
  Tensor ok = scalar_mul(big, 10.0);  // policing off: inf passes through
  CHECK(std::isinf(ok.data()[0]));
}
