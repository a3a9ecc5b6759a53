#include <doctest.h>

#include <limits>

#include "ran/grad_check.hpp"
#include "ran/graph.hpp"
#include "support.hpp"

using namespace ran::ad;
using G = Graph<double>;
using T = Tensor<double>;

namespace {

T random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  T t(std::move(shape));
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : t.values()) v = u(rng);
  return t;
}

// Naive same-padded cross-correlation.
T conv_oracle(const T& x, const T& k, const T& b) {
  const std::size_t ci = x.dim(0), h = x.dim(1), w = x.dim(2), co = k.dim(0), ks = k.dim(2);
  const long r = static_cast<long>(ks / 2);
  T y({co, h, w});
  for (std::size_t o = 0; o < co; ++o)
    for (std::size_t yy = 0; yy < h; ++yy)
      for (std::size_t xx = 0; xx < w; ++xx) {
        double s = b.empty() ? 0.0 : b[o];
        for (std::size_t c = 0; c < ci; ++c)
          for (long dy = -r; dy <= r; ++dy)
            for (long dx = -r; dx <= r; ++dx) {
              const long sy = static_cast<long>(yy) + dy, sx = static_cast<long>(xx) + dx;
              if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
              s += k[((o * ci + c) * ks + static_cast<std::size_t>(dy + r)) * ks + static_cast<std::size_t>(dx + r)] *
                   x(c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx));
            }
        y(o, yy, xx) = s;
      }
  return y;
}

ParamSet<double> params_of(std::initializer_list<std::pair<const char*, T>> items) {
  ParamSet<double> ps;
  for (const auto& [n, t] : items) ps.add(n, t);
  return ps;
}

// Weighted sum so that every output coordinate gets a distinct gradient.
Var weighted_sum(G& g, Var y, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sum(g, mul(g, y, g.constant(random_tensor(g.shape(y), rng))));
}

template <typename E>
TensorErrc code_of(E&& f) {
  try {
    f();
  } catch (const TensorError& e) {
    return e.code();
  }
  FAIL("expected a TensorError");
  return TensorErrc::shape_error;
}

}  // namespace

TEST_CASE("tensor basics") {
  T t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rank() == 2);
  CHECK(shape_string(t.shape()) == "[2x3]");
  CHECK_THROWS_AS(T({2, 2}, std::vector<double>{1, 2, 3}), TensorError);
  CHECK_THROWS_AS(t.reshaped({4}), TensorError);
  CHECK(t.reshaped({3, 2}).shape() == Shape{3, 2});
}

TEST_CASE("affine") {
  G g(false);
  const auto x = g.constant(T({2}, {3.0, -4.0}));
  const auto ident = affine(g, x, g.constant(T({2, 2}, {1, 0, 0, 1})), g.constant(T({2}, 0.0)));
  CHECK(g.value(ident) == T({2}, {3.0, -4.0}));
  CHECK(g.value(affine(g, x, g.constant(T({3, 2}, 0.0)), g.constant(T({3}, {1, 2, 3})))) == T({3}, {1, 2, 3}));

  const T w({3, 2}, {0.5, -1.0, 2.0, 0.25, -3.0, 1.5});
  const T b({3}, {0.1, 0.2, 0.3});
  const auto y = g.value(affine(g, x, g.constant(w), g.constant(b)));
  // By hand: rows of W dotted with (3, -4), plus b.
  CHECK(y[0] == doctest::Approx(1.5 + 4.0 + 0.1));
  CHECK(y[1] == doctest::Approx(6.0 - 1.0 + 0.2));
  CHECK(y[2] == doctest::Approx(-9.0 - 6.0 + 0.3));

  CHECK(code_of([&] { affine(g, x, g.constant(T({2, 3})), Var{}); }) == TensorErrc::shape_error);
  CHECK(code_of([&] { affine(g, x, g.constant(w), g.constant(T({2}))); }) == TensorErrc::shape_error);
}

TEST_CASE("linear_rows, add_rows, transpose against loops") {
  std::mt19937_64 rng(2);
  const T x = random_tensor({4, 3}, rng), w = random_tensor({5, 3}, rng), v = random_tensor({3}, rng);
  G g(false);
  const auto y = g.value(linear_rows(g, g.constant(x), g.constant(w)));
  const auto z = g.value(add_rows(g, g.constant(x), g.constant(v)));
  const auto xt = g.value(transpose(g, g.constant(x)));
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t j = 0; j < 5; ++j) {
      double s = 0;
      for (std::size_t k = 0; k < 3; ++k) s += x(i, k) * w(j, k);
      CHECK(y(i, j) == doctest::Approx(s).epsilon(1e-12));
    }
    for (std::size_t k = 0; k < 3; ++k) {
      CHECK(z(i, k) == x(i, k) + v[k]);
      CHECK(xt(k, i) == x(i, k));
    }
  }
}

TEST_CASE("conv2d") {
  std::mt19937_64 rng(3);
  G g(false);
  SUBCASE("identity kernel") {
    const T x = random_tensor({2, 4, 5}, rng);
    T k({2, 2, 1, 1}, 0.0);
    k[0] = 1.0;
    k[3] = 1.0;
    CHECK(g.value(conv2d(g, g.constant(x), g.constant(k), g.constant(T({2}, 0.0)))) == x);
  }
  SUBCASE("zero kernel gives the bias") {
    const T x = random_tensor({1, 3, 3}, rng);
    const auto y = g.value(conv2d(g, g.constant(x), g.constant(T({2, 1, 3, 3}, 0.0)), g.constant(T({2}, {0.5, -2}))));
    for (std::size_t i = 0; i < 9; ++i) {
      CHECK(y[i] == 0.5);
      CHECK(y[9 + i] == -2.0);
    }
  }
  SUBCASE("3x3 on a 5x5 ramp against nested loops") {
    T x({1, 5, 5});
    for (std::size_t i = 0; i < 25; ++i) x[i] = static_cast<double>(i);
    const T k = random_tensor({2, 1, 3, 3}, rng), b = random_tensor({2}, rng);
    const auto y = g.value(conv2d(g, g.constant(x), g.constant(k), g.constant(b)));
    const auto ref = conv_oracle(x, k, b);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
  SUBCASE("multi-channel 5x5 kernels") {
    const T x = random_tensor({3, 6, 4}, rng), k = random_tensor({4, 3, 5, 5}, rng);
    const auto y = g.value(conv2d(g, g.constant(x), g.constant(k), Var{}));
    const auto ref = conv_oracle(x, k, T());
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
  SUBCASE("even kernel") {
    const auto x = g.constant(T({1, 4, 4}));
    CHECK(code_of([&] { conv2d(g, x, g.constant(T({1, 1, 2, 2})), Var{}); }) == TensorErrc::kernel_size_error);
  }
}

TEST_CASE("maxpool2") {
  G g(false);
  CHECK(g.value(maxpool2(g, g.constant(T({1, 4, 4}, 2.5)))) == T({1, 2, 2}, 2.5));
  CHECK(g.value(maxpool2(g, g.constant(T({1, 2, 2}, {1, 2, 3, 4}))))[0] == 4.0);
  const auto odd = g.value(maxpool2(g, g.constant(T({2, 5, 5}, -1.0))));
  CHECK(odd.shape() == Shape{2, 3, 3});
  CHECK(odd(1, 2, 2) == -1.0);  // ceil-mode edge window sees only real entries

  // Ties route the gradient to the first maximum in row-major window order.
  G gg;
  ParamSet<double> ps = params_of({{"x", T({1, 2, 2}, 7.0)}});
  const auto px = gg.param(ps, "x");
  const auto grads = gg.backward(sum(gg, maxpool2(gg, px)), ps);
  CHECK(grads[0] == T({1, 2, 2}, {1, 0, 0, 0}));
}

TEST_CASE("activations against series oracles") {
  G g(false);
  T grid({81});
  for (std::size_t i = 0; i < 81; ++i) grid[i] = -8.0 + 0.2 * static_cast<double>(i);
  const auto th = g.value(tanh(g, g.constant(grid)));
  const auto sg = g.value(sigmoid(g, g.constant(grid)));
  for (std::size_t i = 0; i < 81; ++i) {
    CHECK(std::abs(th[i] - ran::testing::series_tanh(grid[i])) < 1e-12);
    CHECK(std::abs(sg[i] - ran::testing::series_sigmoid(grid[i])) < 1e-12);
  }
}

TEST_CASE("softmax") {
  G g(false);
  const auto u = g.value(softmax(g, g.constant(T({5}, 3.0))));
  for (double v : u.values()) CHECK(v == doctest::Approx(0.2));

  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const T z = random_tensor({7}, rng, -30, 30);
    T shifted = z;
    for (auto& v : shifted.values()) v += 123.0;
    const auto p = g.value(softmax(g, g.constant(z)));
    const auto q = g.value(softmax(g, g.constant(shifted)));
    double s = 0;
    std::size_t am = 0;
    for (std::size_t i = 0; i < 7; ++i) {
      CHECK(p[i] >= 0.0);
      CHECK(p[i] == doctest::Approx(q[i]).epsilon(1e-12));
      s += p[i];
      if (p[i] > p[am]) am = i;
    }
    CHECK(std::abs(s - 1.0) < 1e-6);
    CHECK(am == static_cast<std::size_t>(std::max_element(z.values().begin(), z.values().end()) - z.values().begin()));
  }
  // Huge logits stay finite.
  const auto big = g.value(softmax(g, g.constant(T({2}, {1000.0, 0.0}))));
  CHECK(big[0] == 1.0);
}

TEST_CASE("maxout2") {
  G g(false);
  CHECK(g.value(maxout2(g, g.constant(T({4}, {1, 5, 2, 2})))) == T({2}, {5, 2}));
  std::mt19937_64 rng(5);
  const T x = random_tensor({8}, rng);
  const auto y = g.value(maxout2(g, g.constant(x)));
  for (std::size_t j = 0; j < 4; ++j) CHECK(y[j] == std::max(x[2 * j], x[2 * j + 1]));
  CHECK(code_of([&] { maxout2(g, g.constant(T({3}))); }) == TensorErrc::shape_error);

  G gg;
  ParamSet<double> ps = params_of({{"x", T({4}, {2, 2, 1, 3})}});
  const auto grads = gg.backward(sum(gg, maxout2(gg, gg.param(ps, "x"))), ps);
  CHECK(grads[0] == T({4}, {1, 0, 0, 1}));
}

TEST_CASE("embed") {
  ParamSet<double> ps = params_of({{"e", T({3, 2}, {1, 0, 0, 1, 5, 6})}});
  G g;
  const auto e = g.param(ps, "e");
  CHECK(g.value(embed(g, 2, e)) == T({2}, {5, 6}));
  const auto loss = add(g, sum(g, embed(g, 1, e)), sum(g, embed(g, 1, e)));
  const auto grads = g.backward(loss, ps);
  CHECK(grads[0] == T({3, 2}, {0, 0, 2, 2, 0, 0}));
  CHECK(code_of([&] { embed(g, 3, e); }) == TensorErrc::index_error);
}

TEST_CASE("cross_entropy") {
  G g(false);
  CHECK(g.value(cross_entropy(g, g.constant(T({4}, 0.25)), 2))[0] == doctest::Approx(std::log(4.0)));
  CHECK(g.value(cross_entropy(g, g.constant(T({3}, {0, 1, 0})), 1))[0] == 0.0);
  CHECK(g.value(cross_entropy(g, g.constant(T({2}, {1, 0})), 1))[0] == doctest::Approx(-std::log(1e-12)));
  CHECK(code_of([&] { cross_entropy(g, g.constant(T({3}, 1.0 / 3)), 3); }) == TensorErrc::index_error);

  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const T z = random_tensor({6}, rng, -5, 5);
    double m = z[0];
    for (double v : z.values()) m = std::max(m, v);
    double s = 0;
    for (double v : z.values()) s += std::exp(v - m);
    const double oracle = -(z[4] - m - std::log(s));
    CHECK(g.value(cross_entropy(g, softmax(g, g.constant(z)), 4))[0] == doctest::Approx(oracle).epsilon(1e-12));
  }
}

TEST_CASE("backward basics") {
  std::mt19937_64 rng(7);
  ParamSet<double> ps = params_of({{"x", random_tensor({5}, rng)}});
  G g;
  const auto x = g.param(ps, "x");
  CHECK(g.backward(sum(g, x), ps)[0] == T({5}, 1.0));

  G g2;
  const auto x2 = g2.param(ps, "x");
  const auto grads = g2.backward(sum(g2, mul(g2, x2, x2)), ps);
  for (std::size_t i = 0; i < 5; ++i) CHECK(grads[0][i] == doctest::Approx(2 * ps[0][i]));

  G g3;
  CHECK(code_of([&] { g3.backward(g3.param(ps, "x"), ps); }) == TensorErrc::shape_error);

  // Unreached parameters get zeros.
  ParamSet<double> two = params_of({{"a", T({2}, 1.0)}, {"b", T({3}, 1.0)}});
  G g4;
  const auto gr = g4.backward(sum(g4, g4.param(two, "a")), two);
  CHECK(gr[1] == T({3}, 0.0));
}

TEST_CASE("backward is linear in the loss") {
  std::mt19937_64 rng(8);
  ParamSet<double> ps = params_of({{"w", random_tensor({3, 4}, rng)}, {"x", random_tensor({4}, rng)}});
  const auto l1 = [&](G& g) { return sum(g, tanh(g, affine(g, g.param(ps, "x"), g.param(ps, "w"), Var{}))); };
  const auto l2 = [&](G& g) { return sum(g, mul(g, g.param(ps, "x"), g.param(ps, "x"))); };
  G a, b, c;
  const auto ga = a.backward(l1(a), ps);
  const auto gb = b.backward(l2(b), ps);
  const auto gc = c.backward(add(c, l1(c), l2(c)), ps);
  for (std::size_t p = 0; p < 2; ++p)
    for (std::size_t i = 0; i < gc[p].size(); ++i) CHECK(gc[p][i] == doctest::Approx(ga[p][i] + gb[p][i]).epsilon(1e-14));
}

TEST_CASE("finite check") {
  G g(false);
  g.set_check_finite(true);
  const auto inf = g.constant(T({2}, {std::numeric_limits<double>::infinity(), 0.0}));
  CHECK(code_of([&] { sub(g, inf, inf); }) == TensorErrc::non_finite);
}

TEST_CASE("forward determinism") {
  std::mt19937_64 rng(9);
  const T x = random_tensor({2, 6, 6}, rng), k = random_tensor({3, 2, 3, 3}, rng);
  const auto run = [&] {
    Graph<float> g(false);
    return g.value(tanh(g, maxpool2(g, conv2d(g, g.constant(x.cast<float>()), g.constant(k.cast<float>()), Var{}))));
  };
  CHECK(run() == run());
}

// ---------------------------------------------------------------------------
// Gradient checks per primitive (64-bit central differences).

TEST_CASE("grad_check: affine + tanh toy") {
  std::mt19937_64 rng(10);
  ParamSet<double> ps =
      params_of({{"w", random_tensor({4, 3}, rng)}, {"b", random_tensor({4}, rng)}, {"x", random_tensor({3}, rng)}});
  const auto r = grad_check(
      [](G& g, const ParamSet<double>& p) {
        const auto y = tanh(g, affine(g, g.param(p, "x"), g.param(p, "w"), g.param(p, "b")));
        return weighted_sum(g, y, 1);
      },
      ps, 1e-5);
  CHECK(r.coordinates == 12 + 4 + 3);
  CHECK(r.max_relative_error < 1e-7);
}

TEST_CASE("grad_check: conv + pool toy") {
  std::mt19937_64 rng(11);
  // Jittered input: distinct values keep pooling windows tie-free.
  ParamSet<double> ps = params_of(
      {{"x", random_tensor({2, 5, 5}, rng)}, {"k", random_tensor({3, 2, 3, 3}, rng)}, {"b", random_tensor({3}, rng)}});
  const auto r = grad_check(
      [](G& g, const ParamSet<double>& p) {
        const auto y = maxpool2(g, conv2d(g, g.param(p, "x"), g.param(p, "k"), g.param(p, "b")));
        return weighted_sum(g, y, 2);
      },
      ps, 1e-5);
  CHECK(r.max_relative_error < 1e-6);
}

TEST_CASE("grad_check: every primitive within 1e-5") {
  std::mt19937_64 rng(12);
  ParamSet<double> ps = params_of({{"a", random_tensor({6}, rng)},
                                   {"b", random_tensor({6}, rng)},
                                   {"m", random_tensor({4, 6}, rng)},
                                   {"rows", random_tensor({3, 6}, rng)},
                                   {"e", random_tensor({5, 6}, rng)}});
  using Builder = std::function<Var(G&, const ParamSet<double>&)>;
  const std::vector<std::pair<const char*, Builder>> cases{
      {"add", [](G& g, const auto& p) { return weighted_sum(g, add(g, g.param(p, "a"), g.param(p, "b")), 1); }},
      {"sub", [](G& g, const auto& p) { return weighted_sum(g, sub(g, g.param(p, "a"), g.param(p, "b")), 2); }},
      {"mul", [](G& g, const auto& p) { return weighted_sum(g, mul(g, g.param(p, "a"), g.param(p, "b")), 3); }},
      {"linear_rows",
       [](G& g, const auto& p) { return weighted_sum(g, linear_rows(g, g.param(p, "rows"), g.param(p, "m")), 4); }},
      {"add_rows",
       [](G& g, const auto& p) { return weighted_sum(g, add_rows(g, g.param(p, "rows"), g.param(p, "a")), 5); }},
      {"transpose", [](G& g, const auto& p) { return weighted_sum(g, transpose(g, g.param(p, "m")), 6); }},
      {"reshape", [](G& g, const auto& p) { return weighted_sum(g, reshape(g, g.param(p, "m"), {2, 12}), 7); }},
      {"tanh", [](G& g, const auto& p) { return weighted_sum(g, tanh(g, g.param(p, "a")), 8); }},
      {"sigmoid", [](G& g, const auto& p) { return weighted_sum(g, sigmoid(g, g.param(p, "a")), 9); }},
      {"softmax", [](G& g, const auto& p) { return weighted_sum(g, softmax(g, g.param(p, "a")), 10); }},
      {"maxout2", [](G& g, const auto& p) { return weighted_sum(g, maxout2(g, g.param(p, "a")), 11); }},
      {"embed", [](G& g, const auto& p) { return weighted_sum(g, embed(g, 3, g.param(p, "e")), 12); }},
      {"cross_entropy (fused)",
       [](G& g, const auto& p) { return cross_entropy(g, softmax(g, g.param(p, "a")), 2); }},
      {"cross_entropy (plain)",
       [](G& g, const auto& p) {
         // Probabilities that do not come straight from a softmax node.
         const auto q = softmax(g, g.param(p, "a"));
         return cross_entropy(g, reshape(g, q, {6}), 4);
       }},
  };
  for (const auto& [name, build] : cases) {
    CAPTURE(name);
    const auto r = grad_check(build, ps, 1e-5);
    CHECK(r.max_relative_error < 1e-5);
  }
}

TEST_CASE("grad_check flags a wrong backward rule") {
  std::mt19937_64 rng(13);
  ParamSet<double> ps = params_of({{"a", random_tensor({6}, rng)}});
  debug::inject_backward_fault(Primitive::tanh, 1.5);
  const auto r = grad_check([](G& g, const ParamSet<double>& p) { return sum(g, tanh(g, g.param(p, "a"))); }, ps);
  debug::inject_backward_fault(std::nullopt);
  CHECK(r.max_relative_error > 0.1);
}

TEST_CASE("grad_check subsamples large tensors") {
  std::mt19937_64 rng(14);
  ParamSet<double> ps = params_of({{"big", random_tensor({1000}, rng)}});
  const auto r = grad_check([](G& g, const ParamSet<double>& p) { return weighted_sum(g, tanh(g, g.param(p, "big")), 3); },
                            ps, 1e-5, 200);
  CHECK(r.coordinates == 200);
  CHECK(r.max_relative_error < 1e-7);
}
