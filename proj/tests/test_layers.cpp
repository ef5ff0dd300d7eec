#include "doctest.h"
#include "oracles.hpp"

#include "cae/layers.hpp"

using namespace cae;

namespace {

template <typename Real>
double max_abs_diff(const Tensor<Real>& a, const Tensor<Real>& b) {
  REQUIRE(a.shape() == b.shape());
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(double(a[i]) - double(b[i])));
  return worst;
}

Shape with_batch(std::size_t n, std::size_t c, const std::vector<std::size_t>& spatial) {
  Shape s{n, c};
  s.insert(s.end(), spatial.begin(), spatial.end());
  return s;
}

}  // namespace

TEST_SUITE("layers") {

TEST_CASE("conv with a 1x1 identity kernel is the identity") {
  Rng rng(1);
  auto x = oracle::random_tensor<float>(rng, {2, 1, 5, 7});
  ConvParams<float> p{Tensor<float>({1, 1, 1, 1}, 1.0f), {}, {}};
  CHECK(conv(x, p) == x);
}

TEST_CASE("conv matches the nested-loop oracle") {
  Rng rng(2);
  SUBCASE("3x3 SAME on 1x1x6x6") {
    auto x = oracle::random_tensor<float>(rng, {1, 1, 6, 6});
    auto k = oracle::random_tensor<float>(rng, {1, 1, 3, 3});
    auto got = conv(x, ConvParams<float>{k, {}, {}});
    CHECK(max_abs_diff(got, oracle::conv(x, k, nullptr, {}, true)) <= 1e-5);
  }
  SUBCASE("multi-channel 2D with bias, strides and both paddings") {
    for (bool same : {true, false})
      for (std::size_t s : {1u, 2u}) {
        auto x = oracle::random_tensor<double>(rng, {3, 2, 9, 8});
        auto k = oracle::random_tensor<double>(rng, {4, 2, 3, 2});
        auto b = oracle::random_tensor<double>(rng, {4});
        ConvGeometry g{{s, s}, same ? Padding::same : Padding::valid};
        auto got = conv(x, ConvParams<double>{k, b, g});
        CHECK(max_abs_diff(got, oracle::conv(x, k, &b, {s, s}, same)) <= 1e-12);
      }
  }
  SUBCASE("3D") {
    auto x = oracle::random_tensor<double>(rng, {2, 3, 5, 6, 4});
    auto k = oracle::random_tensor<double>(rng, {2, 3, 3, 3, 3});
    auto got = conv(x, ConvParams<double>{k, {}, {}});
    CHECK(max_abs_diff(got, oracle::conv(x, k, nullptr, {}, true)) <= 1e-12);
  }
  SUBCASE("small frames batched into one product") {
    auto x = oracle::random_tensor<float>(rng, {40, 2, 8, 8});
    auto k = oracle::random_tensor<float>(rng, {3, 2, 3, 3});
    CHECK(max_abs_diff(conv(x, ConvParams<float>{k, {}, {}}), oracle::conv(x, k, nullptr, {}, true)) <=
          1e-5);
  }
}

TEST_CASE("SAME conv at stride 1 preserves spatial extents") {
  Rng rng(3);
  auto k = oracle::random_tensor<float>(rng, {2, 1, 3, 3});
  auto big = conv(Tensor<float>({1, 1, 100, 100}), ConvParams<float>{k, {}, {}});
  CHECK(big.shape() == Shape{1, 2, 100, 100});
  for (std::size_t n = 1; n <= 32; ++n) {
    auto y = conv(Tensor<float>({1, 1, n, n + 1}), ConvParams<float>{k, {}, {}});
    CHECK(y.shape() == Shape{1, 2, n, n + 1});
  }
  auto k3 = oracle::random_tensor<float>(rng, {1, 1, 3, 3, 3});
  for (std::size_t n : {1u, 2u, 7u, 16u})
    CHECK(conv(Tensor<float>({1, 1, n, n, n}), ConvParams<float>{k3, {}, {}}).shape() ==
          Shape{1, 1, n, n, n});
}

TEST_CASE("conv rejects mismatched channels and ranks") {
  Tensor<float> x({1, 2, 5, 5});
  CHECK_THROWS_AS(conv(x, ConvParams<float>{Tensor<float>({1, 3, 3, 3}), {}, {}}), Error);
  CHECK_THROWS_AS(conv(x, ConvParams<float>{Tensor<float>({1, 2, 3, 3, 3}), {}, {}}), Error);
}

TEST_CASE("deconv") {
  Rng rng(4);
  SUBCASE("1x1 identity kernel") {
    auto y = oracle::random_tensor<float>(rng, {2, 1, 4, 6});
    CHECK(deconv(y, ConvParams<float>{Tensor<float>({1, 1, 1, 1}, 1.0f), {}, {}}) == y);
  }
  SUBCASE("stride-1 SAME keeps 25x25") {
    auto k = oracle::random_tensor<float>(rng, {4, 2, 3, 3});
    auto y = oracle::random_tensor<float>(rng, {1, 4, 25, 25});
    CHECK(deconv(y, ConvParams<float>{k, {}, {}}).shape() == Shape{1, 2, 25, 25});
  }
  SUBCASE("adjoint identity on 100 random pairs") {
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t dims = 2 + rng.below(2);
      const std::size_t cin = 1 + rng.below(3), cout = 1 + rng.below(3), batch = 1 + rng.below(2);
      const bool same = rng.below(2) == 0;
      std::vector<std::size_t> in(dims), ks(dims), stride(dims);
      for (std::size_t d = 0; d < dims; ++d) {
        ks[d] = 1 + rng.below(3);
        in[d] = ks[d] + rng.below(dims == 2 ? 7 : 4);
        stride[d] = 1 + rng.below(2);
      }
      ConvGeometry g{stride, same ? Padding::same : Padding::valid};
      Shape kshape{cout, cin};
      kshape.insert(kshape.end(), ks.begin(), ks.end());
      auto k = oracle::random_tensor<double>(rng, kshape);
      auto x = oracle::random_tensor<double>(rng, with_batch(batch, cin, in));
      auto cx = conv(x, ConvParams<double>{k, {}, g});
      auto y = oracle::random_tensor<double>(rng, cx.shape());
      auto dy = deconv(y, ConvParams<double>{k, {}, g}, in);
      REQUIRE(dy.shape() == x.shape());
      const double lhs = oracle::dot(cx, y), rhs = oracle::dot(x, dy);
      CHECK(std::abs(lhs - rhs) <= 1e-4 * std::max(1.0, std::abs(lhs)));
    }
  }
  SUBCASE("inconsistent output extents are rejected") {
    auto k = oracle::random_tensor<double>(rng, {1, 1, 3, 3});
    Tensor<double> y({1, 1, 5, 5});
    ConvGeometry g{{2, 2}, Padding::same};
    CHECK(deconv(y, ConvParams<double>{k, {}, g}, std::vector<std::size_t>{9, 9}).shape() ==
          Shape{1, 1, 9, 9});
    CHECK_THROWS_AS(deconv(y, ConvParams<double>{k, {}, g}, std::vector<std::size_t>{12, 12}), Error);
  }
}

TEST_CASE("maxpool and unpool") {
  Tape<float> tape;
  SUBCASE("single window") {
    auto x = tape.leaf(Tensor<float>({1, 1, 2, 2}, {1, 2, 3, 4}));
    auto pooled = maxpool(x);
    CHECK(pooled.values.value() == Tensor<float>({1, 1, 1, 1}, 4.0f));
    CHECK(pooled.switches->argmax == std::vector<std::uint32_t>{3});
    auto up = unpool(pooled.values, pooled.switches);
    CHECK(up.value() == Tensor<float>({1, 1, 2, 2}, {0, 0, 0, 4}));
  }
  SUBCASE("ties go to the first position") {
    auto x = tape.leaf(Tensor<float>({1, 1, 4, 4}, 5.0f));
    auto pooled = maxpool(x);
    CHECK(pooled.values.value() == Tensor<float>({1, 1, 2, 2}, 5.0f));
    CHECK(pooled.switches->argmax == std::vector<std::uint32_t>{0, 2, 8, 10});
  }
  SUBCASE("odd extents: 25 pools to 13 and unpools back to 25") {
    Rng rng(5);
    auto x = tape.leaf(oracle::random_tensor<float>(rng, {2, 3, 25, 25}));
    auto pooled = maxpool(x);
    CHECK(pooled.values.shape() == Shape{2, 3, 13, 13});
    CHECK(pooled.switches->input_shape == Shape{2, 3, 25, 25});
    auto up = unpool(pooled.values, pooled.switches);
    CHECK(up.shape() == Shape{2, 3, 25, 25});
    // Enumerate each window directly and compare the recorded winner.
    const auto& xv = x.value();
    for (std::size_t pl = 0; pl < 6; ++pl)
      for (std::size_t oy = 0; oy < 13; ++oy)
        for (std::size_t ox = 0; ox < 13; ++ox) {
          float best = -1e30f;
          std::size_t where = 0;
          for (std::size_t yy = 2 * oy; yy < std::min<std::size_t>(25, 2 * oy + 2); ++yy)
            for (std::size_t xx = 2 * ox; xx < std::min<std::size_t>(25, 2 * ox + 2); ++xx)
              if (xv[pl * 625 + yy * 25 + xx] > best) {
                best = xv[pl * 625 + yy * 25 + xx];
                where = yy * 25 + xx;
              }
          CHECK(pooled.switches->argmax[pl * 169 + oy * 13 + ox] == where);
        }
  }
  SUBCASE("3D pooling") {
    Rng rng(6);
    auto x = tape.leaf(oracle::random_tensor<float>(rng, {1, 2, 5, 4, 3}));
    auto pooled = maxpool(x);
    CHECK(pooled.values.shape() == Shape{1, 2, 3, 2, 2});
    auto up = unpool(pooled.values, pooled.switches);
    CHECK(up.shape() == x.shape());
  }
  SUBCASE("unpool conserves mass and rejects mismatched shapes") {
    Rng rng(7);
    auto x = tape.leaf(oracle::random_tensor<float>(rng, {1, 2, 7, 6}));
    auto pooled = maxpool(x);
    auto y = tape.leaf(oracle::random_tensor<float>(rng, pooled.values.shape()));
    CHECK(unpool(y, pooled.switches).value().sum() == doctest::Approx(y.value().sum()));
    auto wrong = tape.leaf(Tensor<float>({1, 2, 3, 3}));
    CHECK_THROWS_AS(unpool(wrong, pooled.switches), Error);
    CHECK_THROWS_AS(unpool(y, nullptr), Error);
  }
  SUBCASE("maxpool after unpool returns the pooled values") {
    Rng rng(8);
    auto x = tape.leaf(oracle::random_tensor<float>(rng, {2, 2, 9, 9}));
    auto pooled = maxpool(x);
    auto y = tape.leaf(oracle::random_tensor<float>(rng, pooled.values.shape(), 0.5, 1.5));
    auto again = maxpool(unpool(y, pooled.switches));
    CHECK(again.values.value() == y.value());
  }
}

TEST_CASE("batchnorm") {
  Rng rng(9);
  SUBCASE("train mode normalizes per channel") {
    Tape<double> tape;
    auto x = tape.leaf(oracle::random_tensor<double>(rng, {4, 3, 5, 5}, -3, 7));
    auto gamma = tape.leaf(Tensor<double>({3}, 1.0));
    auto beta = tape.leaf(Tensor<double>({3}, 0.0));
    auto state = BatchNormState<double>::identity(3);
    auto y = batchnorm(x, gamma, beta, state, Mode::train).value();
    for (std::size_t c = 0; c < 3; ++c) {
      double s = 0, s2 = 0;
      for (std::size_t n = 0; n < 4; ++n)
        for (std::size_t p = 0; p < 25; ++p) {
          const double v = y[(n * 3 + c) * 25 + p];
          s += v;
          s2 += v * v;
        }
      CHECK(std::abs(s / 100) <= 1e-5);
      CHECK(std::abs(s2 / 100 - 1.0) <= 1e-3);
    }
  }
  SUBCASE("infer mode with identity statistics is the identity") {
    Tape<float> tape;
    auto xt = oracle::random_tensor<float>(rng, {2, 4});
    auto state = BatchNormState<float>::identity(4);
    auto y = batchnorm(tape.leaf(xt), tape.leaf(Tensor<float>({4}, 1.0f)),
                       tape.leaf(Tensor<float>({4}, 0.0f)), state, Mode::infer)
                 .value();
    for (std::size_t i = 0; i < xt.size(); ++i) CHECK(y[i] == doctest::Approx(xt[i]).epsilon(1e-5));
  }
  SUBCASE("running statistics follow the moving average") {
    // Batch {1, 2, 3, 6}: mean 3, biased variance (4 + 1 + 0 + 9) / 4 = 3.5.
    Tape<double> tape;
    BatchNormState<double> state{Tensor<double>({1}, 1.0), Tensor<double>({1}, 2.0), 0.1, 1e-5};
    batchnorm(tape.leaf(Tensor<double>({4, 1}, {1, 2, 3, 6})), tape.leaf(Tensor<double>({1}, 1.0)),
              tape.leaf(Tensor<double>({1}, 0.0)), state, Mode::train);
    CHECK(state.running_mean[0] == doctest::Approx(0.9 * 1.0 + 0.1 * 3.0));
    CHECK(state.running_var[0] == doctest::Approx(0.9 * 2.0 + 0.1 * 3.5));
  }
  SUBCASE("train mode needs two samples") {
    Tape<float> tape;
    auto state = BatchNormState<float>::identity(2);
    CHECK_THROWS_AS(batchnorm(tape.leaf(Tensor<float>({1, 2, 4})), tape.leaf(Tensor<float>({2}, 1.0f)),
                              tape.leaf(Tensor<float>({2})), state, Mode::train),
                    Error);
  }
}

TEST_CASE("dense") {
  Rng rng(10);
  Tape<double> tape;
  auto xt = oracle::random_tensor<double>(rng, {3, 4});
  Tensor<double> eye({4, 4});
  for (std::size_t i = 0; i < 4; ++i) eye.at({i, i}) = 1.0;
  CHECK(dense(tape.leaf(xt), tape.leaf(eye), tape.leaf(Tensor<double>({4}))).value() == xt);

  auto w = oracle::random_tensor<double>(rng, {4, 50});
  auto b = oracle::random_tensor<double>(rng, {50});
  auto y = dense(tape.leaf(xt), tape.leaf(w), tape.leaf(b)).value();
  CHECK(y.shape() == Shape{3, 50});
  auto want = oracle::matmul(xt, w);
  for (std::size_t n = 0; n < 3; ++n)
    for (std::size_t j = 0; j < 50; ++j) CHECK(y.at({n, j}) == doctest::Approx(want.at({n, j}) + b[j]));
  CHECK_THROWS_AS(dense(tape.leaf(xt), tape.leaf(Tensor<double>({5, 2})), std::nullopt), Error);
}

TEST_CASE("layer gradients match finite differences in 64-bit mode") {
  Rng rng(11);
  auto expect_pass = [](const oracle::GradCheckResult& r) {
    CHECK(r.max_relative_error < 1e-6);
    CHECK(r.checked > 0);
  };
  for (int trial = 0; trial < 4; ++trial) {
    SUBCASE("conv 2D and 3D") {
      for (std::size_t dims : {2u, 3u}) {
        Shape xs = dims == 2 ? Shape{2, 2, 8, 7} : Shape{2, 2, 5, 4, 6};
        Shape ks = dims == 2 ? Shape{3, 2, 3, 3} : Shape{3, 2, 3, 3, 3};
        std::vector<std::size_t> stride(dims, 1 + std::size_t(trial % 2));
        oracle::LossBuilder<double> build = [&](Tape<double>& t, const std::vector<Var<double>>& v) {
          auto y = conv(v[0], v[1], v[2], ConvGeometry{stride, Padding::same});
          Rng weights(42);
          return sum(mul(y, t.leaf(oracle::random_tensor<double>(weights, y.shape()))));
        };
        expect_pass(oracle::gradient_check(build,
                                           {oracle::random_tensor<double>(rng, xs),
                                            oracle::random_tensor<double>(rng, ks),
                                            oracle::random_tensor<double>(rng, {3})},
                                           rng));
      }
    }
    SUBCASE("deconv") {
      oracle::LossBuilder<double> build = [](Tape<double>&, const std::vector<Var<double>>& v) {
        auto y = deconv(v[0], v[1], v[2], ConvGeometry{});
        return sum(mul(y, y));
      };
      expect_pass(oracle::gradient_check(build,
                                         {oracle::random_tensor<double>(rng, {2, 3, 6, 5}),
                                          oracle::random_tensor<double>(rng, {3, 2, 3, 3}),
                                          oracle::random_tensor<double>(rng, {2})},
                                         rng));
    }
    SUBCASE("maxpool and unpool") {
      oracle::LossBuilder<double> build = [](Tape<double>&, const std::vector<Var<double>>& v) {
        auto pooled = maxpool(v[0]);
        auto up = unpool(mul(pooled.values, pooled.values), pooled.switches);
        return sum(mul(up, v[1]));
      };
      expect_pass(oracle::gradient_check(build,
                                         {oracle::random_tensor<double>(rng, {2, 2, 7, 8}),
                                          oracle::random_tensor<double>(rng, {2, 2, 7, 8})},
                                         rng));
    }
    SUBCASE("batchnorm train and infer") {
      for (Mode mode : {Mode::train, Mode::infer}) {
        oracle::LossBuilder<double> build = [mode](Tape<double>& t, const std::vector<Var<double>>& v) {
          BatchNormState<double> state{Tensor<double>({3}, 0.2), Tensor<double>({3}, 1.5)};
          auto y = batchnorm(v[0], v[1], v[2], state, mode);
          Rng weights(7);
          auto w = t.leaf(oracle::random_tensor<double>(weights, y.shape()));
          return sum(mul(mul(y, y), w));
        };
        expect_pass(oracle::gradient_check(build,
                                           {oracle::random_tensor<double>(rng, {3, 3, 4, 4}),
                                            oracle::random_tensor<double>(rng, {3}, 0.5, 1.5),
                                            oracle::random_tensor<double>(rng, {3})},
                                           rng));
      }
    }
    SUBCASE("dense") {
      oracle::LossBuilder<double> build = [](Tape<double>&, const std::vector<Var<double>>& v) {
        auto y = dense(v[0], v[1], v[2]);
        return sum(mul(y, y));
      };
      expect_pass(oracle::gradient_check(build,
                                         {oracle::random_tensor<double>(rng, {4, 6}),
                                          oracle::random_tensor<double>(rng, {6, 5}),
                                          oracle::random_tensor<double>(rng, {5})},
                                         rng));
    }
  }
}

}  // TEST_SUITE
