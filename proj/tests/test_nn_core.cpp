#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fersnet/blocks.hpp"
#include "fersnet/gradcheck.hpp"
#include "fersnet/rng.hpp"
#include "oracles.hpp"

using namespace fersnet;

namespace {

template <typename T>
Tensor<T> random_tensor(Shape s, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Tensor<T> t(std::move(s));
  RngStream rng(seed);
  oracle::fill_random(t, rng, lo, hi);
  return t;
}

/// Identity batch norm: gamma=1, beta=0, eval mode with running stats (0,1).
template <typename T>
void make_identity_bn(BatchNorm2dParams<T>& bn, int ch) {
  bn.init(ch);
  bn.eps = T(0);
}

}  // namespace

TEST_CASE("tensor invariants") {
  Tensor<float> t({2, 3});
  CHECK(t.numel() == 6);
  CHECK_THROWS_AS(Tensor<float>({2, 3}, std::vector<float>(5, 0.f)), InputError);
  CHECK_THROWS_AS(Tensor<float>({0, 3}), InputError);
  CHECK_THROWS_AS(t.reshaped({4, 2}), InputError);
}

TEST_CASE("conv2d matches nested-loop oracle") {
  RngStream rng(7);
  for (auto [stride, pad] : {std::pair{1, 1}, std::pair{2, 1}, std::pair{1, 0}}) {
    auto x = random_tensor<double>({2, 3, 8, 8}, 11 + stride + pad);
    auto w = random_tensor<double>({4, 3, 3, 3}, 23 + stride);
    std::vector<double> b = {0.1, -0.2, 0.3, 0.05};
    auto ref = oracle::conv2d_ref(x, w, b, stride, pad);
    auto got = conv2d(Var<double>::constant(x), Var<double>::constant(w),
                      Var<double>::constant(Tensor<double>({4}, b)), stride, pad);
    CHECK(got.shape() == ref.shape());
    CHECK(oracle::max_abs_diff(got.value(), ref) < 1e-12);
  }
}

TEST_CASE("conv2d pointwise (1x1) matches oracle") {
  auto x = random_tensor<double>({2, 6, 5, 5}, 3);
  auto w = random_tensor<double>({3, 6, 1, 1}, 4);
  std::vector<double> b = {0.5, 0.0, -0.25};
  auto ref = oracle::conv2d_ref(x, w, b, 1, 0);
  auto got = conv2d(Var<double>::constant(x), Var<double>::constant(w),
                    Var<double>::constant(Tensor<double>({3}, b)), 1, 0);
  CHECK(oracle::max_abs_diff(got.value(), ref) < 1e-12);
}

TEST_CASE("conv2d rejects mismatched shapes") {
  auto x = Var<double>::constant(Tensor<double>({1, 3, 8, 8}));
  auto w = Var<double>::constant(Tensor<double>({4, 2, 3, 3}));
  auto b = Var<double>::constant(Tensor<double>({4}));
  CHECK_THROWS_AS(conv2d(x, w, b, 1, 1), ConfigError);
}

TEST_CASE("conv_transpose2d matches scatter oracle and doubles extent") {
  auto x = random_tensor<double>({2, 3, 2, 2}, 5);
  auto w = random_tensor<double>({3, 4, 2, 2}, 6);
  std::vector<double> b = {0.0, 0.1, -0.1, 0.2};
  auto ref = oracle::conv_transpose2d_ref(x, w, b, 2);
  auto got = conv_transpose2d(Var<double>::constant(x), Var<double>::constant(w),
                              Var<double>::constant(Tensor<double>({4}, b)), 2);
  CHECK(got.shape() == Shape{2, 4, 4, 4});
  CHECK(oracle::max_abs_diff(got.value(), ref) < 1e-12);
}

TEST_CASE("linear matches naive matmul oracle") {
  auto x = random_tensor<double>({2, 4}, 8);
  auto w = random_tensor<double>({3, 4}, 9);
  std::vector<double> b = {0.5, -0.25, 0.125};
  auto ref = oracle::linear_ref(x, w, b);
  auto got = linear(Var<double>::constant(x), Var<double>::constant(w),
                    Var<double>::constant(Tensor<double>({3}, b)));
  CHECK(oracle::max_abs_diff(got.value(), ref) < 1e-12);
}

TEST_CASE("linear identity and zero-weight closed forms") {
  Tensor<double> eye({3, 3});
  for (int i = 0; i < 3; ++i) eye.vec()[static_cast<size_t>(i * 3 + i)] = 1.0;
  auto x = random_tensor<double>({2, 3}, 10);
  auto y = linear(Var<double>::constant(x), Var<double>::constant(eye),
                  Var<double>::constant(Tensor<double>({3})));
  CHECK(oracle::max_abs_diff(y.value(), x) == 0.0);

  Tensor<double> zero({3, 3});
  Tensor<double> bias({3}, {1.0, 2.0, 3.0});
  auto y2 = linear(Var<double>::constant(x), Var<double>::constant(zero),
                   Var<double>::constant(bias));
  for (int n = 0; n < 2; ++n)
    for (int j = 0; j < 3; ++j) CHECK(y2.value()[n * 3 + j] == bias[j]);

  CHECK_THROWS_AS(linear(Var<double>::constant(Tensor<double>({2, 5})),
                         Var<double>::constant(Tensor<double>({3, 4})),
                         Var<double>::constant(Tensor<double>({3}))),
                  ConfigError);
}

TEST_CASE("max_pool2d matches direct oracle; relu is non-negative") {
  auto x = random_tensor<double>({2, 3, 6, 6}, 12);
  auto got = max_pool2d(Var<double>::constant(x));
  CHECK(oracle::max_abs_diff(got.value(), oracle::max_pool2d_ref(x)) == 0.0);

  auto r = relu(Var<double>::constant(x));
  for (long long i = 0; i < r.numel(); ++i) CHECK(r.value()[i] >= 0.0);

  CHECK_THROWS_AS(max_pool2d(Var<double>::constant(Tensor<double>({1, 1, 5, 6}))), InputError);
  CHECK_THROWS_AS(max_pool2d(Var<double>::constant(Tensor<double>({1, 1, 1, 1}))), InputError);
}

TEST_CASE("batch norm train mode normalizes to mean 0, var 1") {
  auto x = random_tensor<float>({4, 3, 5, 5}, 13, -2.0, 3.0);
  BatchNorm2dParams<float> bn;
  bn.init(3);
  auto y = bn.forward(Var<float>::constant(x), Mode::kTrain);
  long long plane = 25;
  for (int c = 0; c < 3; ++c) {
    double s = 0, s2 = 0;
    for (int n = 0; n < 4; ++n)
      for (long long i = 0; i < plane; ++i) {
        double v = y.value()[(static_cast<long long>(n) * 3 + c) * plane + i];
        s += v;
        s2 += v * v;
      }
    double mean = s / (4 * plane);
    double var = s2 / (4 * plane) - mean * mean;
    CHECK(std::abs(mean) < 1e-5);
    CHECK(std::abs(var - 1.0) < 1e-3);  // eps=1e-5 shifts variance slightly below 1
  }
  // running stats updated toward the batch stats
  CHECK(bn.running_mean[0] != 0.f);
}

TEST_CASE("batch norm eval mode uses running stats") {
  auto x = random_tensor<float>({2, 2, 4, 4}, 14);
  BatchNorm2dParams<float> bn;
  bn.init(2);
  bn.running_mean = Tensor<float>({2}, {0.5f, -0.5f});
  bn.running_var = Tensor<float>({2}, {4.0f, 1.0f});
  auto y = bn.forward(Var<float>::constant(x), Mode::kEval);
  float is0 = 1.0f / std::sqrt(4.0f + 1e-5f);
  CHECK(y.value().at(0, 0, 0, 0) == doctest::Approx((x.at(0, 0, 0, 0) - 0.5f) * is0).epsilon(1e-5));
}

TEST_CASE("conv_block_forward shape contract and pooling errors") {
  RngStream rng(21);
  ConvBlockParams<float> p;
  p.init(1, 8, rng);
  auto x = random_tensor<float>({2, 1, 96, 96}, 22);
  auto y = conv_block_forward(Var<float>::constant(x), p, Mode::kTrain);
  CHECK(y.shape() == Shape{2, 8, 48, 48});

  CHECK_THROWS_AS(conv_block_forward(Var<float>::constant(Tensor<float>({1, 1, 1, 1})), p,
                                     Mode::kTrain),
                  InputError);
  CHECK_THROWS_AS(conv_block_forward(Var<float>::constant(Tensor<float>({1, 1, 7, 8})), p,
                                     Mode::kTrain),
                  InputError);
  // channel mismatch is a configuration error
  CHECK_THROWS_AS(conv_block_forward(Var<float>::constant(Tensor<float>({1, 3, 8, 8})), p,
                                     Mode::kTrain),
                  ConfigError);
}

TEST_CASE("conv block against direct convolution oracle (identity BN)") {
  // single channel 4x4 input, hand-set kernels, BN as identity (eps 0,
  // running stats 0/1, eval mode)
  auto x = random_tensor<double>({1, 1, 4, 4}, 30);
  ConvBlockParams<double> p;
  RngStream rng(31);
  p.init(1, 1, rng);
  make_identity_bn(p.n1, 1);
  make_identity_bn(p.n2, 1);
  auto y = conv_block_forward(Var<double>::constant(x), p, Mode::kEval);

  std::vector<double> b1 = {p.c1.b.value()[0]};
  std::vector<double> b2 = {p.c2.b.value()[0]};
  auto h = oracle::conv2d_ref(x, p.c1.w.value(), b1, 1, 1);
  for (long long i = 0; i < h.numel(); ++i) h[i] = std::max(h[i], 0.0);
  auto h2 = oracle::conv2d_ref(h, p.c2.w.value(), b2, 1, 1);
  for (long long i = 0; i < h2.numel(); ++i) h2[i] = std::max(h2[i], 0.0);
  auto ref = oracle::max_pool2d_ref(h2);
  CHECK(oracle::max_abs_diff(y.value(), ref) < 1e-12);
}

TEST_CASE("deconv_block_forward doubles extent; four blocks walk 6 to 96") {
  RngStream rng(41);
  DeconvBlockParams<float> p;
  p.init(64, 32, rng);
  auto x = random_tensor<float>({2, 64, 6, 6}, 42);
  auto y = deconv_block_forward(Var<float>::constant(x), p, Mode::kTrain);
  CHECK(y.shape() == Shape{2, 32, 12, 12});

  int extent = 6;
  std::array<DeconvBlockParams<float>, 4> chain;
  int ch = 16;
  Var<float> h = Var<float>::constant(random_tensor<float>({1, 16, 6, 6}, 43));
  for (auto& blk : chain) {
    blk.init(ch, ch, rng);
    h = deconv_block_forward(h, blk, Mode::kTrain);
    extent *= 2;
  }
  CHECK(extent == 96);
  CHECK(h.shape() == Shape{1, 16, 96, 96});

  CHECK_THROWS_AS(deconv_block_forward(Var<float>::constant(Tensor<float>({1, 3, 6, 6})), p,
                                       Mode::kTrain),
                  ConfigError);
}

TEST_CASE("encoder/decoder shape algebra: 96 -> 6 -> 96") {
  RngStream rng(51);
  std::array<ConvBlockParams<float>, 4> enc;
  int in = 1;
  std::vector<int> ladder = {4, 8, 12, 16};
  Var<float> h = Var<float>::constant(random_tensor<float>({1, 1, 96, 96}, 52));
  for (int i = 0; i < 4; ++i) {
    enc[static_cast<size_t>(i)].init(in, ladder[static_cast<size_t>(i)], rng);
    h = conv_block_forward(h, enc[static_cast<size_t>(i)], Mode::kTrain);
    in = ladder[static_cast<size_t>(i)];
  }
  CHECK(h.shape() == Shape{1, 16, 6, 6});
  std::array<DeconvBlockParams<float>, 4> dcb;
  for (int i = 0; i < 4; ++i) {
    int out = ladder[static_cast<size_t>(3 - i)];
    dcb[static_cast<size_t>(i)].init(in, out, rng);
    h = deconv_block_forward(h, dcb[static_cast<size_t>(i)], Mode::kTrain);
    in = out;
  }
  CHECK(h.shape() == Shape{1, 4, 96, 96});
}

// ---------------------------------------------------------------------------
// Gradient checks (central finite differences, double precision)
// ---------------------------------------------------------------------------

TEST_CASE("grad_check: linear layer < 1e-6") {
  auto x = Var<double>::constant(random_tensor<double>({3, 5}, 60));
  auto w = Var<double>::param(random_tensor<double>({4, 5}, 61));
  auto b = Var<double>::param(random_tensor<double>({4}, 62));
  auto f = [&] { return sum_all(linear(x, w, b)); };
  auto res = grad_check(f, {w, b});
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("grad_check: conv, deconv, pool, activations < 1e-4") {
  auto x = Var<double>::param(random_tensor<double>({2, 3, 6, 6}, 70));
  auto w = Var<double>::param(random_tensor<double>({4, 3, 3, 3}, 71, -0.5, 0.5));
  auto b = Var<double>::param(random_tensor<double>({4}, 72, -0.1, 0.1));
  auto wt = Var<double>::param(random_tensor<double>({4, 2, 2, 2}, 73, -0.5, 0.5));
  auto bt = Var<double>::param(random_tensor<double>({2}, 74, -0.1, 0.1));
  auto f = [&] {
    auto h = conv2d(x, w, b, 1, 1);
    h = relu(h);
    h = max_pool2d(h);
    h = conv_transpose2d(h, wt, bt, 2);
    h = tanh(h);
    return mean_all(mul(h, h));
  };
  auto res = grad_check(f, {x, w, b, wt, bt});
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("grad_check: sigmoid/leaky_relu/concat/affine < 1e-4") {
  auto a = Var<double>::param(random_tensor<double>({2, 2, 4, 4}, 80));
  auto c = Var<double>::param(random_tensor<double>({2, 3, 4, 4}, 81));
  auto f = [&] {
    auto h = concat_channels(sigmoid(a), leaky_relu(c, 0.2));
    h = affine(h, 1.5, -0.25);
    return mean_all(square(h));
  };
  auto res = grad_check(f, {a, c});
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("grad_check: classification loss through one conv block < 1e-4") {
  ConvBlockParams<double> p;
  RngStream rng(90);
  p.init(1, 3, rng);
  p.n1.freeze_running = true;
  p.n2.freeze_running = true;
  auto x = Var<double>::constant(random_tensor<double>({2, 1, 8, 8}, 91));
  LinearParams<double> fc;
  fc.init(3 * 4 * 4, 4, rng);
  std::vector<int> labels = {1, 3};
  auto f = [&] {
    auto h = conv_block_forward(x, p, Mode::kTrain);  // batch-stat path, frozen running
    return softmax_cross_entropy(fc.forward(flatten(h)), labels);
  };
  std::vector<Var<double>> params = {p.c1.w, p.c1.b, p.n1.gamma, p.n1.beta, p.c2.w,
                                     p.c2.b, p.n2.gamma, p.n2.beta, fc.w, fc.b};
  auto res = grad_check(f, params);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("grad_check: batch norm eval-mode path < 1e-4") {
  BatchNorm2dParams<double> bn;
  bn.init(3);
  bn.running_mean = Tensor<double>({3}, {0.2, -0.1, 0.4});
  bn.running_var = Tensor<double>({3}, {1.5, 0.7, 2.0});
  auto x = Var<double>::param(random_tensor<double>({2, 3, 4, 4}, 95));
  auto f = [&] { return mean_all(square(bn.forward(x, Mode::kEval))); };
  auto res = grad_check(f, {x, bn.gamma, bn.beta});
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("grad_check: constant-in-parameter gives zero error") {
  auto used = Var<double>::param(random_tensor<double>({3}, 100));
  auto unused = Var<double>::param(random_tensor<double>({3}, 101));
  auto f = [&] { return sum_all(square(used)); };
  auto res = grad_check(f, {unused});
  CHECK(res.max_rel_error == 0.0);
}

TEST_CASE("grad_check validates eps and reports non-finite losses") {
  auto w = Var<double>::param(Tensor<double>({1}, {1.0}));
  auto f = [&] { return sum_all(w); };
  GradCheckOptions opt;
  opt.eps = 1e-2;
  CHECK_THROWS_AS(grad_check(f, {w}, opt), InputError);

  auto bad = [&] {
    auto v = sum_all(w);
    v.value()[0] = std::numeric_limits<double>::quiet_NaN();
    return v;
  };
  CHECK_THROWS_AS(grad_check(bad, {w}), NumericError);
}

TEST_CASE("grad_check element subsampling stays exhaustive-consistent") {
  auto w = Var<double>::param(random_tensor<double>({6, 6}, 110));
  auto f = [&] { return mean_all(square(tanh(w))); };
  GradCheckOptions opt;
  opt.max_elements_per_param = 8;
  opt.seed = 3;
  auto res = grad_check(f, {w}, opt);
  CHECK(res.max_rel_error < 1e-6);
}
