#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fersnet/convflu.hpp"
#include "fersnet/gradcheck.hpp"
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

template <typename T>
ConvFluParams<T> make_params(int channels, std::uint64_t seed) {
  ConvFluParams<T> p;
  RngStream rng(seed);
  p.init(channels, rng);
  return p;
}

double sigmoid_ref(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("leaky_gate: zero kernels give exactly 0.5; range is (0,1)") {
  auto p = make_params<double>(2, 1);
  p.leak.w.value().zero();
  p.leak.b.value().zero();
  auto fx = Var<double>::constant(random_tensor<double>({2, 2, 4, 4}, 2));
  auto fy = Var<double>::constant(random_tensor<double>({2, 2, 4, 4}, 3));
  auto r = leaky_gate(fx, fy, p);
  for (long long i = 0; i < r.numel(); ++i) CHECK(r.value()[i] == 0.5);

  auto p2 = make_params<double>(2, 4);
  auto r2 = leaky_gate(fx, fy, p2);
  for (long long i = 0; i < r2.numel(); ++i) {
    CHECK(r2.value()[i] > 0.0);
    CHECK(r2.value()[i] < 1.0);
  }

  auto bad = Var<double>::constant(Tensor<double>({2, 2, 4, 5}));
  CHECK_THROWS_AS(leaky_gate(fx, bad, p), InputError);
}

TEST_CASE("leaky_gate: scalar closed-form oracle (C=1, hand-set 1x1 kernel)") {
  ConvFluParams<double> p = make_params<double>(1, 5);
  double a = 0.7, b = -0.4, bias = 0.15;
  p.leak.w = Var<double>::param(Tensor<double>({1, 2, 1, 1}, {a, b}));
  p.leak.b = Var<double>::param(Tensor<double>({1}, {bias}));
  auto fx = random_tensor<double>({1, 1, 2, 2}, 6);
  auto fy = random_tensor<double>({1, 1, 2, 2}, 7);
  auto r = leaky_gate(Var<double>::constant(fx), Var<double>::constant(fy), p);
  for (int i = 0; i < 4; ++i)
    CHECK(r.value()[i] == doctest::Approx(sigmoid_ref(a * fx[i] + b * fy[i] + bias)).epsilon(1e-12));
}

TEST_CASE("memory_gate: zero kernels 0.5; saturated negative bias closes the gate") {
  auto p = make_params<double>(1, 8);
  p.mem.w.value().zero();
  p.mem.b.value().zero();
  auto fx = Var<double>::constant(random_tensor<double>({1, 1, 3, 3}, 9));
  auto fy = Var<double>::constant(random_tensor<double>({1, 1, 3, 3}, 10));
  auto z = memory_gate(fx, fy, p);
  for (long long i = 0; i < z.numel(); ++i) CHECK(z.value()[i] == 0.5);

  p.mem.b.value()[0] = -50.0;
  auto z2 = memory_gate(fx, fy, p);
  for (long long i = 0; i < z2.numel(); ++i) CHECK(z2.value()[i] < 1e-20);

  // hand-set scalar oracle
  double a = -0.3, b = 0.9, bias = 0.05;
  p.mem.w = Var<double>::param(Tensor<double>({1, 2, 1, 1}, {a, b}));
  p.mem.b = Var<double>::param(Tensor<double>({1}, {bias}));
  auto z3 = memory_gate(fx, fy, p);
  for (int i = 0; i < 9; ++i)
    CHECK(z3.value()[i] ==
          doctest::Approx(sigmoid_ref(a * fx.value()[i] + b * fy.value()[i] + bias)).epsilon(1e-12));
}

TEST_CASE("candidate_features closed forms and scalar oracle") {
  auto p = make_params<double>(1, 11);
  auto fx = Var<double>::constant(random_tensor<double>({1, 1, 3, 3}, 12));
  auto fy = Var<double>::constant(random_tensor<double>({1, 1, 3, 3}, 13));

  // r == 0 with U = 0 and no biases: candidate is exactly 0
  p.own.w.value().zero();
  p.own.b.value().zero();
  p.cross.b.value().zero();
  auto r0 = Var<double>::constant(Tensor<double>({1, 1, 3, 3}));
  auto cand = candidate_features(fx, fy, r0, p);
  for (long long i = 0; i < cand.numel(); ++i) CHECK(cand.value()[i] == 0.0);

  // W = 0, U = identity 1x1, no biases: candidate = tanh(F_x)
  p.cross.w.value().zero();
  p.own.w = Var<double>::param(Tensor<double>({1, 1, 1, 1}, {1.0}));
  auto r1 = Var<double>::constant(Tensor<double>::full({1, 1, 3, 3}, 0.37));
  auto cand2 = candidate_features(fx, fy, r1, p);
  for (long long i = 0; i < cand2.numel(); ++i)
    CHECK(cand2.value()[i] == doctest::Approx(std::tanh(fx.value()[i])).epsilon(1e-12));

  // hand-set scalar kernels
  double wv = 0.8, uv = -0.6, wb = 0.1, ub = -0.2;
  p.cross.w = Var<double>::param(Tensor<double>({1, 1, 1, 1}, {wv}));
  p.cross.b = Var<double>::param(Tensor<double>({1}, {wb}));
  p.own.w = Var<double>::param(Tensor<double>({1, 1, 1, 1}, {uv}));
  p.own.b = Var<double>::param(Tensor<double>({1}, {ub}));
  auto rr = random_tensor<double>({1, 1, 3, 3}, 14, 0.0, 1.0);
  auto cand3 = candidate_features(fx, fy, Var<double>::constant(rr), p);
  for (int i = 0; i < 9; ++i) {
    double expect =
        std::tanh(wv * (rr[i] * fy.value()[i]) + wb + uv * fx.value()[i] + ub);
    CHECK(cand3.value()[i] == doctest::Approx(expect).epsilon(1e-12));
  }
  // tanh range
  for (long long i = 0; i < cand3.numel(); ++i) {
    CHECK(cand3.value()[i] > -1.0);
    CHECK(cand3.value()[i] < 1.0);
  }
}

TEST_CASE("fuse: exact pass-through at z=0, candidate at z=1, convex combination") {
  auto f = random_tensor<double>({1, 2, 3, 3}, 15);
  auto c = random_tensor<double>({1, 2, 3, 3}, 16);
  auto vf = Var<double>::constant(f), vc = Var<double>::constant(c);

  auto out0 = fuse(vf, vc, Var<double>::constant(Tensor<double>({1, 2, 3, 3})));
  CHECK(oracle::max_abs_diff(out0.value(), f) == 0.0);

  auto out1 = fuse(vf, vc, Var<double>::constant(Tensor<double>::full({1, 2, 3, 3}, 1.0)));
  CHECK(oracle::max_abs_diff(out1.value(), c) == 0.0);

  auto outq = fuse(Var<double>::constant(Tensor<double>({1, 1, 1, 1}, {2.0})),
                   Var<double>::constant(Tensor<double>({1, 1, 1, 1}, {4.0})),
                   Var<double>::constant(Tensor<double>({1, 1, 1, 1}, {0.25})));
  CHECK(outq.value()[0] == doctest::Approx(2.5).epsilon(1e-15));

  auto badz = Var<double>::constant(Tensor<double>::full({1, 2, 3, 3}, 1.5));
  CHECK_THROWS_AS(fuse(vf, vc, badz), InputError);
}

TEST_CASE("fuse: interval containment over many random elements") {
  RngStream rng(17);
  Tensor<double> f({4, 8, 60, 60}), c({4, 8, 60, 60}), z({4, 8, 60, 60});
  oracle::fill_random(f, rng, -3.0, 3.0);
  oracle::fill_random(c, rng, -3.0, 3.0);
  oracle::fill_random(z, rng, 0.0, 1.0);
  REQUIRE(f.numel() >= 100000);
  auto out = fuse(Var<double>::constant(f), Var<double>::constant(c), Var<double>::constant(z));
  for (long long i = 0; i < out.numel(); ++i) {
    double lo = std::min(f[i], c[i]), hi = std::max(f[i], c[i]);
    CHECK(out.value()[i] >= lo - 1e-12);
    CHECK(out.value()[i] <= hi + 1e-12);
  }
}

TEST_CASE("transference block: saturated memory gates pass both inputs through") {
  TransferenceBlock<float> blk;
  RngStream rng(18);
  blk.init(3, rng);
  blk.x_from_y.mem.w.value().zero();
  blk.x_from_y.mem.b.value().fill(-1e4f);
  blk.y_from_x.mem.w.value().zero();
  blk.y_from_x.mem.b.value().fill(-1e4f);
  auto fx = random_tensor<float>({2, 3, 5, 5}, 19);
  auto fy = random_tensor<float>({2, 3, 5, 5}, 20);
  auto out = transference_block(Var<float>::constant(fx), Var<float>::constant(fy), blk);
  // bitwise equality: sigmoid underflows to exactly 0, fuse keeps F_x intact
  for (long long i = 0; i < fx.numel(); ++i) {
    CHECK(out.fx.value()[i] == fx[i]);
    CHECK(out.fy.value()[i] == fy[i]);
  }
}

TEST_CASE("transference block: symmetric inputs with tied parameters") {
  TransferenceBlock<double> blk;
  RngStream rng(21);
  blk.init(2, rng);
  blk.y_from_x = blk.x_from_y;  // tie both directions
  auto f = random_tensor<double>({1, 2, 4, 4}, 22);
  auto out = transference_block(Var<double>::constant(f), Var<double>::constant(f), blk);
  CHECK(oracle::max_abs_diff(out.fx.value(), out.fy.value()) == 0.0);
}

TEST_CASE("transference block: matches manual composition of the four ops") {
  TransferenceBlock<double> blk;
  RngStream rng(23);
  blk.init(3, rng);
  auto fx = Var<double>::constant(random_tensor<double>({2, 3, 4, 4}, 24));
  auto fy = Var<double>::constant(random_tensor<double>({2, 3, 4, 4}, 25));
  auto out = transference_block(fx, fy, blk);

  auto rx = leaky_gate(fx, fy, blk.x_from_y);
  auto zx = memory_gate(fx, fy, blk.x_from_y);
  auto cx = candidate_features(fx, fy, rx, blk.x_from_y);
  auto manual_fx = fuse(fx, cx, zx);
  CHECK(oracle::max_abs_diff(out.fx.value(), manual_fx.value()) == 0.0);

  auto ry = leaky_gate(fy, fx, blk.y_from_x);
  auto zy = memory_gate(fy, fx, blk.y_from_x);
  auto cy = candidate_features(fy, fx, ry, blk.y_from_x);
  auto manual_fy = fuse(fy, cy, zy);
  CHECK(oracle::max_abs_diff(out.fy.value(), manual_fy.value()) == 0.0);
}

TEST_CASE("transference block: swapping roles with swapped parameters swaps outputs") {
  TransferenceBlock<double> blk;
  RngStream rng(26);
  blk.init(2, rng);
  TransferenceBlock<double> swapped;
  swapped.x_from_y = blk.y_from_x;
  swapped.y_from_x = blk.x_from_y;
  auto fx = Var<double>::constant(random_tensor<double>({1, 2, 4, 4}, 27));
  auto fy = Var<double>::constant(random_tensor<double>({1, 2, 4, 4}, 28));
  auto a = transference_block(fx, fy, blk);
  auto b = transference_block(fy, fx, swapped);
  CHECK(oracle::max_abs_diff(a.fx.value(), b.fy.value()) == 0.0);
  CHECK(oracle::max_abs_diff(a.fy.value(), b.fx.value()) == 0.0);
}

TEST_CASE("grad_check: full transference block < 1e-4") {
  TransferenceBlock<double> blk;
  RngStream rng(29);
  blk.init(2, rng);
  auto fx = Var<double>::constant(random_tensor<double>({2, 2, 3, 3}, 30));
  auto fy = Var<double>::constant(random_tensor<double>({2, 2, 3, 3}, 31));
  auto f = [&] {
    auto out = transference_block(fx, fy, blk);
    return mean_all(add(square(out.fx), square(out.fy)));
  };
  std::vector<Var<double>> params;
  std::vector<NamedVar<double>> named;
  blk.collect("blk", named);
  for (auto& nv : named) params.push_back(nv.var);
  auto res = grad_check(f, params);
  CHECK(res.max_rel_error < 1e-4);
}

TEST_CASE("gate heat maps: channel mean, min-max normalization, flat maps") {
  // constant gate -> degenerate range normalizes to 0.5
  Tensor<double> flat = Tensor<double>::full({1, 3, 4, 4}, 0.5);
  auto m = channel_mean_heat(flat, 0);
  for (float v : m.normalized) CHECK(v == 0.5f);
  CHECK(m.raw_min == doctest::Approx(0.5));
  CHECK(m.raw_max == doctest::Approx(0.5));

  // single channel: map equals the gate map itself (after normalization)
  Tensor<double> one({1, 1, 2, 2}, {0.1, 0.2, 0.3, 0.9});
  auto m1 = channel_mean_heat(one, 0);
  CHECK(m1.raw_min == doctest::Approx(0.1));
  CHECK(m1.raw_max == doctest::Approx(0.9));
  CHECK(m1.normalized[0] == doctest::Approx(0.0));
  CHECK(m1.normalized[3] == doctest::Approx(1.0));

  // two channels 0.2 / 0.8 at a pixel -> 0.5 raw mean
  Tensor<double> two({1, 2, 1, 2}, {0.2, 0.0, 0.8, 1.0});
  auto m2 = channel_mean_heat(two, 0);
  CHECK(m2.raw_min == doctest::Approx(0.5));
  CHECK(m2.raw_max == doctest::Approx(0.5));
}
