#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "fersnet/gradcheck.hpp"
#include "fersnet/losses.hpp"
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

// Zero-weight discriminator stand-in: constant logit map.
template <typename T>
struct ConstPatchDisc {
  T logit;
  Var<T> operator()(const Var<T>& img, const Tensor<T>&) const {
    (void)img;
    return Var<T>::constant(Tensor<T>::full({img.shape()[0], 1, 3, 3}, logit));
  }
};

}  // namespace

TEST_CASE("classification loss closed forms") {
  // uniform logits over 7 classes -> ln 7
  auto logits = Var<double>::constant(Tensor<double>({1, 7}));
  auto loss = classification_loss(logits, std::vector<int>{0});
  CHECK(loss.item() == doctest::Approx(1.9459101090932196).epsilon(1e-10));

  // logits [10,0,...,0], label 0 -> ln(1 + 6 e^-10), computed by direct
  // scalar evaluation
  Tensor<double> t({1, 7});
  t[0] = 10.0;
  auto loss2 = classification_loss(Var<double>::constant(t), std::vector<int>{0});
  double expect = std::log(1.0 + 6.0 * std::exp(-10.0));  // 2.72363e-4
  CHECK(loss2.item() == doctest::Approx(expect).epsilon(1e-10));

  // batch mean equals mean of individual losses
  auto l2 = random_tensor<double>({2, 7}, 1);
  Tensor<double> row0({1, 7}), row1({1, 7});
  for (int j = 0; j < 7; ++j) {
    row0[j] = l2[j];
    row1[j] = l2[7 + j];
  }
  double a = classification_loss(Var<double>::constant(row0), std::vector<int>{2}).item();
  double b = classification_loss(Var<double>::constant(row1), std::vector<int>{5}).item();
  double both = classification_loss(Var<double>::constant(l2), std::vector<int>{2, 5}).item();
  CHECK(both == doctest::Approx(0.5 * (a + b)).epsilon(1e-12));

  CHECK_THROWS_AS(classification_loss(Var<double>::constant(l2), std::vector<int>{2, 9}),
                  InputError);
  CHECK(loss.item() > 0.0);
}

TEST_CASE("discriminator GAN loss: sigma-symmetric point and optimum") {
  auto real = Var<double>::constant(random_tensor<double>({2, 1, 96, 96}, 2));
  auto fake = Var<double>::constant(random_tensor<double>({2, 1, 96, 96}, 3));
  Tensor<double> lab({2, 6});
  lab[0] = 1.0;
  lab[6 + 1] = 1.0;

  ConstPatchDisc<double> half{0.0};  // sigmoid(0) = 0.5
  auto l = gan_loss_discriminator(half, real, lab, fake, lab);
  CHECK(l.item() == doctest::Approx(2.0 * std::log(2.0)).epsilon(1e-12));

  // D(real)->1, D(fake)->0 -> loss -> 0
  struct PerfectDisc {
    Var<double> operator()(const Var<double>& img, const Tensor<double>&) const {
      double v = img.value()[0] > 5.0 ? 40.0 : -40.0;
      return Var<double>::constant(Tensor<double>::full({img.shape()[0], 1, 3, 3}, v));
    }
  } perfect;
  auto real_tag = Var<double>::constant(Tensor<double>::full({1, 1, 4, 4}, 10.0));
  auto fake_tag = Var<double>::constant(Tensor<double>::full({1, 1, 4, 4}, -10.0));
  Tensor<double> lab1({1, 6});
  lab1[0] = 1.0;
  auto l2 = gan_loss_discriminator(perfect, real_tag, lab1, fake_tag, lab1);
  CHECK(l2.item() < 1e-12);

  // patch averaging: constant patch map equals the scalar case
  ConstPatchDisc<double> c{0.3};
  auto scalar_form = std::log(1.0 + std::exp(-0.3)) + std::log(1.0 + std::exp(0.3));
  auto l3 = gan_loss_discriminator(c, real, lab, fake, lab);
  CHECK(l3.item() == doctest::Approx(scalar_form).epsilon(1e-12));
}

TEST_CASE("generator GAN loss: ln 2 at D=0.5, 0 at D->1, nonzero gradient") {
  auto fake = Var<double>::constant(random_tensor<double>({2, 1, 8, 8}, 4));
  Tensor<double> lab({2, 6});
  lab[1] = 1.0;
  lab[6 + 2] = 1.0;
  ConstPatchDisc<double> half{0.0};
  CHECK(gan_loss_generator(half, fake, lab).item() ==
        doctest::Approx(std::log(2.0)).epsilon(1e-12));
  ConstPatchDisc<double> confident{40.0};
  CHECK(gan_loss_generator(confident, fake, lab).item() < 1e-12);

  // grad_check through a linear "discriminator" reading the fake image
  auto w = Var<double>::param(random_tensor<double>({1, 4}, 5, -0.5, 0.5));
  auto img = Var<double>::param(random_tensor<double>({2, 4}, 6));
  auto disc = [&](const Var<double>& x, const Tensor<double>&) {
    return linear(x, w, Var<double>::constant(Tensor<double>({1})));
  };
  auto f = [&] { return gan_loss_generator(disc, img, lab); };
  auto res = grad_check(f, {img, w});
  CHECK(res.max_rel_error < 1e-6);
  double gnorm = 0;
  f().backward();
  // generator-side input received gradient
  CHECK(img.grad().defined());
  for (long long i = 0; i < img.grad().numel(); ++i) gnorm += std::abs(img.grad()[i]);
  CHECK(gnorm > 0.0);
}

TEST_CASE("reconstruction loss: zero case, ones-vs-zeros, random oracle") {
  auto a = Var<double>::constant(random_tensor<double>({2, 1, 4, 4}, 7));
  CHECK(reconstruction_loss(a, a).item() == 0.0);

  auto ones = Var<double>::constant(Tensor<double>::full({2, 3, 5, 5}, 1.0));
  auto zeros = Var<double>::constant(Tensor<double>({2, 3, 5, 5}));
  CHECK(reconstruction_loss(ones, zeros).item() == doctest::Approx(1.0).epsilon(1e-12));

  auto x = random_tensor<double>({3, 2, 6, 6}, 8);
  auto y = random_tensor<double>({3, 2, 6, 6}, 9);
  CHECK(reconstruction_loss(Var<double>::constant(x), Var<double>::constant(y)).item() ==
        doctest::Approx(oracle::mse_ref(x, y)).epsilon(1e-12));

  CHECK_THROWS_AS(reconstruction_loss(a, ones), InputError);
}

TEST_CASE("cycle loss with stub generators") {
  Tensor<double> src({1, 6}), tgt({1, 6});
  src[0] = 1.0;
  tgt[3] = 1.0;
  auto img = Var<double>::constant(random_tensor<double>({1, 1, 4, 4}, 10));

  auto identity = [](const Tensor<double>&, const Var<double>& x) { return x; };
  CHECK(cycle_loss<double>(identity, img, src, tgt).item() == 0.0);

  auto negate = [](const Tensor<double>&, const Var<double>& x) { return scale(x, -1.0); };
  CHECK(cycle_loss<double>(negate, img, src, tgt).item() == 0.0);

  auto add01 = [](const Tensor<double>&, const Var<double>& x) { return affine(x, 1.0, 0.1); };
  CHECK(cycle_loss<double>(add01, img, src, tgt).item() == doctest::Approx(0.04).epsilon(1e-12));
}

TEST_CASE("cycle loss backpropagates through both generator passes") {
  Tensor<double> src({2, 6}), tgt({2, 6});
  src[0] = src[6 + 0] = 1.0;
  tgt[3] = tgt[6 + 3] = 1.0;
  auto img = Var<double>::constant(random_tensor<double>({2, 1, 3, 3}, 11));
  // parameterized stub: G(label, x) = tanh(a*x + b), same params both passes
  auto a = Var<double>::param(Tensor<double>({2, 1, 3, 3}, std::vector<double>(18, 0.8)));
  auto b = Var<double>::param(random_tensor<double>({2, 1, 3, 3}, 12, -0.2, 0.2));
  auto gen = [&](const Tensor<double>&, const Var<double>& x) {
    return tanh(add(mul(a, x), b));
  };
  auto f = [&] { return cycle_loss<double>(gen, img, src, tgt); };
  auto res = grad_check(f, {a, b});
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("identity loss: zero case, closed form, frozen embedder") {
  // identity-function embedder on 2-vectors via an identity projection
  struct IdentityEmb : IdentityEmbedder<double> {
    Var<double> embed(const Var<double>& x) const override { return flatten(x); }
    int embedding_dim() const override { return 2; }
  } emb;
  auto a = Var<double>::constant(Tensor<double>({1, 2}, {0.0, 0.0}));
  auto b = Var<double>::constant(Tensor<double>({1, 2}, {3.0, 4.0}));
  CHECK(identity_loss(emb, a, b).item() == doctest::Approx(25.0).epsilon(1e-12));
  CHECK(identity_loss(emb, b, b).item() == 0.0);

  // frozen random projection: no gradient reaches embedder internals, synth does
  RandomProjectionEmbedder<double> proj(16, 4, 99);
  auto synth = Var<double>::param(random_tensor<double>({2, 1, 4, 4}, 13));
  auto target = Var<double>::constant(random_tensor<double>({2, 1, 4, 4}, 14));
  auto loss = identity_loss<double>(proj, synth, target);
  loss.backward();
  CHECK(synth.grad().defined());
  double g = 0;
  for (long long i = 0; i < synth.grad().numel(); ++i) g += std::abs(synth.grad()[i]);
  CHECK(g > 0.0);

  auto f = [&] { return identity_loss<double>(proj, synth, target); };
  auto res = grad_check(f, {synth});
  CHECK(res.max_rel_error < 1e-6);
}

TEST_CASE("lambda4 schedule endpoints and monotonicity") {
  LossWeights w;
  CHECK(lambda4_schedule(0, 500, w) == doctest::Approx(0.1).epsilon(1e-12));
  CHECK(lambda4_schedule(499, 500, w) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(lambda4_schedule(250, 500, w) == doctest::Approx(0.3).epsilon(2e-3));
  CHECK(lambda4_schedule(0, 60, w) == doctest::Approx(0.1));
  CHECK(lambda4_schedule(59, 60, w) == doctest::Approx(0.5));
  double prev = -1;
  for (int e = 0; e < 60; ++e) {
    double v = lambda4_schedule(e, 60, w);
    CHECK(v >= prev);
    prev = v;
  }
  CHECK_THROWS_AS(lambda4_schedule(-1, 60, w), InputError);
  CHECK_THROWS_AS(lambda4_schedule(60, 60, w), InputError);
}

TEST_CASE("total generator loss: weighted combination and linearity") {
  LossWeights w;  // defaults 0.3 / 1 / 0.5 / 0.1->0.5
  GeneratorLossTerms<double> t;
  t.cls = Var<double>::constant(Tensor<double>::scalar(1.0));
  t.gan_g = Var<double>::constant(Tensor<double>::scalar(1.0));
  t.rec = Var<double>::constant(Tensor<double>::scalar(1.0));
  t.cyc = Var<double>::constant(Tensor<double>::scalar(1.0));
  t.idt = Var<double>::constant(Tensor<double>::scalar(1.0));
  auto total = total_generator_loss(t, w, 0, 500);
  CHECK(total.value.item() == doctest::Approx(2.9).epsilon(1e-9));
  CHECK(total.report.lambda4_effective == doctest::Approx(0.1));
  // report invariant
  double recon = total.report.cls + w.lambda1 * total.report.gan_g +
                 w.lambda2 * total.report.rec + w.lambda3 * total.report.cyc +
                 total.report.lambda4_effective * total.report.idt;
  CHECK(total.report.total == doctest::Approx(recon).epsilon(1e-12));

  // all-zero components -> 0; zero weights -> cls only
  GeneratorLossTerms<double> z;
  z.cls = z.gan_g = z.rec = z.cyc = z.idt = Var<double>::constant(Tensor<double>::scalar(0.0));
  CHECK(total_generator_loss(z, w, 0, 10).value.item() == 0.0);
  LossWeights zero;
  zero.lambda1 = zero.lambda2 = zero.lambda3 = zero.lambda4_start = zero.lambda4_end = 0.0;
  GeneratorLossTerms<double> t2 = t;
  t2.cls = Var<double>::constant(Tensor<double>::scalar(0.7));
  CHECK(total_generator_loss(t2, zero, 0, 10).value.item() == doctest::Approx(0.7));

  // linearity: perturbing one component moves the total by weight * delta
  GeneratorLossTerms<double> t3 = t;
  t3.cyc = Var<double>::constant(Tensor<double>::scalar(1.0 + 0.25));
  double delta = total_generator_loss(t3, w, 0, 500).value.item() - total.value.item();
  CHECK(delta == doctest::Approx(w.lambda3 * 0.25).epsilon(1e-9));

  // non-finite component is named
  GeneratorLossTerms<double> bad = t;
  bad.rec = Var<double>::constant(Tensor<double>::scalar(std::nan("")));
  CHECK_THROWS_WITH_AS(total_generator_loss(bad, w, 0, 10), doctest::Contains("rec"),
                       NumericError);
}

TEST_CASE("each loss term is non-negative at random operands") {
  RngStream rng(20);
  for (int rep = 0; rep < 5; ++rep) {
    auto x = random_tensor<double>({2, 3}, 100 + rep, -4.0, 4.0);
    CHECK(classification_loss(Var<double>::constant(x), std::vector<int>{1, 2}).item() >= 0.0);
    auto p = random_tensor<double>({2, 1, 4, 4}, 200 + rep, -5.0, 5.0);
    CHECK(bce_with_logits_mean(Var<double>::constant(p), 1.0).item() >= 0.0);
    CHECK(bce_with_logits_mean(Var<double>::constant(p), 0.0).item() >= 0.0);
    auto q = random_tensor<double>({2, 1, 4, 4}, 300 + rep);
    CHECK(reconstruction_loss(Var<double>::constant(p), Var<double>::constant(q)).item() >= 0.0);
  }
}

TEST_CASE("loss csv row layout") {
  std::ostringstream os;
  write_loss_csv_header(os);
  LossReport r;
  r.cls = 1;
  r.gan_g = 2;
  r.gan_d = 3;
  r.rec = 4;
  r.cyc = 5;
  r.idt = 6;
  r.total = 7;
  r.lambda4_effective = 0.1;
  write_loss_csv_row(os, 5, 1, 1e-3, r);
  CHECK(os.str() == "step,epoch,lr,lambda4,cls,gan_g,gan_d,rec,cyc,idt,total\n"
                    "5,1,0.001,0.1,1,2,3,4,5,6,7\n");
}
