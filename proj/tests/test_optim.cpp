#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "psi/linalg.hpp"
#include "psi/manifold.hpp"
#include "psi/network.hpp"
#include "psi/optim.hpp"

using namespace psi;

namespace {

// Single PSI group of width two: the smallest net whose update rules can be
// followed by hand.
BnMlp two_param_net(double w0, double w1) {
  BnMlp net = make_mlp({{2, 1, true}}, Activation::Elu, 0.0, LossKind::Mse);
  net.layers[0].weight(0, 0) = w0;
  net.layers[0].weight(0, 1) = w1;
  return net;
}

GradBundle hand_grads(Vector psi, Vector g) {
  GradBundle b;
  b.psi_grads.push_back(std::move(psi));
  b.g_grad = std::move(g);
  return b;
}

BnMlp bn_net(std::uint64_t seed, double eps = 0.0) {
  BnMlp net = make_mlp({{4, 8, true}, {8, 1, false}}, Activation::Elu, eps,
                       LossKind::Mse);
  Rng rng(seed);
  init_he(net, rng);
  return net;
}

Batch bn_batch(std::uint64_t seed, std::size_t n = 16) {
  Rng rng(seed);
  Batch b;
  b.inputs = Matrix(n, 4);
  b.inputs.data = sample_gaussian(rng, n * 4, 0.0, 1.0);
  b.targets = Matrix(n, 1);
  b.targets.data = sample_gaussian(rng, n, 0.0, 1.0);
  return b;
}

double rel_err(double got, double want) {
  return std::abs(got - want) /
         std::max({std::abs(got), std::abs(want), 1e-300});
}

} // namespace

TEST_CASE("step_psi_gd: zero gradient is a fixed point") {
  BnMlp net = two_param_net(3.0, 4.0);
  OptState st = make_opt_state(net);
  OptConfig cfg;
  cfg.kind = OptKind::PsiGd;
  const Vector before = flatten_params(net);
  step_psi_gd(net, hand_grads({0.0, 0.0}, {0.0, 0.0}), cfg, st);
  CHECK(flatten_params(net) == before);
}

TEST_CASE("step_psi_gd: one step matches the hand-evaluated update") {
  // w = (3,4), |w|^2 = 25, lr_w = 0.01, grad = (0.1, -0.2):
  //   w' = w - 0.01*25*grad = (3 - 0.25*0.1, 4 + 0.25*0.2)
  BnMlp net = two_param_net(3.0, 4.0);
  OptState st = make_opt_state(net);
  OptConfig cfg;
  cfg.kind = OptKind::PsiGd;
  cfg.lr_w = 0.01;
  cfg.lr_g = 0.1;
  step_psi_gd(net, hand_grads({0.1, -0.2}, {0.05, -0.01}), cfg, st);

  CHECK(rel_err(net.layers[0].weight(0, 0), 2.975) < 1e-15);
  CHECK(rel_err(net.layers[0].weight(0, 1), 4.05) < 1e-15);
  CHECK(rel_err(net.layers[0].gamma[0], 1.0 - 0.1 * 0.05) < 1e-15);
  CHECK(rel_err(net.layers[0].beta[0], 0.001) < 1e-15);
}

TEST_CASE("step_psi_sgdm: two steps match the hand-evaluated recurrence") {
  BnMlp net = two_param_net(1.0, 2.0);
  OptState st = make_opt_state(net);
  OptConfig cfg;
  cfg.kind = OptKind::PsiSgdm;
  cfg.lr_w = 0.1;
  cfg.lr_g = 0.05;
  cfg.momentum = 0.5;

  const Vector g1{0.2, -0.4};
  const Vector g2{-0.3, 0.1};

  // By hand: u1 = -lr*|w0|^2*g1, w1 = w0 + u1;
  //          u2 = rho*u1 - lr*|w1|^2*g2, w2 = w1 + u2.
  double w0a = 1.0, w0b = 2.0;
  const double nsq0 = w0a * w0a + w0b * w0b;
  double u1a = -0.1 * nsq0 * g1[0];
  double u1b = -0.1 * nsq0 * g1[1];
  double w1a = w0a + u1a;
  double w1b = w0b + u1b;
  const double nsq1 = w1a * w1a + w1b * w1b;
  double u2a = 0.5 * u1a - 0.1 * nsq1 * g2[0];
  double u2b = 0.5 * u1b - 0.1 * nsq1 * g2[1];
  const double w2a = w1a + u2a;
  const double w2b = w1b + u2b;

  step_psi_sgdm(net, hand_grads(g1, {0.0, 0.0}), cfg, st);
  step_psi_sgdm(net, hand_grads(g2, {0.0, 0.0}), cfg, st);

  CHECK(rel_err(net.layers[0].weight(0, 0), w2a) < 1e-14);
  CHECK(rel_err(net.layers[0].weight(0, 1), w2b) < 1e-14);
}

TEST_CASE("step_psi_sgdm: rho = 0 degenerates to step_psi_sgd") {
  BnMlp a = bn_net(1);
  BnMlp b = a;
  OptState sa = make_opt_state(a);
  OptState sb = make_opt_state(b);
  OptConfig ca;
  ca.kind = OptKind::PsiSgdm;
  ca.momentum = 0.0;
  OptConfig cb;
  cb.kind = OptKind::PsiSgd;

  const Batch batch = bn_batch(2);
  for (int s = 0; s < 5; ++s) {
    auto [la, cha] = forward(a, batch);
    (void)la;
    step_psi_sgdm(a, backward(a, cha), ca, sa);
    auto [lb, chb] = forward(b, batch);
    (void)lb;
    step_psi_sgd(b, backward(b, chb), cb, sb);
  }
  CHECK(flatten_params(a) == flatten_params(b));
}

TEST_CASE("step_psi_sgdm: zero gradient and momentum is a no-op") {
  BnMlp net = two_param_net(1.0, 1.0);
  OptState st = make_opt_state(net);
  OptConfig cfg;
  cfg.kind = OptKind::PsiSgdm;
  cfg.momentum = 0.9;
  const Vector before = flatten_params(net);
  step_psi_sgdm(net, hand_grads({0.0, 0.0}, {0.0, 0.0}), cfg, st);
  CHECK(flatten_params(net) == before);
}

TEST_CASE("psi steps reduce to Euclidean ones on unit-norm groups") {
  // One-hot rows: |w|^2 == 1 exactly, so the PSI scaling disappears.
  auto build = [] {
    BnMlp net = make_mlp({{3, 2, true}}, Activation::Elu, 0.0, LossKind::Mse);
    net.layers[0].weight(0, 0) = 1.0;
    net.layers[0].weight(1, 2) = 1.0;
    return net;
  };
  BnMlp a = build();
  BnMlp b = build();
  OptState sa = make_opt_state(a);
  OptState sb = make_opt_state(b);
  OptConfig ca;
  ca.kind = OptKind::PsiGd;
  ca.lr_w = 0.05;
  OptConfig cb = ca;
  cb.kind = OptKind::Gd;

  GradBundle g;
  g.psi_grads = {{0.1, -0.2, 0.3}, {0.4, 0.5, -0.6}};
  g.g_grad = Vector{0.01, 0.02, 0.03, 0.04};
  step_psi_gd(a, g, ca, sa);
  step_gd(b, g, cb, sb);
  CHECK(flatten_params(a) == flatten_params(b));
}

TEST_CASE("a PSI step equals a Euclidean step with lr * |w|^2") {
  BnMlp a = two_param_net(0.6, -2.2);
  BnMlp b = a;
  OptState sa = make_opt_state(a);
  OptState sb = make_opt_state(b);

  const double eta = 0.02;
  const double nsq = dot(Vector{0.6, -2.2}, Vector{0.6, -2.2});
  OptConfig ca;
  ca.kind = OptKind::PsiSgd;
  ca.lr_w = eta;
  OptConfig cb;
  cb.kind = OptKind::Sgd;
  cb.lr_w = eta * nsq; // per-group adaptive rate, spelled out

  const GradBundle g = hand_grads({0.3, 0.7}, {0.1, -0.1});
  step_psi_sgd(a, g, ca, sa);
  step_sgd(b, g, cb, sb);
  CHECK(flatten_params(a) == flatten_params(b));
}

TEST_CASE("step_psi_gd: zero-norm group is a degenerate point") {
  BnMlp net = two_param_net(0.0, 0.0);
  OptState st = make_opt_state(net);
  OptConfig cfg;
  cfg.kind = OptKind::PsiGd;
  CHECK_THROWS_AS(step_psi_gd(net, hand_grads({1.0, 1.0}, {0.0, 0.0}), cfg,
                              st),
                  DegeneratePointError);
}

TEST_CASE("minibatch gradients average to the full-batch gradient") {
  // Without BN the batch loss decomposes per sample, so enumerating size-1
  // minibatches and averaging their gradients must reproduce the full-batch
  // gradient (the stochastic estimator is exactly unbiased here).
  BnMlp net = make_mlp({{3, 4, false}, {4, 1, false}}, Activation::Elu, 0.0,
                       LossKind::Mse);
  Rng rng(5);
  init_he(net, rng);

  Batch full;
  full.inputs = Matrix(10, 3);
  full.inputs.data = sample_gaussian(rng, 30, 0.0, 1.0);
  full.targets = Matrix(10, 1);
  full.targets.data = sample_gaussian(rng, 10, 0.0, 1.0);

  auto [lf, cf] = forward(net, full);
  (void)lf;
  const GradBundle whole = backward(net, cf);

  Vector avg(whole.g_grad.size(), 0.0);
  for (std::size_t i = 0; i < 10; ++i) {
    Batch one;
    one.inputs = Matrix(1, 3);
    std::copy_n(full.inputs.row(i).begin(), 3, one.inputs.row(0).begin());
    one.targets = Matrix(1, 1);
    one.targets(0, 0) = full.targets(i, 0);
    auto [l1, c1] = forward(net, one);
    (void)l1;
    const GradBundle g1 = backward(net, c1);
    for (std::size_t k = 0; k < avg.size(); ++k)
      avg[k] += g1.g_grad[k] / 10.0;
  }
  for (std::size_t k = 0; k < avg.size(); ++k)
    CHECK(std::abs(avg[k] - whole.g_grad[k]) <=
          1e-10 * std::max(1.0, std::abs(whole.g_grad[k])));
}

TEST_CASE("norm growth identity holds along GD and PSI-GD runs") {
  const Batch batch = bn_batch(7, 32);

  auto run = [&](OptKind kind, double lr) {
    BnMlp net = bn_net(6);
    OptState st = make_opt_state(net);
    OptConfig cfg;
    cfg.kind = kind;
    cfg.lr_w = lr;
    cfg.lr_g = lr;
    double worst = 0.0;
    for (int s = 0; s < 100; ++s) {
      auto [loss, cache] = forward(net, batch);
      (void)loss;
      const GradBundle g = backward(net, cache);
      std::vector<double> nsq_before(net.psi_group_count());
      std::vector<double> step_sq(net.psi_group_count());
      for (std::size_t i = 0; i < net.psi_group_count(); ++i) {
        const auto row = net.psi_row(i);
        nsq_before[i] = dot(row, row);
        const double gn = norm2(g.psi_grads[i]);
        const double eff =
            kind == OptKind::PsiGd ? lr * nsq_before[i] : lr;
        step_sq[i] = eff * eff * gn * gn;
      }
      apply_step(net, g, cfg, st);
      for (std::size_t i = 0; i < net.psi_group_count(); ++i) {
        const auto row = net.psi_row(i);
        const double nsq_after = dot(row, row);
        worst = std::max(worst,
                         std::abs(nsq_after - nsq_before[i] - step_sq[i]) /
                             nsq_before[i]);
        // Lemma-style monotonicity: norms never shrink along the run.
        CHECK(nsq_after >= nsq_before[i] - 1e-12 * nsq_before[i]);
      }
    }
    return worst;
  };

  CHECK(run(OptKind::Gd, 0.05) < 1e-10);
  CHECK(run(OptKind::PsiGd, 0.05) < 1e-10);
}

TEST_CASE("step_sgdm: rho = 0 equals plain SGD") {
  BnMlp a = bn_net(8);
  BnMlp b = a;
  OptState sa = make_opt_state(a);
  OptState sb = make_opt_state(b);
  OptConfig ca;
  ca.kind = OptKind::Sgdm;
  ca.momentum = 0.0;
  OptConfig cb;
  cb.kind = OptKind::Sgd;
  const Batch batch = bn_batch(9);
  for (int s = 0; s < 3; ++s) {
    auto [la, cha] = forward(a, batch);
    (void)la;
    step_sgdm(a, backward(a, cha), ca, sa);
    auto [lb, chb] = forward(b, batch);
    (void)lb;
    step_sgd(b, backward(b, chb), cb, sb);
  }
  CHECK(flatten_params(a) == flatten_params(b));
}

TEST_CASE("step_adam: zero gradients forever leave parameters unchanged") {
  BnMlp net = two_param_net(1.5, -0.5);
  OptState st = make_opt_state(net);
  OptConfig cfg;
  cfg.kind = OptKind::Adam;
  const Vector before = flatten_params(net);
  for (int s = 0; s < 10; ++s)
    step_adam(net, hand_grads({0.0, 0.0}, {0.0, 0.0}), cfg, st);
  CHECK(flatten_params(net) == before);
}

TEST_CASE("step_adam: first-step magnitude is bounded by the learning rate") {
  BnMlp net = bn_net(10);
  OptState st = make_opt_state(net);
  OptConfig cfg;
  cfg.kind = OptKind::Adam;
  cfg.lr_w = 0.001;
  cfg.lr_g = 0.001;
  const Vector before = flatten_params(net);
  const Batch batch = bn_batch(11);
  auto [loss, cache] = forward(net, batch);
  (void)loss;
  step_adam(net, backward(net, cache), cfg, st);
  const Vector after = flatten_params(net);
  for (std::size_t k = 0; k < before.size(); ++k)
    CHECK(std::abs(after[k] - before[k]) <= 0.001 + 1e-12);
}

TEST_CASE("GD on a 1-d quadratic contracts geometrically") {
  // f(w) = mean (w*x - y)^2 with x = 1, y = 0 gives f = w^2, grad = 2w,
  // so GD contracts by exactly (1 - 2*lr) per step.
  BnMlp net = make_mlp({{1, 1, false}}, Activation::Identity, 0.0,
                       LossKind::Mse);
  net.layers[0].weight(0, 0) = 1.0;
  Batch batch;
  batch.inputs = Matrix(2, 1);
  batch.inputs(0, 0) = 1.0;
  batch.inputs(1, 0) = 1.0;
  batch.targets = Matrix(2, 1, 0.0);

  OptState st = make_opt_state(net);
  OptConfig cfg;
  cfg.kind = OptKind::Gd;
  cfg.lr_g = 0.05;
  double expected = 1.0;
  for (int s = 0; s < 40; ++s) {
    auto [loss, cache] = forward(net, batch);
    (void)loss;
    step_gd(net, backward(net, cache), cfg, st);
    expected *= 1.0 - 2.0 * 0.05;
    CHECK(rel_err(net.layers[0].weight(0, 0), expected) < 1e-12);
  }
}

TEST_CASE("lr schedule: factors switch at their stage step for all rules") {
  for (OptKind kind : {OptKind::Sgd, OptKind::PsiSgd}) {
    BnMlp scheduled = two_param_net(1.0, 2.0);
    BnMlp manual = scheduled;
    OptState ss = make_opt_state(scheduled);
    OptState sm = make_opt_state(manual);

    OptConfig sched;
    sched.kind = kind;
    sched.lr_w = 0.4;
    sched.lr_g = 0.2;
    sched.lr_schedule = {{2, 0.5}, {4, 0.25}};

    const GradBundle g = hand_grads({0.01, -0.02}, {0.005, 0.0});
    for (std::size_t t = 0; t < 6; ++t) {
      OptConfig plain;
      plain.kind = kind;
      const double f = t >= 4 ? 0.25 : (t >= 2 ? 0.5 : 1.0);
      plain.lr_w = 0.4 * f;
      plain.lr_g = 0.2 * f;
      apply_step(scheduled, g, sched, ss);
      apply_step(manual, g, plain, sm);
    }
    CHECK(rel_err(flatten_params(scheduled)[0], flatten_params(manual)[0]) <
          1e-14);
    CHECK(rel_err(flatten_params(scheduled)[1], flatten_params(manual)[1]) <
          1e-14);
  }
}

TEST_CASE("renormalize_overflow: below threshold nothing changes") {
  BnMlp net = bn_net(12);
  OptState st = make_opt_state(net);
  const Vector before = flatten_params(net);
  const Rescale r = renormalize_overflow(net, st, 1e4);
  CHECK(flatten_params(net) == before);
  for (double f : r.factors)
    CHECK(f == 1.0);
}

TEST_CASE("renormalize_overflow: loss is unchanged at eps = 0") {
  BnMlp net = bn_net(13);
  {
    auto row = net.psi_row(2);
    for (auto &x : row)
      x *= 3e4; // push one group past the threshold
  }
  const Batch batch = bn_batch(14);
  const double before = forward(net, batch).first;
  OptState st = make_opt_state(net);
  const Rescale r = renormalize_overflow(net, st, 1e4);
  CHECK(r.factors[2] != 1.0);
  CHECK(norm2(net.psi_row(2)) == Catch::Approx(1.0).epsilon(1e-12));
  const double after = forward(net, batch).first;
  CHECK(rel_err(after, before) < 1e-10);
}

TEST_CASE("renormalize_overflow: momentum rescales with the weights") {
  BnMlp net = two_param_net(3e4, 4e4);
  OptState st = make_opt_state(net);
  st.momentum_psi[0] = {10.0, 20.0};
  const Rescale r = renormalize_overflow(net, st, 1e4);
  const double c = r.factors[0];
  CHECK(c == 1.0 / 5e4);
  CHECK(st.momentum_psi[0][0] == 10.0 * c);
  CHECK(st.momentum_psi[0][1] == 20.0 * c);
}

TEST_CASE("forced renormalization maps the rest of the trajectory exactly") {
  // Run PSI-SGDM for k steps, fork the run, renormalize one fork, and keep
  // training both with the same batches. The renormalized iterates must stay
  // the returned rescale times the untouched ones.
  const Batch batch = bn_batch(15, 32);
  BnMlp net = bn_net(16);
  OptState st = make_opt_state(net);
  OptConfig cfg;
  cfg.kind = OptKind::PsiSgdm;
  cfg.lr_w = 0.1;
  cfg.lr_g = 0.05;
  cfg.momentum = 0.9;

  for (int s = 0; s < 20; ++s) {
    auto [loss, cache] = forward(net, batch);
    (void)loss;
    apply_step(net, backward(net, cache), cfg, st);
  }

  BnMlp plain = net;
  OptState plain_st = st;
  const double loss_before = forward(net, batch).first;
  // Tiny threshold forces every group to renormalize.
  const Rescale r = renormalize_overflow(net, st, 1e-6);
  const double loss_after = forward(net, batch).first;
  CHECK(rel_err(loss_after, loss_before) < 1e-10);

  double worst = 0.0;
  for (int s = 0; s < 100; ++s) {
    {
      auto [loss, cache] = forward(net, batch);
      (void)loss;
      apply_step(net, backward(net, cache), cfg, st);
    }
    {
      auto [loss, cache] = forward(plain, batch);
      (void)loss;
      apply_step(plain, backward(plain, cache), cfg, plain_st);
    }
    for (std::size_t i = 0; i < net.psi_group_count(); ++i) {
      const auto renormed = net.psi_row(i);
      const auto base = plain.psi_row(i);
      double denom = 1e-300;
      for (std::size_t j = 0; j < base.size(); ++j)
        denom = std::max(denom, std::abs(r.factors[i] * base[j]));
      for (std::size_t j = 0; j < base.size(); ++j)
        worst = std::max(worst, std::abs(renormed[j] -
                                         r.factors[i] * base[j]) /
                                    denom);
    }
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("opt config validation") {
  OptConfig cfg;
  cfg.lr_w = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.lr_w = 0.1;
  cfg.momentum = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg.momentum = 0.5;
  cfg.renorm_threshold = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
}
