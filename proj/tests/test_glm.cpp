#include "doctest.h"

#include <cmath>

#include "funnel/glm.hpp"
#include "funnel/rng.hpp"
#include "oracles.hpp"

using namespace funnel;
using glm::MeanFunction;

namespace {

glm::LayerData random_layer(int n, int d, RngStream& rng) {
  glm::LayerData ld;
  ld.X.resize(n, d);
  ld.z.resize(n);
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < d; ++k) ld.X(i, k) = rng.normal();
    ld.z(i) = rng.bernoulli(0.5) ? 1.0 : 0.0;
  }
  return ld;
}

}  // namespace

TEST_CASE("mu basics") {
  const auto f = MeanFunction::logistic(5.0);
  CHECK(glm::mu(f, 0.0) == doctest::Approx(0.5));
  CHECK(glm::mu(f, std::log(3.0)) == doctest::Approx(0.75));
  // Saturation, monotone increase toward 1.
  double prev = 0.0;
  for (double t = 0.0; t <= 40.0; t += 1.0) {
    const double m = glm::mu(f, t);
    CHECK(m >= prev);
    prev = m;
  }
  CHECK(prev > 1.0 - 1e-12);
  // Symmetry mu(-t) = 1 - mu(t).
  for (double t : {0.3, 1.7, 9.0, 100.0}) {
    CHECK(glm::mu(f, -t) == doctest::Approx(1.0 - glm::mu(f, t)).epsilon(1e-12));
  }
}

TEST_CASE("mu_bounds") {
  {
    const auto [c_mu, kappa] = glm::mu_bounds(MeanFunction::logistic(0.0));
    CHECK(c_mu == doctest::Approx(0.25));
    CHECK(kappa == doctest::Approx(0.25));
  }
  {
    const auto [c_mu, kappa] = glm::mu_bounds(MeanFunction::logistic(2.0));
    const double e2 = std::exp(2.0);
    CHECK(c_mu == doctest::Approx(e2 / ((1.0 + e2) * (1.0 + e2))));
    CHECK(c_mu == doctest::Approx(0.105).epsilon(1e-2));
    CHECK(kappa == doctest::Approx(0.25));
  }
  CHECK_THROWS(glm::mu_bounds(
      MeanFunction::logistic(std::numeric_limits<double>::infinity())));
}

TEST_CASE("mu_bounds soundness over sampled domain") {
  const auto f = MeanFunction::logistic(3.7);
  const auto [c_mu, kappa] = glm::mu_bounds(f);
  RngStream rng = make_stream(3, stream::kScratch);
  for (int i = 0; i < 10000; ++i) {
    const double t = (2.0 * rng.uniform() - 1.0) * f.domain_bound;
    const double d = glm::mu_prime(f, t);
    CHECK(d >= c_mu - 1e-15);
    CHECK(d <= kappa + 1e-15);
  }
}

TEST_CASE("layer_loss") {
  const auto f = MeanFunction::logistic(5.0);
  glm::LayerData empty;
  empty.X.resize(0, 3);
  empty.z.resize(0);
  CHECK(glm::layer_loss(f, Vec::Zero(3), empty) == 0.0);

  // Single sample at x = 0: prediction is mu(0) = 0.5 whatever theta is.
  glm::LayerData one;
  one.X = Mat::Zero(1, 2);
  one.z = Vec::Ones(1);
  CHECK(glm::layer_loss(f, Vec::Random(2), one) == doctest::Approx(0.25));

  // Hand-summed three-sample instance.
  glm::LayerData three;
  three.X.resize(3, 2);
  three.X << 1.0, 0.0, 0.5, -1.0, -2.0, 0.25;
  three.z.resize(3);
  three.z << 1.0, 0.0, 1.0;
  Vec theta(2);
  theta << 0.3, -0.7;
  double expect = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double m = oracle::sigmoid(three.X.row(i).dot(theta));
    expect += (three.z(i) - m) * (three.z(i) - m);
  }
  CHECK(glm::layer_loss(f, theta, three) == doctest::Approx(expect).epsilon(1e-14));

  // Permutation invariance.
  glm::LayerData perm = three;
  perm.X.row(0).swap(perm.X.row(2));
  std::swap(perm.z(0), perm.z(2));
  CHECK(glm::layer_loss(f, theta, perm) ==
        doctest::Approx(glm::layer_loss(f, theta, three)).epsilon(1e-14));
}

TEST_CASE("gradient matches central differences") {
  const auto f = MeanFunction::logistic(8.0);
  RngStream rng = make_stream(11, stream::kScratch);
  for (int rep = 0; rep < 100; ++rep) {
    const int d = 1 + static_cast<int>(rng.uniform_int(5));
    const int n = 1 + static_cast<int>(rng.uniform_int(20));
    const auto ld = random_layer(n, d, rng);
    Vec theta(d);
    for (int k = 0; k < d; ++k) theta(k) = rng.normal() * 0.5;

    const Vec g = glm::layer_loss_gradient(f, theta, ld);
    const Vec fd = oracle::fd_gradient(
        [&](const Vec& th) { return glm::layer_loss(f, th, ld); }, theta);
    const double rel = (g - fd).norm() / std::max(1e-12, fd.norm());
    CHECK(rel < 1e-6);
  }

  glm::LayerData empty;
  empty.X.resize(0, 4);
  empty.z.resize(0);
  CHECK(glm::layer_loss_gradient(f, Vec::Ones(4), empty).norm() == 0.0);
}

TEST_CASE("fit_unconstrained") {
  const auto f = MeanFunction::logistic(10.0);

  SUBCASE("empty layer returns init") {
    glm::LayerData empty;
    empty.X.resize(0, 2);
    empty.z.resize(0);
    Vec init(2);
    init << 0.4, -0.2;
    const auto res = glm::fit_unconstrained(f, empty, init);
    CHECK((res.theta - init).norm() == 0.0);
  }

  SUBCASE("recovers the generating parameters") {
    RngStream rng = make_stream(21, stream::kScratch);
    Vec truth(2);
    truth << 0.8, -0.5;
    const int n = 500;
    glm::LayerData ld;
    ld.X.resize(n, 2);
    ld.z.resize(n);
    for (int i = 0; i < n; ++i) {
      ld.X(i, 0) = rng.normal();
      ld.X(i, 1) = rng.normal();
      // Noiseless link: continuous labels equal to the true mean.
      ld.z(i) = oracle::sigmoid(ld.X.row(i).dot(truth));
    }
    const auto res = glm::fit_unconstrained(f, ld, Vec::Zero(2));
    CHECK((res.theta - truth).norm() < 0.05);
  }

  SUBCASE("stationary at the minimizer") {
    glm::LayerData one;
    one.X.resize(1, 2);
    one.X << 1.0, 2.0;
    one.z.resize(1);
    one.z << 0.731058578630005;  // mu(1) with theta = (1, 0)
    Vec start(2);
    start << 0.9, 0.05;
    const auto res = glm::fit_unconstrained(f, one, start);
    CHECK(glm::layer_loss_gradient(f, res.theta, one).norm() < 1e-7);
  }

  SUBCASE("separable labels cap at the boundary") {
    glm::LayerData ld;
    ld.X.resize(4, 1);
    ld.X << 1.0, 2.0, 0.5, 1.5;
    ld.z = Vec::Ones(4);
    glm::OptimizerOpts opts;
    opts.norm_cap = 3.0;
    opts.max_iters = 20000;
    const auto res = glm::fit_unconstrained(f, ld, Vec::Zero(1), opts);
    CHECK(res.theta.norm() == doctest::Approx(3.0).epsilon(1e-6));
    CHECK(res.status == glm::FitStatus::BoundaryCapped);
  }

  SUBCASE("deterministic") {
    RngStream rng = make_stream(22, stream::kScratch);
    const auto ld = random_layer(40, 3, rng);
    const auto a = glm::fit_unconstrained(f, ld, Vec::Zero(3));
    const auto b = glm::fit_unconstrained(f, ld, Vec::Zero(3));
    CHECK((a.theta - b.theta).norm() == 0.0);
  }
}

TEST_CASE("fit_penalized") {
  const auto f = MeanFunction::logistic(10.0);
  RngStream rng = make_stream(31, stream::kScratch);
  const auto ld = random_layer(40, 2, rng);

  SUBCASE("lambda 0 reduces to the unconstrained fit") {
    const auto pen =
        glm::fit_penalized(f, ld, Vec::Ones(2), 0.0, Vec::Zero(2));
    const auto fit = glm::fit_unconstrained(f, ld, Vec::Zero(2));
    CHECK((pen.theta - fit.theta).norm() < 1e-6);
  }

  SUBCASE("huge lambda collapses to the anchor") {
    Vec anchor(2);
    anchor << 0.3, -0.4;
    const auto pen =
        glm::fit_penalized(f, ld, anchor, 1e6, Vec::Zero(2));
    CHECK((pen.theta - anchor).norm() < 1e-6);
  }

  SUBCASE("matches a dense grid search") {
    Vec anchor(2);
    anchor << 0.25, -0.1;
    const double lambda = 0.01;
    const auto pen = glm::fit_penalized(f, ld, anchor, lambda, Vec::Zero(2));
    // Grid over [-2,2]^2 at 5e-3 pitch.
    double best_v = std::numeric_limits<double>::infinity();
    Vec best(2);
    for (double a = -2.0; a <= 2.0; a += 5e-3) {
      for (double b = -2.0; b <= 2.0; b += 5e-3) {
        Vec th(2);
        th << a, b;
        const double v =
            glm::layer_loss(f, th, ld) + lambda * (th - anchor).norm();
        if (v < best_v) {
          best_v = v;
          best = th;
        }
      }
    }
    CHECK((pen.theta - best).norm() < 1e-2);
  }
}

TEST_CASE("predict_funnel") {
  const auto f = MeanFunction::logistic(6.0);
  RngStream rng = make_stream(41, stream::kScratch);

  glm::ThetaStack zeros(3, 4);
  Vec x(3);
  x << 0.2, -0.7, 0.4;
  for (int j = 1; j <= 4; ++j) {
    CHECK(glm::predict_funnel(f, zeros, x, j) ==
          doctest::Approx(std::pow(0.5, j)).epsilon(1e-14));
  }

  glm::ThetaStack stack(3, 3);
  for (int j = 1; j <= 3; ++j) {
    Vec th(3);
    for (int k = 0; k < 3; ++k) th(k) = rng.normal();
    stack.set_layer(j, th);
  }
  CHECK(glm::predict_funnel(f, stack, x, 1) ==
        doctest::Approx(oracle::sigmoid(x.dot(stack.layer(1)))).epsilon(1e-14));
  CHECK(glm::predict_funnel(f, stack, x, 3) ==
        doctest::Approx(oracle::product_value(stack.matrix(), x, 3))
            .epsilon(1e-14));

  // Product monotonicity in depth.
  for (int rep = 0; rep < 200; ++rep) {
    glm::ThetaStack s(2, 4);
    for (int j = 1; j <= 4; ++j) {
      Vec th(2);
      th << rng.normal(), rng.normal();
      s.set_layer(j, th);
    }
    Vec xx(2);
    xx << rng.normal(), rng.normal();
    double prev = 1.0;
    for (int j = 1; j <= 4; ++j) {
      const double p = glm::predict_funnel(f, s, xx, j);
      CHECK(p <= prev + 1e-15);
      prev = p;
    }
  }
}

TEST_CASE("layered dataset split follows the funnel rule") {
  Mat X(4, 2);
  X << 1, 0, 0, 1, 1, 1, -1, 0.5;
  Eigen::MatrixXi R(4, 3);
  R << 1, 1, 0,  // layers 1,2,3 observed; z = (1,1,0)
      0, 0, 0,   // only layer 1 observed; z1 = 0
      1, 0, 0,   // layers 1,2 observed
      1, 1, 1;   // all observed
  const auto ds = glm::LayeredDataset::from_observations(X, R);
  REQUIRE(ds.J() == 3);
  CHECK(ds.layer(1).count() == 4);
  CHECK(ds.layer(2).count() == 3);
  CHECK(ds.layer(3).count() == 2);
  CHECK(ds.layer(2).z.sum() == doctest::Approx(2.0));  // rows 0 and 3
  CHECK(ds.layer(3).z.sum() == doctest::Approx(1.0));  // row 3 only
  // Monotone counts.
  for (int j = 2; j <= 3; ++j) {
    CHECK(ds.layer(j).count() <= ds.layer(j - 1).count());
  }
}
