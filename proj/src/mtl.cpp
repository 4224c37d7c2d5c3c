#include "funnel/mtl.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>

namespace funnel::mtl {

namespace {

constexpr double kDykstraTol = 1e-8;
constexpr int kDykstraMaxSweeps = 10000;
constexpr double kSingularEig = 1e-12;

void check_q(const Vec& q) {
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    if (!(q(i) > 0.0)) {
      throw std::invalid_argument("ConstraintSet: q entries must be positive");
    }
  }
}

Vec clamp_to(const Ball& b, const Vec& v) {
  Vec d = v - b.center;
  const double n = d.norm();
  if (n <= b.radius) return v;
  return b.center + d * (b.radius / n);
}

}  // namespace

ConstraintSet ConstraintSet::sequential(const Vec& q, double norm_cap) {
  check_q(q);
  ConstraintSet c;
  c.kind = Kind::SequentialChain;
  c.q = q;
  c.norm_cap = norm_cap > 0.0 ? norm_cap : 10.0 * q.sum();
  return c;
}

ConstraintSet ConstraintSet::clustered(const Vec& q, double norm_cap) {
  check_q(q);
  ConstraintSet c;
  c.kind = Kind::ClusteredCenter;
  c.q = q;
  c.norm_cap = norm_cap > 0.0 ? norm_cap : 10.0 * q.sum();
  return c;
}

ConstraintSet ConstraintSet::make_ball(const Vec& center, double radius) {
  ConstraintSet c;
  c.kind = Kind::Ball;
  c.ball = {center, radius};
  c.norm_cap = radius;
  return c;
}

ConstraintSet ConstraintSet::intersection(std::vector<struct Ball> balls) {
  ConstraintSet c;
  c.kind = Kind::Intersection;
  c.balls = std::move(balls);
  return c;
}

ConstraintSet marginal_set(const ConstraintSet& c, int j) {
  switch (c.kind) {
    case ConstraintSet::Kind::SequentialChain: {
      if (j < 1 || j > c.layer_count())
        throw std::out_of_range("marginal_set: layer out of range");
      // Triangle inequality along the chain: ||theta_j|| <= q_1 + ... + q_j.
      const double r = c.q.head(j).sum();
      return ConstraintSet::make_ball(Vec::Zero(0), r);
    }
    case ConstraintSet::Kind::ClusteredCenter: {
      if (j < 1 || j > c.layer_count())
        throw std::out_of_range("marginal_set: layer out of range");
      // The unknown center makes every marginal unbounded; sentinel cap.
      return ConstraintSet::make_ball(Vec::Zero(0), c.norm_cap);
    }
    case ConstraintSet::Kind::Ball:
      return c;
    case ConstraintSet::Kind::Intersection:
      throw std::invalid_argument("marginal_set: undefined for intersections");
  }
  throw std::logic_error("marginal_set: unhandled kind");
}

namespace {

Ball materialize(const Ball& b, Eigen::Index dim) {
  // Zero-dimension centers stand for the origin of whatever space the
  // query lives in.
  if (b.center.size() == dim) return b;
  if (b.center.size() == 0) return {Vec::Zero(dim), b.radius};
  throw std::invalid_argument("project: ball dimension mismatch");
}

Vec dykstra(const std::vector<Ball>& balls_in, const Vec& theta) {
  std::vector<Ball> balls;
  balls.reserve(balls_in.size());
  for (const auto& b : balls_in) balls.push_back(materialize(b, theta.size()));

  // Pairwise emptiness certificate.
  for (std::size_t i = 0; i < balls.size(); ++i) {
    for (std::size_t k = i + 1; k < balls.size(); ++k) {
      const double gap = (balls[i].center - balls[k].center).norm() -
                         (balls[i].radius + balls[k].radius);
      if (gap > 0.0) {
        throw EmptyIntersectionError(
            "project: two balls are disjoint (center gap exceeds radii sum)");
      }
    }
  }

  const std::size_t K = balls.size();
  Vec x = theta;
  std::vector<Vec> corr(K, Vec::Zero(theta.size()));
  for (int sweep = 0; sweep < kDykstraMaxSweeps; ++sweep) {
    Vec x_prev = x;
    for (std::size_t i = 0; i < K; ++i) {
      Vec y = x + corr[i];
      Vec p = clamp_to(balls[i], y);
      corr[i] = y - p;
      x = p;
    }
    if ((x - x_prev).norm() <= kDykstraTol) {
      // Feasibility check distinguishes convergence from a stalled cycle.
      for (const auto& b : balls) {
        if (!b.contains(x, 1e-6)) {
          throw EmptyIntersectionError(
              "project: Dykstra stalled outside the intersection");
        }
      }
      return x;
    }
  }
  throw EmptyIntersectionError(
      "project: Dykstra failed to converge; intersection treated as empty");
}

}  // namespace

Vec project(const ConstraintSet& c, const Vec& theta) {
  switch (c.kind) {
    case ConstraintSet::Kind::Ball:
      return clamp_to(materialize(c.ball, theta.size()), theta);
    case ConstraintSet::Kind::Intersection:
      if (c.balls.empty()) return theta;
      if (c.balls.size() == 1)
        return clamp_to(materialize(c.balls[0], theta.size()), theta);
      return dykstra(c.balls, theta);
    default:
      throw std::invalid_argument(
          "project: only Ball and Intersection targets are projectable");
  }
}

double c_delta(double delta, double d_x, double scale) {
  if (!(delta > 0.0 && delta < 1.0)) {
    throw std::invalid_argument("c_delta: delta must be in (0,1)");
  }
  return scale * 80.0 * d_x * std::sqrt(2.0 * std::log(8.0 / delta));
}

double BoundInputs::c_delta_at(double delta_eff) const {
  if (c_delta_override > 0.0) return c_delta_override;
  return c_delta(delta_eff, d_x, c_delta_scale);
}

ConfidenceEllipsoid confidence_ellipsoid(const glm::LayerData& data,
                                         const Vec& theta_bar,
                                         const BoundInputs& b, int j) {
  (void)j;
  ConfidenceEllipsoid e;
  e.center = theta_bar;
  e.n = data.count();
  const Eigen::Index d = theta_bar.size();
  if (e.n == 0) {
    e.M = Mat::Zero(d, d);
    e.radius = std::numeric_limits<double>::infinity();
    return e;
  }
  e.M = (data.X.transpose() * data.X) / static_cast<double>(e.n);
  e.radius = b.c_delta_at(b.delta / std::max(1, b.J)) / b.c_mu *
             std::sqrt(b.d / static_cast<double>(e.n));
  return e;
}

Ball ball_relax(const ConfidenceEllipsoid& e, double fallback_radius) {
  if (!e.informative()) return {e.center, fallback_radius};
  Eigen::SelfAdjointEigenSolver<Mat> es(e.M);
  const double lam = es.eigenvalues().minCoeff();
  if (lam <= kSingularEig) return {e.center, fallback_radius};
  // ||v||_2 <= ||v||_M / sqrt(lam) always; the 1/lam form matches the
  // bound evaluators whenever lam <= 1. Take whichever encloses.
  const double factor = std::max(1.0 / lam, 1.0 / std::sqrt(lam));
  const double r = e.radius * factor;
  return {e.center, std::min(r, fallback_radius)};
}

namespace {

double min_eig(const Mat& M) {
  if (M.size() == 0) return 0.0;
  Eigen::SelfAdjointEigenSolver<Mat> es(M);
  return es.eigenvalues().minCoeff();
}

}  // namespace

MtlEstimate mtl_estimate(const glm::LayeredDataset& data,
                         const ConstraintSet& theta0,
                         const glm::MeanFunction& f, double delta,
                         const MtlOptions& opts) {
  if (theta0.kind != ConstraintSet::Kind::SequentialChain &&
      theta0.kind != ConstraintSet::Kind::ClusteredCenter) {
    throw std::invalid_argument(
        "mtl_estimate: prior must be SequentialChain or ClusteredCenter");
  }
  const int J = data.J();
  if (J < 1 || theta0.layer_count() != J) {
    throw std::invalid_argument("mtl_estimate: layer count mismatch");
  }
  const Eigen::Index d = data.layer(1).X.cols();
  const double norm_cap =
      opts.norm_cap > 0.0 ? opts.norm_cap : theta0.norm_cap;
  const auto [c_mu, kappa] = glm::mu_bounds(f);

  BoundInputs b;
  b.q = theta0.q;
  b.d = static_cast<double>(d);
  b.d_x = opts.d_x;
  b.c_mu = c_mu;
  b.kappa = kappa;
  b.delta = delta;
  b.J = J;
  b.c_delta_scale = opts.c_delta_scale;
  b.c_delta_override = opts.c_delta_override;

  glm::OptimizerOpts fit_opts = opts.fit;
  fit_opts.norm_cap = std::min(fit_opts.norm_cap, norm_cap);

  MtlEstimate out;
  out.theta_bar = glm::ThetaStack(d, J);
  out.theta_hat = glm::ThetaStack(d, J);
  out.ellipsoids.resize(J);
  out.sets.resize(J);
  out.diag.resize(J);

  // Stage 1: fit within the marginal prior set, then build the confidence
  // ellipsoid around the constrained minimizer.
  std::vector<Ball> own(J);
  for (int j = 1; j <= J; ++j) {
    const glm::LayerData& ld = data.layer(j);
    const ConstraintSet mj = marginal_set(theta0, j);
    Vec bar = glm::fit_constrained(
                  f, ld, Vec::Zero(d), fit_opts,
                  [&](const Vec& v) { return project(mj, v); })
                  .theta;
    out.theta_bar.set_layer(j, bar);
    out.ellipsoids[j - 1] = confidence_ellipsoid(ld, bar, b, j);
    own[j - 1] = ball_relax(out.ellipsoids[j - 1], norm_cap);

    auto& dg = out.diag[j - 1];
    dg.n = ld.count();
    dg.lambda_min = min_eig(out.ellipsoids[j - 1].M);
    dg.own_radius = own[j - 1].radius;
    dg.marginal_radius = mj.ball.radius;
    dg.own_informative = out.ellipsoids[j - 1].informative() &&
                         dg.lambda_min > kSingularEig;
  }

  // Stage 2: refine each layer's set with balls propagated from anchors,
  // then re-project the unconstrained fit.
  const bool sequential =
      theta0.kind == ConstraintSet::Kind::SequentialChain;
  for (int j = 1; j <= J; ++j) {
    std::vector<Ball> balls;
    const ConstraintSet mj = marginal_set(theta0, j);
    balls.push_back({Vec::Zero(d), mj.ball.radius});
    balls.push_back(own[j - 1]);

    if (sequential) {
      double slack = 0.0;
      for (int j0 = j - 1; j0 >= 1; --j0) {
        slack += theta0.q(j0);  // q_{j0+1}, 1-based
        if (!out.diag[j0 - 1].own_informative) continue;
        balls.push_back({out.theta_bar.layer(j0),
                         own[j0 - 1].radius + slack});
      }
    } else {
      int best = -1;
      double best_r = std::numeric_limits<double>::infinity();
      for (int i = 1; i <= J; ++i) {
        if (i == j || !out.diag[i - 1].own_informative) continue;
        const double r = own[i - 1].radius + theta0.q(i - 1);
        if (r < best_r) {
          best_r = r;
          best = i;
        }
      }
      if (best > 0) {
        balls.push_back({out.theta_bar.layer(best),
                         best_r + theta0.q(j - 1)});
      }
    }

    auto& dg = out.diag[j - 1];
    dg.set_radius = std::numeric_limits<double>::infinity();
    for (const auto& bl : balls) dg.set_radius = std::min(dg.set_radius, bl.radius);
    out.sets[j - 1] = balls;

    try {
      const ConstraintSet refined = ConstraintSet::intersection(balls);
      out.theta_hat.set_layer(
          j, glm::fit_constrained(
                 f, data.layer(j), out.theta_bar.layer(j), fit_opts,
                 [&](const Vec& v) { return project(refined, v); })
                 .theta);
    } catch (const EmptyIntersectionError&) {
      out.theta_hat.set_layer(j, out.theta_bar.layer(j));
      dg.fallback = true;
    }
  }
  return out;
}

double sequential_bound(const BoundInputs& b, double x_norm, int j, int j0) {
  if (j < 1 || j > b.J) throw std::out_of_range("sequential_bound: bad j");
  if (j0 < 1 || j0 > b.J + 1) throw std::out_of_range("sequential_bound: bad j0");
  const double C =
      b.c_delta_at(b.delta / b.J) / (b.c_mu * b.lambda) * std::sqrt(b.d);
  if (j < j0) {
    return b.kappa * x_norm * C / std::sqrt(b.n(j - 1));
  }
  double slack = 0.0;
  for (int i = j0 + 1; i <= j; ++i) slack += b.q(i - 1);
  return b.kappa * x_norm * (C / std::sqrt(b.n(j0 - 1)) + slack);
}

ThresholdResult threshold_j0(const BoundInputs& b) {
  ThresholdResult res;
  res.preconditions_ok = true;
  for (int j = 1; j < b.J; ++j) {
    if (b.n(j) > b.n(j - 1) / 4.0 + 1e-12) res.preconditions_ok = false;
    if (b.q(j) > b.q(j - 1) + 1e-12) res.preconditions_ok = false;
  }
  // The condition at layer j compares the parametric-width gap between
  // layers j and j-1 against the chain slack q_j; when it holds, moving the
  // anchor from j to j-1 can only tighten the bound. The minimizing anchor
  // is therefore one layer above the first layer where the condition turns
  // true (monotone under the preconditions), clamped to layer 1.
  const double C =
      b.c_delta_at(b.delta / b.J) / (b.c_mu * b.lambda) * std::sqrt(b.d);
  for (int j = 1; j <= b.J; ++j) {
    const double prev = (j == 1) ? 0.0 : 1.0 / std::sqrt(b.n(j - 2));
    const double lhs = C * (1.0 / std::sqrt(b.n(j - 1)) - prev);
    if (lhs >= b.q(j - 1)) {
      res.j0 = std::max(1, j - 1);
      return res;
    }
  }
  res.j0 = b.J + 1;
  return res;
}

double clustered_bound(const BoundInputs& b, double x_norm, int j) {
  if (j < 1 || j > b.J) throw std::out_of_range("clustered_bound: bad j");
  const double C =
      b.c_delta_at(b.delta / b.J) / (b.c_mu * b.lambda) * std::sqrt(b.d);
  int j0 = 1;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 1; i <= b.J; ++i) {
    const double v = C / std::sqrt(b.n(i - 1)) + b.q(i - 1);
    if (v < best) {
      best = v;
      j0 = i;
    }
  }
  const double anchor =
      C / std::sqrt(b.n(j0 - 1)) + b.q(j0 - 1) + b.q(j - 1);
  const double parametric = C / std::sqrt(b.n(j - 1));
  return b.kappa * x_norm * std::min(anchor, parametric);
}

}  // namespace funnel::mtl
