#include "funnel/glm.hpp"

#include <cmath>
#include <limits>

namespace funnel::glm {

namespace {

double logistic(double t) {
  // Split by sign so exp never overflows.
  if (t >= 0.0) {
    return 1.0 / (1.0 + std::exp(-t));
  }
  const double e = std::exp(t);
  return e / (1.0 + e);
}

double logistic_prime(double t) {
  const double m = logistic(t);
  return m * (1.0 - m);
}

Vec clamp_to_ball(const Vec& v, double radius) {
  const double n = v.norm();
  if (n <= radius) return v;
  return v * (radius / n);
}

}  // namespace

MeanFunction MeanFunction::logistic(double domain_bound) {
  MeanFunction f;
  f.kind = Kind::Logistic;
  f.domain_bound = domain_bound;
  return f;
}

MeanFunction MeanFunction::logistic_for(double context_norm_bound,
                                        double theta_norm_bound) {
  return logistic(context_norm_bound * theta_norm_bound);
}

double mu(const MeanFunction& f, double t) {
  (void)f;  // single kind today
  return logistic(t);
}

double mu_prime(const MeanFunction& f, double t) {
  (void)f;
  return logistic_prime(t);
}

std::pair<double, double> mu_bounds(const MeanFunction& f) {
  if (!std::isfinite(f.domain_bound) || f.domain_bound < 0.0) {
    throw std::invalid_argument(
        "mu_bounds: domain_bound must be finite and non-negative; the "
        "derivative floor c_mu vanishes otherwise");
  }
  // Logistic derivative is even and decreasing in |t|: the floor sits at the
  // domain edge, the cap at 0.
  const double c_mu = logistic_prime(f.domain_bound);
  const double kappa = 0.25;
  return {c_mu, kappa};
}

LayeredDataset LayeredDataset::from_observations(
    const Mat& contexts, const Eigen::MatrixXi& rewards) {
  if (contexts.rows() != rewards.rows()) {
    throw std::invalid_argument("from_observations: row count mismatch");
  }
  const int J = static_cast<int>(rewards.cols());
  const Eigen::Index d = contexts.cols();
  LayeredDataset out;
  out.layers.resize(J);

  for (int j = 1; j <= J; ++j) {
    std::vector<Eigen::Index> rows;
    for (Eigen::Index i = 0; i < rewards.rows(); ++i) {
      const int prev = (j == 1) ? 1 : rewards(i, j - 2);
      if (prev == 1) rows.push_back(i);
    }
    LayerData& ld = out.layers[j - 1];
    ld.X.resize(static_cast<Eigen::Index>(rows.size()), d);
    ld.z.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      ld.X.row(static_cast<Eigen::Index>(k)) = contexts.row(rows[k]);
      ld.z(static_cast<Eigen::Index>(k)) = rewards(rows[k], j - 1);
    }
  }
  return out;
}

double layer_loss(const MeanFunction& f, const Vec& theta,
                  const LayerData& data) {
  if (data.count() == 0) return 0.0;
  Vec t = data.X * theta;
  double loss = 0.0;
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    const double r = data.z(i) - mu(f, t(i));
    loss += r * r;
  }
  return loss;
}

Vec layer_loss_gradient(const MeanFunction& f, const Vec& theta,
                        const LayerData& data) {
  if (data.count() == 0) return Vec::Zero(theta.size());
  Vec t = data.X * theta;
  Vec w(t.size());
  for (Eigen::Index i = 0; i < t.size(); ++i) {
    const double m = mu(f, t(i));
    w(i) = -2.0 * (data.z(i) - m) * mu_prime(f, t(i));
  }
  return data.X.transpose() * w;
}

namespace {

// Shared projected/proximal gradient loop. prox maps the raw gradient step
// to the admissible iterate (ball clamp, or penalty prox then ball clamp).
template <typename Prox>
FitResult descend(const MeanFunction& f, const LayerData& data,
                  const Vec& init, const OptimizerOpts& opts, Prox prox,
                  double extra_cost_at(const Vec&, const void*),
                  const void* ctx) {
  FitResult res;
  res.theta = clamp_to_ball(init, opts.norm_cap);
  if (data.count() == 0) {
    res.theta = init;
    res.status = FitStatus::Converged;
    return res;
  }

  auto total = [&](const Vec& th) {
    return layer_loss(f, th, data) + extra_cost_at(th, ctx);
  };

  Vec theta = res.theta;
  double fval = layer_loss(f, theta, data);
  double best_total = fval + extra_cost_at(theta, ctx);
  Vec best = theta;
  double step = 1.0;

  if (!std::isfinite(fval)) {
    res.theta = theta;
    res.status = FitStatus::NonFiniteAborted;
    return res;
  }

  int it = 0;
  for (; it < opts.max_iters; ++it) {
    Vec g = layer_loss_gradient(f, theta, data);
    res.grad_norm = g.norm();
    if (!g.allFinite()) {
      res.status = FitStatus::NonFiniteAborted;
      break;
    }
    if (res.grad_norm <= opts.grad_tol) {
      res.status = FitStatus::Converged;
      break;
    }

    // Backtracking on the smooth part (sufficient-decrease condition for
    // the proximal step).
    Vec cand;
    double cand_f = 0.0;
    bool accepted = false;
    for (int bt = 0; bt < 60; ++bt) {
      cand = prox(theta - step * g, step);
      Vec diff = cand - theta;
      cand_f = layer_loss(f, cand, data);
      if (std::isfinite(cand_f) &&
          cand_f <= fval + g.dot(diff) + diff.squaredNorm() / (2.0 * step)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      // Step underflowed; the iterate is as good as this scheme gets.
      res.status = FitStatus::Converged;
      break;
    }

    const double displacement = (cand - theta).norm();
    theta = cand;
    fval = cand_f;
    const double cand_total = cand_f + extra_cost_at(cand, ctx);
    if (cand_total < best_total) {
      best_total = cand_total;
      best = theta;
    }
    // Mild step recovery keeps progress fast once curvature relaxes.
    step = std::min(step * 2.0, 1e6);

    if (displacement <= opts.grad_tol * std::max(1.0, theta.norm())) {
      if (theta.norm() >= opts.norm_cap * (1.0 - 1e-9) &&
          res.grad_norm > opts.grad_tol) {
        res.status = FitStatus::BoundaryCapped;
      } else {
        res.status = FitStatus::Converged;
      }
      break;
    }
  }
  if (it == opts.max_iters) res.status = FitStatus::IterCap;

  res.theta = (total(theta) <= best_total) ? theta : best;
  res.loss = layer_loss(f, res.theta, data);
  res.grad_norm = layer_loss_gradient(f, res.theta, data).norm();
  res.iters = it;
  return res;
}

double zero_cost(const Vec&, const void*) { return 0.0; }

struct PenaltyCtx {
  const Vec* anchor;
  double lambda;
};

double penalty_cost(const Vec& th, const void* p) {
  const auto* c = static_cast<const PenaltyCtx*>(p);
  return c->lambda * (th - *c->anchor).norm();
}

}  // namespace

FitResult fit_unconstrained(const MeanFunction& f, const LayerData& data,
                            const Vec& init, const OptimizerOpts& opts) {
  auto prox = [&](const Vec& v, double) { return clamp_to_ball(v, opts.norm_cap); };
  return descend(f, data, init, opts, prox, zero_cost, nullptr);
}

FitResult fit_penalized(const MeanFunction& f, const LayerData& data,
                        const Vec& anchor, double lambda_pen, const Vec& init,
                        const OptimizerOpts& opts) {
  if (lambda_pen <= 0.0) return fit_unconstrained(f, data, init, opts);
  if (data.count() == 0) {
    // No loss term: the penalty alone is minimized at the anchor.
    FitResult res;
    res.theta = anchor;
    res.status = FitStatus::Converged;
    return res;
  }
  PenaltyCtx ctx{&anchor, lambda_pen};
  auto prox = [&](const Vec& v, double step) {
    // prox of step * lambda * ||. - anchor||: shrink toward the anchor.
    Vec d = v - anchor;
    const double n = d.norm();
    const double t = step * lambda_pen;
    Vec out = (n <= t) ? anchor : Vec(anchor + (1.0 - t / n) * d);
    return clamp_to_ball(out, opts.norm_cap);
  };
  return descend(f, data, init, opts, prox, penalty_cost, &ctx);
}

FitResult fit_constrained(const MeanFunction& f, const LayerData& data,
                          const Vec& init, const OptimizerOpts& opts,
                          const std::function<Vec(const Vec&)>& project) {
  if (data.count() == 0) {
    FitResult res;
    res.theta = project(init);
    res.status = FitStatus::Converged;
    return res;
  }
  auto prox = [&](const Vec& v, double) { return project(v); };
  OptimizerOpts o = opts;
  o.norm_cap = std::numeric_limits<double>::infinity();  // the set bounds it
  FitResult res = descend(f, data, project(init), o, prox, zero_cost, nullptr);
  res.theta = project(res.theta);
  return res;
}

double predict_funnel(const MeanFunction& f, const ThetaStack& stack,
                      const Vec& x, int j) {
  if (j < 1 || j > stack.layers()) {
    throw std::out_of_range("predict_funnel: layer index out of range");
  }
  double p = 1.0;
  for (int i = 1; i <= j; ++i) {
    p *= mu(f, x.dot(stack.layer(i)));
  }
  return p;
}

}  // namespace funnel::glm
