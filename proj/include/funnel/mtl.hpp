#pragma once

#include <limits>
#include <stdexcept>
#include <vector>

#include "funnel/glm.hpp"
#include "funnel/types.hpp"

namespace funnel::mtl {

struct Ball {
  Vec center;
  double radius = 0.0;

  bool contains(const Vec& x, double tol = 0.0) const {
    return (x - center).norm() <= radius + tol;
  }
};

/// Hypothesis class over the joint parameter stack. SequentialChain bounds
/// adjacent-layer differences by q_j (and ||theta_1|| by q_1);
/// ClusteredCenter bounds every layer's distance to an unknown common
/// center by q_j. Ball/Intersection are the post-relaxation working forms.
struct ConstraintSet {
  enum class Kind { SequentialChain, ClusteredCenter, Ball, Intersection };

  Kind kind = Kind::Ball;
  Vec q;                    // chain / clustered slack vector
  struct Ball ball;         // Kind::Ball
  std::vector<struct Ball> balls;  // Kind::Intersection
  /// Safety radius used wherever the class leaves a direction unbounded.
  double norm_cap = 0.0;

  static ConstraintSet sequential(const Vec& q, double norm_cap = 0.0);
  static ConstraintSet clustered(const Vec& q, double norm_cap = 0.0);
  static ConstraintSet make_ball(const Vec& center, double radius);
  static ConstraintSet intersection(std::vector<struct Ball> balls);

  int layer_count() const { return static_cast<int>(q.size()); }
};

/// Raised when a projection target is provably or numerically empty.
struct EmptyIntersectionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Marginal set of layer j: the set of values theta_j can take when the
/// joint stack ranges over the class. Chains collapse to centered balls via
/// the triangle inequality; the clustered class is unbounded per layer and
/// returns the norm-cap sentinel ball.
ConstraintSet marginal_set(const ConstraintSet& c, int j);

/// Euclidean projection onto a Ball (radial clamp) or an Intersection of
/// balls (Dykstra, displacement tolerance 1e-8, max 1e4 sweeps). Throws
/// EmptyIntersectionError when the intersection is empty.
Vec project(const ConstraintSet& c, const Vec& theta);

/// {theta : ||theta - center||_M <= radius} with M = (1/n) sum x x^T.
struct ConfidenceEllipsoid {
  Vec center;
  Mat M;
  double radius = std::numeric_limits<double>::infinity();
  Eigen::Index n = 0;

  bool informative() const { return n > 0 && std::isfinite(radius); }
};

/// Closed-form inputs for the prediction-error bound evaluators.
struct BoundInputs {
  Vec q;          // per-layer slack
  Vec n;          // per-layer observation counts (layer 0 is implicit, inf)
  double d = 0;   // parameter dimension
  double d_x = 1.0;
  double c_mu = 0.25;
  double kappa = 0.25;
  double lambda = 1.0;  // floor on the design matrix's min eigenvalue
  double delta = 0.05;
  int J = 0;

  /// Multiplier knob on the theoretical constant (80 d_x sqrt(2 ln(8/.))).
  double c_delta_scale = 1.0;
  /// When positive, replaces the c_delta formula outright (used by the
  /// normalized bound-curve sweep).
  double c_delta_override = 0.0;

  double c_delta_at(double delta_eff) const;
};

/// c_delta = scale * 80 * d_x * sqrt(2 ln(8/delta)).
double c_delta(double delta, double d_x, double scale = 1.0);

/// Ellipsoid for one layer: center theta_bar, M = (1/n) sum x x^T, radius
/// c_{delta/J}/c_mu * sqrt(d/n). n = 0 yields the uninformative sentinel.
ConfidenceEllipsoid confidence_ellipsoid(const glm::LayerData& data,
                                         const Vec& theta_bar,
                                         const BoundInputs& b, int j);

/// Enclose the ellipsoid in a Euclidean ball via the design matrix's
/// minimum eigenvalue. Degenerate matrices (or sentinel radii) fall back to
/// Ball(center, fallback_radius).
Ball ball_relax(const ConfidenceEllipsoid& e, double fallback_radius);

struct LayerDiagnostics {
  Eigen::Index n = 0;
  double lambda_min = 0.0;
  double own_radius = 0.0;       // relaxed own-ellipsoid ball radius
  double marginal_radius = 0.0;  // marginal prior ball radius
  double set_radius = 0.0;       // min ball radius in the layer's final set
  bool own_informative = false;
  bool fallback = false;  // empty intersection; reverted to theta_bar
};

struct MtlEstimate {
  glm::ThetaStack theta_bar;  // stage 1: per-layer fits projected onto the marginal prior
  glm::ThetaStack theta_hat;  // stage 2: re-projected onto the refined sets
  std::vector<ConfidenceEllipsoid> ellipsoids;
  /// Refined per-layer sets (intersections of balls), 1-based by index+1.
  std::vector<std::vector<Ball>> sets;
  std::vector<LayerDiagnostics> diag;

  bool any_fallback() const {
    for (const auto& d : diag)
      if (d.fallback) return true;
    return false;
  }
};

struct MtlOptions {
  double delta = 0.05;
  double c_delta_scale = 1.0;
  double c_delta_override = 0.0;
  /// 0 = derive as 10 * sum(q).
  double norm_cap = 0.0;
  double d_x = 1.0;
  glm::OptimizerOpts fit;
};

/// Two-stage multi-task estimator: per-layer projected fits with
/// confidence ellipsoids, then re-projection onto each layer's refined set
/// (own relaxed ellipsoid intersected with the prior and with anchor balls
/// propagated from other layers).
MtlEstimate mtl_estimate(const glm::LayeredDataset& data,
                         const ConstraintSet& theta0,
                         const glm::MeanFunction& f, double delta,
                         const MtlOptions& opts = {});

/// Sequential-dependency prediction-error bound at layer j for a given
/// anchor choice j0 in [1, J+1] (J+1 = never transfer); n_0 is infinite.
double sequential_bound(const BoundInputs& b, double x_norm, int j, int j0);

struct ThresholdResult {
  int j0 = 0;
  bool preconditions_ok = true;
};

/// Smallest layer from which transferring beats the per-layer parametric
/// bound; J+1 when no layer qualifies. Flags violated preconditions
/// (n_{j+1} <= n_j/4, q non-increasing) without refusing to answer.
ThresholdResult threshold_j0(const BoundInputs& b);

/// Clustered-dependency prediction-error bound at layer j.
double clustered_bound(const BoundInputs& b, double x_norm, int j);

}  // namespace funnel::mtl
