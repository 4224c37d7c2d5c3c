#pragma once

#include <functional>
#include <stdexcept>
#include <vector>

#include "funnel/types.hpp"

namespace funnel::glm {

/// Logistic mean function with an explicit input domain |x·theta| <= domain_bound,
/// from which the curvature constants c_mu (derivative floor) and kappa
/// (derivative cap) are computed rather than assumed.
struct MeanFunction {
  enum class Kind { Logistic };

  Kind kind = Kind::Logistic;
  double domain_bound = 0.0;

  static MeanFunction logistic(double domain_bound);
  /// domain_bound = context_norm_bound * theta_norm_bound, the largest
  /// |x·theta| attainable over the hypothesis class.
  static MeanFunction logistic_for(double context_norm_bound,
                                   double theta_norm_bound);
};

double mu(const MeanFunction& f, double t);
double mu_prime(const MeanFunction& f, double t);

/// (c_mu, kappa): min and max of mu' over [-domain_bound, domain_bound].
/// Throws if domain_bound is not finite (c_mu would degenerate to 0).
std::pair<double, double> mu_bounds(const MeanFunction& f);

/// Per-layer parameter vectors, stored as columns of a d x J matrix.
class ThetaStack {
 public:
  ThetaStack() = default;
  ThetaStack(Eigen::Index dim, Eigen::Index layers) {
    m_ = Mat::Zero(dim, layers);
  }
  explicit ThetaStack(Mat m) : m_(std::move(m)) {}

  Eigen::Index dim() const { return m_.rows(); }
  Eigen::Index layers() const { return m_.cols(); }

  /// 1-based layer access, matching funnel layer numbering.
  Vec layer(int j) const { return m_.col(j - 1); }
  void set_layer(int j, const Vec& theta) { m_.col(j - 1) = theta; }

  const Mat& matrix() const { return m_; }
  Mat& matrix() { return m_; }

 private:
  Mat m_;
};

/// Training slice for one layer: row i of X is a context whose layer label
/// z(i) was revealed (its previous layer converted).
struct LayerData {
  Mat X;  // n_j x d
  Vec z;  // n_j, values in [0, 1]

  Eigen::Index count() const { return X.rows(); }
};

/// Observations split per layer under the funnel rule: layer j holds the
/// contexts with r_{j-1} = 1 and labels z_j = r_j.
struct LayeredDataset {
  std::vector<LayerData> layers;

  int J() const { return static_cast<int>(layers.size()); }
  const LayerData& layer(int j) const { return layers[j - 1]; }
  LayerData& layer(int j) { return layers[j - 1]; }

  /// Split raw (context, reward-chain) pairs into per-layer slices.
  /// rewards is n x J with entries in {0,1}, monotone per row.
  static LayeredDataset from_observations(const Mat& contexts,
                                          const Eigen::MatrixXi& rewards);
};

struct OptimizerOpts {
  double grad_tol = 1e-8;
  int max_iters = 5000;
  /// L2 cap on the iterate; guards against logistic divergence on
  /// separable data.
  double norm_cap = 1e3;
};

enum class FitStatus {
  Converged,        // projected-gradient residual below grad_tol
  IterCap,          // iteration cap hit; best iterate returned
  BoundaryCapped,   // converged onto the norm-cap sphere
  NonFiniteAborted  // loss turned non-finite; last finite iterate returned
};

struct FitResult {
  Vec theta;
  FitStatus status = FitStatus::Converged;
  double loss = 0.0;
  double grad_norm = 0.0;
  int iters = 0;
};

/// Squared loss sum_i (z_i - mu(x_i . theta))^2; 0 for an empty layer.
double layer_loss(const MeanFunction& f, const Vec& theta,
                  const LayerData& data);

/// Analytic gradient of layer_loss.
Vec layer_loss_gradient(const MeanFunction& f, const Vec& theta,
                        const LayerData& data);

/// Minimize the layer loss by projected gradient descent with backtracking
/// line search, constrained to the norm-cap ball. Deterministic given
/// (init, data, opts). An empty layer returns init unchanged.
FitResult fit_unconstrained(const MeanFunction& f, const LayerData& data,
                            const Vec& init, const OptimizerOpts& opts = {});

/// Minimize layer_loss(theta) + lambda_pen * ||theta - anchor||_2 (norm,
/// not squared) by proximal gradient descent with backtracking.
FitResult fit_penalized(const MeanFunction& f, const LayerData& data,
                        const Vec& anchor, double lambda_pen, const Vec& init,
                        const OptimizerOpts& opts = {});

/// Minimize the layer loss over an arbitrary closed convex set given by
/// its Euclidean projection map (projected gradient descent). An empty
/// layer returns project(init).
FitResult fit_constrained(const MeanFunction& f, const LayerData& data,
                          const Vec& init, const OptimizerOpts& opts,
                          const std::function<Vec(const Vec&)>& project);

/// Funnel value through layer j: prod_{i<=j} mu(x . theta_i).
double predict_funnel(const MeanFunction& f, const ThetaStack& stack,
                      const Vec& x, int j);

}  // namespace funnel::glm
