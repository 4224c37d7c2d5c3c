#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "funnel/env.hpp"
#include "funnel/glm.hpp"
#include "funnel/mtl.hpp"
#include "funnel/rng.hpp"

namespace funnel::bandit {

enum class PolicyKind {
  Optimistic,
  PracticalSequential,
  PracticalClustered,
  Target,
  Mix,
  SequentialCurriculum,
  Random
};

std::string policy_name(PolicyKind k);
PolicyKind policy_from_name(const std::string& name);

struct PolicyConfig {
  PolicyKind kind = PolicyKind::Target;
  int arms = 0;
  int layers = 0;
  int dim = 0;
  int horizon = 0;  // T; the optimistic bonus schedule needs it up front
  double epsilon = 0.05;
  double lambda_pen = 0.005;        // practical L2-norm penalty weight
  double alpha = 0.2;               // curriculum fraction
  double delta = 0.05;              // optimistic confidence budget
  double c_delta_scale = 1.0;       // optimistic radius multiplier
  double d_x = 1.0;                 // context norm bound
  Vec q;                            // optimistic prior slack (sequential/clustered)
  double theta_norm_bound = 10.0;   // parameter scale for the mean function
  glm::OptimizerOpts fit;
  /// Refit the pulled arm every step up to this t, then every ceil(t/100).
  int refit_dense_until = 200;
  bool refit_every_step = false;
};

/// Per-layer optimistic bonuses and their funnel-product total.
struct BonusTerms {
  Vec per_layer;       // Delta mu_{a,j}
  double total = 0.0;  // Delta mu_a
};

/// One step of a run. Oracle fields are NaN when the environment has none.
struct StepRecord {
  int t = 0;
  Vec x;
  int action = 0;
  RewardVector rewards;
  double oracle_best = 0.0;
  double chosen_true = 0.0;
  double regret = 0.0;
  double cum_regret = 0.0;
  double prediction = 0.0;  // policy's final-layer estimate before updating
  std::vector<std::int64_t> counts_pulled;
};

struct RunRecord {
  std::string policy;
  std::uint64_t seed = 0;
  int T = 0;
  std::vector<StepRecord> steps;
};

/// A bandit strategy bound to one environment shape. Single-threaded
/// state machine: select, observe, update.
class Policy {
 public:
  virtual ~Policy() = default;
  virtual std::string name() const = 0;
  virtual int select(const Vec& x, RngStream& explore) = 0;
  virtual void update(int arm, const Vec& x, const RewardVector& r) = 0;
  /// Current estimate of the final-layer conversion for (x, arm).
  virtual double predict_final(const Vec& x, int arm) const = 0;
  /// n_{a,j}: labels accumulated per layer for arm a.
  virtual std::vector<std::int64_t> layer_counts(int arm) const = 0;
};

std::unique_ptr<Policy> make_policy(const PolicyConfig& cfg);

/// Optimistic funnel policy (UCB over the funnel product). Exposed as a
/// concrete class so the bonus pieces are individually testable.
class OptimisticPolicy final : public Policy {
 public:
  explicit OptimisticPolicy(const PolicyConfig& cfg);

  std::string name() const override { return policy_name(PolicyKind::Optimistic); }
  int select(const Vec& x, RngStream& explore) override;
  void update(int arm, const Vec& x, const RewardVector& r) override;
  double predict_final(const Vec& x, int arm) const override;
  std::vector<std::int64_t> layer_counts(int arm) const override;

  /// kappa ||x|| min{relaxed set diameter, parametric width}.
  double layer_bonus(int arm, int j, const Vec& x) const;
  /// Product expansion of the per-layer bonuses; total is clipped so the
  /// index P_J + total never exceeds 1.
  BonusTerms funnel_bonus(int arm, const Vec& x) const;
  /// Index value P_J + total after clipping (and its raw value).
  std::pair<double, double> index(int arm, const Vec& x) const;

  const glm::ThetaStack& estimate(int arm) const { return arms_[arm].theta; }
  const mtl::MtlEstimate* last_estimate(int arm) const {
    return arms_[arm].has_estimate ? &arms_[arm].est : nullptr;
  }

  /// Accumulated transfer-benefit diagnostic, one cell per (arm, layer):
  /// sum over pulls of P_j(x_t, theta_hat) * (parametric width - actual
  /// bonus), i.e. how much the refined-set diameter undercut the
  /// no-transfer width. Non-negative by construction.
  const Mat& transfer_benefit() const { return transfer_benefit_; }

 private:
  struct ArmState {
    std::vector<Vec> contexts;
    std::vector<RewardVector> rewards;
    std::vector<std::vector<int>> layer_rows;
    std::vector<std::int64_t> counts;
    glm::ThetaStack theta;
    mtl::MtlEstimate est;
    bool has_estimate = false;
    int last_refit_t = 0;
    int pulls = 0;
  };

  glm::LayeredDataset materialize(const ArmState& a) const;
  double parametric_width(const ArmState& a, int j) const;
  void refit(int arm);

  PolicyConfig cfg_;
  glm::MeanFunction mean_;
  mtl::ConstraintSet prior_;
  double kappa_ = 0.25;
  double c_mu_ = 0.25;
  double c_delta_bonus_ = 0.0;  // c_{delta/(3AJT)}, scaled
  std::vector<ArmState> arms_;
  Mat transfer_benefit_;
  int t_ = 0;
};

/// Uniform arm with probability epsilon, otherwise the greedy choice.
int epsilon_greedy(int greedy_arm, int arms, double epsilon, RngStream& rng);

/// Drive one policy against one environment for T steps. When
/// randomize_actions is set the policy only observes (select is bypassed
/// with a uniform draw from a dedicated stream), which is the
/// prediction-error protocol for replay experiments.
RunRecord run_policy(env::BanditEnv& e, Policy& p, int T, std::uint64_t seed,
                     bool randomize_actions = false);

/// Cumulative pseudo-regret curve; requires the environment oracle.
Vec cumulative_regret(const RunRecord& rec);

/// Per-layer reward-count lift of a run against a reference run.
Vec layer_lifts(const RunRecord& rec, const RunRecord& reference);

/// Cumulative squared error of the final-layer predictions against r_J.
Vec cumulative_sq_prediction_error(const RunRecord& rec);

/// Newline-delimited JSON, one object per step:
/// {"t":..,"action":..,"rewards":[..],"regret":..,"cum_regret":..}
std::string to_ndjson(const RunRecord& rec);

}  // namespace funnel::bandit
