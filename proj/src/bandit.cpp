#include "funnel/bandit.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

namespace funnel::bandit {

namespace {

constexpr double kLambdaFloor = 1e-6;

bool due_for_refit(int t, int last_refit, const PolicyConfig& cfg) {
  if (cfg.refit_every_step) return true;
  if (t <= cfg.refit_dense_until) return true;
  const int gap = static_cast<int>(std::ceil(t / 100.0));
  return (t - last_refit) >= gap;
}

/// Raw per-arm observation store shared by the non-optimistic policies.
struct ArmObs {
  std::vector<Vec> contexts;
  std::vector<RewardVector> rewards;
  std::vector<std::vector<int>> layer_rows;
  std::vector<std::int64_t> counts;
  int last_refit_t = 0;

  void init(int J) {
    layer_rows.assign(J, {});
    counts.assign(J, 0);
  }

  void add(const Vec& x, const RewardVector& r) {
    const int idx = static_cast<int>(contexts.size());
    contexts.push_back(x);
    rewards.push_back(r);
    const int J = static_cast<int>(counts.size());
    for (int j = 1; j <= J; ++j) {
      const int prev = (j == 1) ? 1 : r(j - 2);
      if (prev == 1) {
        layer_rows[j - 1].push_back(idx);
        ++counts[j - 1];
      }
    }
  }

  glm::LayerData layer_data(int j, int d) const {
    const auto& rows = layer_rows[j - 1];
    glm::LayerData ld;
    ld.X.resize(static_cast<Eigen::Index>(rows.size()), d);
    ld.z.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      ld.X.row(static_cast<Eigen::Index>(k)) = contexts[rows[k]].transpose();
      ld.z(static_cast<Eigen::Index>(k)) = rewards[rows[k]](j - 1);
    }
    return ld;
  }
};

}  // namespace

std::string policy_name(PolicyKind k) {
  switch (k) {
    case PolicyKind::Optimistic: return "optimistic";
    case PolicyKind::PracticalSequential: return "multilayer_sequential";
    case PolicyKind::PracticalClustered: return "multilayer_clustered";
    case PolicyKind::Target: return "target";
    case PolicyKind::Mix: return "mix";
    case PolicyKind::SequentialCurriculum: return "sequential";
    case PolicyKind::Random: return "random";
  }
  throw std::logic_error("policy_name: unhandled kind");
}

PolicyKind policy_from_name(const std::string& name) {
  for (PolicyKind k :
       {PolicyKind::Optimistic, PolicyKind::PracticalSequential,
        PolicyKind::PracticalClustered, PolicyKind::Target, PolicyKind::Mix,
        PolicyKind::SequentialCurriculum, PolicyKind::Random}) {
    if (policy_name(k) == name) return k;
  }
  throw std::invalid_argument("unknown policy: " + name);
}

int epsilon_greedy(int greedy_arm, int arms, double epsilon, RngStream& rng) {
  if (epsilon < 0.0 || epsilon > 1.0) {
    throw std::invalid_argument("epsilon_greedy: epsilon outside [0,1]");
  }
  if (epsilon > 0.0 && rng.uniform() < epsilon) {
    return static_cast<int>(rng.uniform_int(static_cast<std::uint32_t>(arms)));
  }
  return greedy_arm;
}

// ---------------------------------------------------------------------------
// Optimistic policy (funnel UCB)

OptimisticPolicy::OptimisticPolicy(const PolicyConfig& cfg)
    : cfg_(cfg),
      mean_(glm::MeanFunction::logistic_for(cfg.d_x, cfg.theta_norm_bound)),
      prior_(mtl::ConstraintSet::sequential(cfg.q)) {
  if (cfg_.horizon <= 0) {
    throw std::invalid_argument(
        "OptimisticPolicy: the bonus schedule needs the horizon T up front");
  }
  if (cfg_.q.size() != cfg_.layers) {
    throw std::invalid_argument("OptimisticPolicy: q must have J entries");
  }
  std::tie(c_mu_, kappa_) = glm::mu_bounds(mean_);
  const double n_cells = 3.0 * cfg_.arms * cfg_.layers * cfg_.horizon;
  c_delta_bonus_ =
      mtl::c_delta(cfg_.delta / n_cells, cfg_.d_x, cfg_.c_delta_scale);

  arms_.resize(cfg_.arms);
  for (auto& a : arms_) {
    a.layer_rows.assign(cfg_.layers, {});
    a.counts.assign(cfg_.layers, 0);
    a.theta = glm::ThetaStack(cfg_.dim, cfg_.layers);
  }
  transfer_benefit_ = Mat::Zero(cfg_.arms, cfg_.layers);
}

glm::LayeredDataset OptimisticPolicy::materialize(const ArmState& a) const {
  glm::LayeredDataset ds;
  ds.layers.resize(cfg_.layers);
  for (int j = 1; j <= cfg_.layers; ++j) {
    const auto& rows = a.layer_rows[j - 1];
    glm::LayerData& ld = ds.layers[j - 1];
    ld.X.resize(static_cast<Eigen::Index>(rows.size()), cfg_.dim);
    ld.z.resize(static_cast<Eigen::Index>(rows.size()));
    for (std::size_t k = 0; k < rows.size(); ++k) {
      ld.X.row(static_cast<Eigen::Index>(k)) = a.contexts[rows[k]].transpose();
      ld.z(static_cast<Eigen::Index>(k)) = a.rewards[rows[k]](j - 1);
    }
  }
  return ds;
}

double OptimisticPolicy::parametric_width(const ArmState& a, int j) const {
  double lam = kLambdaFloor;
  if (a.has_estimate) {
    lam = std::max(a.est.diag[j - 1].lambda_min, kLambdaFloor);
  }
  const double n =
      static_cast<double>(std::max<std::int64_t>(a.counts[j - 1], 1));
  return c_delta_bonus_ / (c_mu_ * lam) * std::sqrt(cfg_.dim / n);
}

double OptimisticPolicy::layer_bonus(int arm, int j, const Vec& x) const {
  const ArmState& a = arms_[arm];
  double diam;
  if (a.has_estimate) {
    diam = 2.0 * a.est.diag[j - 1].set_radius;
  } else {
    diam = 2.0 * mtl::marginal_set(prior_, j).ball.radius;
  }
  return kappa_ * x.norm() * std::min(diam, parametric_width(a, j));
}

BonusTerms OptimisticPolicy::funnel_bonus(int arm, const Vec& x) const {
  const ArmState& a = arms_[arm];
  const int J = cfg_.layers;
  BonusTerms b;
  b.per_layer.resize(J);
  Vec mu_j(J);
  double p = 1.0;
  for (int j = 1; j <= J; ++j) {
    mu_j(j - 1) = glm::mu(mean_, x.dot(a.theta.layer(j)));
    if (!std::isfinite(mu_j(j - 1))) {
      throw std::runtime_error("funnel_bonus: non-finite estimate");
    }
    p *= mu_j(j - 1);
    b.per_layer(j - 1) = layer_bonus(arm, j, x);
  }
  double first_order = 0.0;
  for (int j = 0; j < J; ++j) {
    first_order += p / mu_j(j) * b.per_layer(j);
  }
  const double s = b.per_layer.sum();
  const double cross = s * s - b.per_layer.squaredNorm();  // ordered pairs i != j
  b.total = first_order + cross;
  return b;
}

std::pair<double, double> OptimisticPolicy::index(int arm, const Vec& x) const {
  const ArmState& a = arms_[arm];
  const double p =
      glm::predict_funnel(mean_, a.theta, x, cfg_.layers);
  const double raw = p + funnel_bonus(arm, x).total;
  return {std::min(raw, 1.0), raw};
}

int OptimisticPolicy::select(const Vec& x, RngStream&) {
  int best = 0;
  auto [best_clip, best_raw] = index(0, x);
  for (int a = 1; a < cfg_.arms; ++a) {
    auto [clip, raw] = index(a, x);
    // Clipped values decide; raw value breaks ties among capped indices so
    // the argmax matches the un-clipped ranking; remaining ties keep the
    // lowest arm.
    if (clip > best_clip || (clip == best_clip && raw > best_raw)) {
      best = a;
      best_clip = clip;
      best_raw = raw;
    }
  }
  return best;
}

void OptimisticPolicy::refit(int arm) {
  ArmState& a = arms_[arm];
  mtl::MtlOptions o;
  o.c_delta_scale = cfg_.c_delta_scale;
  o.d_x = cfg_.d_x;
  o.norm_cap = prior_.norm_cap;
  o.fit = cfg_.fit;
  // Per-layer radii inside use delta_eff / J, so passing delta/(3AT) yields
  // the c_{delta/(3AJT)} schedule.
  const double delta_eff = cfg_.delta / (3.0 * cfg_.arms * cfg_.horizon);
  try {
    a.est = mtl::mtl_estimate(materialize(a), prior_, mean_, delta_eff, o);
    a.theta = a.est.theta_hat;
    a.has_estimate = true;
  } catch (const std::exception&) {
    // Keep the previous estimate; the bandit run must not die on a refit.
  }
  a.last_refit_t = t_;
}

void OptimisticPolicy::update(int arm, const Vec& x, const RewardVector& r) {
  ++t_;
  ArmState& a = arms_[arm];

  // Transfer-benefit diagnostic at the selection-time state.
  const double xn = x.norm();
  for (int j = 1; j <= cfg_.layers; ++j) {
    const double param = kappa_ * xn * parametric_width(a, j);
    const double bonus = layer_bonus(arm, j, x);
    transfer_benefit_(arm, j - 1) +=
        glm::predict_funnel(mean_, a.theta, x, j) * (param - bonus);
  }

  const int idx = static_cast<int>(a.contexts.size());
  a.contexts.push_back(x);
  a.rewards.push_back(r);
  ++a.pulls;
  for (int j = 1; j <= cfg_.layers; ++j) {
    const int prev = (j == 1) ? 1 : r(j - 2);
    if (prev == 1) {
      a.layer_rows[j - 1].push_back(idx);
      ++a.counts[j - 1];
    }
  }
  if (due_for_refit(t_, a.last_refit_t, cfg_)) refit(arm);
}

double OptimisticPolicy::predict_final(const Vec& x, int arm) const {
  return glm::predict_funnel(mean_, arms_[arm].theta, x, cfg_.layers);
}

std::vector<std::int64_t> OptimisticPolicy::layer_counts(int arm) const {
  return arms_[arm].counts;
}

// ---------------------------------------------------------------------------
// Practical penalized policies and the single-model baselines

namespace {

class PracticalPolicy final : public Policy {
 public:
  PracticalPolicy(const PolicyConfig& cfg, bool clustered)
      : cfg_(cfg),
        clustered_(clustered),
        mean_(glm::MeanFunction::logistic_for(cfg.d_x, cfg.theta_norm_bound)) {
    arms_.resize(cfg_.arms);
    thetas_.assign(cfg_.arms, glm::ThetaStack(cfg_.dim, cfg_.layers));
    for (auto& a : arms_) a.init(cfg_.layers);
  }

  std::string name() const override {
    return policy_name(clustered_ ? PolicyKind::PracticalClustered
                                  : PolicyKind::PracticalSequential);
  }

  int select(const Vec& x, RngStream& explore) override {
    int greedy = 0;
    double best = -1.0;
    for (int a = 0; a < cfg_.arms; ++a) {
      const double v = glm::predict_funnel(mean_, thetas_[a], x, cfg_.layers);
      if (v > best) {
        best = v;
        greedy = a;
      }
    }
    return epsilon_greedy(greedy, cfg_.arms, cfg_.epsilon, explore);
  }

  void update(int arm, const Vec& x, const RewardVector& r) override {
    ++t_;
    arms_[arm].add(x, r);
    if (due_for_refit(t_, arms_[arm].last_refit_t, cfg_)) refit(arm);
  }

  double predict_final(const Vec& x, int arm) const override {
    return glm::predict_funnel(mean_, thetas_[arm], x, cfg_.layers);
  }

  std::vector<std::int64_t> layer_counts(int arm) const override {
    return arms_[arm].counts;
  }

 private:
  void refit(int arm) {
    ArmObs& obs = arms_[arm];
    glm::ThetaStack& th = thetas_[arm];
    for (int j = 1; j <= cfg_.layers; ++j) {
      Vec anchor;
      if (clustered_) {
        anchor = th.matrix().rowwise().mean();
      } else {
        anchor = (j == 1) ? Vec(Vec::Zero(cfg_.dim)) : Vec(th.layer(j - 1));
      }
      const glm::LayerData ld = obs.layer_data(j, cfg_.dim);
      if (ld.count() == 0) {
        if (cfg_.lambda_pen > 0.0) th.set_layer(j, anchor);
        continue;
      }
      const auto fit = glm::fit_penalized(mean_, ld, anchor, cfg_.lambda_pen,
                                          th.layer(j), cfg_.fit);
      if (fit.status == glm::FitStatus::NonFiniteAborted) {
        ++fit_warnings_;  // keep the previous estimate
        continue;
      }
      th.set_layer(j, fit.theta);
    }
    obs.last_refit_t = t_;
  }

  PolicyConfig cfg_;
  bool clustered_;
  glm::MeanFunction mean_;
  std::vector<ArmObs> arms_;
  std::vector<glm::ThetaStack> thetas_;
  int t_ = 0;
  std::int64_t fit_warnings_ = 0;
};

class BaselinePolicy final : public Policy {
 public:
  BaselinePolicy(const PolicyConfig& cfg, PolicyKind kind)
      : cfg_(cfg),
        kind_(kind),
        mean_(glm::MeanFunction::logistic_for(cfg.d_x, cfg.theta_norm_bound)) {
    if (kind_ == PolicyKind::SequentialCurriculum &&
        (cfg_.alpha < 0.0 || cfg_.alpha > 1.0)) {
      throw std::invalid_argument("SequentialCurriculum: alpha outside [0,1]");
    }
    if (kind_ == PolicyKind::SequentialCurriculum && cfg_.horizon <= 0) {
      throw std::invalid_argument("SequentialCurriculum: horizon required");
    }
    arms_.resize(cfg_.arms);
    thetas_.assign(cfg_.arms, Vec::Zero(cfg_.dim));
    fit_phase_.assign(cfg_.arms, 0);
    for (auto& a : arms_) a.init(cfg_.layers);
  }

  std::string name() const override { return policy_name(kind_); }

  int select(const Vec& x, RngStream& explore) override {
    int greedy = 0;
    double best = -1.0;
    for (int a = 0; a < cfg_.arms; ++a) {
      const double v = glm::mu(mean_, x.dot(thetas_[a]));
      if (v > best) {
        best = v;
        greedy = a;
      }
    }
    return epsilon_greedy(greedy, cfg_.arms, cfg_.epsilon, explore);
  }

  void update(int arm, const Vec& x, const RewardVector& r) override {
    ++t_;
    arms_[arm].add(x, r);
    const int ph = phase();
    if (due_for_refit(t_, arms_[arm].last_refit_t, cfg_) ||
        ph != fit_phase_[arm]) {
      refit(arm, ph);
    }
  }

  double predict_final(const Vec& x, int arm) const override {
    return glm::mu(mean_, x.dot(thetas_[arm]));
  }

  std::vector<std::int64_t> layer_counts(int arm) const override {
    return arms_[arm].counts;
  }

  /// Training layer at step t: sweeps 1..J-1 over the first alpha*T steps,
  /// then settles on the final layer.
  int phase() const {
    if (kind_ != PolicyKind::SequentialCurriculum) return cfg_.layers;
    const double aT = cfg_.alpha * cfg_.horizon;
    if (cfg_.layers <= 1 || t_ > aT || aT <= 0.0) return cfg_.layers;
    const int p = static_cast<int>(std::ceil((cfg_.layers - 1) * t_ / aT));
    return std::clamp(p, 1, cfg_.layers - 1);
  }

  double label(const RewardVector& r, int ph) const {
    switch (kind_) {
      case PolicyKind::Target: return r(cfg_.layers - 1);
      case PolicyKind::Mix: return r.cast<double>().mean();
      case PolicyKind::SequentialCurriculum: return r(ph - 1);
      default: throw std::logic_error("label: bad kind");
    }
  }

 private:
  void refit(int arm, int ph) {
    ArmObs& obs = arms_[arm];
    const auto n = static_cast<Eigen::Index>(obs.contexts.size());
    glm::LayerData ld;
    ld.X.resize(n, cfg_.dim);
    ld.z.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      ld.X.row(i) = obs.contexts[i].transpose();
      ld.z(i) = label(obs.rewards[i], ph);
    }
    thetas_[arm] = glm::fit_unconstrained(mean_, ld, thetas_[arm], cfg_.fit).theta;
    obs.last_refit_t = t_;
    fit_phase_[arm] = ph;
  }

  PolicyConfig cfg_;
  PolicyKind kind_;
  glm::MeanFunction mean_;
  std::vector<ArmObs> arms_;
  std::vector<Vec> thetas_;
  std::vector<int> fit_phase_;
  int t_ = 0;
};

class RandomPolicy final : public Policy {
 public:
  explicit RandomPolicy(const PolicyConfig& cfg) : cfg_(cfg) {
    arms_.resize(cfg_.arms);
    for (auto& a : arms_) a.init(cfg_.layers);
  }

  std::string name() const override { return policy_name(PolicyKind::Random); }

  int select(const Vec&, RngStream& explore) override {
    return static_cast<int>(
        explore.uniform_int(static_cast<std::uint32_t>(cfg_.arms)));
  }

  void update(int arm, const Vec& x, const RewardVector& r) override {
    arms_[arm].add(x, r);
  }

  double predict_final(const Vec&, int) const override { return 0.5; }

  std::vector<std::int64_t> layer_counts(int arm) const override {
    return arms_[arm].counts;
  }

 private:
  PolicyConfig cfg_;
  std::vector<ArmObs> arms_;
};

}  // namespace

std::unique_ptr<Policy> make_policy(const PolicyConfig& cfg) {
  switch (cfg.kind) {
    case PolicyKind::Optimistic:
      return std::make_unique<OptimisticPolicy>(cfg);
    case PolicyKind::PracticalSequential:
      return std::make_unique<PracticalPolicy>(cfg, false);
    case PolicyKind::PracticalClustered:
      return std::make_unique<PracticalPolicy>(cfg, true);
    case PolicyKind::Target:
    case PolicyKind::Mix:
    case PolicyKind::SequentialCurriculum:
      return std::make_unique<BaselinePolicy>(cfg, cfg.kind);
    case PolicyKind::Random:
      return std::make_unique<RandomPolicy>(cfg);
  }
  throw std::logic_error("make_policy: unhandled kind");
}

// ---------------------------------------------------------------------------
// Run loop and trackers

RunRecord run_policy(env::BanditEnv& e, Policy& p, int T, std::uint64_t seed,
                     bool randomize_actions) {
  RngStream explore = make_stream(seed, stream::kExplore);
  RngStream actions = make_stream(seed, stream::kActions);
  const double nan = std::numeric_limits<double>::quiet_NaN();

  RunRecord rec;
  rec.policy = p.name();
  rec.seed = seed;
  rec.T = T;
  rec.steps.reserve(T);

  double cum = 0.0;
  for (int t = 1; t <= T; ++t) {
    const auto& s = e.step();
    const int a =
        randomize_actions
            ? static_cast<int>(
                  actions.uniform_int(static_cast<std::uint32_t>(e.arms())))
            : p.select(s.x, explore);
    StepRecord sr;
    sr.t = t;
    sr.x = s.x;
    sr.action = a;
    sr.prediction = p.predict_final(s.x, a);
    sr.rewards = e.act(a);
    p.update(a, s.x, sr.rewards);
    if (e.has_oracle()) {
      sr.oracle_best = s.oracle.maxCoeff();
      sr.chosen_true = s.oracle(a);
      sr.regret = sr.oracle_best - sr.chosen_true;
      cum += sr.regret;
      sr.cum_regret = cum;
    } else {
      sr.oracle_best = sr.chosen_true = sr.regret = sr.cum_regret = nan;
    }
    sr.counts_pulled = p.layer_counts(a);
    rec.steps.push_back(std::move(sr));
  }
  return rec;
}

Vec cumulative_regret(const RunRecord& rec) {
  Vec out(static_cast<Eigen::Index>(rec.steps.size()));
  for (std::size_t i = 0; i < rec.steps.size(); ++i) {
    if (std::isnan(rec.steps[i].regret)) {
      throw std::runtime_error(
          "cumulative_regret: run has no oracle values (replay environment); "
          "use lifts against a random reference instead");
    }
    out(static_cast<Eigen::Index>(i)) = rec.steps[i].cum_regret;
  }
  return out;
}

Vec layer_lifts(const RunRecord& rec, const RunRecord& reference) {
  if (rec.steps.empty() || reference.steps.empty()) {
    throw std::invalid_argument("layer_lifts: empty run");
  }
  const int J = static_cast<int>(rec.steps.front().rewards.size());
  Vec lift = Vec::Zero(J);
  for (const auto& s : rec.steps) lift += s.rewards.cast<double>();
  for (const auto& s : reference.steps) lift -= s.rewards.cast<double>();
  return lift;
}

Vec cumulative_sq_prediction_error(const RunRecord& rec) {
  Vec out(static_cast<Eigen::Index>(rec.steps.size()));
  double cum = 0.0;
  for (std::size_t i = 0; i < rec.steps.size(); ++i) {
    const auto& s = rec.steps[i];
    const double rj = s.rewards(s.rewards.size() - 1);
    const double e = rj - s.prediction;
    cum += e * e;
    out(static_cast<Eigen::Index>(i)) = cum;
  }
  return out;
}

std::string to_ndjson(const RunRecord& rec) {
  std::ostringstream out;
  for (const auto& s : rec.steps) {
    nlohmann::json j;
    j["t"] = s.t;
    j["action"] = s.action;
    std::vector<int> r(s.rewards.data(), s.rewards.data() + s.rewards.size());
    j["rewards"] = r;
    if (std::isnan(s.regret)) {
      j["regret"] = nullptr;
      j["cum_regret"] = nullptr;
    } else {
      j["regret"] = s.regret;
      j["cum_regret"] = s.cum_regret;
    }
    out << j.dump() << "\n";
  }
  return out.str();
}

}  // namespace funnel::bandit
